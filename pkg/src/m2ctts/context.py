"""Dialogue-context modules: coarse and fine, text and acoustic.

Coarse modules summarize up to ``c`` history utterance embeddings into a
single context vector per window (one instance for text, one for
acoustic). Fine modules aggregate per-token or per-frame history feature
rows into one long memory sequence and let the phoneme encoder output
attend into it, adding the result back as a residual. A style assembler
turns the coarse vectors into the conditioning input of the decoder's
style-adaptive normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn

from .fusion import (
    AdditiveAttentionPool,
    Conv1dContextualizer,
    GRULayer,
    MultiHeadAttention,
    sinusoidal_positions,
)

SPEAKER_INDEX = {"A": 0, "B": 1}


@dataclass
class ContextFeatures:
    """Precomputed per-window feature tensors the context modules consume.

    Fields are None when the corresponding module is disabled, so a
    disabled module's inputs can never influence the forward pass.
    """

    history_mask: Optional[torch.Tensor]  # [B, c] bool, true at real turns
    hist_text: Optional[torch.Tensor]  # [B, c, D_u_text]
    hist_acoustic: Optional[torch.Tensor]  # [B, c, D_u_acoustic]
    cur_text: Optional[torch.Tensor]  # [B, D_u_text]
    mem_text: Optional[torch.Tensor]  # [B, R, D_f_text]
    mem_text_mask: Optional[torch.Tensor]  # [B, R] bool
    mem_text_pos: Optional[torch.Tensor]  # [B, R] long, window offset
    mem_text_speaker: Optional[torch.Tensor]  # [B, R] long, 0=A 1=B
    mem_acoustic: Optional[torch.Tensor]  # [B, R', D_f_acoustic]
    mem_acoustic_mask: Optional[torch.Tensor]  # [B, R'] bool
    mem_acoustic_pos: Optional[torch.Tensor]  # [B, R'] long
    mem_acoustic_speaker: Optional[torch.Tensor]  # [B, R'] long
    prosody_target: Optional[torch.Tensor]  # [B, D_u_acoustic]


def _stack_history(windows, provider, modality: str, c: int, dtype):
    """History utterance embeddings, oldest first, zero-padded to c."""
    dim = provider.dims.for_kind(f"{modality}-utterance")
    B = len(windows)
    out = np.zeros((B, c, dim), dtype=np.float32)
    for b, w in enumerate(windows):
        for i, turn in enumerate(w.history):
            out[b, i] = provider.utterance(turn, modality)
    return torch.from_numpy(out).to(dtype)


def _stack_memory(windows, provider, modality: str, dtype):
    """Concatenated per-row history features plus row metadata."""
    dim = provider.dims.for_kind(f"{modality}-sequence")
    per_window = []
    for w in windows:
        rows = []
        pos = []
        spk = []
        for offset, turn in enumerate(w.history):
            seq = provider.sequence(turn, modality)
            rows.append(seq)
            pos.extend([offset] * seq.shape[0])
            spk.extend([SPEAKER_INDEX[turn.speaker]] * seq.shape[0])
        per_window.append((rows, pos, spk))
    B = len(windows)
    R = max((sum(r.shape[0] for r in rows) for rows, _, _ in per_window), default=0)
    mem = np.zeros((B, R, dim), dtype=np.float32)
    mask = np.zeros((B, R), dtype=bool)
    pos_idx = np.zeros((B, R), dtype=np.int64)
    spk_idx = np.zeros((B, R), dtype=np.int64)
    for b, (rows, pos, spk) in enumerate(per_window):
        if not rows:
            continue
        cat = np.concatenate(rows, axis=0)
        n = cat.shape[0]
        mem[b, :n] = cat
        mask[b, :n] = True
        pos_idx[b, :n] = pos
        spk_idx[b, :n] = spk
    return (
        torch.from_numpy(mem).to(dtype),
        torch.from_numpy(mask),
        torch.from_numpy(pos_idx),
        torch.from_numpy(spk_idx),
    )


def build_context_features(
    windows,
    provider,
    *,
    need_tum: bool,
    need_wum: bool,
    need_tpm: bool,
    need_wpm: bool,
    need_prosody_target: bool,
    dtype=torch.float32,
) -> ContextFeatures:
    """Gather extractor outputs for a batch of windows.

    Only the tensors required by the enabled modules are built; the rest
    stay None.
    """
    windows = list(windows)
    if not windows:
        raise ValueError("no windows given")
    c = windows[0].c
    need_coarse = need_tum or need_wum
    history_mask = None
    if need_coarse:
        lengths = torch.tensor([len(w.history) for w in windows], dtype=torch.long)
        history_mask = torch.arange(c)[None, :] < lengths[:, None]  # [B, c]
    cur_text = None
    if need_coarse:
        cur = np.stack(
            [provider.utterance(w.current, "text") for w in windows]
        ).astype(np.float32)
        cur_text = torch.from_numpy(cur).to(dtype)
    hist_text = (
        _stack_history(windows, provider, "text", c, dtype) if need_tum else None
    )
    hist_acoustic = (
        _stack_history(windows, provider, "acoustic", c, dtype) if need_wum else None
    )
    mem_text = mem_text_mask = mem_text_pos = mem_text_speaker = None
    if need_tpm:
        mem_text, mem_text_mask, mem_text_pos, mem_text_speaker = _stack_memory(
            windows, provider, "text", dtype
        )
    mem_ac = mem_ac_mask = mem_ac_pos = mem_ac_speaker = None
    if need_wpm:
        mem_ac, mem_ac_mask, mem_ac_pos, mem_ac_speaker = _stack_memory(
            windows, provider, "acoustic", dtype
        )
    prosody_target = None
    if need_prosody_target:
        tgt = np.stack(
            [provider.utterance(w.current, "acoustic") for w in windows]
        ).astype(np.float32)
        prosody_target = torch.from_numpy(tgt).to(dtype)
    return ContextFeatures(
        history_mask=history_mask,
        hist_text=hist_text,
        hist_acoustic=hist_acoustic,
        cur_text=cur_text,
        mem_text=mem_text,
        mem_text_mask=mem_text_mask,
        mem_text_pos=mem_text_pos,
        mem_text_speaker=mem_text_speaker,
        mem_acoustic=mem_ac,
        mem_acoustic_mask=mem_ac_mask,
        mem_acoustic_pos=mem_ac_pos,
        mem_acoustic_speaker=mem_ac_speaker,
        prosody_target=prosody_target,
    )


class UtteranceContextEncoder(nn.Module):
    """Coarse context: GRU over history embeddings, attention-pooled.

    History and current embeddings are projected to the model width; a
    GRU runs over the projected history from a learned initial state;
    the final state is concatenated with the projected current embedding
    and mapped to the pooling query; additive attention pools the
    per-step GRU states. With no history, pooling sees the learned
    initial state alone.
    """

    def __init__(self, history_dim: int, current_dim: int, d_model: int):
        super().__init__()
        self.hist_proj = nn.Linear(history_dim, d_model)
        self.query_proj = nn.Linear(current_dim, d_model)
        self.gru = GRULayer(d_model, d_model)
        self.h0 = nn.Parameter(torch.zeros(d_model))
        self.combine = nn.Linear(2 * d_model, d_model)
        self.pool = AdditiveAttentionPool(d_model, d_model, d_model)

    def forward(self, history, history_mask, current):
        """history: [B, c, D_h]; history_mask: [B, c] bool; current: [B, D_c].

        Returns (context [B, d], pool weights [B, 1 + c]); weight column
        0 belongs to the initial state and is nonzero only for windows
        with empty history.
        """
        B = history.shape[0]
        init = self.h0.to(history.dtype).expand(B, -1)
        proj = self.hist_proj(history) * history_mask[:, :, None].to(history.dtype)
        final, states = self.gru(proj, init, mask=history_mask)
        query = self.combine(
            torch.cat([final, self.query_proj(current)], dim=-1)
        )
        keys = torch.cat([init[:, None, :], states], dim=1)  # [B, 1 + c, d]
        empty = ~history_mask.any(dim=1, keepdim=True)  # [B, 1]
        key_mask = torch.cat([empty, history_mask], dim=1)
        pooled, weights = self.pool(query, keys, key_mask)
        return pooled, weights


class FineGrainedContextEncoder(nn.Module):
    """Fine context: cross-attention from encoder output into history rows.

    History feature rows receive a speaker embedding (optional) and a
    sinusoidal window-position code in feature space, are projected to
    the model width, contextualized by a 1D convolution, and attended to
    with the encoder output as query. The caller adds the returned delta
    to the encoder output as a residual.
    """

    def __init__(
        self,
        feature_dim: int,
        d_model: int,
        heads: int,
        kernel: int,
        max_positions: int,
        add_speaker: bool = True,
    ):
        super().__init__()
        if feature_dim % 2 != 0:
            raise ValueError("feature_dim must be even for sinusoidal positions")
        self.add_speaker = add_speaker
        self.speaker_emb = nn.Embedding(2, feature_dim)
        table = sinusoidal_positions(max(max_positions, 1), feature_dim)
        self.register_buffer("position_table", table)
        self.input_proj = nn.Linear(feature_dim, d_model)
        self.conv = Conv1dContextualizer(d_model, kernel)
        self.attn = MultiHeadAttention(d_model, heads)

    def forward(self, encoder_out, mem, mem_mask, mem_pos, mem_speaker):
        """encoder_out: [B, N, d]; mem: [B, R, D_f]; masks/indices [B, R].

        Returns (delta [B, N, d], weights [B, heads, N, R]) or
        (None, None) when every window's memory is empty. Windows with
        empty memory inside a mixed batch get an exactly-zero delta.
        """
        if mem is None or mem.shape[1] == 0 or not bool(mem_mask.any()):
            return None, None
        rows = mem
        if self.add_speaker:
            rows = rows + self.speaker_emb(mem_speaker).to(rows.dtype)
        rows = rows + self.position_table.to(rows.dtype)[mem_pos]
        rows = rows * mem_mask[:, :, None].to(rows.dtype)
        proj = self.input_proj(rows)
        ctx = self.conv(proj, mem_mask)
        empty = ~mem_mask.any(dim=1)  # [B]
        if bool(empty.any()):
            # Give empty windows one dummy valid key (their rows are all
            # zero) so the batched softmax is defined, then zero their
            # deltas afterwards.
            safe_mask = mem_mask.clone()
            safe_mask[empty, 0] = True
        else:
            safe_mask = mem_mask
        delta, weights = self.attn(encoder_out, ctx, ctx, mask=safe_mask)
        if bool(empty.any()):
            keep = ~empty
            delta = delta * keep[:, None, None].to(delta.dtype)
            weights = weights * keep[:, None, None, None].to(weights.dtype)
        return delta, weights


class StyleAssembler(nn.Module):
    """Combine coarse context vectors into the decoder's style vector.

    A disabled side is replaced by a learned null vector, so the style
    is well defined for every ablation; with both sides disabled it is
    one constant learned style.
    """

    def __init__(self, d_model: int, style_dim: int):
        super().__init__()
        self.null_text = nn.Parameter(torch.zeros(d_model))
        self.null_acoustic = nn.Parameter(torch.zeros(d_model))
        self.proj = nn.Linear(2 * d_model, style_dim)

    def substitute(self, h_text, h_acoustic, batch_size: int, dtype):
        """Concatenated [B, 2d] context with nulls filling disabled sides."""
        if h_text is None:
            h_text = self.null_text.to(dtype).expand(batch_size, -1)
        if h_acoustic is None:
            h_acoustic = self.null_acoustic.to(dtype).expand(batch_size, -1)
        return torch.cat([h_text, h_acoustic], dim=-1)

    def forward(self, h_text, h_acoustic, batch_size: int, dtype):
        """Returns (style [B, style_dim], combined [B, 2d])."""
        combined = self.substitute(h_text, h_acoustic, batch_size, dtype)
        return self.proj(combined), combined
