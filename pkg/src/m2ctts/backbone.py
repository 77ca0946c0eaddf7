"""Acoustic model backbone: encoder, variance adaptor, mel decoder.

Feed-forward transformer blocks (self-attention plus a two-layer conv
feed-forward) make up both the phoneme encoder and the mel decoder. The
decoder's normalizations are style-adaptive so one style vector
conditions every frame. The variance adaptor predicts log-duration,
pitch, and energy per phoneme, embeds quantized pitch/energy, and
repeats phoneme rows per duration to reach frame rate. Durations,
pitch, and energy are teacher-forced from the manifest during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .corpus import N_MEL_CHANNELS, CorpusStats
from .fusion import MultiHeadAttention, StyleAdaptiveLayerNorm, sinusoidal_positions

_RANGE_EPS = 1e-8


def _mask_rows(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Zero rows of [B, N, d] where mask [B, N] is false."""
    return x * mask[:, :, None].to(x.dtype)


class ConvFeedForward(nn.Module):
    """Two 1D convolutions with ReLU between, same-length padding."""

    def __init__(self, dim: int, hidden: int, kernels: tuple[int, int]):
        super().__init__()
        k1, k2 = kernels
        if k1 % 2 == 0 or k2 % 2 == 0:
            raise ValueError(f"feed-forward kernels must be odd, got {kernels}")
        self.conv1 = nn.Conv1d(dim, hidden, k1, padding=k1 // 2)
        self.conv2 = nn.Conv1d(hidden, dim, k2, padding=k2 // 2)

    def forward(self, x):  # [B, N, d] -> [B, N, d]
        y = self.conv1(x.transpose(1, 2))
        y = torch.relu(y)
        y = self.conv2(y)
        return y.transpose(1, 2)


class FeedForwardTransformerBlock(nn.Module):
    """Self-attention + conv feed-forward, residuals, post-norm.

    ``norm`` selects plain layer normalization or the style-adaptive
    variant; the style-adaptive form needs a style vector per forward.
    Masked rows are re-zeroed after each sublayer so padding never
    carries values.
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        ffn_hidden: int,
        kernels: tuple[int, int],
        norm: str = "layer",
        style_dim: Optional[int] = None,
    ):
        super().__init__()
        if norm not in ("layer", "style"):
            raise ValueError(f"unknown norm kind: {norm!r}")
        if norm == "style" and style_dim is None:
            raise ValueError("style norm requires style_dim")
        self.norm_kind = norm
        self.attn = MultiHeadAttention(dim, heads)
        self.ffn = ConvFeedForward(dim, ffn_hidden, kernels)
        if norm == "layer":
            self.norm1 = nn.LayerNorm(dim)
            self.norm2 = nn.LayerNorm(dim)
        else:
            self.norm1 = StyleAdaptiveLayerNorm(dim, style_dim)
            self.norm2 = StyleAdaptiveLayerNorm(dim, style_dim)

    def _norm(self, which, x, style):
        if self.norm_kind == "layer":
            return which(x)
        return which(x, style)

    def forward(self, x, mask, style=None):
        """x: [B, N, d]; mask: [B, N] bool; style: [B, style_dim] or None."""
        if self.norm_kind == "style" and style is None:
            raise ValueError("style-normalized block called without a style")
        attn_out, _ = self.attn(x, x, x, mask=mask)
        x = self._norm(self.norm1, x + attn_out, style)
        x = _mask_rows(x, mask)
        x = self._norm(self.norm2, x + self.ffn(x), style)
        return _mask_rows(x, mask)


class PhonemeEncoder(nn.Module):
    """Embeds phoneme ids, adds positions, runs transformer blocks."""

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        heads: int,
        n_blocks: int,
        ffn_hidden: int,
        kernels: tuple[int, int],
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.emb = nn.Embedding(vocab_size, dim)
        self.blocks = nn.ModuleList(
            FeedForwardTransformerBlock(dim, heads, ffn_hidden, kernels, norm="layer")
            for _ in range(n_blocks)
        )

    def forward(self, phonemes, mask):
        """phonemes: [B, L] long; mask: [B, L] bool. Returns [B, L, d]."""
        if int(phonemes.max()) >= self.vocab_size or int(phonemes.min()) < 0:
            raise ValueError(
                f"phoneme id out of vocabulary range [0, {self.vocab_size})"
            )
        x = _mask_rows(self.emb(phonemes), mask)
        pos = sinusoidal_positions(x.shape[1], x.shape[2], dtype=x.dtype)
        x = _mask_rows(x + pos[None, :, :], mask)
        for block in self.blocks:
            x = block(x, mask)
        return x


class VariancePredictor(nn.Module):
    """Two conv layers with ReLU and layer norm, then a scalar head."""

    def __init__(self, dim: int, hidden: int, kernel: int):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"variance kernel must be odd, got {kernel}")
        self.conv1 = nn.Conv1d(dim, hidden, kernel, padding=kernel // 2)
        self.ln1 = nn.LayerNorm(hidden)
        self.conv2 = nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2)
        self.ln2 = nn.LayerNorm(hidden)
        self.out = nn.Linear(hidden, 1)

    def forward(self, x, mask):  # [B, L, d] -> [B, L]
        x = _mask_rows(x, mask)
        x = torch.relu(self.conv1(x.transpose(1, 2)).transpose(1, 2))
        x = _mask_rows(self.ln1(x), mask)
        x = torch.relu(self.conv2(x.transpose(1, 2)).transpose(1, 2))
        x = _mask_rows(self.ln2(x), mask)
        return self.out(x).squeeze(-1) * mask.to(x.dtype)


@dataclass
class VariancePredictions:
    """Per-phoneme predictions; pitch/energy are on the normalized scale."""

    log_duration: torch.Tensor  # [B, L]
    pitch: torch.Tensor  # [B, L]
    energy: torch.Tensor  # [B, L]


@dataclass
class AdaptorOutput:
    frames: torch.Tensor  # [B, T, d] length-regulated features
    frame_mask: torch.Tensor  # [B, T] bool
    predictions: VariancePredictions
    durations_used: torch.Tensor  # [B, L] long, 0 at padding
    pitch_target: Optional[torch.Tensor]  # [B, L] normalized, training only
    energy_target: Optional[torch.Tensor]  # [B, L] normalized, training only


def length_regulate(x: torch.Tensor, durations: torch.Tensor):
    """Repeat each phoneme row by its duration.

    x: [B, L, d]; durations: [B, L] long with zeros at padding.
    Returns (frames [B, T, d], frame_mask [B, T]) with T = max total
    duration; total frame count per item is exactly its duration sum.
    """
    totals = durations.sum(dim=1)
    if bool((totals == 0).any()):
        raise ValueError("zero total duration for at least one item")
    B, _, d = x.shape
    T = int(totals.max())
    frames = x.new_zeros(B, T, d)
    frame_mask = torch.zeros(B, T, dtype=torch.bool)
    for b in range(B):
        n = int(totals[b])
        frames[b, :n] = torch.repeat_interleave(x[b], durations[b], dim=0)
        frame_mask[b, :n] = True
    return frames, frame_mask


class VarianceAdaptor(nn.Module):
    """Predicts variances, embeds quantized pitch/energy, regulates length.

    Pitch and energy are min-max normalized to [0, 1] with corpus
    statistics fixed at preprocess time; the same normalized scale feeds
    both the quantization to embedding bins and the regression losses.
    """

    def __init__(
        self,
        dim: int,
        stats: CorpusStats,
        pitch_bins: int,
        energy_bins: int,
        hidden: int,
        kernel: int,
    ):
        super().__init__()
        self.duration_predictor = VariancePredictor(dim, hidden, kernel)
        self.pitch_predictor = VariancePredictor(dim, hidden, kernel)
        self.energy_predictor = VariancePredictor(dim, hidden, kernel)
        self.pitch_bins = pitch_bins
        self.energy_bins = energy_bins
        self.pitch_emb = nn.Embedding(pitch_bins, dim)
        self.energy_emb = nn.Embedding(energy_bins, dim)
        self.register_buffer("pitch_min", torch.tensor(float(stats.pitch_min)))
        self.register_buffer("pitch_max", torch.tensor(float(stats.pitch_max)))
        self.register_buffer("energy_min", torch.tensor(float(stats.energy_min)))
        self.register_buffer("energy_max", torch.tensor(float(stats.energy_max)))

    def _normalize(self, x, lo, hi):
        return ((x - lo) / torch.clamp(hi - lo, min=_RANGE_EPS)).clamp(0.0, 1.0)

    def _bucketize(self, norm, bins):
        return (norm * bins).floor().long().clamp(0, bins - 1)

    def forward(
        self,
        enc,
        mask,
        durations=None,
        pitch=None,
        energy=None,
    ) -> AdaptorOutput:
        """enc: [B, L, d]; mask: [B, L] bool.

        Training passes raw per-phoneme targets (durations, pitch,
        energy) and teacher-forces them; inference passes None and uses
        the predictions, with durations = round(exp(log_dur)) >= 1.
        """
        teacher = durations is not None
        if teacher and (pitch is None or energy is None):
            raise ValueError("teacher forcing needs durations, pitch, and energy")
        log_dur = self.duration_predictor(enc, mask)
        pitch_pred = self.pitch_predictor(enc, mask)
        energy_pred = self.energy_predictor(enc, mask)
        maskf = mask.to(enc.dtype)
        if teacher:
            pitch_target = self._normalize(pitch, self.pitch_min, self.pitch_max)
            energy_target = self._normalize(energy, self.energy_min, self.energy_max)
            pitch_target = pitch_target * maskf
            energy_target = energy_target * maskf
            pitch_idx = self._bucketize(pitch_target, self.pitch_bins)
            energy_idx = self._bucketize(energy_target, self.energy_bins)
            durations_used = durations
        else:
            pitch_target = None
            energy_target = None
            pitch_idx = self._bucketize(pitch_pred.clamp(0.0, 1.0), self.pitch_bins)
            energy_idx = self._bucketize(
                energy_pred.clamp(0.0, 1.0), self.energy_bins
            )
            durations_used = (
                torch.round(torch.exp(log_dur)).long().clamp(min=1) * mask.long()
            )
        x = enc
        x = x + _mask_rows(self.pitch_emb(pitch_idx), mask)
        x = x + _mask_rows(self.energy_emb(energy_idx), mask)
        frames, frame_mask = length_regulate(x, durations_used)
        return AdaptorOutput(
            frames=frames,
            frame_mask=frame_mask,
            predictions=VariancePredictions(
                log_duration=log_dur, pitch=pitch_pred, energy=energy_pred
            ),
            durations_used=durations_used,
            pitch_target=pitch_target,
            energy_target=energy_target,
        )


class MelDecoder(nn.Module):
    """Transformer blocks over frames, style-conditioned, linear to mel."""

    def __init__(
        self,
        dim: int,
        heads: int,
        n_blocks: int,
        ffn_hidden: int,
        kernels: tuple[int, int],
        style_dim: Optional[int],
        norm: str = "style",
    ):
        super().__init__()
        self.norm_kind = norm
        self.blocks = nn.ModuleList(
            FeedForwardTransformerBlock(
                dim, heads, ffn_hidden, kernels, norm=norm, style_dim=style_dim
            )
            for _ in range(n_blocks)
        )
        self.mel_out = nn.Linear(dim, N_MEL_CHANNELS)

    def forward(self, frames, frame_mask, style=None):
        """frames: [B, T, d]; frame_mask: [B, T]; style: [B, style_dim].

        Returns mel [B, T, 80], zero at padded frames.
        """
        if self.norm_kind == "style" and style is None:
            raise ValueError("style-conditioned decoder needs a style vector")
        pos = sinusoidal_positions(frames.shape[1], frames.shape[2], frames.dtype)
        x = _mask_rows(frames + pos[None, :, :], frame_mask)
        for block in self.blocks:
            x = block(x, frame_mask, style)
        return _mask_rows(self.mel_out(x), frame_mask)
