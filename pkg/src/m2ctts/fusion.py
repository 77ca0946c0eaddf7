"""Reusable neural primitives: positions, attention, GRU, conv, SALN.

All modules are hand-written on top of plain linear/conv layers so that
masking semantics, empty-sequence behavior, and returned attention
weights follow exact contracts. Masked softmax applies a -1e9 additive
bias before the softmax and zeroes masked entries exactly afterwards.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

MASK_BIAS = -1e9


class AllKeysMaskedError(Exception):
    """Raised when attention would run with every key masked out."""


def sinusoidal_positions(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal position table of shape [n, d].

    Entry (pos, 2i) = sin(pos / 10000^(2i/d)) and (pos, 2i+1) = cos of the
    same argument. Computed in float64 and cast on return.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if d < 2 or d % 2 != 0:
        raise ValueError(f"d must be a positive even integer, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    table = np.empty((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return torch.from_numpy(table).to(dtype)


def masked_softmax(scores: torch.Tensor, mask, dim: int = -1) -> torch.Tensor:
    """Softmax over ``dim`` with masked entries forced to exactly zero.

    ``mask`` is boolean, true at valid entries, broadcastable to the score
    shape. Rows with no valid entry raise instead of returning silent
    zeros or NaNs.
    """
    if mask is None:
        return torch.softmax(scores, dim=dim)
    mask = torch.broadcast_to(mask.to(torch.bool), scores.shape)
    if not bool(mask.any(dim=dim).all()):
        raise AllKeysMaskedError("softmax row with every key masked")
    biased = scores + (~mask).to(scores.dtype) * MASK_BIAS
    return torch.softmax(biased, dim=dim) * mask.to(scores.dtype)


def _batched(x: torch.Tensor, ndim: int):
    """Add a batch axis if absent; return (tensor, had_batch)."""
    if x.dim() == ndim:
        return x, True
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), False
    raise ValueError(f"expected {ndim - 1}- or {ndim}-dimensional tensor")


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head weights returned."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.d_model = d_model
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, q, k, v, mask=None):
        """Attend queries to keys/values.

        q: [B, Nq, d]; k, v: [B, Nk, d]; mask: [B, Nk] bool, true at
        valid keys. Returns ([B, Nq, d], weights [B, heads, Nq, Nk]).
        Unbatched 2D inputs are accepted and returned unbatched.
        """
        q, had_batch = _batched(q, 3)
        k, _ = _batched(k, 3)
        v, _ = _batched(v, 3)
        B, Nq, _ = q.shape
        Nk = k.shape[1]

        def split(x):  # [B, N, d] -> [B, heads, N, d_head]
            return x.view(B, -1, self.heads, self.d_head).transpose(1, 2)

        qh = split(self.wq(q))
        kh = split(self.wk(k))
        vh = split(self.wv(v))
        scores = qh @ kh.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            mask, _ = _batched(mask, 2)
            mask = mask[:, None, None, :]  # [B, 1, 1, Nk]
        weights = masked_softmax(scores, mask, dim=-1)
        out = weights @ vh  # [B, heads, Nq, d_head]
        out = out.transpose(1, 2).reshape(B, Nq, self.d_model)
        out = self.wo(out)
        if not had_batch:
            return out.squeeze(0), weights.squeeze(0)
        return out, weights


class AdditiveAttentionPool(nn.Module):
    """Pool variable-length keys into one vector, scored against a query.

    score_i = v^T tanh(Wq q + Wk k_i); output = sum_i softmax(score)_i k_i.
    """

    def __init__(self, query_dim: int, key_dim: int, attn_dim: int):
        super().__init__()
        self.wq = nn.Linear(query_dim, attn_dim, bias=False)
        self.wk = nn.Linear(key_dim, attn_dim, bias=False)
        self.v = nn.Parameter(torch.zeros(attn_dim))

    def forward(self, query, keys, mask=None):
        """query: [B, dq]; keys: [B, n, dk]; mask: [B, n] bool.

        Returns ([B, dk], weights [B, n]).
        """
        query, had_batch = _batched(query, 2)
        keys, _ = _batched(keys, 3)
        hidden = torch.tanh(self.wq(query)[:, None, :] + self.wk(keys))
        scores = hidden @ self.v  # [B, n]
        if mask is not None:
            mask, _ = _batched(mask, 2)
        weights = masked_softmax(scores, mask, dim=-1)
        pooled = (weights[:, :, None] * keys).sum(dim=1)
        if not had_batch:
            return pooled.squeeze(0), weights.squeeze(0)
        return pooled, weights


class GRULayer(nn.Module):
    """Single-layer GRU with explicit gate math and masked step carry."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.ih = nn.Linear(input_dim, 3 * hidden_dim)
        self.hh = nn.Linear(hidden_dim, 3 * hidden_dim)

    def step(self, x, h):
        """One recurrence step. x: [B, d_in]; h: [B, d_h]."""
        ri, zi, ni = self.ih(x).chunk(3, dim=-1)
        rh, zh, nh = self.hh(h).chunk(3, dim=-1)
        r = torch.sigmoid(ri + rh)
        z = torch.sigmoid(zi + zh)
        n = torch.tanh(ni + r * nh)
        return (1.0 - z) * n + z * h

    def forward(self, seq, init, mask=None):
        """Run the recurrence over a (possibly empty) sequence.

        seq: [B, n, d_in]; init: [B, d_h]; mask: [B, n] bool, true at
        real steps. Masked steps carry the previous state unchanged.
        Returns (final [B, d_h], states [B, n, d_h]); n = 0 returns init.
        """
        seq, had_batch = _batched(seq, 3)
        init, _ = _batched(init, 2)
        B, n, _ = seq.shape
        if mask is not None:
            mask, _ = _batched(mask, 2)
        h = init
        states = []
        for t in range(n):
            h_new = self.step(seq[:, t], h)
            if mask is not None:
                h = torch.where(mask[:, t : t + 1], h_new, h)
            else:
                h = h_new
            states.append(h)
        if states:
            all_states = torch.stack(states, dim=1)
        else:
            all_states = seq.new_zeros(B, 0, self.hidden_dim)
        if not had_batch:
            return h.squeeze(0), all_states.squeeze(0)
        return h, all_states


class Conv1dContextualizer(nn.Module):
    """Same-length 1D convolution over the sequence axis plus activation."""

    def __init__(self, dim: int, kernel: int, activation: str = "relu"):
        super().__init__()
        if kernel < 1 or kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and positive, got {kernel}")
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation: {activation!r}")
        self.conv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2)
        self.activation = activation

    def forward(self, seq, mask=None):
        """seq: [B, n, d]; mask: [B, n] bool. Output [B, n, d].

        Masked rows are zeroed both before the convolution (so padding
        never leaks into real positions) and after it.
        """
        seq, had_batch = _batched(seq, 3)
        if mask is not None:
            mask, _ = _batched(mask, 2)
            seq = seq * mask[:, :, None].to(seq.dtype)
        out = self.conv(seq.transpose(1, 2)).transpose(1, 2)
        if self.activation == "relu":
            out = torch.relu(out)
        if mask is not None:
            out = out * mask[:, :, None].to(out.dtype)
        if not had_batch:
            return out.squeeze(0)
        return out


class StyleAdaptiveLayerNorm(nn.Module):
    """Layer norm whose gain and bias are affine maps of a style vector."""

    EPS = 1e-5

    def __init__(self, dim: int, style_dim: int):
        super().__init__()
        self.gain_map = nn.Linear(style_dim, dim)
        self.bias_map = nn.Linear(style_dim, dim)

    def forward(self, h, style):
        """h: [B, n, d]; style: [B, style_dim]. Output [B, n, d].

        Per position, y = g(style) * (h - mean) / sqrt(var + eps)
        + b(style), with biased variance over the feature axis.
        """
        h, had_batch = _batched(h, 3)
        style, _ = _batched(style, 2)
        gain = self.gain_map(style)[:, None, :]
        bias = self.bias_map(style)[:, None, :]
        mean = h.mean(dim=-1, keepdim=True)
        var = h.var(dim=-1, unbiased=False, keepdim=True)
        out = gain * (h - mean) / torch.sqrt(var + self.EPS) + bias
        if not had_batch:
            return out.squeeze(0)
        return out
