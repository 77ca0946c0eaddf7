"""Prosody prediction from coarse context, and its training loss.

The predictor maps the pair of coarse context vectors to an estimate of
the current turn's acoustic utterance embedding. It exists only to shape
training: the loss between its output and the extractor's embedding of
the ground-truth mel constrains the coarse context modules. Synthesis
never evaluates it.
"""

from __future__ import annotations

import torch
from torch import nn


class ProsodyPredictor(nn.Module):
    """Two-layer perceptron from concatenated context to embedding space."""

    def __init__(self, d_model: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * d_model, d_model)
        self.fc2 = nn.Linear(d_model, out_dim)

    def forward(self, h_text, h_acoustic, null_text, null_acoustic):
        """h_text, h_acoustic: [B, d] or None (disabled side).

        A disabled side is replaced by the shared learned null vector;
        with both sides disabled there is nothing to predict from, which
        is an error (the predictor itself should be disabled instead).
        """
        if h_text is None and h_acoustic is None:
            raise ValueError(
                "prosody predictor needs at least one coarse context module"
            )
        present = h_text if h_text is not None else h_acoustic
        B = present.shape[0]
        if h_text is None:
            h_text = null_text.to(present.dtype).expand(B, -1)
        if h_acoustic is None:
            h_acoustic = null_acoustic.to(present.dtype).expand(B, -1)
        combined = torch.cat([h_text, h_acoustic], dim=-1)
        return self.fc2(torch.tanh(self.fc1(combined)))


def prosody_loss(pred, target, reduction: str = "mean"):
    """Squared-error loss between predicted and extracted embeddings.

    ``mean`` averages over every element; ``sum`` sums over the feature
    axis first and averages over the batch. Unbatched vectors are
    treated as a batch of one.
    """
    if pred.shape != target.shape:
        raise ValueError(
            f"prosody dimensions disagree: {tuple(pred.shape)} vs "
            f"{tuple(target.shape)}"
        )
    sq = (pred - target.to(pred.dtype)) ** 2
    if reduction == "mean":
        return sq.mean()
    if reduction == "sum":
        if sq.dim() == 1:
            return sq.sum()
        return sq.sum(dim=-1).mean()
    raise ValueError(f"unknown reduction: {reduction!r}")
