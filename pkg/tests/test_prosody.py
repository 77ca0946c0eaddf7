"""Training-only prosody prediction head and its loss."""

import pytest
import torch

from m2ctts import ProsodyPredictor, prosody_loss


def test_predictor_requires_some_context():
    ppm = ProsodyPredictor(4, 6)
    nt = torch.zeros(4)
    na = torch.ones(4)
    with pytest.raises(ValueError):
        ppm(None, None, nt, na)


def test_predictor_substitutes_nulls():
    ppm = ProsodyPredictor(4, 6)
    g = torch.Generator().manual_seed(0)
    h = torch.randn(2, 4, generator=g)
    nt = torch.randn(4, generator=g)
    na = torch.randn(4, generator=g)
    with torch.no_grad():
        only_text = ppm(h, None, nt, na)
        manual = ppm.fc2(
            torch.tanh(ppm.fc1(torch.cat([h, na.expand(2, -1)], dim=-1)))
        )
        assert torch.allclose(only_text, manual, atol=1e-6)
        only_acoustic = ppm(None, h, nt, na)
        manual2 = ppm.fc2(
            torch.tanh(ppm.fc1(torch.cat([nt.expand(2, -1), h], dim=-1)))
        )
        assert torch.allclose(only_acoustic, manual2, atol=1e-6)
        assert only_text.shape == (2, 6)


def test_loss_trivial_cases():
    target = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert float(prosody_loss(target, target)) == 0.0
    pred = target + 1.0  # squared error 1 everywhere
    assert float(prosody_loss(pred, target, reduction="mean")) == pytest.approx(1.0)
    # sum reduction: per-item sum over features, averaged over the batch
    assert float(prosody_loss(pred, target, reduction="sum")) == pytest.approx(2.0)


def test_loss_hand_value():
    pred = torch.tensor([[0.0, 2.0]])
    target = torch.tensor([[1.0, 0.0]])
    assert float(prosody_loss(pred, target, reduction="mean")) == pytest.approx(2.5)
    assert float(prosody_loss(pred, target, reduction="sum")) == pytest.approx(5.0)


def test_loss_errors():
    with pytest.raises(ValueError):
        prosody_loss(torch.zeros(2, 3), torch.zeros(2, 4))
    with pytest.raises(ValueError):
        prosody_loss(torch.zeros(2, 3), torch.zeros(2, 3), reduction="max")
