"""Full-model assembly: ablation wiring, deterministic init, inference."""

import pytest
import torch

from m2ctts import (
    AblationConfig,
    build_model,
    features_for_batch,
    iter_windows,
    make_batch,
    synthesize,
)


def _batch(dialogues, config, turns=((0, 0), (0, 3), (1, 1))):
    ws = [
        w
        for w in iter_windows(dialogues, config.memory_capacity)
        if (int(w.current.dialogue_id[-1]), w.current.turn_index)
        in {(d, t) for d, t in turns}
    ]
    assert len(ws) == len(turns)
    return make_batch(ws, config.pad_phoneme_id, config.memory_capacity)


def test_forward_shapes_m7(config, stats, dialogues, provider):
    model = build_model(config, stats, seed=0)
    batch = _batch(dialogues, config)
    features = features_for_batch(model, batch, provider, need_prosody_target=True)
    out = model(batch, features, teacher_forcing=True)
    B, L = batch.phonemes.shape
    T = batch.mels.shape[1]
    assert out.mel.shape == (B, T, 80)
    assert torch.equal(out.frame_mask, batch.frame_mask)
    assert out.predictions.log_duration.shape == (B, L)
    assert out.style.shape == (B, config.style_dim)
    assert out.h_text.shape == (B, config.d_model)
    assert out.h_acoustic.shape == (B, config.d_model)
    assert out.prosody_pred.shape == (B, config.acoustic_utterance_dim)
    assert out.prosody_target.shape == (B, config.acoustic_utterance_dim)
    assert out.tum_weights.shape == (B, 1 + config.memory_capacity)
    assert out.wum_weights.shape == (B, 1 + config.memory_capacity)
    assert out.tpm_weights.shape[0:2] == (B, config.heads)
    assert out.wpm_weights is not None
    # the mel is finite and padded frames stay zero
    assert bool(torch.isfinite(out.mel).all())
    assert torch.all(out.mel[~batch.frame_mask] == 0)


@pytest.mark.parametrize(
    "name,has_text,has_acoustic,has_tpm,has_wpm",
    [
        ("M1", False, False, False, False),
        ("M2", True, False, False, False),
        ("M3", False, True, False, False),
        ("M4", True, False, True, False),
        ("M5", False, True, False, True),
        ("M6", True, True, False, False),
        ("M7", True, True, True, True),
    ],
)
def test_ablation_outputs_present_exactly_when_enabled(
    config, stats, dialogues, provider, name, has_text, has_acoustic, has_tpm, has_wpm
):
    model = build_model(config, stats, seed=0, ablation=AblationConfig.from_name(name))
    batch = _batch(dialogues, config)
    features = features_for_batch(model, batch, provider, need_prosody_target=True)
    out = model(batch, features, teacher_forcing=True)
    assert (out.h_text is not None) == has_text
    assert (out.h_acoustic is not None) == has_acoustic
    assert (out.tum_weights is not None) == has_text
    assert (out.wum_weights is not None) == has_acoustic
    assert (out.tpm_weights is not None) == has_tpm
    assert (out.wpm_weights is not None) == has_wpm
    assert (out.prosody_pred is not None) == (has_text or has_acoustic)
    needed = model.needed_features()
    assert needed == {
        "need_tum": has_text,
        "need_wum": has_acoustic,
        "need_tpm": has_tpm,
        "need_wpm": has_wpm,
    }
    if name == "M1":
        assert features is None  # nothing to build at all


def test_init_is_deterministic_and_name_keyed(config, stats):
    a = build_model(config, stats, seed=3)
    b = build_model(config, stats, seed=3)
    for (name_a, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name_a
    c = build_model(config, stats, seed=4)
    different = any(
        not torch.equal(pa, pc)
        for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters())
    )
    assert different
    # shared submodules get identical values even when other modules differ
    m1 = build_model(config, stats, seed=3, ablation=AblationConfig.from_name("M1"))
    params_a = dict(a.named_parameters())
    for name, pm in m1.named_parameters():
        assert torch.equal(pm, params_a[name]), name


def test_init_rules(config, stats):
    model = build_model(config, stats, seed=0)
    saw_gain_bias = saw_plain_bias = saw_matrix = saw_gain_weight = False
    for name, p in model.named_parameters():
        if name.endswith("gain_map.bias"):
            assert torch.all(p == 1.0), name
            saw_gain_bias = True
        elif name.endswith(".bias"):
            assert torch.all(p == 0.0), name
            saw_plain_bias = True
        elif p.ndim >= 2:
            fan_in = p.shape[1:].numel()
            fan_out = p.shape[0] * (p.shape[2:].numel() if p.ndim > 2 else 1)
            bound = (6.0 / (fan_in + fan_out)) ** 0.5
            assert float(p.detach().abs().max()) <= bound + 1e-6, name
            saw_matrix = True
        elif p.ndim == 1 and name.endswith(".weight"):
            assert torch.all(p == 1.0), name
            saw_gain_weight = True
    assert saw_gain_bias and saw_plain_bias and saw_matrix and saw_gain_weight


def test_forward_requires_features_when_context_active(
    config, stats, dialogues
):
    model = build_model(config, stats, seed=0)
    batch = _batch(dialogues, config)
    with pytest.raises(ValueError):
        model(batch, None, teacher_forcing=True)


def test_synthesize_inference_path(config, stats, dialogues, provider):
    model = build_model(config, stats, seed=0)
    ws = list(iter_windows(dialogues, config.memory_capacity))[:3]
    out = synthesize(model, ws, provider)
    assert out.prosody_pred is None  # training-only head
    assert out.pitch_target is None  # no oracle targets at inference
    d = out.durations_used
    for i, w in enumerate(ws):
        n_l = len(w.current.phoneme_ids)
        assert torch.all(d[i, :n_l] >= 1)
        assert torch.all(d[i, n_l:] == 0)
    assert out.mel.shape[1] == int(d.sum(1).max())
    assert bool(torch.isfinite(out.mel).all())
