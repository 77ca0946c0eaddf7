"""Self-contained property suites behind the ``verify`` command.

Each suite is a list of named checks that raise AssertionError (or any
exception) on failure. The runner prints one PASS/FAIL line per
property so CI logs show exactly which contract broke.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import torch

from .backbone import FeedForwardTransformerBlock
from .config import ABLATION_ROWS, AblationConfig, RunConfig
from .corpus import (
    Dialogue,
    Turn,
    compute_corpus_stats,
    gen_toy_corpus,
    iter_windows,
    load_manifest,
    make_batch,
    window,
)
from .extractors import (
    CacheFormatError,
    StubFeatureProvider,
    decode_tensor,
    encode_tensor,
    read_tensor_header,
    write_tensor_file,
)
from .fusion import (
    AdditiveAttentionPool,
    AllKeysMaskedError,
    Conv1dContextualizer,
    GRULayer,
    MultiHeadAttention,
    StyleAdaptiveLayerNorm,
    masked_softmax,
)
from .gradcheck import check_module_gradients
from .model import build_model, features_for_batch
from .seeding import stable_seed
from .training import total_loss

GRAD_TOL = 1e-4


class VerificationFailure(Exception):
    """Raised when at least one property check fails."""


def _rng(tag: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stable_seed("verify", tag))
    return gen


def _rand(shape, gen, dtype=torch.float32):
    return torch.randn(shape, generator=gen, dtype=dtype)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def check_softmax_rows_sum_to_one():
    gen = _rng("rows")
    for trial in range(50):
        nq = int(torch.randint(1, 6, (1,), generator=gen))
        nk = int(torch.randint(1, 9, (1,), generator=gen))
        scores = _rand((nq, nk), gen)
        mask = torch.rand((nk,), generator=gen) > 0.4
        if not mask.any():
            mask[0] = True
        w = masked_softmax(scores, mask[None, :].expand(nq, nk))
        sums = w.sum(dim=-1)
        assert torch.allclose(sums, torch.ones(nq), atol=1e-5), f"trial {trial}"


def check_masked_keys_exactly_zero():
    gen = _rng("zero")
    for _ in range(50):
        scores = _rand((4, 7), gen) * 10
        mask = torch.rand((4, 7), generator=gen) > 0.5
        mask[:, 0] = True
        w = masked_softmax(scores, mask)
        assert (w[~mask] == 0).all(), "masked entry got nonzero weight"


def check_all_masked_raises():
    try:
        masked_softmax(torch.zeros(2, 3), torch.zeros(2, 3, dtype=torch.bool))
    except AllKeysMaskedError:
        return
    raise AssertionError("fully masked softmax did not raise")


def check_single_key_full_weight():
    gen = _rng("single")
    mha = MultiHeadAttention(8, 2)
    q = _rand((3, 8), gen)
    k = _rand((1, 8), gen)
    _, w = mha(q, k, k)
    assert torch.allclose(w, torch.ones_like(w)), "single-key weight is not 1"


def check_two_key_hand_case():
    mha = MultiHeadAttention(2, 1)
    with torch.no_grad():
        for lin in (mha.wq, mha.wk, mha.wv, mha.wo):
            lin.weight.copy_(torch.eye(2))
            lin.bias.zero_()
    kv = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    out, w = mha(torch.tensor([[1.0, 0.0]]), kv, kv)
    expect = torch.tensor([0.6698, 0.3302])
    assert torch.allclose(w[0, 0], expect, atol=1e-3), f"weights {w[0, 0]}"
    assert torch.allclose(out[0], expect, atol=1e-3), f"output {out[0]}"


def check_equal_values_collapse():
    gen = _rng("collapse")
    mha = MultiHeadAttention(8, 2)
    v_row = _rand((1, 8), gen)
    k = _rand((5, 8), gen)
    v = v_row.expand(5, 8)
    out, _ = mha(_rand((4, 8), gen), k, v)
    ref, _ = mha(_rand((1, 8), gen), k[:1], v[:1])
    assert torch.allclose(out, ref.expand_as(out), atol=1e-5), (
        "equal values should yield identical outputs"
    )


def check_kv_permutation_invariance():
    gen = _rng("perm")
    mha = MultiHeadAttention(8, 2)
    q = _rand((1, 3, 8), gen)
    k = _rand((1, 6, 8), gen)
    v = _rand((1, 6, 8), gen)
    mask = torch.tensor([[True, True, False, True, True, False]])
    out1, _ = mha(q, k, v, mask=mask)
    perm = torch.randperm(6, generator=gen)
    out2, _ = mha(q, k[:, perm], v[:, perm], mask=mask[:, perm])
    assert torch.allclose(out1, out2, atol=1e-6), "permutation changed output"


def check_pool_singleton_identity():
    gen = _rng("pool1")
    pool = AdditiveAttentionPool(4, 6, 5)
    key = _rand((1, 6), gen)
    out, w = pool(_rand((4,), gen), key)
    assert torch.allclose(out, key[0], atol=1e-6), "singleton pool is not the key"
    assert torch.allclose(w, torch.ones(1)), "singleton weight is not 1"


def check_pool_duplicate_keys_uniform():
    gen = _rng("pooldup")
    pool = AdditiveAttentionPool(4, 6, 5)
    key = _rand((1, 6), gen)
    keys = key.expand(7, 6)
    _, w = pool(_rand((4,), gen), keys)
    assert torch.allclose(w, torch.full((7,), 1.0 / 7), atol=1e-6), (
        "duplicate keys should share weight equally"
    )


# ---------------------------------------------------------------------------
# saln
# ---------------------------------------------------------------------------


def _identity_saln(dim, style_dim):
    saln = StyleAdaptiveLayerNorm(dim, style_dim)
    with torch.no_grad():
        saln.gain_map.weight.zero_()
        saln.gain_map.bias.fill_(1.0)
        saln.bias_map.weight.zero_()
        saln.bias_map.bias.zero_()
    return saln


def check_saln_identity_reduction():
    gen = _rng("saln-id")
    saln = _identity_saln(16, 8)
    h = _rand((2, 5, 16), gen)
    got = saln(h, _rand((2, 8), gen))
    want = torch.nn.functional.layer_norm(h, (16,), eps=1e-5)
    assert torch.allclose(got, want, atol=1e-6), "identity SALN != plain layer norm"


def check_saln_hand_case():
    saln = StyleAdaptiveLayerNorm(2, 3)
    with torch.no_grad():
        saln.gain_map.weight.zero_()
        saln.gain_map.bias.fill_(2.0)
        saln.bias_map.weight.zero_()
        saln.bias_map.bias.fill_(0.5)
    y = saln(torch.tensor([[1.0, 3.0]]), torch.zeros(3))
    assert torch.allclose(y[0], torch.tensor([-1.5, 2.5]), atol=1e-3), f"{y}"


def check_saln_moments():
    gen = _rng("saln-mom")
    saln = _identity_saln(32, 4)
    h = _rand((3, 7, 32), gen) * 5 + 2
    y = saln(h, _rand((3, 4), gen))
    mean = y.mean(dim=-1)
    var = y.var(dim=-1, unbiased=False)
    assert torch.allclose(mean, torch.zeros_like(mean), atol=1e-4), "mean not zero"
    assert torch.allclose(var, torch.ones_like(var), atol=1e-4), "variance not one"


def check_saln_constant_row():
    saln = StyleAdaptiveLayerNorm(4, 3)
    style = torch.tensor([0.3, -0.2, 0.9])
    h = torch.full((1, 2, 4), 7.0)
    y = saln(h, style)
    bias = saln.bias_map(style)
    assert torch.isfinite(y).all(), "constant row produced non-finite output"
    assert torch.allclose(y[0, 0], bias, atol=1e-3), "constant row != style bias"


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _grad_check(module, inputs_fn, tag):
    module.double()
    errors = check_module_gradients(module, inputs_fn, n_coords=4, seed=11)
    bad = {k: v for k, v in errors.items() if v >= GRAD_TOL}
    assert not bad, f"{tag}: finite-difference mismatch {bad}"


def check_grad_saln():
    gen = _rng("g-saln")
    saln = StyleAdaptiveLayerNorm(5, 3)
    h = _rand((2, 3, 5), gen, torch.float64)
    w = _rand((2, 3), gen, torch.float64)
    _grad_check(saln, lambda: saln(h, w).square().sum(), "saln")


def check_grad_attention():
    gen = _rng("g-mha")
    mha = MultiHeadAttention(6, 2)
    q = _rand((1, 3, 6), gen, torch.float64)
    k = _rand((1, 4, 6), gen, torch.float64)
    v = _rand((1, 4, 6), gen, torch.float64)
    mask = torch.tensor([[True, True, False, True]])
    _grad_check(mha, lambda: mha(q, k, v, mask=mask)[0].square().sum(), "attention")


def check_grad_pool():
    gen = _rng("g-pool")
    pool = AdditiveAttentionPool(4, 5, 3)
    q = _rand((2, 4), gen, torch.float64)
    keys = _rand((2, 4, 5), gen, torch.float64)
    mask = torch.tensor([[True, True, True, False], [True, False, True, True]])
    _grad_check(pool, lambda: pool(q, keys, mask)[0].square().sum(), "pool")


def check_grad_gru():
    gen = _rng("g-gru")
    gru = GRULayer(4, 5)
    seq = _rand((2, 3, 4), gen, torch.float64)
    init = _rand((2, 5), gen, torch.float64)
    mask = torch.tensor([[True, True, False], [True, True, True]])
    _grad_check(gru, lambda: gru(seq, init, mask)[0].square().sum(), "gru")


def check_grad_conv():
    gen = _rng("g-conv")
    conv = Conv1dContextualizer(4, 3)
    seq = _rand((2, 5, 4), gen, torch.float64)
    mask = torch.tensor([[True] * 5, [True, True, True, False, False]])
    _grad_check(conv, lambda: conv(seq, mask).square().sum(), "conv")


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def check_conv_padding_invariance():
    gen = _rng("m-conv")
    conv = Conv1dContextualizer(6, 3)
    seq = _rand((2, 7, 6), gen)
    mask = torch.tensor([[True] * 7, [True, True, True, True, False, False, False]])
    base = conv(seq, mask)
    noisy = seq.clone()
    noisy[1, 4:] = 123.0
    out = conv(noisy, mask)
    assert torch.equal(base, out), "padding values leaked through the conv"


def check_block_padding_invariance():
    torch.manual_seed(5)
    block = FeedForwardTransformerBlock(8, 2, 16, (3, 1), norm="layer")
    gen = _rng("m-block")
    x = _rand((2, 6, 8), gen)
    mask = torch.tensor([[True] * 6, [True, True, True, False, False, False]])
    x = x * mask[:, :, None]
    base = block(x, mask)
    noisy = x.clone()
    noisy[1, 3:] = -55.0
    out = block(noisy, mask)
    assert torch.allclose(base[1, :3], out[1, :3], atol=1e-6), "padding leaked"
    assert (base[1, 3:] == 0).all(), "masked rows are not zero"


def check_gru_masked_carry():
    gen = _rng("m-gru")
    gru = GRULayer(3, 4)
    seq = _rand((1, 5, 3), gen)
    init = _rand((1, 4), gen)
    mask = torch.tensor([[True, True, False, True, False]])
    final, _ = gru(seq, init, mask)
    noisy = seq.clone()
    noisy[0, 2] = 99.0
    noisy[0, 4] = -99.0
    final2, _ = gru(noisy, init, mask)
    assert torch.equal(final, final2), "masked GRU steps affected the state"


def check_gru_empty_sequence():
    gru = GRULayer(3, 4)
    init = torch.tensor([[1.0, -2.0, 0.5, 3.0]])
    final, states = gru(init.new_zeros(1, 0, 3), init)
    assert torch.equal(final, init), "empty sequence must return init"
    assert states.shape == (1, 0, 4), "empty sequence states shape"


# ---------------------------------------------------------------------------
# windowing
# ---------------------------------------------------------------------------


def _fake_dialogue(n_turns: int, did: str = "d0") -> Dialogue:
    turns = []
    for i in range(n_turns):
        turns.append(
            Turn(
                dialogue_id=did,
                turn_index=i,
                speaker="AB"[i % 2],
                text=f"t{i}",
                phoneme_ids=(1, 2),
                durations=(2, 3),
                pitch=(1.0, 2.0),
                energy=(0.5, 0.6),
                mel_path=Path("/nonexistent.m2ct"),
                n_frames=5,
            )
        )
    return Dialogue(dialogue_id=did, turns=tuple(turns))


def check_window_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(300):
        n = int(rng.integers(1, 12))
        d = _fake_dialogue(n)
        t = int(rng.integers(0, n))
        c = int(rng.integers(0, 7))
        w = window(d, t, c)
        expect = [i for i in range(n) if t - c <= i < t]
        got = [turn.turn_index for turn in w.history]
        assert got == expect, f"history {got} != {expect} for t={t} c={c}"
        assert w.current.turn_index == t


def check_window_history_length():
    d = _fake_dialogue(9)
    for t in range(9):
        for c in range(6):
            assert len(window(d, t, c).history) == min(t, c)


def check_window_coverage():
    d = _fake_dialogue(7)
    seen = [w.current.turn_index for w in iter_windows([d], 4)]
    assert seen == list(range(7)), "windows must cover each turn exactly once"


def check_window_out_of_range():
    d = _fake_dialogue(3)
    for t in (-1, 3, 10):
        try:
            window(d, t, 2)
        except IndexError:
            continue
        raise AssertionError(f"t={t} did not raise")


# ---------------------------------------------------------------------------
# cache round-trip
# ---------------------------------------------------------------------------


def check_roundtrip_bit_exact():
    rng = np.random.default_rng(9)
    for shape in [(4,), (3, 5), (2, 3, 4), (1, 1), (25, 76)]:
        arr = rng.standard_normal(shape).astype(np.float32)
        back = decode_tensor(encode_tensor(arr))
        assert back.dtype == arr.dtype and np.array_equal(back, arr), f"{shape}"


def check_wrong_magic_rejected():
    arr = np.zeros(3, dtype=np.float32)
    data = b"JUNK" + encode_tensor(arr)[4:]
    try:
        decode_tensor(data)
    except CacheFormatError:
        return
    raise AssertionError("wrong magic accepted")


def check_truncated_rejected():
    data = encode_tensor(np.ones((4, 4), dtype=np.float32))
    for cut in (3, 9, 12, len(data) - 1):
        try:
            decode_tensor(data[:cut])
        except CacheFormatError:
            continue
        raise AssertionError(f"truncation at {cut} accepted")


def check_header_peek_matches():
    rng = np.random.default_rng(21)
    arr = rng.standard_normal((6, 8)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "t.m2ct"
        write_tensor_file(path, arr)
        code, shape = read_tensor_header(path)
        assert code == 0 and shape == (6, 8), f"peek {code} {shape}"


# ---------------------------------------------------------------------------
# ablation isolation
# ---------------------------------------------------------------------------


def _tiny_setup(tmp: Path):
    manifest = gen_toy_corpus(5, 2, 3, tmp)
    config = RunConfig(
        manifest=str(manifest),
        d_model=16,
        heads=2,
        encoder_blocks=1,
        decoder_blocks=1,
        ffn_hidden=24,
        style_dim=16,
        variance_hidden=16,
        text_utterance_dim=12,
        acoustic_utterance_dim=16,
        text_sequence_dim=12,
        acoustic_sequence_dim=16,
        pitch_bins=16,
        energy_bins=16,
    )
    dialogues = load_manifest(manifest)
    stats = compute_corpus_stats(dialogues)
    provider = StubFeatureProvider(config.feature_dims(), 0)
    windows = list(iter_windows(dialogues, config.memory_capacity))
    batch = make_batch(windows[:4], config.pad_phoneme_id, config.memory_capacity)
    return config, stats, provider, batch


def check_disabled_modules_get_zero_grads():
    with tempfile.TemporaryDirectory() as tmp:
        config, stats, provider, batch = _tiny_setup(Path(tmp))
        module_params = {
            "tum": "tum.",
            "wum": "wum.",
            "tpm": "tpm.",
            "wpm": "wpm.",
            "ppm": "ppm.",
        }
        for name in ABLATION_ROWS:
            ablation = AblationConfig.from_name(name)
            model = build_model(config, stats, seed=3, ablation=ablation)
            features = features_for_batch(
                model, batch, provider, need_prosody_target=True
            )
            out = model(batch, features, teacher_forcing=True)
            loss = total_loss(out, batch, config.prosody_weight)
            model.zero_grad(set_to_none=True)
            loss.total.backward()
            enabled = {
                "tum": ablation.tum,
                "wum": ablation.wum,
                "tpm": ablation.tpm,
                "wpm": ablation.wpm,
                "ppm": ablation.ppm,
            }
            for mod, prefix in module_params.items():
                for pname, p in model.named_parameters():
                    if not pname.startswith(prefix):
                        continue
                    if not enabled[mod]:
                        assert p.grad is None or (p.grad == 0).all(), (
                            f"{name}: disabled {pname} got gradient"
                        )


def check_m1_matches_bare_backbone():
    with tempfile.TemporaryDirectory() as tmp:
        config, stats, provider, batch = _tiny_setup(Path(tmp))
        m1 = build_model(
            config, stats, seed=4, ablation=AblationConfig.from_name("M1")
        )
        bare = build_model(config, stats, seed=4, with_context=False, with_ppm=False)
        out1 = m1(batch, None, teacher_forcing=True)
        out2 = bare(batch, None, teacher_forcing=True)
        assert torch.equal(out1.mel, out2.mel), "M1 mel differs from bare backbone"
        assert torch.equal(out1.style, out2.style), "M1 style differs"
        assert out1.prosody_pred is None, "M1 must not predict prosody"


def check_named_rows_match_table():
    expect = {
        "M1": (False, False, False, False),
        "M2": (True, False, False, False),
        "M3": (False, True, False, False),
        "M4": (True, False, True, False),
        "M5": (False, True, False, True),
        "M6": (True, True, False, False),
        "M7": (True, True, True, True),
    }
    for name, flags in expect.items():
        a = AblationConfig.from_name(name)
        assert (a.tum, a.wum, a.tpm, a.wpm) == flags, f"{name} row mismatch"


SUITES = {
    "attention": [
        ("rows sum to one over unmasked keys", check_softmax_rows_sum_to_one),
        ("masked keys get exactly zero weight", check_masked_keys_exactly_zero),
        ("fully masked rows raise", check_all_masked_raises),
        ("single key takes full weight", check_single_key_full_weight),
        ("two-key hand-computed case", check_two_key_hand_case),
        ("equal values collapse", check_equal_values_collapse),
        ("key/value permutation invariance", check_kv_permutation_invariance),
        ("pool of one key is that key", check_pool_singleton_identity),
        ("pool weights duplicates equally", check_pool_duplicate_keys_uniform),
    ],
    "saln": [
        ("identity modulation is plain layer norm", check_saln_identity_reduction),
        ("hand-computed normalization case", check_saln_hand_case),
        ("zero mean, unit variance when unmodulated", check_saln_moments),
        ("constant rows map to the style bias", check_saln_constant_row),
    ],
    "gradients": [
        ("style-adaptive norm matches finite differences", check_grad_saln),
        ("attention matches finite differences", check_grad_attention),
        ("attention pool matches finite differences", check_grad_pool),
        ("gru matches finite differences", check_grad_gru),
        ("conv contextualizer matches finite differences", check_grad_conv),
    ],
    "masking": [
        ("conv ignores padded rows", check_conv_padding_invariance),
        ("transformer block ignores padded rows", check_block_padding_invariance),
        ("gru carries state through masked steps", check_gru_masked_carry),
        ("gru empty sequence returns init", check_gru_empty_sequence),
    ],
    "windowing": [
        ("window matches brute-force enumeration", check_window_brute_force),
        ("history length is min(t, c)", check_window_history_length),
        ("windows cover each turn exactly once", check_window_coverage),
        ("out-of-range turns rejected", check_window_out_of_range),
    ],
    "cache-roundtrip": [
        ("ranks 1-3 round-trip bit-exact", check_roundtrip_bit_exact),
        ("wrong magic rejected", check_wrong_magic_rejected),
        ("truncated files rejected", check_truncated_rejected),
        ("header peek matches contents", check_header_peek_matches),
    ],
    "ablation-isolation": [
        ("named rows match the ablation table", check_named_rows_match_table),
        ("disabled modules receive zero gradient", check_disabled_modules_get_zero_grads),
        ("all-disabled model equals bare backbone", check_m1_matches_bare_backbone),
    ],
}


def run_suites(names=None, out=print) -> bool:
    """Run the named suites (all by default); returns True if all pass."""
    if names is None or not names:
        names = list(SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise VerificationFailure(
            f"unknown suite(s) {unknown}; available: {sorted(SUITES)}"
        )
    ok = True
    for suite in names:
        for prop, fn in SUITES[suite]:
            try:
                fn()
            except Exception as exc:  # noqa: BLE001 - report and continue
                ok = False
                out(f"FAIL {suite}: {prop} ({exc})")
            else:
                out(f"PASS {suite}: {prop}")
    return ok
