"""End-to-end command-line workflow and the exit-code contract."""

import json

import numpy as np
import pytest

from m2ctts import read_tensor_file
from m2ctts.cli import main

COMPACT = [
    "--d_model", "32",
    "--heads", "2",
    "--encoder_blocks", "1",
    "--decoder_blocks", "1",
    "--ffn_hidden", "64",
    "--style_dim", "32",
    "--variance_hidden", "32",
    "--text_utterance_dim", "64",
    "--acoustic_utterance_dim", "96",
    "--text_sequence_dim", "64",
    "--acoustic_sequence_dim", "64",
    "--warmup_steps", "4",
    "--checkpoint_interval", "5",
    "--log_interval", "10",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-toy -> preprocess -> train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert (
        main(
            ["gen-toy", "--out", str(corpus), "--dialogues", "2", "--turns", "4",
             "--seed", "7"]
        )
        == 0
    )
    assert (
        main(["preprocess", "--manifest", str(corpus / "manifest.jsonl"),
              "--out", str(root / "prep"), *COMPACT])
        == 0
    )
    assert (
        main(
            ["train", "--manifest", str(corpus / "manifest.jsonl"),
             "--out", str(root / "run"), "--seed", "3", "--steps", "10", *COMPACT]
        )
        == 0
    )
    return root


def test_gen_toy_and_preprocess_outputs(workspace):
    assert (workspace / "corpus" / "manifest.jsonl").exists()
    assert (workspace / "corpus" / "gen-toy.json").exists()
    assert (workspace / "prep" / "stats.json").exists()
    assert (workspace / "prep" / "config.yaml").exists()
    cache = workspace / "prep" / "cache"
    assert len(list(cache.rglob("*.m2ct"))) == 8 * 4


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "config.yaml").exists()
    assert (run / "checkpoint_final.m2ck").exists()
    assert (run / "checkpoint_step000005.m2ck").exists()
    rows = [json.loads(l) for l in (run / "losses.jsonl").read_text().splitlines()]
    assert len(rows) == 10
    assert (run / "val.json").exists()
    # the echoed config reflects overrides and the resolved seed
    text = (run / "config.yaml").read_text()
    assert "d_model: 32" in text
    assert "seed: 3" in text


def test_synthesize_writes_mel_and_attention(workspace):
    out = workspace / "synth"
    code = main(
        ["synthesize", "--checkpoint", str(workspace / "run" / "checkpoint_final.m2ck"),
         "--dialogue", "dlg0000", "--turn", "3", "--out", str(out)]
    )
    assert code == 0
    mel = read_tensor_file(out / "dlg0000_3.mel.m2ct")
    assert mel.shape[0] == 80
    assert mel.dtype == np.float32
    assert np.isfinite(mel).all()
    tpm = read_tensor_file(out / "dlg0000_3.tpm.attn.m2ct")
    wpm = read_tensor_file(out / "dlg0000_3.wpm.attn.m2ct")
    assert tpm.ndim == 3 and wpm.ndim == 3  # [heads, phonemes, rows]
    assert np.allclose(tpm.sum(-1), 1.0, atol=1e-4)
    assert (out / "config.yaml").exists()


def test_synthesize_turn_without_history_has_no_attention_dump(workspace):
    out = workspace / "synth0"
    code = main(
        ["synthesize", "--checkpoint", str(workspace / "run" / "checkpoint_final.m2ck"),
         "--dialogue", "dlg0001", "--turn", "0", "--out", str(out)]
    )
    assert code == 0
    assert (out / "dlg0001_0.mel.m2ct").exists()
    assert not (out / "dlg0001_0.tpm.attn.m2ct").exists()


def test_vocoder_hook(workspace, tmp_path):
    out = tmp_path / "voc"
    marker = tmp_path / "marker.txt"
    code = main(
        ["synthesize", "--checkpoint", str(workspace / "run" / "checkpoint_final.m2ck"),
         "--dialogue", "dlg0000", "--turn", "1", "--out", str(out),
         "--vocoder_command", f"cp {{mel}} {marker}"]
    )
    assert code == 0
    assert marker.exists()
    code = main(
        ["synthesize", "--checkpoint", str(workspace / "run" / "checkpoint_final.m2ck"),
         "--dialogue", "dlg0000", "--turn", "1", "--out", str(tmp_path / "voc2"),
         "--vocoder_command", "exit 3"]
    )
    assert code == 1  # vocoder failure is a run failure


def test_ablate_cli(workspace):
    out = workspace / "abl"
    corpus = workspace / "corpus"
    code = main(
        ["ablate", "--manifest", str(corpus / "manifest.jsonl"), "--out", str(out),
         "--names", "M1,M2", "--seed", "3", "--steps", "2", *COMPACT]
    )
    assert code == 0
    rows = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["config"] for r in rows] == ["M1", "M2"]
    assert (out / "M2" / "losses.jsonl").exists()


def test_verify_cli_subset():
    assert main(["verify", "windowing", "cache-roundtrip"]) == 0


def test_usage_errors_exit_2(tmp_path, workspace):
    corpus = workspace / "corpus"
    base = ["train", "--manifest", str(corpus / "manifest.jsonl"),
            "--out", str(tmp_path / "x")]
    assert main(base + ["--bogus_flag", "1"]) == 2  # unknown config key
    assert main(base + ["--d_model"]) == 2  # missing override value
    assert main(["verify", "no-such-suite"]) == 2
    assert main(["train", "--out", str(tmp_path / "y")]) == 2  # no manifest anywhere
    with pytest.raises(SystemExit) as exc:
        main(["not-a-command"])
    assert exc.value.code == 2


def test_validation_failures_exit_1(tmp_path, workspace):
    assert (
        main(["train", "--manifest", str(tmp_path / "absent.jsonl"),
              "--out", str(tmp_path / "z")])
        == 1
    )
    assert (
        main(["synthesize", "--checkpoint", str(tmp_path / "absent.m2ck"),
              "--dialogue", "d", "--turn", "0", "--out", str(tmp_path / "s")])
        == 1
    )
    # synthesize for an unknown dialogue id
    assert (
        main(["synthesize",
              "--checkpoint", str(workspace / "run" / "checkpoint_final.m2ck"),
              "--dialogue", "nope", "--turn", "0", "--out", str(tmp_path / "s2")])
        == 1
    )
    # preprocess in cache mode with nothing cached
    assert (
        main(["preprocess", "--manifest",
              str(workspace / "corpus" / "manifest.jsonl"),
              "--out", str(tmp_path / "p"), "--extractor-mode", "cache", *COMPACT])
        == 1
    )
