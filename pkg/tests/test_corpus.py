"""Corpus records, windowing, manifests, batching, and the toy generator."""

import dataclasses
import json

import numpy as np
import pytest
import torch

from m2ctts import (
    Dialogue,
    ManifestError,
    Turn,
    compute_corpus_stats,
    CorpusStats,
    gen_toy_corpus,
    iter_windows,
    load_manifest,
    make_batch,
    window,
)
from m2ctts.corpus import MANIFEST_FIELDS


def _turn(dialogue_id="d", turn_index=0, speaker="A", n_phones=2, n_frames=4):
    per = n_frames // n_phones
    durations = [per] * n_phones
    durations[-1] += n_frames - per * n_phones
    return Turn(
        dialogue_id=dialogue_id,
        turn_index=turn_index,
        speaker=speaker,
        text="ta da",
        phoneme_ids=tuple(range(1, n_phones + 1)),
        durations=tuple(durations),
        pitch=tuple([150.0] * n_phones),
        energy=tuple([0.5] * n_phones),
        mel_path="missing.m2ct",
        n_frames=n_frames,
    )


# --- record validation ------------------------------------------------------


def test_turn_validation_errors():
    with pytest.raises(ValueError):
        dataclasses.replace(_turn(), speaker="C")
    with pytest.raises(ValueError):
        dataclasses.replace(_turn(), pitch=(150.0,))
    with pytest.raises(ValueError):
        dataclasses.replace(_turn(), durations=(0, 4))
    with pytest.raises(ValueError):
        dataclasses.replace(_turn(), phoneme_ids=(-1, 2))
    with pytest.raises(ValueError):
        dataclasses.replace(_turn(), n_frames=5)
    with pytest.raises(ValueError):
        dataclasses.replace(_turn(), turn_index=-1)


def test_dialogue_validation():
    a = _turn(turn_index=0, speaker="A")
    b = _turn(turn_index=1, speaker="B")
    Dialogue("d", (a, b))
    with pytest.raises(ValueError):
        Dialogue("d", (a, dataclasses.replace(b, turn_index=2)))
    with pytest.raises(ValueError):
        Dialogue("d", (a, dataclasses.replace(b, speaker="A")))
    with pytest.raises(ValueError):
        Dialogue("d", (dataclasses.replace(a, dialogue_id="other"), b))
    with pytest.raises(ValueError):
        Dialogue("d", ())


# --- windowing ---------------------------------------------------------------


def test_window_contents(dialogues):
    d = dialogues[0]
    w = window(d, 3, 2)
    assert w.current is d.turns[3]
    assert [t.turn_index for t in w.history] == [1, 2]
    w0 = window(d, 0, 2)
    assert w0.history == ()
    assert len(window(d, 3, 0).history) == 0


def test_window_errors(dialogues):
    d = dialogues[0]
    with pytest.raises(IndexError):
        window(d, len(d.turns), 2)
    with pytest.raises(IndexError):
        window(d, -1, 2)
    with pytest.raises(ValueError):
        window(d, 0, -1)


def test_iter_windows_covers_every_turn(dialogues):
    ws = list(iter_windows(dialogues, 4))
    assert len(ws) == sum(len(d.turns) for d in dialogues)
    labels = {(w.current.dialogue_id, w.current.turn_index) for w in ws}
    assert len(labels) == len(ws)


# --- manifest I/O -----------------------------------------------------------


def test_load_manifest_roundtrip(manifest_path, dialogues):
    assert len(dialogues) == 2
    assert [d.dialogue_id for d in dialogues] == sorted(
        d.dialogue_id for d in dialogues
    )
    for d in dialogues:
        assert [t.turn_index for t in d.turns] == list(range(len(d.turns)))


def _write_manifest(path, rows):
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")


def _toy_row(corpus_dir):
    line = (corpus_dir / "manifest.jsonl").read_text().splitlines()[0]
    return json.loads(line)


def test_manifest_errors(tmp_path, corpus_dir):
    row = _toy_row(corpus_dir)
    # the mel paths inside the row are relative to the corpus dir
    def write(rows, name):
        p = corpus_dir / name  # same dir so mel paths resolve
        _write_manifest(p, rows)
        return p

    p = tmp_path / "empty.jsonl"
    p.write_text("", encoding="utf-8")
    with pytest.raises(ManifestError):
        load_manifest(p)

    bad = dict(row)
    bad["extra_field"] = 1
    with pytest.raises(ManifestError) as err:
        load_manifest(write([bad], "m1.jsonl"))
    assert "line 1" in str(err.value)

    bad = dict(row)
    del bad["speaker"]
    with pytest.raises(ManifestError):
        load_manifest(write([bad], "m2.jsonl"))

    with pytest.raises(ManifestError):
        load_manifest(write([row, row], "m3.jsonl"))  # duplicate turn

    bad = dict(row)
    bad["mel_path"] = "nowhere.m2ct"
    with pytest.raises(ManifestError):
        load_manifest(write([bad], "m4.jsonl"))

    (corpus_dir / "m5.jsonl").write_text("not json\n", encoding="utf-8")
    with pytest.raises(ManifestError):
        load_manifest(corpus_dir / "m5.jsonl")
    for name in ("m1", "m2", "m3", "m4", "m5"):
        (corpus_dir / f"{name}.jsonl").unlink()


def test_manifest_fields_documented():
    assert set(MANIFEST_FIELDS) == {
        "dialogue_id",
        "turn_index",
        "speaker",
        "text",
        "phoneme_ids",
        "durations",
        "pitch",
        "energy",
        "mel_path",
    }


# --- batching ----------------------------------------------------------------


def test_make_batch_shapes_and_masks(dialogues):
    ws = [window(dialogues[0], t, 4) for t in (0, 3)]
    batch = make_batch(ws, pad_phoneme_id=0, c=4)
    B = 2
    L = max(len(w.current.phoneme_ids) for w in ws)
    T = max(w.current.n_frames for w in ws)
    assert batch.phonemes.shape == (B, L)
    assert batch.phonemes.dtype == torch.long
    assert batch.mels.shape == (B, T, 80)
    assert batch.frame_mask.shape == (B, T)
    assert batch.history_lengths.tolist() == [0, 3]
    for i, w in enumerate(ws):
        n_l = len(w.current.phoneme_ids)
        n_t = w.current.n_frames
        assert batch.phoneme_mask[i, :n_l].all()
        assert not batch.phoneme_mask[i, n_l:].any()
        assert batch.frame_mask[i, :n_t].all()
        assert not batch.frame_mask[i, n_t:].any()
        # padding regions are exactly zero
        assert batch.phonemes[i, n_l:].eq(0).all()
        assert batch.durations[i, n_l:].eq(0).all()
        assert batch.mels[i, n_t:].eq(0).all()
        # stored mel is [80, T]; batch carries [T, 80]
        stored = w.current.load_mel()
        assert np.allclose(batch.mels[i, :n_t].numpy(), stored.T)
        assert int(batch.durations[i].sum()) == n_t


def test_make_batch_errors(dialogues):
    with pytest.raises(ValueError):
        make_batch([], 0, 4)
    w = window(dialogues[0], 3, 4)
    with pytest.raises(ValueError):
        make_batch([w], 0, 2)  # window built with a different capacity


# --- stats and toy generation -------------------------------------------------


def test_corpus_stats_match_manual(dialogues):
    stats = compute_corpus_stats(dialogues)
    pitch = [p for d in dialogues for t in d.turns for p in t.pitch]
    energy = [e for d in dialogues for t in d.turns for e in t.energy]
    assert stats.pitch_min == min(pitch)
    assert stats.pitch_max == max(pitch)
    assert stats.energy_min == min(energy)
    assert stats.energy_max == max(energy)
    assert stats.n_turns == sum(len(d.turns) for d in dialogues)
    assert CorpusStats.from_dict(stats.to_dict()) == stats


def test_gen_toy_deterministic_and_self_consistent(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    gen_toy_corpus(11, 2, 3, a)
    gen_toy_corpus(11, 2, 3, b)
    ma = (a / "manifest.jsonl").read_bytes()
    assert ma == (b / "manifest.jsonl").read_bytes()
    da = load_manifest(a / "manifest.jsonl")
    for d in da:
        speakers = [t.speaker for t in d.turns]
        assert all(
            s1 != s2 for s1, s2 in zip(speakers, speakers[1:])
        )  # strict alternation
        for t in d.turns:
            mel = t.load_mel()
            assert mel.shape == (80, t.n_frames)
            rel = t.mel_path
            assert (
                a / "mels" / d.dialogue_id / f"{t.turn_index}.mel.m2ct"
            ).read_bytes() == (
                b / "mels" / d.dialogue_id / f"{t.turn_index}.mel.m2ct"
            ).read_bytes(), rel
    # different seeds give different corpora
    c = tmp_path / "c"
    gen_toy_corpus(12, 2, 3, c)
    assert (c / "manifest.jsonl").read_bytes() != ma
