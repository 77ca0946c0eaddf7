"""Conversational corpus model: manifest loading, windowing, batching.

A corpus is a set of two-speaker dialogues. Each turn carries phoneme ids
with oracle per-phoneme durations, pitch, and energy, plus a reference to
an 80 x T mel spectrogram stored in the binary tensor format. Context
windows pair a target turn with up to ``c`` preceding turns of the same
dialogue; windows never cross dialogue boundaries.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .extractors import read_tensor_file, read_tensor_header, write_tensor_file
from .seeding import stable_seed

logger = logging.getLogger(__name__)

SPEAKERS = ("A", "B")
N_MEL_CHANNELS = 80

MANIFEST_FIELDS = (
    "dialogue_id",
    "turn_index",
    "speaker",
    "text",
    "phoneme_ids",
    "durations",
    "pitch",
    "energy",
    "mel_path",
)


class ManifestError(Exception):
    """Raised when a manifest or one of its records is invalid."""


@dataclass(frozen=True)
class Turn:
    """One utterance in a dialogue."""

    dialogue_id: str  # owning dialogue
    turn_index: int  # 0-based position within the dialogue
    speaker: str  # "A" or "B"
    text: str  # raw utterance text
    phoneme_ids: tuple[int, ...]  # one id per phoneme, >= 0
    durations: tuple[int, ...]  # frames per phoneme, >= 1
    pitch: tuple[float, ...]  # per-phoneme pitch
    energy: tuple[float, ...]  # per-phoneme energy
    mel_path: Path  # absolute path to the 80 x T mel tensor file
    n_frames: int  # T, equals sum(durations)

    def __post_init__(self):
        n = len(self.phoneme_ids)
        if n < 1:
            raise ValueError(f"{self.label()}: turn has no phonemes")
        if not (len(self.durations) == len(self.pitch) == len(self.energy) == n):
            raise ValueError(
                f"{self.label()}: per-phoneme sequences disagree in length"
            )
        if self.turn_index < 0:
            raise ValueError(f"{self.label()}: negative turn index")
        if self.speaker not in SPEAKERS:
            raise ValueError(f"{self.label()}: speaker must be A or B")
        if any(d < 1 for d in self.durations):
            raise ValueError(f"{self.label()}: durations must be >= 1")
        if any(p < 0 for p in self.phoneme_ids):
            raise ValueError(f"{self.label()}: negative phoneme id")
        if sum(self.durations) != self.n_frames:
            raise ValueError(
                f"{self.label()}: durations sum to {sum(self.durations)} "
                f"but mel has {self.n_frames} frames"
            )

    def label(self) -> str:
        return f"{self.dialogue_id}/turn {self.turn_index}"

    def load_mel(self) -> np.ndarray:
        """Read the 80 x T mel from disk."""
        return read_tensor_file(self.mel_path)


@dataclass(frozen=True)
class Dialogue:
    """An ordered two-speaker conversation."""

    dialogue_id: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        if not self.turns:
            raise ValueError(f"{self.dialogue_id}: dialogue has no turns")
        for i, turn in enumerate(self.turns):
            if turn.dialogue_id != self.dialogue_id:
                raise ValueError(
                    f"{self.dialogue_id}: turn {i} belongs to "
                    f"{turn.dialogue_id!r}"
                )
            if turn.turn_index != i:
                raise ValueError(
                    f"{self.dialogue_id}: gap in turn indices, expected "
                    f"{i} but found {turn.turn_index}"
                )
        for prev, cur in zip(self.turns, self.turns[1:]):
            if prev.speaker == cur.speaker:
                raise ValueError(
                    f"{self.dialogue_id}: speakers do not alternate at "
                    f"turn {cur.turn_index}"
                )

    def __len__(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class ConversationWindow:
    """A target turn plus up to ``c`` preceding turns of its dialogue."""

    history: tuple[Turn, ...]  # oldest first, length <= c
    current: Turn  # the turn to synthesize
    c: int  # memory capacity the window was built with

    def __post_init__(self):
        if len(self.history) > self.c:
            raise ValueError("history longer than memory capacity")
        want = self.current.turn_index - len(self.history)
        for offset, turn in enumerate(self.history):
            if turn.turn_index != want + offset:
                raise ValueError("history indices must immediately precede current")


def window(dialogue: Dialogue, t: int, c: int) -> ConversationWindow:
    """Build the context window for turn ``t`` with memory capacity ``c``.

    History is the up-to-``c`` immediately preceding turns of the same
    dialogue, truncated at the dialogue start so every turn has a window.
    """
    if c < 0:
        raise ValueError(f"memory capacity must be >= 0, got {c}")
    if t < 0 or t >= len(dialogue.turns):
        raise IndexError(
            f"turn index {t} out of range for dialogue "
            f"{dialogue.dialogue_id} with {len(dialogue.turns)} turns"
        )
    lo = max(0, t - c)
    return ConversationWindow(
        history=tuple(dialogue.turns[lo:t]), current=dialogue.turns[t], c=c
    )


def iter_windows(dialogues, c: int):
    """Yield one window per turn, covering each turn exactly once."""
    for dialogue in dialogues:
        for t in range(len(dialogue.turns)):
            yield window(dialogue, t, c)


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------


def _parse_record(record: dict, line_no: int, base_dir: Path) -> Turn:
    missing = [k for k in MANIFEST_FIELDS if k not in record]
    if missing:
        raise ManifestError(f"line {line_no}: missing fields {missing}")
    unknown = [k for k in record if k not in MANIFEST_FIELDS]
    if unknown:
        raise ManifestError(f"line {line_no}: unknown fields {unknown}")
    try:
        dialogue_id = str(record["dialogue_id"])
        turn_index = int(record["turn_index"])
        speaker = str(record["speaker"])
        text = str(record["text"])
        phoneme_ids = tuple(int(x) for x in record["phoneme_ids"])
        durations = tuple(int(x) for x in record["durations"])
        pitch = tuple(float(x) for x in record["pitch"])
        energy = tuple(float(x) for x in record["energy"])
        mel_path = (base_dir / str(record["mel_path"])).resolve()
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"line {line_no}: malformed field value: {exc}") from exc
    if turn_index < 0:
        raise ManifestError(f"line {line_no}: turn_index must be >= 0")
    if not all(math.isfinite(v) for v in pitch + energy):
        raise ManifestError(f"line {line_no}: non-finite pitch or energy")
    if not mel_path.exists():
        raise ManifestError(f"line {line_no}: mel file not found: {mel_path}")
    code, shape = read_tensor_header(mel_path)
    if code != 0 or len(shape) != 2 or shape[0] != N_MEL_CHANNELS:
        raise ManifestError(
            f"line {line_no}: mel file must be a float32 {N_MEL_CHANNELS} x T "
            f"tensor, got dtype code {code} shape {shape}"
        )
    try:
        return Turn(
            dialogue_id=dialogue_id,
            turn_index=turn_index,
            speaker=speaker,
            text=text,
            phoneme_ids=phoneme_ids,
            durations=durations,
            pitch=pitch,
            energy=energy,
            mel_path=mel_path,
            n_frames=int(shape[1]),
        )
    except ValueError as exc:
        raise ManifestError(f"line {line_no}: {exc}") from exc


def load_manifest(path) -> tuple[Dialogue, ...]:
    """Load a line-delimited manifest into validated dialogues.

    Output is canonical regardless of line order: dialogues sorted by id,
    turns sorted by turn index. Every structural violation is reported
    with the offending line number or dialogue.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base_dir = path.parent
    by_dialogue: dict[str, dict[int, Turn]] = {}
    n_records = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid record: {exc}") from exc
            if not isinstance(record, dict):
                raise ManifestError(f"line {line_no}: record must be an object")
            turn = _parse_record(record, line_no, base_dir)
            turns = by_dialogue.setdefault(turn.dialogue_id, {})
            if turn.turn_index in turns:
                raise ManifestError(
                    f"line {line_no}: duplicate turn {turn.label()}"
                )
            turns[turn.turn_index] = turn
            n_records += 1
    if n_records == 0:
        raise ManifestError(f"manifest is empty: {path}")
    dialogues = []
    for dialogue_id in sorted(by_dialogue):
        turns = by_dialogue[dialogue_id]
        ordered = tuple(turns[i] for i in sorted(turns))
        try:
            dialogues.append(Dialogue(dialogue_id=dialogue_id, turns=ordered))
        except ValueError as exc:
            raise ManifestError(str(exc)) from exc
    logger.info(
        "loaded %d dialogues, %d turns from %s", len(dialogues), n_records, path
    )
    return tuple(dialogues)


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded tensors for a list of windows. Masks mark real positions."""

    windows: list[ConversationWindow]
    c: int  # shared memory capacity
    phonemes: torch.Tensor  # [B, L] long, padded with pad_phoneme_id
    phoneme_mask: torch.Tensor  # [B, L] bool, true at real phonemes
    durations: torch.Tensor  # [B, L] long, 0 at padding
    pitch: torch.Tensor  # [B, L] float32, 0 at padding
    energy: torch.Tensor  # [B, L] float32, 0 at padding
    mels: torch.Tensor  # [B, T, 80] float32, 0 at padding
    frame_mask: torch.Tensor  # [B, T] bool, true at real frames
    history_lengths: torch.Tensor  # [B] long, in [0, c]

    def __len__(self) -> int:
        return len(self.windows)


def make_batch(windows, pad_phoneme_id: int, c: int) -> Batch:
    """Right-pad a list of windows into one batch of tensors."""
    windows = list(windows)
    if not windows:
        raise ValueError("cannot batch zero windows")
    for w in windows:
        if w.c != c:
            raise ValueError(
                f"window built with memory capacity {w.c}, batch expects {c}"
            )
    B = len(windows)
    L = max(len(w.current.phoneme_ids) for w in windows)
    T = max(w.current.n_frames for w in windows)
    phonemes = torch.full((B, L), pad_phoneme_id, dtype=torch.long)
    phoneme_mask = torch.zeros((B, L), dtype=torch.bool)
    durations = torch.zeros((B, L), dtype=torch.long)
    pitch = torch.zeros((B, L), dtype=torch.float32)
    energy = torch.zeros((B, L), dtype=torch.float32)
    mels = torch.zeros((B, T, N_MEL_CHANNELS), dtype=torch.float32)
    frame_mask = torch.zeros((B, T), dtype=torch.bool)
    history_lengths = torch.zeros(B, dtype=torch.long)
    for b, w in enumerate(windows):
        turn = w.current
        n = len(turn.phoneme_ids)
        phonemes[b, :n] = torch.tensor(turn.phoneme_ids, dtype=torch.long)
        phoneme_mask[b, :n] = True
        durations[b, :n] = torch.tensor(turn.durations, dtype=torch.long)
        pitch[b, :n] = torch.tensor(turn.pitch, dtype=torch.float32)
        energy[b, :n] = torch.tensor(turn.energy, dtype=torch.float32)
        mel = turn.load_mel()  # [80, T_b]
        mels[b, : turn.n_frames] = torch.from_numpy(mel.T.copy())
        frame_mask[b, : turn.n_frames] = True
        history_lengths[b] = len(w.history)
    return Batch(
        windows=windows,
        c=c,
        phonemes=phonemes,
        phoneme_mask=phoneme_mask,
        durations=durations,
        pitch=pitch,
        energy=energy,
        mels=mels,
        frame_mask=frame_mask,
        history_lengths=history_lengths,
    )


# ---------------------------------------------------------------------------
# Corpus statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    """Pitch and energy ranges used to normalize variance targets."""

    pitch_min: float
    pitch_max: float
    energy_min: float
    energy_max: float
    n_turns: int

    def to_dict(self) -> dict:
        return {
            "pitch_min": self.pitch_min,
            "pitch_max": self.pitch_max,
            "energy_min": self.energy_min,
            "energy_max": self.energy_max,
            "n_turns": self.n_turns,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusStats":
        return cls(
            pitch_min=float(data["pitch_min"]),
            pitch_max=float(data["pitch_max"]),
            energy_min=float(data["energy_min"]),
            energy_max=float(data["energy_max"]),
            n_turns=int(data["n_turns"]),
        )


def compute_corpus_stats(dialogues) -> CorpusStats:
    """Min/max of per-phoneme pitch and energy over the given dialogues."""
    pitch: list[float] = []
    energy: list[float] = []
    n_turns = 0
    for dialogue in dialogues:
        for turn in dialogue.turns:
            pitch.extend(turn.pitch)
            energy.extend(turn.energy)
            n_turns += 1
    if n_turns == 0:
        raise ValueError("cannot compute statistics over an empty corpus")
    return CorpusStats(
        pitch_min=min(pitch),
        pitch_max=max(pitch),
        energy_min=min(energy),
        energy_max=max(energy),
        n_turns=n_turns,
    )


# ---------------------------------------------------------------------------
# Toy corpus generation
# ---------------------------------------------------------------------------

_CONSONANTS = "bdfgklmnprst"
_VOWELS = "aeiou"

MIN_PHONEMES, MAX_PHONEMES = 4, 16
MIN_FRAMES, MAX_FRAMES = 20, 80


def _syllable(phoneme_id: int) -> str:
    return _CONSONANTS[phoneme_id % len(_CONSONANTS)] + _VOWELS[
        (phoneme_id // len(_CONSONANTS)) % len(_VOWELS)
    ]


def _phoneme_profile(seed: int, phoneme_id: int):
    """Fixed per-phoneme mel template and pitch/energy bases."""
    rng = np.random.default_rng(stable_seed("toy-phoneme", seed, phoneme_id))
    template = rng.uniform(-1.0, 1.0, size=N_MEL_CHANNELS)
    pitch_base = rng.uniform(100.0, 300.0)
    energy_base = rng.uniform(0.2, 0.9)
    return template, pitch_base, energy_base


def gen_toy_corpus(
    seed: int,
    n_dialogues: int,
    turns_per_dialogue: int,
    out_dir,
    vocab_size: int = 40,
) -> Path:
    """Generate a small synthetic corpus and return the manifest path.

    Mel frames are per-phoneme templates plus small noise, and pitch and
    energy track the phoneme identity, so the mapping from phonemes to
    targets is learnable at desk scale. Output is byte-deterministic in
    (seed, n_dialogues, turns_per_dialogue, vocab_size).
    """
    if n_dialogues < 1:
        raise ValueError("n_dialogues must be >= 1")
    if turns_per_dialogue < 2:
        raise ValueError("turns_per_dialogue must be >= 2")
    if vocab_size < 2:
        raise ValueError("vocab_size must leave room for ids above the pad id")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    profiles = {
        pid: _phoneme_profile(seed, pid) for pid in range(1, vocab_size)
    }
    records = []
    for d in range(n_dialogues):
        dialogue_id = f"dlg{d:04d}"
        first = SPEAKERS[d % 2]
        for t in range(turns_per_dialogue):
            rng = np.random.default_rng(stable_seed("toy-turn", seed, d, t))
            n_ph = int(rng.integers(MIN_PHONEMES, MAX_PHONEMES + 1))
            ids = rng.integers(1, vocab_size, size=n_ph)
            total = int(rng.integers(max(n_ph, MIN_FRAMES), MAX_FRAMES + 1))
            extra = rng.multinomial(total - n_ph, np.full(n_ph, 1.0 / n_ph))
            durations = extra + 1
            mel_cols = []
            pitch = []
            energy = []
            for pid, dur in zip(ids, durations):
                template, pitch_base, energy_base = profiles[int(pid)]
                noise = rng.standard_normal((N_MEL_CHANNELS, int(dur))) * 0.1
                mel_cols.append(template[:, None] + noise)
                pitch.append(round(pitch_base + float(rng.normal(0.0, 2.0)), 4))
                energy.append(round(energy_base + float(rng.normal(0.0, 0.02)), 4))
            mel = np.concatenate(mel_cols, axis=1).astype(np.float32)
            rel_mel = Path("mels") / dialogue_id / f"{t}.mel.m2ct"
            write_tensor_file(out_dir / rel_mel, mel)
            records.append(
                {
                    "dialogue_id": dialogue_id,
                    "turn_index": t,
                    "speaker": SPEAKERS[(SPEAKERS.index(first) + t) % 2],
                    "text": " ".join(_syllable(int(pid)) for pid in ids),
                    "phoneme_ids": [int(x) for x in ids],
                    "durations": [int(x) for x in durations],
                    "pitch": pitch,
                    "energy": energy,
                    "mel_path": rel_mel.as_posix(),
                }
            )
    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    logger.info(
        "wrote toy corpus: %d dialogues x %d turns at %s",
        n_dialogues,
        turns_per_dialogue,
        out_dir,
    )
    return manifest_path
