"""Utterance/sequence feature extraction and the binary feature cache.

Two interchangeable feature sources exist:

* deterministic stubs, pure functions of (turn content, dim, seed), used
  for desk-scale runs and all tests;
* a file cache of precomputed tensors, filled offline by real pretrained
  encoders, read through the same provider interface.

Cache file format (bit-exact, little-endian):

    magic  4 bytes  b"M2CT"
    u32    version, currently 1
    u8     dtype code (0 = float32; cache files always use 0)
    u8     rank, 1..3
    u32*r  dims
    bytes  payload, row-major

One file per key, path pattern ``<dialogue_id>/<turn_index>.<kind>.m2ct``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .seeding import stable_seed

if TYPE_CHECKING:
    from .corpus import Turn

MAGIC = b"M2CT"
FORMAT_VERSION = 1

KIND_TEXT_UTTERANCE = "text-utterance"
KIND_TEXT_SEQUENCE = "text-sequence"
KIND_ACOUSTIC_UTTERANCE = "acoustic-utterance"
KIND_ACOUSTIC_SEQUENCE = "acoustic-sequence"
KINDS = (
    KIND_TEXT_UTTERANCE,
    KIND_TEXT_SEQUENCE,
    KIND_ACOUSTIC_UTTERANCE,
    KIND_ACOUSTIC_SEQUENCE,
)

# Cache files on disk only ever use code 0; the other codes exist for the
# checkpoint container, which reuses this codec.
_DTYPE_CODES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<u1"),
}
_CODE_FOR_KIND = {str(dt): code for code, dt in _DTYPE_CODES.items()}

_MAX_DIM = 2**32 - 1


class CacheFormatError(Exception):
    """Raised for malformed, truncated, or wrong-version cache files."""


class MissingFeatureError(Exception):
    """Raised when required cache entries are absent; carries the keys."""

    def __init__(self, keys):
        self.keys = list(keys)
        listing = ", ".join(str(k) for k in self.keys)
        super().__init__(f"missing cached features: {listing}")


@dataclass(frozen=True)
class CacheKey:
    """Identifies one extractor output for one turn."""

    dialogue_id: str
    turn_index: int
    kind: str

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown extractor kind: {self.kind!r}")

    def relative_path(self) -> Path:
        return Path(self.dialogue_id) / f"{self.turn_index}.{self.kind}.m2ct"

    def __str__(self) -> str:
        return f"{self.dialogue_id}/{self.turn_index}:{self.kind}"


def _dtype_code(arr: np.ndarray) -> int:
    key = str(arr.dtype.newbyteorder("<"))
    if key not in _CODE_FOR_KIND:
        raise CacheFormatError(f"unsupported dtype {arr.dtype}")
    return _CODE_FOR_KIND[key]


def encode_tensor(arr: np.ndarray) -> bytes:
    """Serialize an array (rank 1..3) to the versioned binary format."""
    arr = np.ascontiguousarray(arr)
    if arr.ndim < 1 or arr.ndim > 3:
        raise CacheFormatError(f"rank must be 1..3, got {arr.ndim}")
    for dim in arr.shape:
        if dim > _MAX_DIM:
            raise CacheFormatError(f"dimension {dim} overflows u32")
    code = _dtype_code(arr)
    header = MAGIC + struct.pack("<IBB", FORMAT_VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(_DTYPE_CODES[code], copy=False).tobytes(order="C")
    return header + payload


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse bytes produced by encode_tensor. Bit-exact round trip."""
    if len(data) < 10:
        raise CacheFormatError("truncated file: header incomplete")
    if data[:4] != MAGIC:
        raise CacheFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, code, rank = struct.unpack("<IBB", data[4:10])
    if version != FORMAT_VERSION:
        raise CacheFormatError(f"unsupported format version {version}")
    if code not in _DTYPE_CODES:
        raise CacheFormatError(f"unknown dtype code {code}")
    if rank < 1 or rank > 3:
        raise CacheFormatError(f"rank must be 1..3, got {rank}")
    dims_end = 10 + 4 * rank
    if len(data) < dims_end:
        raise CacheFormatError("truncated file: dims incomplete")
    shape = struct.unpack(f"<{rank}I", data[10:dims_end])
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = data[dims_end:]
    if len(payload) != expected:
        raise CacheFormatError(
            f"payload size {len(payload)} != expected {expected} for shape {shape}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def read_tensor_header(path) -> tuple[int, tuple[int, ...]]:
    """Read (dtype code, shape) without loading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(10)
        if len(head) < 10:
            raise CacheFormatError(f"{path}: truncated file: header incomplete")
        if head[:4] != MAGIC:
            raise CacheFormatError(f"{path}: bad magic {head[:4]!r}")
        version, code, rank = struct.unpack("<IBB", head[4:10])
        if version != FORMAT_VERSION:
            raise CacheFormatError(f"{path}: unsupported format version {version}")
        if rank < 1 or rank > 3:
            raise CacheFormatError(f"{path}: rank must be 1..3, got {rank}")
        dims = fh.read(4 * rank)
        if len(dims) < 4 * rank:
            raise CacheFormatError(f"{path}: truncated file: dims incomplete")
        return code, struct.unpack(f"<{rank}I", dims)


def write_tensor_file(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(arr))
    return path


def read_tensor_file(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    try:
        return decode_tensor(data)
    except CacheFormatError as exc:
        raise CacheFormatError(f"{path}: {exc}") from exc


def write_cache(root, key: CacheKey, arr: np.ndarray) -> Path:
    """Write one cache entry (always float32 on disk)."""
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in tensor for {key}")
    return write_tensor_file(Path(root) / key.relative_path(), arr.astype(np.float32))


def read_cache(root, key: CacheKey) -> np.ndarray:
    path = Path(root) / key.relative_path()
    if not path.exists():
        raise MissingFeatureError([key])
    return read_tensor_file(path)


# ---------------------------------------------------------------------------
# Deterministic stub extractors
# ---------------------------------------------------------------------------


def _unit_norm(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        vec = vec.copy()
        vec[0] = 1.0
        norm = 1.0
    return (vec / norm).astype(np.float32)


def stub_text_utterance(text: str, dim: int, seed: int) -> np.ndarray:
    """Unit-norm pseudo-embedding of an utterance's text.

    Deterministic in (text, dim, seed): the text is hashed to seed a
    generator that draws the vector. Empty text is a valid input.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(stable_seed("text-utterance", seed, dim, text))
    return _unit_norm(rng.standard_normal(dim))


def _affine_projection(tag: str, seed: int, dim: int, n_in: int):
    rng = np.random.default_rng(stable_seed(tag, seed, dim, n_in))
    weight = rng.standard_normal((dim, n_in)) / math.sqrt(n_in)
    # Fixed bias keeps degenerate inputs (e.g. an all-zero mel) away from
    # the zero vector, so normalization is always well defined.
    bias = rng.standard_normal(dim) / math.sqrt(n_in)
    return weight, bias


def stub_acoustic_utterance(mel: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """Unit-norm pseudo-embedding of a mel spectrogram (80 x T).

    Summarizes the mel by per-channel mean and std (160 values), then
    applies a seed-deterministic affine projection to ``dim``.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] != 80:
        raise ValueError(f"expected an 80 x T mel, got shape {mel.shape}")
    if mel.shape[1] < 1:
        raise ValueError("mel must have at least one frame")
    if not np.all(np.isfinite(mel)):
        raise ValueError("non-finite entries in mel")
    feats = np.concatenate([mel.mean(axis=1), mel.std(axis=1)])
    weight, bias = _affine_projection("acoustic-utterance-proj", seed, dim, 160)
    return _unit_norm(weight @ feats + bias)


def stub_sequence(turn: "Turn", modality: str, dim: int, seed: int) -> np.ndarray:
    """Per-token (text) or per-frame-pair (acoustic) feature sequence.

    Text rows are independent unit-norm draws hashed from (text, row).
    Acoustic rows project consecutive frame pairs, halving the frame rate
    the way self-supervised speech features run coarser than the mel.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if modality == "text":
        n_rows = len(turn.phoneme_ids)
        rows = np.empty((n_rows, dim), dtype=np.float32)
        for i in range(n_rows):
            rng = np.random.default_rng(
                stable_seed("text-sequence", seed, dim, turn.text, i)
            )
            rows[i] = _unit_norm(rng.standard_normal(dim))
        return rows
    if modality == "acoustic":
        mel = read_tensor_file(turn.mel_path).astype(np.float64)
        n_frames = mel.shape[1]
        n_rows = (n_frames + 1) // 2
        weight, bias = _affine_projection("acoustic-sequence-proj", seed, dim, 160)
        padded = np.zeros((80, 2 * n_rows))
        padded[:, :n_frames] = mel
        pairs = padded.reshape(80, n_rows, 2).transpose(1, 0, 2).reshape(n_rows, 160)
        return (pairs @ weight.T + bias).astype(np.float32)
    raise ValueError(f"unknown modality: {modality!r}")


# ---------------------------------------------------------------------------
# Providers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureDims:
    """Expected dimensionality per extractor kind."""

    text_utterance: int = 512
    acoustic_utterance: int = 768
    text_sequence: int = 768
    acoustic_sequence: int = 768

    def for_kind(self, kind: str) -> int:
        return {
            KIND_TEXT_UTTERANCE: self.text_utterance,
            KIND_ACOUSTIC_UTTERANCE: self.acoustic_utterance,
            KIND_TEXT_SEQUENCE: self.text_sequence,
            KIND_ACOUSTIC_SEQUENCE: self.acoustic_sequence,
        }[kind]


def _utterance_kind(modality: str) -> str:
    if modality == "text":
        return KIND_TEXT_UTTERANCE
    if modality == "acoustic":
        return KIND_ACOUSTIC_UTTERANCE
    raise ValueError(f"unknown modality: {modality!r}")


def _sequence_kind(modality: str) -> str:
    if modality == "text":
        return KIND_TEXT_SEQUENCE
    if modality == "acoustic":
        return KIND_ACOUSTIC_SEQUENCE
    raise ValueError(f"unknown modality: {modality!r}")


class StubFeatureProvider:
    """Computes stub features on demand; results are memoized per key."""

    def __init__(self, dims: FeatureDims, seed: int):
        self.dims = dims
        self.seed = seed
        self._memo: dict[CacheKey, np.ndarray] = {}

    def _get(self, turn: "Turn", kind: str) -> np.ndarray:
        key = CacheKey(turn.dialogue_id, turn.turn_index, kind)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        dim = self.dims.for_kind(kind)
        if kind == KIND_TEXT_UTTERANCE:
            value = stub_text_utterance(turn.text, dim, self.seed)
        elif kind == KIND_ACOUSTIC_UTTERANCE:
            mel = read_tensor_file(turn.mel_path)
            value = stub_acoustic_utterance(mel, dim, self.seed)
        else:
            value = stub_sequence(turn, kind.split("-")[0], dim, self.seed)
        self._memo[key] = value
        return value

    def utterance(self, turn: "Turn", modality: str) -> np.ndarray:
        return self._get(turn, _utterance_kind(modality))

    def sequence(self, turn: "Turn", modality: str) -> np.ndarray:
        return self._get(turn, _sequence_kind(modality))


class CachedFeatureProvider:
    """Reads precomputed features from a cache directory."""

    def __init__(self, root, dims: FeatureDims):
        self.root = Path(root)
        self.dims = dims
        self._memo: dict[CacheKey, np.ndarray] = {}

    def _get(self, turn: "Turn", kind: str) -> np.ndarray:
        key = CacheKey(turn.dialogue_id, turn.turn_index, kind)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        value = read_cache(self.root, key)
        expected = self.dims.for_kind(kind)
        if value.shape[-1] != expected:
            raise CacheFormatError(
                f"{key}: cached dim {value.shape[-1]} != configured {expected}"
            )
        self._memo[key] = value
        return value

    def utterance(self, turn: "Turn", modality: str) -> np.ndarray:
        return self._get(turn, _utterance_kind(modality))

    def sequence(self, turn: "Turn", modality: str) -> np.ndarray:
        return self._get(turn, _sequence_kind(modality))


def fill_cache(root, dialogues, dims: FeatureDims, seed: int) -> int:
    """Compute stub features for every turn and write them to the cache.

    Returns the number of files written. Deterministic in (corpus, seed),
    so repeated runs rewrite byte-identical files.
    """
    provider = StubFeatureProvider(dims, seed)
    count = 0
    for dialogue in dialogues:
        for turn in dialogue.turns:
            for kind in KINDS:
                arr = provider._get(turn, kind)
                write_cache(root, CacheKey(turn.dialogue_id, turn.turn_index, kind), arr)
                count += 1
    return count


def missing_cache_keys(root, dialogues) -> list[CacheKey]:
    """All cache keys required for the corpus that have no file yet."""
    root = Path(root)
    missing = []
    for dialogue in dialogues:
        for turn in dialogue.turns:
            for kind in KINDS:
                key = CacheKey(turn.dialogue_id, turn.turn_index, kind)
                if not (root / key.relative_path()).exists():
                    missing.append(key)
    return missing
