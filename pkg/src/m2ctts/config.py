"""Run configuration, ablation rows, and config hashing.

One flat dataclass carries every tunable. Configs load from a YAML file
and accept command-line overrides; unknown keys are rejected so typos
fail loudly. The canonical JSON form is hashed into checkpoints and
echoed into every output directory for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import yaml

from .extractors import FeatureDims

SEED_ENV_VAR = "M2CTTS_SEED"


class ConfigError(Exception):
    """Raised for unknown keys, bad values, or inconsistent settings."""


# name -> (tum, wum, tpm, wpm)
ABLATION_ROWS = {
    "M1": (False, False, False, False),
    "M2": (True, False, False, False),
    "M3": (False, True, False, False),
    "M4": (True, False, True, False),
    "M5": (False, True, False, True),
    "M6": (True, True, False, False),
    "M7": (True, True, True, True),
}


@dataclass(frozen=True)
class AblationConfig:
    """Which context modules are active. Named rows are fixed."""

    name: str  # M1..M7 or "custom"
    tum: bool  # coarse text context
    wum: bool  # coarse acoustic context
    tpm: bool  # fine text context
    wpm: bool  # fine acoustic context

    def __post_init__(self):
        if self.name in ABLATION_ROWS:
            if (self.tum, self.wum, self.tpm, self.wpm) != ABLATION_ROWS[self.name]:
                raise ConfigError(
                    f"ablation {self.name} does not permit custom module flags"
                )
        elif self.name != "custom":
            raise ConfigError(f"unknown ablation name: {self.name!r}")

    @property
    def ppm(self) -> bool:
        """Prosody prediction runs iff a coarse module feeds it."""
        return self.tum or self.wum

    @property
    def any_module(self) -> bool:
        return self.tum or self.wum or self.tpm or self.wpm

    @classmethod
    def from_name(cls, name: str) -> "AblationConfig":
        if name not in ABLATION_ROWS:
            raise ConfigError(f"unknown ablation name: {name!r}")
        tum, wum, tpm, wpm = ABLATION_ROWS[name]
        return cls(name=name, tum=tum, wum=wum, tpm=tpm, wpm=wpm)

    @classmethod
    def custom(cls, tum=False, wum=False, tpm=False, wpm=False) -> "AblationConfig":
        return cls(name="custom", tum=tum, wum=wum, tpm=tpm, wpm=wpm)


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of the pipeline, with desk-scale defaults."""

    # data
    manifest: Optional[str] = None  # corpus manifest path
    preprocess_dir: Optional[str] = None  # stats + feature cache location
    memory_capacity: int = 4  # history turns per window (c)
    vocab_size: int = 40
    pad_phoneme_id: int = 0
    # extractors
    extractor_mode: str = "stub"  # stub | cache
    extractor_seed: int = 0
    text_utterance_dim: int = 512
    acoustic_utterance_dim: int = 768
    text_sequence_dim: int = 768
    acoustic_sequence_dim: int = 768
    # model
    d_model: int = 256
    heads: int = 2
    encoder_blocks: int = 4
    decoder_blocks: int = 4
    ffn_hidden: int = 1024
    ffn_kernel_1: int = 9
    ffn_kernel_2: int = 1
    memory_kernel: int = 3  # conv kernel of the fine-context modules
    style_dim: int = 256
    wpm_speaker_ids: bool = True  # add speaker ids to acoustic memory rows
    variance_hidden: int = 256
    variance_kernel: int = 3
    pitch_bins: int = 256
    energy_bins: int = 256
    # prosody constraint
    prosody_weight: float = 1.0
    prosody_reduction: str = "mean"  # mean | sum over the feature axis
    # training
    ablation: str = "M7"
    learning_rate: float = 1e-3
    warmup_steps: int = 50
    batch_size: int = 4
    steps: int = 500
    seed: Optional[int] = None  # None defers to env var, then 0
    val_fraction: float = 0.125  # fraction of dialogues held out
    checkpoint_interval: int = 100
    log_interval: int = 10
    # synthesis
    vocoder_command: Optional[str] = None  # subprocess template with {mel}

    def __post_init__(self):
        if self.extractor_mode not in ("stub", "cache"):
            raise ConfigError(f"extractor_mode must be stub or cache")
        if self.prosody_reduction not in ("mean", "sum"):
            raise ConfigError("prosody_reduction must be mean or sum")
        if self.memory_capacity < 0:
            raise ConfigError("memory_capacity must be >= 0")
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        for name in ("ffn_kernel_1", "ffn_kernel_2", "memory_kernel", "variance_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be odd and positive, got {k}")
        for name in (
            "text_utterance_dim",
            "acoustic_utterance_dim",
            "text_sequence_dim",
            "acoustic_sequence_dim",
        ):
            if getattr(self, name) < 2 or getattr(self, name) % 2 != 0:
                raise ConfigError(f"{name} must be a positive even integer")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if not 0 <= self.pad_phoneme_id < self.vocab_size:
            raise ConfigError("pad_phoneme_id must lie in the vocabulary")
        if self.pitch_bins < 2 or self.energy_bins < 2:
            raise ConfigError("pitch_bins and energy_bins must be >= 2")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.checkpoint_interval < 1 or self.log_interval < 1:
            raise ConfigError("intervals must be >= 1")
        AblationConfig.from_name(self.ablation)

    # -- derived views ----------------------------------------------------

    @property
    def ffn_kernels(self) -> tuple[int, int]:
        return (self.ffn_kernel_1, self.ffn_kernel_2)

    def ablation_config(self) -> AblationConfig:
        return AblationConfig.from_name(self.ablation)

    def feature_dims(self) -> FeatureDims:
        return FeatureDims(
            text_utterance=self.text_utterance_dim,
            acoustic_utterance=self.acoustic_utterance_dim,
            text_sequence=self.text_sequence_dim,
            acoustic_sequence=self.acoustic_sequence_dim,
        )

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def field_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = [k for k in data if k not in known]
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        coerced = {
            name: _coerce(value, known[name].type, name)
            for name, value in data.items()
        }
        try:
            return cls(**coerced)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file must hold a mapping: {path}")
        return cls.from_dict(data)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = self.to_dict()
        unknown = [k for k in overrides if k not in merged]
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(overrides)
        return RunConfig.from_dict(merged)


_TRUE_WORDS = {"true", "yes", "on", "1"}
_FALSE_WORDS = {"false", "no", "off", "0"}


def _coerce(value, declared_type, name: str):
    """Coerce a YAML or command-line value to a config field's type."""
    if isinstance(declared_type, str):
        hints = typing.get_type_hints(RunConfig)
        declared_type = hints[name]
    origin = typing.get_origin(declared_type)
    if origin is typing.Union:  # Optional[...]
        args = [a for a in typing.get_args(declared_type) if a is not type(None)]
        if value is None or (isinstance(value, str) and value.lower() == "none"):
            return None
        declared_type = args[0]
    if declared_type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            low = value.strip().lower()
            if low in _TRUE_WORDS:
                return True
            if low in _FALSE_WORDS:
                return False
        raise ConfigError(f"{name}: cannot read {value!r} as a boolean")
    if declared_type is int:
        if isinstance(value, bool):
            raise ConfigError(f"{name}: expected an integer, got a boolean")
        try:
            if isinstance(value, str):
                return int(value, 0)
            if isinstance(value, int):
                return value
            raise ValueError(value)
        except ValueError as exc:
            raise ConfigError(f"{name}: cannot read {value!r} as an integer") from exc
    if declared_type is float:
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: cannot read {value!r} as a number") from exc
    if declared_type is str:
        return str(value)
    raise ConfigError(f"{name}: unsupported config field type {declared_type}")


def resolve_seed(cli_seed: Optional[int], config: RunConfig) -> int:
    """Seed precedence: command line, then config, then env var, then 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if config.seed is not None:
        return int(config.seed)
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {env!r}"
            ) from exc
    return 0
