"""Loss aggregation, deterministic training loop, checkpoints, ablations.

The loop is stateless in its data order: the window permutation of epoch
``e`` is derived from (seed, e), so resuming from a checkpoint needs
only the step counter to reproduce the uninterrupted run bit for bit.
Checkpoints are a single self-describing binary file whose tensor blobs
reuse the cache codec, so identical runs produce identical files.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import AblationConfig, RunConfig
from .corpus import (
    Batch,
    CorpusStats,
    compute_corpus_stats,
    iter_windows,
    load_manifest,
    make_batch,
)
from .extractors import (
    CachedFeatureProvider,
    MissingFeatureError,
    StubFeatureProvider,
    decode_tensor,
    encode_tensor,
    fill_cache,
    missing_cache_keys,
)
from .model import ConversationalTTS, ModelOutput, build_model, features_for_batch
from .prosody import prosody_loss
from .seeding import stable_seed

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"M2CK"
CHECKPOINT_VERSION = 1


class LossError(Exception):
    """Raised when a loss term is non-finite, naming the term."""


class DivergenceError(Exception):
    """Raised when the total training loss becomes non-finite."""


class CheckpointError(Exception):
    """Raised for malformed checkpoints or config mismatches."""


@dataclass
class LossBreakdown:
    """All loss terms as graph-carrying scalars."""

    mel_l1: torch.Tensor
    pitch_mse: torch.Tensor
    energy_mse: torch.Tensor
    logdur_mse: torch.Tensor
    prosody_mse: torch.Tensor
    total: torch.Tensor

    def to_dict(self) -> dict:
        return {
            "mel_l1": float(self.mel_l1.detach()),
            "pitch_mse": float(self.pitch_mse.detach()),
            "energy_mse": float(self.energy_mse.detach()),
            "logdur_mse": float(self.logdur_mse.detach()),
            "prosody_mse": float(self.prosody_mse.detach()),
            "total": float(self.total.detach()),
        }


def _check_finite(name: str, value: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(value)):
        raise LossError(f"loss term {name} is non-finite")
    return value


def masked_l1(pred, target, mask):
    """Mean absolute error over real positions only."""
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    m = mask.to(pred.dtype)
    while m.dim() < pred.dim():
        m = m.unsqueeze(-1)
    denom = m.expand_as(pred).sum()
    return (torch.abs(pred - target) * m).sum() / denom


def masked_mse(pred, target, mask):
    """Mean squared error over real positions only."""
    if pred.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    m = mask.to(pred.dtype)
    denom = m.sum()
    return (((pred - target) ** 2) * m).sum() / denom


def total_loss(
    output: ModelOutput,
    batch: Batch,
    prosody_weight: float,
    prosody_reduction: str = "mean",
) -> LossBreakdown:
    """Aggregate the teacher-forced training loss.

    All frame/phoneme terms are means over real positions; the prosody
    term is present only when the model produced a prosody prediction,
    and contributes exactly nothing otherwise.
    """
    if output.pitch_target is None or output.energy_target is None:
        raise ValueError("total_loss needs a teacher-forced forward pass")
    mels = batch.mels.to(output.mel.dtype)
    mel_l1 = _check_finite("mel_l1", masked_l1(output.mel, mels, batch.frame_mask))
    pitch_mse = _check_finite(
        "pitch_mse",
        masked_mse(output.predictions.pitch, output.pitch_target, batch.phoneme_mask),
    )
    energy_mse = _check_finite(
        "energy_mse",
        masked_mse(
            output.predictions.energy, output.energy_target, batch.phoneme_mask
        ),
    )
    logdur_target = torch.log(batch.durations.clamp(min=1).to(output.mel.dtype))
    logdur_mse = _check_finite(
        "logdur_mse",
        masked_mse(output.predictions.log_duration, logdur_target, batch.phoneme_mask),
    )
    total = mel_l1 + pitch_mse + energy_mse + logdur_mse
    if output.prosody_pred is not None:
        if output.prosody_target is None:
            raise ValueError("prosody prediction without a prosody target")
        prosody = _check_finite(
            "prosody_mse",
            prosody_loss(
                output.prosody_pred, output.prosody_target, prosody_reduction
            ),
        )
        total = total + prosody_weight * prosody
    else:
        prosody = torch.zeros((), dtype=output.mel.dtype)
    return LossBreakdown(
        mel_l1=mel_l1,
        pitch_mse=pitch_mse,
        energy_mse=energy_mse,
        logdur_mse=logdur_mse,
        prosody_mse=prosody,
        total=total,
    )


# ---------------------------------------------------------------------------
# Deterministic data order
# ---------------------------------------------------------------------------


def split_dialogues(dialogues, val_fraction: float, seed: int):
    """Deterministic dialogue-level split into (train, validation).

    Holds out floor(val_fraction * n) dialogues. When that floor is 0
    (tiny corpora), validation falls back to the training dialogues so
    validation metrics always exist.
    """
    dialogues = list(dialogues)
    n = len(dialogues)
    if n == 0:
        raise ValueError("no dialogues to split")
    n_val = int(math.floor(val_fraction * n))
    perm = np.random.default_rng(stable_seed(seed, "split")).permutation(n)
    val = [dialogues[i] for i in perm[:n_val]]
    train = [dialogues[i] for i in perm[n_val:]]
    if not val:
        val = list(train)
    return train, val


def epoch_order(n_windows: int, seed: int, epoch: int) -> np.ndarray:
    """Window permutation for one epoch, a pure function of (seed, epoch)."""
    return np.random.default_rng(stable_seed(seed, "epoch", epoch)).permutation(
        n_windows
    )


def batch_indices_for_step(
    step: int, n_windows: int, batch_size: int, seed: int
) -> np.ndarray:
    """Window indices of global step ``step`` (0-based), statelessly."""
    batches_per_epoch = math.ceil(n_windows / batch_size)
    epoch, offset = divmod(step, batches_per_epoch)
    order = epoch_order(n_windows, seed, epoch)
    return order[offset * batch_size : (offset + 1) * batch_size]


# ---------------------------------------------------------------------------
# Train step
# ---------------------------------------------------------------------------


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to base_lr; constant afterwards. ``step`` is 0-based."""
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def train_step(
    model: ConversationalTTS,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    features,
    step: int,
    config: RunConfig,
) -> LossBreakdown:
    """One deterministic optimizer update. Raises on divergence."""
    lr = warmup_lr(config.learning_rate, step, config.warmup_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    output = model(batch, features, teacher_forcing=True)
    try:
        breakdown = total_loss(
            output, batch, config.prosody_weight, config.prosody_reduction
        )
    except LossError as exc:
        raise DivergenceError(f"aborting at step {step}: {exc}") from exc
    optimizer.zero_grad(set_to_none=True)
    breakdown.total.backward()
    optimizer.step()
    return breakdown


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------


def _named_state_tensors(model: ConversationalTTS, optimizer) -> dict:
    """Flat name -> tensor map covering parameters, buffers, optimizer."""
    tensors: dict[str, torch.Tensor] = {}
    params = dict(model.named_parameters())
    for name, param in params.items():
        tensors[f"param/{name}"] = param.detach()
    for name, buf in model.named_buffers():
        tensors[f"buffer/{name}"] = buf.detach()
    if optimizer is not None:
        param_list = [p for _, p in model.named_parameters()]
        names = [n for n, _ in model.named_parameters()]
        for idx, param in enumerate(param_list):
            state = optimizer.state.get(param)
            if not state:
                continue
            base = f"adam/{names[idx]}"
            tensors[f"{base}/step"] = torch.as_tensor(
                float(state["step"]), dtype=torch.float64
            )
            tensors[f"{base}/exp_avg"] = state["exp_avg"].detach()
            tensors[f"{base}/exp_avg_sq"] = state["exp_avg_sq"].detach()
    tensors["rng/torch"] = torch.get_rng_state()
    return tensors


def save_checkpoint(
    path,
    model: ConversationalTTS,
    optimizer,
    step: int,
    config: RunConfig,
) -> Path:
    """Write one self-describing binary checkpoint file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = _named_state_tensors(model, optimizer)
    meta = {
        "step": int(step),
        "ablation": model.ablation.name,
        "with_context": model.with_context,
        "with_ppm": model.with_ppm,
        "config": config.to_dict(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += config.config_hash()
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        tensor = tensors[name]
        arr = tensor.detach().cpu().numpy()
        blob = encode_tensor(arr)
        name_bytes = name.encode("utf-8")
        out += struct.pack("<H", len(name_bytes))
        out += name_bytes
        out += struct.pack("<Q", len(blob))
        out += blob
    path.write_bytes(bytes(out))
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse a checkpoint file into (metadata, name -> array)."""
    data = Path(path).read_bytes()
    if len(data) < 44 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config_hash = data[8:40]
    (meta_len,) = struct.unpack("<I", data[40:44])
    pos = 44
    if len(data) < pos + meta_len + 4:
        raise CheckpointError(f"{path}: truncated metadata")
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    meta["_config_hash"] = config_hash
    pos += meta_len
    (n_tensors,) = struct.unpack("<I", data[pos : pos + 4])
    pos += 4
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", data[pos : pos + 2])
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (blob_len,) = struct.unpack("<Q", data[pos : pos + 8])
        pos += 8
        if len(data) < pos + blob_len:
            raise CheckpointError(f"{path}: truncated tensor {name}")
        tensors[name] = decode_tensor(data[pos : pos + blob_len])
        pos += blob_len
    return meta, tensors


def load_checkpoint(
    path,
    model: ConversationalTTS,
    optimizer,
    config: RunConfig,
) -> int:
    """Restore model/optimizer state in place; returns the step counter.

    The stored config hash must match the given config exactly.
    """
    meta, tensors = read_checkpoint(path)
    if meta["_config_hash"] != config.config_hash():
        raise CheckpointError(
            f"{path}: checkpoint was written with a different configuration"
        )
    named_params = dict(model.named_parameters())
    named_buffers = dict(model.named_buffers())

    def restore(dst: torch.Tensor, arr: np.ndarray, name: str) -> None:
        # Scalar tensors are stored rank-1 with one element (the format
        # has no rank 0), so compare sizes rather than shapes.
        if dst.numel() != arr.size:
            raise CheckpointError(
                f"{name}: stored size {arr.size} != expected {dst.numel()}"
            )
        dst.copy_(torch.from_numpy(arr).reshape(dst.shape))

    with torch.no_grad():
        for full_name, arr in tensors.items():
            if full_name.startswith("param/"):
                name = full_name[len("param/") :]
                if name not in named_params:
                    raise CheckpointError(f"unexpected parameter {name}")
                restore(named_params[name], arr, name)
            elif full_name.startswith("buffer/"):
                name = full_name[len("buffer/") :]
                if name not in named_buffers:
                    raise CheckpointError(f"unexpected buffer {name}")
                restore(named_buffers[name], arr, name)
    missing = [
        n for n in named_params if f"param/{n}" not in tensors
    ]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing}")
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        state_dict = optimizer.state_dict()
        state = {}
        for idx, name in enumerate(names):
            base = f"adam/{name}"
            if f"{base}/step" not in tensors:
                continue
            state[idx] = {
                "step": torch.tensor(float(tensors[f"{base}/step"].reshape(-1)[0])),
                "exp_avg": torch.from_numpy(tensors[f"{base}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(tensors[f"{base}/exp_avg_sq"]),
            }
        state_dict["state"] = state
        optimizer.load_state_dict(state_dict)
    if "rng/torch" in tensors:
        torch.set_rng_state(torch.from_numpy(tensors["rng/torch"]))
    return int(meta["step"])


# ---------------------------------------------------------------------------
# Providers and evaluation
# ---------------------------------------------------------------------------


def make_provider(config: RunConfig, preprocess_dir=None):
    """Feature provider per the configured extractor mode."""
    dims = config.feature_dims()
    if config.extractor_mode == "stub":
        return StubFeatureProvider(dims, config.extractor_seed)
    root = Path(preprocess_dir if preprocess_dir is not None else config.preprocess_dir)
    return CachedFeatureProvider(root / "cache", dims)


def evaluate_mel_l1(
    model: ConversationalTTS, windows, provider, config: RunConfig
) -> float:
    """Teacher-forced mel L1 over a window list, weighted by frame count."""
    model.eval()
    total = 0.0
    weight = 0.0
    with torch.no_grad():
        for start in range(0, len(windows), config.batch_size):
            chunk = windows[start : start + config.batch_size]
            batch = make_batch(chunk, config.pad_phoneme_id, config.memory_capacity)
            features = features_for_batch(
                model, batch, provider, need_prosody_target=False
            )
            output = model(batch, features, teacher_forcing=True)
            n = float(batch.frame_mask.sum())
            total += float(
                masked_l1(output.mel, batch.mels, batch.frame_mask)
            ) * n
            weight += n
    return total / weight


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    final_loss: LossBreakdown
    val_mel_l1: float
    checkpoint_path: Path
    losses_path: Path
    steps_run: int


def train(
    config: RunConfig,
    out_dir,
    seed: int,
    resume_from=None,
    dialogues=None,
    provider=None,
) -> TrainResult:
    """Train per the config; write losses, checkpoints, and a snapshot.

    Deterministic given (config, seed): data order, init, and updates
    are all derived from them. ``resume_from`` restores a checkpoint
    and continues the identical trajectory to ``config.steps``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = replace(config, seed=seed)
    config.save(out_dir / "config.yaml")
    # Pin the global generator so checkpoint bytes (which embed its
    # state) are identical across identical runs.
    torch.manual_seed(stable_seed(seed, "torch"))
    if dialogues is None:
        if config.manifest is None:
            raise ValueError("config.manifest is not set")
        dialogues = load_manifest(config.manifest)
    stats = _load_or_compute_stats(config, dialogues)
    if provider is None:
        provider = make_provider(config)
    train_dialogues, val_dialogues = split_dialogues(
        dialogues, config.val_fraction, seed
    )
    train_windows = list(iter_windows(train_dialogues, config.memory_capacity))
    val_windows = list(iter_windows(val_dialogues, config.memory_capacity))
    if not train_windows:
        raise ValueError("training split has no windows")

    model = build_model(config, stats, seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    start_step = 0
    if resume_from is not None:
        start_step = load_checkpoint(resume_from, model, optimizer, config)
        logger.info("resumed from %s at step %d", resume_from, start_step)

    losses_path = out_dir / "losses.jsonl"
    mode = "a" if resume_from is not None else "w"
    breakdown = None
    with open(losses_path, mode, encoding="utf-8") as loss_log:
        for step in range(start_step, config.steps):
            idx = batch_indices_for_step(
                step, len(train_windows), config.batch_size, seed
            )
            batch = make_batch(
                [train_windows[i] for i in idx],
                config.pad_phoneme_id,
                config.memory_capacity,
            )
            features = features_for_batch(
                model, batch, provider, need_prosody_target=True
            )
            breakdown = train_step(model, optimizer, batch, features, step, config)
            row = {"step": step + 1, **breakdown.to_dict()}
            loss_log.write(json.dumps(row, sort_keys=True) + "\n")
            if (step + 1) % config.log_interval == 0 or step + 1 == config.steps:
                logger.info(
                    "step %d/%d total %.5f mel %.5f",
                    step + 1,
                    config.steps,
                    float(breakdown.total.detach()),
                    float(breakdown.mel_l1.detach()),
                )
            if (step + 1) % config.checkpoint_interval == 0 and step + 1 < config.steps:
                save_checkpoint(
                    out_dir / f"checkpoint_step{step + 1:06d}.m2ck",
                    model,
                    optimizer,
                    step + 1,
                    config,
                )
    if breakdown is None:
        # Zero-step run (or resume already past config.steps): still
        # report the current losses without updating anything.
        batch = make_batch(
            [train_windows[i] for i in batch_indices_for_step(
                max(config.steps - 1, 0), len(train_windows), config.batch_size, seed
            )],
            config.pad_phoneme_id,
            config.memory_capacity,
        )
        features = features_for_batch(model, batch, provider, need_prosody_target=True)
        model.eval()
        with torch.no_grad():
            output = model(batch, features, teacher_forcing=True)
            breakdown = total_loss(
                output, batch, config.prosody_weight, config.prosody_reduction
            )
    checkpoint_path = save_checkpoint(
        out_dir / "checkpoint_final.m2ck", model, optimizer, config.steps, config
    )
    val_mel_l1 = evaluate_mel_l1(model, val_windows, provider, config)
    (out_dir / "val.json").write_text(
        json.dumps({"val_mel_l1": val_mel_l1, "n_val_windows": len(val_windows)})
        + "\n",
        encoding="utf-8",
    )
    return TrainResult(
        final_loss=breakdown,
        val_mel_l1=val_mel_l1,
        checkpoint_path=checkpoint_path,
        losses_path=losses_path,
        steps_run=config.steps - start_step,
    )


def _load_or_compute_stats(config: RunConfig, dialogues) -> CorpusStats:
    """Stats from the preprocess directory, else computed on the fly."""
    if config.preprocess_dir is not None:
        stats_path = Path(config.preprocess_dir) / "stats.json"
        if stats_path.exists():
            return CorpusStats.from_dict(
                json.loads(stats_path.read_text(encoding="utf-8"))
            )
    return compute_corpus_stats(dialogues)


# ---------------------------------------------------------------------------
# Preprocessing and ablation
# ---------------------------------------------------------------------------


def preprocess(config: RunConfig, out_dir) -> dict:
    """Validate the corpus, fill or check the feature cache, write stats.

    Stub mode computes and writes every feature file; cache mode only
    verifies completeness of externally produced files. Byte-stable and
    idempotent for a fixed corpus and seed.
    """
    if config.manifest is None:
        raise ValueError("config.manifest is not set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dialogues = load_manifest(config.manifest)
    stats = compute_corpus_stats(dialogues)
    cache_dir = out_dir / "cache"
    if config.extractor_mode == "stub":
        n_written = fill_cache(
            cache_dir, dialogues, config.feature_dims(), config.extractor_seed
        )
    else:
        missing = missing_cache_keys(cache_dir, dialogues)
        if missing:
            raise MissingFeatureError(missing)
        n_written = 0
    stats_payload = json.dumps(stats.to_dict(), sort_keys=True) + "\n"
    (out_dir / "stats.json").write_text(stats_payload, encoding="utf-8")
    n_turns = sum(len(d.turns) for d in dialogues)
    return {
        "dialogues": len(dialogues),
        "turns": n_turns,
        "files_written": n_written,
        "stats": stats.to_dict(),
    }


def run_ablation(names, config: RunConfig, out_dir, seed: int) -> Path:
    """Train each named configuration with the shared seed.

    Writes one metrics line per configuration (all loss terms plus the
    validation mel L1) and returns the metrics file path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in names:
        AblationConfig.from_name(name)  # reject unknown names up front
    metrics_path = out_dir / "metrics.jsonl"
    dialogues = load_manifest(config.manifest) if config.manifest else None
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for name in names:
            run_config = replace(config, ablation=name)
            result = train(
                run_config, out_dir / name, seed, dialogues=dialogues
            )
            row = {
                "config": name,
                **result.final_loss.to_dict(),
                "val_mel_l1": result.val_mel_l1,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            logger.info("ablation %s: %s", name, row)
    return metrics_path
