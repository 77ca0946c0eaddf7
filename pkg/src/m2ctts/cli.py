"""Command-line entry point.

Subcommands: gen-toy, preprocess, train, synthesize, ablate, verify.
Every experiment command reads an optional YAML config plus ``--key
value`` overrides for any config field, echoes the effective config
into its output directory, and uses stable exit codes: 0 success,
1 validation or verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, resolve_seed
from .corpus import CorpusStats, ManifestError, gen_toy_corpus, load_manifest, window
from .extractors import (
    CacheFormatError,
    MissingFeatureError,
    write_tensor_file,
)
from .model import ConversationalTTS, synthesize as synthesize_windows
from .training import (
    CheckpointError,
    DivergenceError,
    LossError,
    load_checkpoint,
    make_provider,
    preprocess,
    read_checkpoint,
    run_ablation,
    train,
)
from .verify import VerificationFailure, run_suites

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

_FAILURE_ERRORS = (
    ManifestError,
    CacheFormatError,
    MissingFeatureError,
    CheckpointError,
    DivergenceError,
    LossError,
    ValueError,
    OSError,
)


def _parse_overrides(extras) -> dict:
    """Turn leftover ``--key value`` pairs into a config override dict."""
    overrides = {}
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--") or len(token) <= 2:
            raise ConfigError(f"unexpected argument: {token!r}")
        key = token[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"missing value for override --{key}")
            value = extras[i + 1]
            i += 1
        overrides[key] = value
        i += 1
    return overrides


def _build_config(config_path, extras) -> RunConfig:
    base = RunConfig.from_file(config_path) if config_path else RunConfig()
    overrides = _parse_overrides(extras)
    if overrides:
        base = base.with_overrides(overrides)
    return base


def _echo_config(config: RunConfig, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.yaml")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_toy(args, extras) -> int:
    if extras:
        raise ConfigError(f"unexpected arguments: {extras}")
    seed = resolve_seed(args.seed, RunConfig())
    manifest = gen_toy_corpus(
        seed, args.dialogues, args.turns, args.out, vocab_size=args.vocab_size
    )
    echo = {
        "seed": seed,
        "dialogues": args.dialogues,
        "turns": args.turns,
        "vocab_size": args.vocab_size,
    }
    (Path(args.out) / "gen-toy.json").write_text(
        json.dumps(echo, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(manifest)
    return EXIT_OK


def cmd_preprocess(args, extras) -> int:
    config = _build_config(args.config, extras)
    if args.manifest is not None:
        config = replace(config, manifest=str(args.manifest))
    if args.extractor_mode is not None:
        config = replace(config, extractor_mode=args.extractor_mode)
    if config.manifest is None:
        raise ConfigError("no manifest given (use --manifest or the config file)")
    config = replace(config, preprocess_dir=str(args.out))
    _echo_config(config, args.out)
    summary = preprocess(config, args.out)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args, extras) -> int:
    config = _build_config(args.config, extras)
    if args.manifest is not None:
        config = replace(config, manifest=str(args.manifest))
    if config.manifest is None:
        raise ConfigError("no manifest given (use --manifest or the config file)")
    seed = resolve_seed(args.seed, config)
    result = train(config, args.out, seed, resume_from=args.resume)
    print(
        json.dumps(
            {
                "final": result.final_loss.to_dict(),
                "val_mel_l1": result.val_mel_l1,
                "checkpoint": str(result.checkpoint_path),
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def _model_from_checkpoint(path) -> tuple[ConversationalTTS, RunConfig]:
    meta, _ = read_checkpoint(path)
    config = RunConfig.from_dict(meta["config"])
    placeholder = CorpusStats(0.0, 1.0, 0.0, 1.0, 1)
    model = ConversationalTTS(
        config,
        placeholder,
        with_context=meta.get("with_context", True),
        with_ppm=meta.get("with_ppm", True),
    )
    load_checkpoint(path, model, None, config)
    return model, config


def cmd_synthesize(args, extras) -> int:
    overrides = _parse_overrides(extras)
    model, config = _model_from_checkpoint(args.checkpoint)
    manifest = args.manifest if args.manifest is not None else config.manifest
    if manifest is None:
        raise ConfigError("no manifest available (use --manifest)")
    effective = replace(config, manifest=str(manifest))
    if overrides:
        effective = effective.with_overrides(overrides)
    out_dir = Path(args.out)
    _echo_config(effective, out_dir)
    dialogues = {d.dialogue_id: d for d in load_manifest(manifest)}
    if args.dialogue not in dialogues:
        raise ManifestError(f"dialogue {args.dialogue!r} not in manifest")
    dialogue = dialogues[args.dialogue]
    w = window(dialogue, args.turn, effective.memory_capacity)
    provider = make_provider(effective)
    output = synthesize_windows(model, [w], provider)
    n_frames = int(output.frame_mask[0].sum())
    mel = output.mel[0, :n_frames].numpy().T.astype(np.float32)  # [80, T]
    stem = f"{args.dialogue}_{args.turn}"
    mel_path = write_tensor_file(out_dir / f"{stem}.mel.m2ct", mel)
    for tag, weights in (("tpm", output.tpm_weights), ("wpm", output.wpm_weights)):
        if weights is not None:
            write_tensor_file(
                out_dir / f"{stem}.{tag}.attn.m2ct",
                weights[0].numpy().astype(np.float32),
            )
    print(mel_path)
    if effective.vocoder_command:
        command = effective.vocoder_command.format(mel=shlex.quote(str(mel_path)))
        logger.info("running vocoder: %s", command)
        proc = subprocess.run(command, shell=True)
        if proc.returncode != 0:
            print(
                f"vocoder command failed with exit code {proc.returncode}",
                file=sys.stderr,
            )
            return EXIT_FAILURE
    return EXIT_OK


def cmd_ablate(args, extras) -> int:
    config = _build_config(args.config, extras)
    if args.manifest is not None:
        config = replace(config, manifest=str(args.manifest))
    if config.manifest is None:
        raise ConfigError("no manifest given (use --manifest or the config file)")
    names = [n.strip() for n in args.names.split(",") if n.strip()]
    if not names:
        raise ConfigError("no ablation names given")
    seed = resolve_seed(args.seed, config)
    _echo_config(replace(config, seed=seed), args.out)
    metrics_path = run_ablation(names, config, args.out, seed)
    print(metrics_path)
    for line in Path(metrics_path).read_text(encoding="utf-8").splitlines():
        print(line)
    return EXIT_OK


def cmd_verify(args, extras) -> int:
    if extras:
        raise ConfigError(f"unexpected arguments: {extras}")
    ok = run_suites(args.suites or None)
    return EXIT_OK if ok else EXIT_FAILURE


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="m2ctts",
        description=(
            "Conversational TTS with multi-scale dialogue context: corpus "
            "tooling, training, synthesis, ablations, and verification."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate a deterministic toy corpus")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--dialogues", type=int, default=2)
    p.add_argument("--turns", type=int, default=4, help="turns per dialogue")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=40)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("preprocess", help="validate corpus, fill feature cache")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True, help="preprocess output directory")
    p.add_argument("--extractor-mode", choices=("stub", "cache"), default=None)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="synthesize one turn with context")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dialogue", required=True)
    p.add_argument("--turn", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None, help="override the stored manifest")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("ablate", help="train several ablation rows")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--names", required=True, help="comma-separated, e.g. M1,M7")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("suites", nargs="*", help="suite names (default: all)")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.func(args, extras)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _FAILURE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
