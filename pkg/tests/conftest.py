"""Shared fixtures: one session-scoped toy corpus and compact configs."""

from __future__ import annotations

import pytest

from m2ctts import (
    RunConfig,
    StubFeatureProvider,
    compute_corpus_stats,
    gen_toy_corpus,
    load_manifest,
)

TOY_SEED = 7
TOY_DIALOGUES = 2
TOY_TURNS = 4


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_corpus")
    gen_toy_corpus(TOY_SEED, TOY_DIALOGUES, TOY_TURNS, root)
    return root


@pytest.fixture(scope="session")
def manifest_path(corpus_dir):
    return corpus_dir / "manifest.jsonl"


@pytest.fixture(scope="session")
def dialogues(manifest_path):
    return load_manifest(manifest_path)


@pytest.fixture(scope="session")
def stats(dialogues):
    return compute_corpus_stats(dialogues)


def compact_config(manifest_path, **overrides) -> RunConfig:
    """A small-but-real config for fast training in tests."""
    base = dict(
        manifest=str(manifest_path),
        d_model=32,
        heads=2,
        encoder_blocks=1,
        decoder_blocks=1,
        ffn_hidden=64,
        style_dim=32,
        variance_hidden=32,
        text_utterance_dim=64,
        acoustic_utterance_dim=96,
        text_sequence_dim=64,
        acoustic_sequence_dim=64,
        batch_size=4,
        steps=12,
        warmup_steps=5,
        checkpoint_interval=6,
        log_interval=6,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def config(manifest_path):
    return compact_config(manifest_path)


@pytest.fixture(scope="session")
def provider(config):
    return StubFeatureProvider(config.feature_dims(), config.extractor_seed)
