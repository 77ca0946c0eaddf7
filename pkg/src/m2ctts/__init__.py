"""Conversational text-to-speech with multi-scale dialogue context.

The model conditions a feed-forward transformer TTS backbone on the
recent turns of a two-speaker conversation, at two scales (whole
utterances and per-token sequences) and in two modalities (text and
acoustics). Each context module can be switched off independently for
ablation studies, and everything — corpus generation, feature caching,
initialization, batching, training, and checkpoints — is deterministic
given a seed.
"""

from .config import (
    ABLATION_ROWS,
    SEED_ENV_VAR,
    AblationConfig,
    ConfigError,
    RunConfig,
    resolve_seed,
)
from .corpus import (
    N_MEL_CHANNELS,
    Batch,
    ConversationWindow,
    CorpusStats,
    Dialogue,
    ManifestError,
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
    CachedFeatureProvider,
    CacheKey,
    FeatureDims,
    MissingFeatureError,
    StubFeatureProvider,
    decode_tensor,
    encode_tensor,
    fill_cache,
    missing_cache_keys,
    read_tensor_file,
    write_cache,
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
    sinusoidal_positions,
)
from .context import (
    ContextFeatures,
    FineGrainedContextEncoder,
    StyleAssembler,
    UtteranceContextEncoder,
    build_context_features,
)
from .backbone import (
    MelDecoder,
    PhonemeEncoder,
    VarianceAdaptor,
    VariancePredictor,
    length_regulate,
)
from .prosody import ProsodyPredictor, prosody_loss
from .model import (
    ConversationalTTS,
    ModelOutput,
    build_model,
    features_for_batch,
    init_parameters,
    synthesize,
)
from .training import (
    CheckpointError,
    DivergenceError,
    LossBreakdown,
    LossError,
    TrainResult,
    evaluate_mel_l1,
    load_checkpoint,
    make_provider,
    preprocess,
    read_checkpoint,
    run_ablation,
    save_checkpoint,
    split_dialogues,
    total_loss,
    train,
    train_step,
)
from .gradcheck import check_gradients, check_module_gradients, relative_error
from .seeding import stable_seed
from .verify import VerificationFailure, run_suites

__version__ = "0.1.0"

__all__ = [
    "ABLATION_ROWS",
    "SEED_ENV_VAR",
    "AblationConfig",
    "ConfigError",
    "RunConfig",
    "resolve_seed",
    "N_MEL_CHANNELS",
    "Batch",
    "ConversationWindow",
    "CorpusStats",
    "Dialogue",
    "ManifestError",
    "Turn",
    "compute_corpus_stats",
    "gen_toy_corpus",
    "iter_windows",
    "load_manifest",
    "make_batch",
    "window",
    "CacheFormatError",
    "CachedFeatureProvider",
    "CacheKey",
    "FeatureDims",
    "MissingFeatureError",
    "StubFeatureProvider",
    "decode_tensor",
    "encode_tensor",
    "fill_cache",
    "missing_cache_keys",
    "read_tensor_file",
    "write_cache",
    "write_tensor_file",
    "AdditiveAttentionPool",
    "AllKeysMaskedError",
    "Conv1dContextualizer",
    "GRULayer",
    "MultiHeadAttention",
    "StyleAdaptiveLayerNorm",
    "masked_softmax",
    "sinusoidal_positions",
    "ContextFeatures",
    "FineGrainedContextEncoder",
    "StyleAssembler",
    "UtteranceContextEncoder",
    "build_context_features",
    "MelDecoder",
    "PhonemeEncoder",
    "VarianceAdaptor",
    "VariancePredictor",
    "length_regulate",
    "ProsodyPredictor",
    "prosody_loss",
    "ConversationalTTS",
    "ModelOutput",
    "build_model",
    "features_for_batch",
    "init_parameters",
    "synthesize",
    "CheckpointError",
    "DivergenceError",
    "LossBreakdown",
    "LossError",
    "TrainResult",
    "evaluate_mel_l1",
    "load_checkpoint",
    "make_provider",
    "preprocess",
    "read_checkpoint",
    "run_ablation",
    "save_checkpoint",
    "split_dialogues",
    "total_loss",
    "train",
    "train_step",
    "check_gradients",
    "check_module_gradients",
    "relative_error",
    "stable_seed",
    "VerificationFailure",
    "run_suites",
    "__version__",
]
