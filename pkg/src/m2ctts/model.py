"""Full conversational TTS model: backbone plus gated context modules.

The model always owns the backbone (phoneme encoder, variance adaptor,
style assembler, decoder). Context modules and the prosody predictor
are constructed unless explicitly omitted, but only the ones enabled by
the ablation configuration ever run; disabled modules touch neither the
forward pass nor the gradients. Because every parameter is initialized
from a seed keyed by its qualified name, a model with context modules
disabled is bit-identical in behavior to one built without them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .backbone import MelDecoder, PhonemeEncoder, VarianceAdaptor, VariancePredictions
from .config import AblationConfig, RunConfig
from .context import (
    ContextFeatures,
    FineGrainedContextEncoder,
    StyleAssembler,
    UtteranceContextEncoder,
    build_context_features,
)
from .corpus import Batch, CorpusStats, make_batch
from .prosody import ProsodyPredictor
from .seeding import stable_seed


@dataclass
class ModelOutput:
    """Everything one forward pass produces."""

    mel: torch.Tensor  # [B, T, 80]
    frame_mask: torch.Tensor  # [B, T] bool
    predictions: VariancePredictions  # per-phoneme variance predictions
    durations_used: torch.Tensor  # [B, L] long
    pitch_target: Optional[torch.Tensor]  # [B, L] normalized, teacher mode
    energy_target: Optional[torch.Tensor]  # [B, L] normalized, teacher mode
    h_text: Optional[torch.Tensor]  # [B, d] coarse text context
    h_acoustic: Optional[torch.Tensor]  # [B, d] coarse acoustic context
    style: torch.Tensor  # [B, style_dim]
    prosody_pred: Optional[torch.Tensor]  # [B, D_u_acoustic]
    prosody_target: Optional[torch.Tensor]  # [B, D_u_acoustic]
    tum_weights: Optional[torch.Tensor]  # [B, 1 + c]
    wum_weights: Optional[torch.Tensor]  # [B, 1 + c]
    tpm_weights: Optional[torch.Tensor]  # [B, heads, L, R]
    wpm_weights: Optional[torch.Tensor]  # [B, heads, L, R']


class ConversationalTTS(nn.Module):
    """FastSpeech2-style backbone with multi-scale dialogue context."""

    def __init__(
        self,
        config: RunConfig,
        stats: CorpusStats,
        ablation: Optional[AblationConfig] = None,
        with_context: bool = True,
        with_ppm: bool = True,
    ):
        super().__init__()
        self.config = config
        self.ablation = ablation if ablation is not None else config.ablation_config()
        self.with_context = with_context
        self.with_ppm = with_ppm
        d = config.d_model
        kernels = config.ffn_kernels
        self.encoder = PhonemeEncoder(
            config.vocab_size,
            d,
            config.heads,
            config.encoder_blocks,
            config.ffn_hidden,
            kernels,
        )
        self.adaptor = VarianceAdaptor(
            d,
            stats,
            config.pitch_bins,
            config.energy_bins,
            config.variance_hidden,
            config.variance_kernel,
        )
        self.style = StyleAssembler(d, config.style_dim)
        self.decoder = MelDecoder(
            d,
            config.heads,
            config.decoder_blocks,
            config.ffn_hidden,
            kernels,
            config.style_dim,
            norm="style",
        )
        if with_context:
            self.tum = UtteranceContextEncoder(
                config.text_utterance_dim, config.text_utterance_dim, d
            )
            self.wum = UtteranceContextEncoder(
                config.acoustic_utterance_dim, config.text_utterance_dim, d
            )
            self.tpm = FineGrainedContextEncoder(
                config.text_sequence_dim,
                d,
                config.heads,
                config.memory_kernel,
                config.memory_capacity,
                add_speaker=True,
            )
            self.wpm = FineGrainedContextEncoder(
                config.acoustic_sequence_dim,
                d,
                config.heads,
                config.memory_kernel,
                config.memory_capacity,
                add_speaker=config.wpm_speaker_ids,
            )
        if with_ppm:
            self.ppm = ProsodyPredictor(d, config.acoustic_utterance_dim)

    def needed_features(self) -> dict:
        """Which context feature tensors this configuration consumes."""
        a = self.ablation if self.with_context else AblationConfig.from_name("M1")
        return {
            "need_tum": self.with_context and a.tum,
            "need_wum": self.with_context and a.wum,
            "need_tpm": self.with_context and a.tpm,
            "need_wpm": self.with_context and a.wpm,
        }

    def forward(
        self,
        batch: Batch,
        features: Optional[ContextFeatures] = None,
        teacher_forcing: bool = True,
    ) -> ModelOutput:
        """Run the model over one padded batch.

        Teacher forcing uses the batch's oracle durations, pitch, and
        energy (training and validation); otherwise everything is
        predicted. ``features`` may be None only if no context module
        is active.
        """
        active = self.with_context and self.ablation.any_module
        use_ppm = self.with_ppm and self.with_context and self.ablation.ppm
        if (active or use_ppm) and features is None:
            raise ValueError("active context modules need context features")
        enc = self.encoder(batch.phonemes, batch.phoneme_mask)
        dtype = enc.dtype
        B = enc.shape[0]

        h_text = h_acoustic = None
        tum_w = wum_w = tpm_w = wpm_w = None
        if self.with_context and self.ablation.tum:
            h_text, tum_w = self.tum(
                features.hist_text, features.history_mask, features.cur_text
            )
        if self.with_context and self.ablation.wum:
            h_acoustic, wum_w = self.wum(
                features.hist_acoustic, features.history_mask, features.cur_text
            )
        # Fine-grained residuals both read the pre-residual encoder
        # output, so TPM and WPM commute and ablate independently.
        delta_t = delta_w = None
        if self.with_context and self.ablation.tpm:
            delta_t, tpm_w = self.tpm(
                enc,
                features.mem_text,
                features.mem_text_mask,
                features.mem_text_pos,
                features.mem_text_speaker,
            )
        if self.with_context and self.ablation.wpm:
            delta_w, wpm_w = self.wpm(
                enc,
                features.mem_acoustic,
                features.mem_acoustic_mask,
                features.mem_acoustic_pos,
                features.mem_acoustic_speaker,
            )
        if delta_t is not None:
            enc = enc + delta_t
        if delta_w is not None:
            enc = enc + delta_w

        style, _ = self.style(h_text, h_acoustic, B, dtype)

        if teacher_forcing:
            adapted = self.adaptor(
                enc,
                batch.phoneme_mask,
                durations=batch.durations,
                pitch=batch.pitch.to(dtype),
                energy=batch.energy.to(dtype),
            )
        else:
            adapted = self.adaptor(enc, batch.phoneme_mask)
        mel = self.decoder(adapted.frames, adapted.frame_mask, style)

        prosody_pred = None
        prosody_target = None
        if use_ppm and teacher_forcing:
            prosody_pred = self.ppm(
                h_text, h_acoustic, self.style.null_text, self.style.null_acoustic
            )
            prosody_target = features.prosody_target

        return ModelOutput(
            mel=mel,
            frame_mask=adapted.frame_mask,
            predictions=adapted.predictions,
            durations_used=adapted.durations_used,
            pitch_target=adapted.pitch_target,
            energy_target=adapted.energy_target,
            h_text=h_text,
            h_acoustic=h_acoustic,
            style=style,
            prosody_pred=prosody_pred,
            prosody_target=prosody_target,
            tum_weights=tum_w,
            wum_weights=wum_w,
            tpm_weights=tpm_w,
            wpm_weights=wpm_w,
        )


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic per-parameter init keyed by qualified name.

    Because each parameter's values depend only on (seed, its name), two
    models sharing parameter names share those parameters' initial
    values regardless of which other modules exist. Rules: biases zero
    (style-norm gain biases one, so normalization starts as identity);
    matrices and conv kernels uniform with the usual fan-based bound;
    one-dimensional gain weights one; everything else small normal.
    """
    for name, param in model.named_parameters():
        gen = torch.Generator()
        gen.manual_seed(stable_seed(seed, "init", name))
        with torch.no_grad():
            if name.endswith("gain_map.bias"):
                param.fill_(1.0)
            elif name.endswith(".bias"):
                param.zero_()
            elif param.dim() >= 2:
                fan_in = param.shape[1:].numel()
                fan_out = param.shape[0] * param.shape[2:].numel()
                bound = (6.0 / (fan_in + fan_out)) ** 0.5
                param.uniform_(-bound, bound, generator=gen)
            elif name.endswith(".weight"):
                param.fill_(1.0)
            else:
                param.normal_(0.0, 0.1, generator=gen)


def build_model(
    config: RunConfig,
    stats: CorpusStats,
    seed: int,
    ablation: Optional[AblationConfig] = None,
    with_context: bool = True,
    with_ppm: bool = True,
) -> ConversationalTTS:
    """Construct and deterministically initialize a model."""
    model = ConversationalTTS(
        config, stats, ablation=ablation, with_context=with_context, with_ppm=with_ppm
    )
    init_parameters(model, seed)
    return model


def features_for_batch(
    model: ConversationalTTS, batch: Batch, provider, need_prosody_target: bool
) -> Optional[ContextFeatures]:
    """Build exactly the features the model's configuration consumes."""
    needed = model.needed_features()
    use_ppm = (
        need_prosody_target
        and model.with_ppm
        and model.with_context
        and model.ablation.ppm
    )
    if not any(needed.values()) and not use_ppm:
        return None
    return build_context_features(
        batch.windows,
        provider,
        need_prosody_target=use_ppm,
        **needed,
    )


def synthesize(model: ConversationalTTS, windows, provider) -> ModelOutput:
    """Inference (predicted durations) over a list of windows."""
    batch = make_batch(windows, model.config.pad_phoneme_id, model.config.memory_capacity)
    features = features_for_batch(model, batch, provider, need_prosody_target=False)
    model.eval()
    with torch.no_grad():
        return model(batch, features, teacher_forcing=False)
