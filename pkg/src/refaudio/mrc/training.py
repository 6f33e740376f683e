"""
MRC training: batches, the rectified-flow loss, reference augmentation, the
AdamW training loop with linear warmup, and reference-count adaptation.
"""

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import msgspec
import numpy as np
import torch
from torch import Tensor

from .. import settings
from .._logging import get_logger
from ..codecs import CodecParams, latent_from_clip
from ..dataset_forge import Region, load_example
from ..errors import RefAudioValueError, TrainingError
from ..event_bank import AudioClip
from ..schemas import ManifestRecord, TrainLogRecord, write_jsonl
from ..text_encoder import TextEncoder
from .flow import flow_interpolate, velocity_target
from .unet import MRCUNet

logger = get_logger(__name__)


class TrainConfig(msgspec.Struct, kw_only=True):
    steps: int = 5000
    batch_size: int = 4
    lr: float = settings.LEARNING_RATE
    warmup_steps: int = settings.WARMUP_STEPS
    weight_decay: float = 0.01
    mask_p: float = settings.MASK_P
    drop_p: float = settings.DROP_P
    cfg_dropout: float = settings.CFG_DROPOUT
    sigma: float = settings.SIGMA
    checkpoint_every: int = 1000
    log_every: int = 100
    # EMA factor of the smoothed loss in the training log
    smoothing: float = 0.98
    # sampling proportions per manifest source, e.g. {"concatenation": 0.5, "general": 0.5}
    mix: dict[str, float] = {}
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise RefAudioValueError("steps must be >= 0 and batch_size >= 1")
        if self.warmup_steps < 0:
            raise RefAudioValueError("warmup_steps must be >= 0")
        for name in ("mask_p", "drop_p", "cfg_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise RefAudioValueError(f"{name} must be a probability")
        if not 0.0 <= self.smoothing < 1.0:
            raise RefAudioValueError("smoothing must be in [0, 1)")
        if any(p < 0 for p in self.mix.values()) or (self.mix and sum(self.mix.values()) <= 0):
            raise RefAudioValueError("mix proportions must be non-negative with a positive sum")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        presets = {
            "desk": {},
            "paper": {"lr": settings.LEARNING_RATE_PAPER, "steps": 2_000_000},
            "paper-large": {"lr": settings.LEARNING_RATE_PAPER, "steps": 2_000_000},
        }
        if name not in presets:
            raise RefAudioValueError(f"unknown training preset {name!r}")
        return cls(**{**presets[name], **overrides})


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup: step s < warmup gets s / warmup * base_lr."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


@dataclass
class TrainExample:
    """One example in latent space; reference slots stay separate until collation."""

    example_id: str
    target: Tensor  # (c, T, F)
    caption: str
    reference_latents: list[Tensor]
    reference_captions: list[str]
    reference_regions: list[list[Region]] = field(default_factory=list)
    masked_slot: Optional[int] = None

    @property
    def k(self) -> int:
        return len(self.reference_latents)


@dataclass
class TrainBatch:
    ids: list[str]
    z1: Tensor  # (B, c, T, F)
    references: Tensor  # (B, c, K*T, F)
    reference_text: Tensor  # (B, K*50, d_text)
    prompt: Tensor  # (B, 50, d_text)

    def __post_init__(self) -> None:
        b, c, t, f = self.z1.shape
        if self.references.shape[:2] != (b, c) or self.references.shape[3] != f \
                or self.references.shape[2] % t:
            raise RefAudioValueError(
                f"reference stack {tuple(self.references.shape)} inconsistent with targets {tuple(self.z1.shape)}"
            )
        k = self.references.shape[2] // t
        if self.reference_text.shape[0] != b or self.reference_text.shape[1] % k:
            raise RefAudioValueError("reference caption embeddings inconsistent with reference count")
        if len(self.ids) != b or self.prompt.shape[0] != b:
            raise RefAudioValueError("batch fields disagree on batch size")


def null_latent(codec: CodecParams) -> Tensor:
    return latent_from_clip(AudioClip.silence(settings.CLIP_SECONDS, codec.sample_rate), codec).to_tensor()


def latent_frame_range(region: Region, codec: CodecParams, length: int) -> slice:
    frames_per_second = codec.sample_rate / codec.hop_length / codec.compression
    start = int(math.floor(region.start_s * frames_per_second))
    end = int(math.ceil(region.end_s * frames_per_second))
    return slice(max(0, min(start, length)), max(0, min(end, length)))


def augment_references(
    example: TrainExample,
    rng: np.random.Generator,
    null: Tensor,
    *,
    mask_p: float = settings.MASK_P,
    drop_p: float = settings.DROP_P,
    codec: Optional[CodecParams] = None,
) -> TrainExample:
    """Mask one event inside one reference, then drop the other slots to null at `drop_p`.

    The masked slot is chosen before dropping and always survives, so every
    example with an eligible reference is masked with probability `mask_p`.
    """
    codec = codec or CodecParams()
    latents = list(example.reference_latents)
    captions = list(example.reference_captions)
    regions = [list(r) for r in example.reference_regions] or [[] for _ in latents]

    masked_slot = None
    if mask_p > 0 and rng.random() < mask_p:
        candidates = [k for k in range(len(latents)) if captions[k] and regions[k]]
        if candidates:
            k = candidates[int(rng.integers(len(candidates)))]
            region = regions[k][int(rng.integers(len(regions[k])))]
            masked = latents[k].clone()
            masked[:, latent_frame_range(region, codec, masked.shape[1])] = 0.0
            latents[k] = masked
            masked_slot = k

    for k in range(len(latents)):
        if k != masked_slot and drop_p > 0 and rng.random() < drop_p:
            latents[k], captions[k], regions[k] = null, "", []
    return replace(example, reference_latents=latents, reference_captions=captions,
                   reference_regions=regions, masked_slot=masked_slot)


def null_conditioned(example: TrainExample, null: Tensor) -> TrainExample:
    return replace(example, caption="", reference_latents=[null] * example.k,
                   reference_captions=[""] * example.k,
                   reference_regions=[[] for _ in range(example.k)], masked_slot=None)


def collate(examples: Sequence[TrainExample], text_encoder: TextEncoder) -> TrainBatch:
    with torch.no_grad():
        reference_text = text_encoder.bundle_batch([e.reference_captions for e in examples])
        prompt = text_encoder.encode_batch([e.caption for e in examples])
    return TrainBatch(
        ids=[e.example_id for e in examples],
        z1=torch.stack([e.target for e in examples]),
        references=torch.stack([torch.cat(e.reference_latents, dim=1) for e in examples]),
        reference_text=reference_text,
        prompt=prompt,
    )


def rfm_loss(
    batch: TrainBatch,
    model: Callable[..., Tensor],
    generator: Optional[torch.Generator] = None,
    *,
    sigma: float = settings.SIGMA,
    z0: Optional[Tensor] = None,
    lam: Optional[Tensor] = None,
) -> Tensor:
    """Mean over the batch of the squared velocity error (averaged over latent cells)."""
    z1 = batch.z1
    if z0 is None:
        z0 = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    if lam is None:
        lam = torch.rand(z1.shape[0], generator=generator, dtype=z1.dtype)
    z_lam = flow_interpolate(z0, z1, lam, sigma)
    v = velocity_target(z0, z1, sigma)
    pred = model(z_lam, lam, batch.references, batch.reference_text, batch.prompt)
    per_example = ((pred - v) ** 2).flatten(1).mean(dim=1)
    bad = ~torch.isfinite(per_example)
    if torch.any(bad):
        raise TrainingError("non-finite loss",
                            example_ids=[i for i, b in zip(batch.ids, bad.tolist()) if b])
    return per_example.mean()


def prepare_examples(records: Sequence[ManifestRecord], root: str | os.PathLike[str],
                     codec: CodecParams, k_max: int = settings.K_MAX) -> list[TrainExample]:
    """Load manifest records and encode targets and references into latents."""
    examples = []
    for record in records:
        try:
            example = load_example(record, root, k_max, codec.sample_rate)
            examples.append(TrainExample(
                example_id=record.id,
                target=latent_from_clip(example.target, codec).to_tensor(),
                caption=example.target_caption,
                reference_latents=[latent_from_clip(r.audio, codec).to_tensor() for r in example.references],
                reference_captions=[r.caption for r in example.references],
                reference_regions=[list(r.regions) for r in example.references],
            ))
        except (ValueError, OSError) as exc:
            raise TrainingError(f"cannot load training example: {exc}", example_ids=[record.id]) from exc
    return examples


@dataclass
class TrainState:
    model: MRCUNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    smoothed_loss: Optional[float] = None
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    generator: torch.Generator = field(default_factory=torch.Generator)
    log: list[TrainLogRecord] = field(default_factory=list)


def make_optimizer(model: MRCUNet, config: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)


def new_state(model: MRCUNet, config: TrainConfig) -> TrainState:
    return TrainState(
        model=model,
        optimizer=make_optimizer(model, config),
        rng=np.random.default_rng(config.seed),
        generator=torch.Generator().manual_seed(config.seed),
    )


def _source_weights(sources: dict[str, Sequence[TrainExample]], mix: dict[str, float]) -> tuple[list[str], np.ndarray]:
    names = [name for name in sources if sources[name]]
    if not names:
        raise TrainingError("no training examples")
    if not mix:
        weights = np.array([len(sources[n]) for n in names], dtype=np.float64)
    else:
        unknown = set(mix) - set(sources)
        if unknown:
            raise RefAudioValueError(f"mix names unknown sources: {sorted(unknown)}")
        weights = np.array([mix.get(n, 0.0) for n in names], dtype=np.float64)
    return names, weights / weights.sum()


def draw_batch(state: TrainState, sources: dict[str, Sequence[TrainExample]], config: TrainConfig,
               text_encoder: TextEncoder, null: Tensor, codec: CodecParams) -> TrainBatch:
    names, weights = _source_weights(sources, config.mix)
    chosen = []
    for _ in range(config.batch_size):
        pool = sources[names[int(state.rng.choice(len(names), p=weights))]]
        example = pool[int(state.rng.integers(len(pool)))]
        example = augment_references(example, state.rng, null, mask_p=config.mask_p,
                                     drop_p=config.drop_p, codec=codec)
        if state.rng.random() < config.cfg_dropout:
            example = null_conditioned(example, null)
        chosen.append(example)
    return collate(chosen, text_encoder)


CheckpointHook = Callable[[TrainState], None]


def train_loop(
    sources: dict[str, Sequence[TrainExample]] | Sequence[TrainExample],
    config: TrainConfig,
    text_encoder: TextEncoder,
    codec: CodecParams,
    *,
    model: Optional[MRCUNet] = None,
    state: Optional[TrainState] = None,
    log_path: Optional[str | os.PathLike[str]] = None,
    on_checkpoint: Optional[CheckpointHook] = None,
) -> TrainState:
    """Run (or resume) training until `config.steps` optimizer updates are done."""
    if not isinstance(sources, dict):
        sources = {"train": list(sources)}
    if state is None:
        if model is None:
            raise RefAudioValueError("train_loop needs a model or a resumed state")
        state = new_state(model, config)
    null = null_latent(codec)
    model = state.model
    model.train()
    logger.update_context(stage="train")

    while state.step < config.steps:
        batch = draw_batch(state, sources, config, text_encoder, null, codec)
        lr = lr_at(state.step + 1, config.lr, config.warmup_steps)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        loss = rfm_loss(batch, model, state.generator, sigma=config.sigma)
        state.optimizer.zero_grad()
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(
            [p for p in model.parameters() if p.requires_grad], 1.0)
        if not torch.isfinite(grad_norm):
            raise TrainingError("non-finite gradient", example_ids=batch.ids,
                                diagnostics={"step": state.step, "loss": float(loss)})
        state.optimizer.step()
        state.step += 1

        value = float(loss)
        if state.smoothed_loss is None:
            state.smoothed_loss = value
        else:
            state.smoothed_loss = config.smoothing * state.smoothed_loss + (1 - config.smoothing) * value
        state.log.append(TrainLogRecord(step=state.step, loss=value,
                                        smoothed_loss=state.smoothed_loss, lr=lr))
        logger.debug("Train step", step=state.step, loss=value, lr=lr)
        if state.step % config.log_every == 0:
            logger.info("Training progress", step=state.step, smoothed_loss=state.smoothed_loss, lr=lr)
        if on_checkpoint is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            on_checkpoint(state)
            if log_path is not None:
                write_jsonl(log_path, state.log)

    model.eval()
    if log_path is not None:
        write_jsonl(log_path, state.log)
    return state


def adapt_reference_count(
    model: Optional[MRCUNet],
    k_new: int,
    sources: dict[str, Sequence[TrainExample]] | Sequence[TrainExample],
    config: TrainConfig,
    text_encoder: TextEncoder,
    codec: CodecParams,
    *,
    log_path: Optional[str | os.PathLike[str]] = None,
    on_checkpoint: Optional[CheckpointHook] = None,
) -> TrainState:
    """Insert alignment convolutions and fine-tune only them for `k_new` reference slots."""
    if model is None:
        raise RefAudioValueError("adapt_reference_count needs trained base weights")
    if k_new == model.config.k_max:
        raise RefAudioValueError(f"model already takes {k_new} references")
    examples = sources.values() if isinstance(sources, dict) else [sources]
    for pool in examples:
        for example in pool:
            if example.k != k_new:
                raise RefAudioValueError(
                    f"{example.example_id}: {example.k} reference slots, expected {k_new}")

    model.enable_alignment()
    model.config = msgspec.structs.replace(model.config, k_max=k_new)
    for name, param in model.named_parameters():
        param.requires_grad_(".inject.align." in name)
    logger.info("Adapting reference count", k_new=k_new,
                trainable=sum(p.numel() for _, p in model.alignment_parameters()))
    return train_loop(sources, config, text_encoder, codec, model=model,
                      log_path=log_path, on_checkpoint=on_checkpoint)


def log_path_for(out_dir: str | os.PathLike[str]) -> Path:
    return Path(out_dir) / "train_log.jsonl"
