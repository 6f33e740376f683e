"""Prompt + reference pairs -> 10 s waveform."""

import os
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .. import settings
from .._logging import get_logger
from ..codecs import CodecParams, LatentGrid, clip_from_latent, latent_from_clip
from ..dataset_forge import ReferencePair, load_example
from ..errors import RefAudioValueError
from ..event_bank import AudioClip, write_wav
from ..schemas import ManifestRecord, write_jsonl
from ..text_encoder import TextEncoder
from .flow import check_steps, sample_ode
from .unet import MRCUNet

logger = get_logger(__name__)


def fill_references(references: Sequence[ReferencePair], k_max: int,
                    sample_rate: int = settings.SAMPLE_RATE) -> list[ReferencePair]:
    if len(references) > k_max:
        raise RefAudioValueError(f"{len(references)} references exceed the model's {k_max} slots")
    return list(references) + [ReferencePair.null(sample_rate) for _ in range(k_max - len(references))]


def _reference_stack(references: Sequence[ReferencePair], codec: CodecParams) -> Tensor:
    return torch.cat([latent_from_clip(ref.audio, codec).to_tensor() for ref in references], dim=1)[None]


@torch.no_grad()
def generate(
    model: MRCUNet,
    text_encoder: TextEncoder,
    codec: CodecParams,
    prompt: str,
    references: Sequence[ReferencePair] = (),
    *,
    steps: int = settings.SAMPLE_STEPS,
    w: float = settings.CFG_WEIGHT,
    seed: int = 0,
    griffin_lim_iterations: int = 60,
) -> AudioClip:
    """Sample a latent for `prompt` customized by `references` and decode it to audio."""
    check_steps(steps)
    k_max = model.config.k_max
    slots = fill_references(references, k_max, codec.sample_rate)
    nulls = fill_references([], k_max, codec.sample_rate)
    model.eval()

    generator = torch.Generator().manual_seed(seed)
    z = sample_ode(
        model,
        _reference_stack(slots, codec),
        text_encoder.bundle_references([r.caption for r in slots], k_max)[None],
        text_encoder.embed(prompt)[None],
        shape=(1, *codec.latent_shape),
        null_references=_reference_stack(nulls, codec),
        null_reference_text=text_encoder.bundle_references([""] * k_max, k_max)[None],
        null_prompt=text_encoder.embed("")[None],
        steps=steps,
        w=w,
        generator=generator,
    )
    return clip_from_latent(LatentGrid(z[0].numpy()), codec, griffin_lim_iterations, seed=seed)


def generate_manifest(
    model: MRCUNet,
    text_encoder: TextEncoder,
    codec: CodecParams,
    records: Sequence[ManifestRecord],
    root: str | os.PathLike[str],
    out_dir: str | os.PathLike[str],
    *,
    steps: int = settings.SAMPLE_STEPS,
    w: float = settings.CFG_WEIGHT,
    seed: int = 0,
    griffin_lim_iterations: int = 60,
) -> list[ManifestRecord]:
    """Generate one clip per record (same prompt and references); writes generated.jsonl."""
    out = Path(out_dir)
    generated = []
    seeds = np.random.SeedSequence(seed).generate_state(max(1, len(records)))
    for record, example_seed in zip(records, seeds):
        example = load_example(record, root, model.config.k_max, codec.sample_rate)
        references = [r for r in example.references if not r.is_null]
        clip = generate(model, text_encoder, codec, example.target_caption, references,
                        steps=steps, w=w, seed=int(example_seed),
                        griffin_lim_iterations=griffin_lim_iterations)
        path = Path("generated") / f"{record.id}.wav"
        write_wav(clip, out / path)
        generated.append(ManifestRecord(
            id=record.id,
            target_path=path.as_posix(),
            target_caption=record.target_caption,
            references=[],
            regions=list(record.regions),
            mode=record.mode,
        ))
        logger.info("Generated clip", id=record.id, path=str(out / path))
    write_jsonl(out / "generated.jsonl", generated)
    return generated
