"""Versioned checkpoint container, written atomically."""

import io
import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import msgspec
import numpy as np
import torch

from . import settings
from ._logging import get_logger
from .codecs import CodecParams, ToyVAE
from .errors import RefAudioOSError, RefAudioValueError
from .mrc.training import TrainConfig, TrainState, make_optimizer
from .mrc.unet import MRCConfig, MRCUNet
from .schemas import TrainLogRecord, atomic_write_bytes
from .text_encoder import TextEncoder

logger = get_logger(__name__)

CHECKPOINT_VERSION = 1
_FORMAT = "refaudio-checkpoint"


@dataclass
class Checkpoint:
    model: MRCUNet
    text_encoder: TextEncoder
    codec: CodecParams
    config_echo: str = ""
    state: Optional[TrainState] = None


def _codec_payload(codec: CodecParams) -> dict[str, Any]:
    payload: dict[str, Any] = {"mode": codec.mode, "history": list(codec.history)}
    if codec.vae is not None:
        payload["vae_channels"] = codec.vae.latent_channels
        payload["vae"] = codec.vae.state_dict()
    return payload


def _codec_from_payload(payload: dict[str, Any]) -> CodecParams:
    vae = None
    if payload.get("vae") is not None:
        vae = ToyVAE(payload.get("vae_channels", settings.VAE_CHANNELS))
        vae.load_state_dict(payload["vae"])
        vae.eval()
    return CodecParams(mode=payload["mode"], vae=vae, history=list(payload.get("history", [])))


def save_checkpoint(path: str | os.PathLike[str], checkpoint: Checkpoint,
                    train_config: Optional[TrainConfig] = None) -> None:
    payload: dict[str, Any] = {
        "format": _FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_echo": checkpoint.config_echo,
        "mrc_config": msgspec.to_builtins(checkpoint.model.config),
        "mrc": checkpoint.model.state_dict(),
        "text_encoder": {
            "d_text": checkpoint.text_encoder.d_text,
            "vocab_size": checkpoint.text_encoder.vocab_size,
            "length": checkpoint.text_encoder.length,
            "weights": checkpoint.text_encoder.state_dict(),
        },
        "codec": _codec_payload(checkpoint.codec),
    }
    state = checkpoint.state
    if state is not None:
        payload["train"] = {
            "config": msgspec.to_builtins(train_config) if train_config is not None else None,
            "step": state.step,
            "smoothed_loss": state.smoothed_loss,
            "optimizer": state.optimizer.state_dict(),
            "numpy_rng": state.rng.bit_generator.state,
            "torch_rng": state.generator.get_state(),
            "log": [msgspec.to_builtins(r) for r in state.log],
        }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    atomic_write_bytes(path, buffer.getvalue())
    logger.info("Saved checkpoint", path=str(path), step=state.step if state else None)


def load_checkpoint(path: str | os.PathLike[str], train_config: Optional[TrainConfig] = None) -> Checkpoint:
    """Load a checkpoint; training state is restored when present (for resume)."""
    source = Path(path)
    if not source.is_file():
        raise RefAudioOSError(f"Checkpoint not found: {source}", path=source)
    try:
        # numpy rng state and configs are plain containers, not tensors
        payload = torch.load(source, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise RefAudioOSError(f"Cannot read checkpoint {source}: {exc}", path=source) from exc
    if not isinstance(payload, dict) or payload.get("format") != _FORMAT:
        raise RefAudioValueError(f"{source} is not a refaudio checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise RefAudioValueError(
            f"{source}: checkpoint version {payload.get('version')} unsupported (expected {CHECKPOINT_VERSION})"
        )

    model = MRCUNet(msgspec.convert(payload["mrc_config"], MRCConfig))
    model.load_state_dict(payload["mrc"])
    model.eval()
    text = payload["text_encoder"]
    text_encoder = TextEncoder(text["d_text"], text["vocab_size"], text["length"])
    text_encoder.load_state_dict(text["weights"])
    text_encoder.eval()
    checkpoint = Checkpoint(model, text_encoder, _codec_from_payload(payload["codec"]),
                            payload.get("config_echo", ""))

    train = payload.get("train")
    if train is not None:
        config = train_config or msgspec.convert(train["config"] or {}, TrainConfig)
        if model.config.use_alignment:
            # adapted models only ever train their alignment convs
            for name, param in model.named_parameters():
                param.requires_grad_(".inject.align." in name)
        optimizer = make_optimizer(model, config)
        optimizer.load_state_dict(train["optimizer"])
        rng = np.random.default_rng()
        rng.bit_generator.state = train["numpy_rng"]
        generator = torch.Generator()
        generator.set_state(train["torch_rng"])
        checkpoint.state = TrainState(
            model=model,
            optimizer=optimizer,
            step=train["step"],
            smoothed_loss=train["smoothed_loss"],
            rng=rng,
            generator=generator,
            log=[msgspec.convert(r, TrainLogRecord) for r in train["log"]],
        )
    return checkpoint
