"""
Audio codecs
Waveform <-> log-mel spectrogram <-> latent grid, with a deterministic
space-to-depth codec, a trainable toy VAE and Griffin-Lim reconstruction.
"""

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import librosa
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import settings
from ._logging import get_logger
from .errors import RefAudioOSError, RefAudioValueError, TrainingError
from .event_bank import AudioClip, EventBank
from .schemas import atomic_write_bytes

logger = get_logger(__name__)

CODEC_MODES = ("deterministic", "vae")


@dataclass
class MelSpectrogram:
    """Log-magnitude mel grid, frames x bins. Frames past `valid_frames` are padding."""

    values: np.ndarray
    n_fft: int = settings.N_FFT
    hop_length: int = settings.HOP_LENGTH
    sample_rate: int = settings.SAMPLE_RATE
    valid_frames: int = int(settings.CLIP_SECONDS * settings.SAMPLE_RATE) // settings.HOP_LENGTH

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


@dataclass
class LatentGrid:
    """channels x time x freq tensor in codec latent space."""

    values: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.values, dtype=np.float32))


class ToyVAE(nn.Module):
    """Convolutional VAE on (1, 1024, 64) log-mels with a (8, 256, 16) latent."""

    def __init__(self, latent_channels: int = settings.VAE_CHANNELS, width: int = 16) -> None:
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(1, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * width, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * width, 2 * width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 1, 3, padding=1),
        )

    def encode(self, mel: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        stats = self.encoder(mel)
        mean, logvar = stats.chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)


@dataclass
class CodecParams:
    mode: str = "deterministic"
    sample_rate: int = settings.SAMPLE_RATE
    n_fft: int = settings.N_FFT
    hop_length: int = settings.HOP_LENGTH
    n_mels: int = settings.N_MELS
    frames: int = settings.MEL_FRAMES
    compression: int = settings.COMPRESSION
    vae: Optional[ToyVAE] = None
    history: list[dict[str, float]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.mode not in CODEC_MODES:
            raise RefAudioValueError(f"codec mode must be one of {CODEC_MODES}, got {self.mode!r}")
        if self.mode == "vae" and self.vae is None:
            raise RefAudioValueError("vae codec mode requires VAE weights")

    @property
    def latent_channels(self) -> int:
        if self.mode == "vae":
            assert self.vae is not None
            return self.vae.latent_channels
        return self.compression * self.compression

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.frames // self.compression,
                self.n_mels // self.compression)

    @property
    def clip_samples(self) -> int:
        return int(round(settings.CLIP_SECONDS * self.sample_rate))

    @property
    def valid_frames(self) -> int:
        return self.clip_samples // self.hop_length

    def mel_basis(self) -> np.ndarray:
        return librosa.filters.mel(sr=self.sample_rate, n_fft=self.n_fft, n_mels=self.n_mels,
                                   fmin=0.0, fmax=self.sample_rate / 2)


def _stft(samples: np.ndarray, params: CodecParams) -> np.ndarray:
    return librosa.stft(samples, n_fft=params.n_fft, hop_length=params.hop_length,
                        window="hann", center=True)


def mel_forward(clip: AudioClip, params: CodecParams) -> MelSpectrogram:
    if clip.sample_rate != params.sample_rate:
        raise RefAudioValueError(
            f"clip sample rate {clip.sample_rate} Hz does not match codec rate {params.sample_rate} Hz"
        )
    n = params.clip_samples
    if clip.num_samples > n:
        raise RefAudioValueError(f"clip longer than {settings.CLIP_SECONDS} s ({clip.num_samples} samples)")
    padded = np.zeros(n)
    padded[: clip.num_samples] = clip.samples
    magnitude = np.abs(_stft(padded, params))[:, : params.valid_frames]
    mel = np.log1p(params.mel_basis() @ magnitude).T
    values = np.zeros((params.frames, params.n_mels), dtype=np.float32)
    values[: params.valid_frames] = mel
    return MelSpectrogram(values, params.n_fft, params.hop_length, params.sample_rate,
                          params.valid_frames)


def mel_statistics(clip: AudioClip, params: Optional[CodecParams] = None) -> np.ndarray:
    """Per-band mean and std of the log-mel over the clip's own frames."""
    params = params or CodecParams()
    magnitude = np.abs(_stft(clip.samples, params))
    mel = np.log1p(params.mel_basis() @ magnitude)
    return np.concatenate([mel.mean(axis=1), mel.std(axis=1)])


def separability_score(bank: EventBank, seed: int = 0, params: Optional[CodecParams] = None) -> float:
    """Closest between-event feature distance over the widest within-event distance.

    Two renders per event with different seeds; values above 1 mean every pair of
    events is further apart than any event is from itself.
    """
    params = params or CodecParams(sample_rate=bank.sample_rate)
    ids = bank.event_ids
    if len(ids) < 2:
        raise RefAudioValueError("separability needs at least two events")
    feats = {
        e: [mel_statistics(bank.render(e, seed + k), params) for k in range(2)] for e in ids
    }
    within = max(float(np.linalg.norm(a - b)) for a, b in feats.values())
    between = min(
        float(np.linalg.norm(feats[a][0] - feats[b][0]))
        for i, a in enumerate(ids) for b in ids[i + 1:]
    )
    return between / max(within, 1e-12)


def _check_mel(mel: MelSpectrogram, params: CodecParams) -> None:
    expected = (params.frames, params.n_mels)
    if mel.shape != expected:
        raise RefAudioValueError(f"mel shape {mel.shape} does not match codec shape {expected}")


def encode_latent(mel: MelSpectrogram, params: CodecParams) -> LatentGrid:
    _check_mel(mel, params)
    if params.mode == "deterministic":
        c = params.compression
        t, f = params.frames // c, params.n_mels // c
        # (T*c, F*c) -> (c, c, T, F): channel index = time offset * c + freq offset
        blocks = mel.values.reshape(t, c, f, c).transpose(1, 3, 0, 2)
        return LatentGrid(np.ascontiguousarray(blocks.reshape(c * c, t, f)))
    assert params.vae is not None
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(mel.values, dtype=np.float32))[None, None]
        mean, _ = params.vae.encode(x)
    return LatentGrid(mean[0].numpy())


def decode_latent(latent: LatentGrid, params: CodecParams) -> MelSpectrogram:
    if latent.shape != params.latent_shape:
        raise RefAudioValueError(
            f"latent shape {latent.shape} does not match codec shape {params.latent_shape}"
        )
    if params.mode == "deterministic":
        c = params.compression
        _, t, f = latent.shape
        values = latent.values.reshape(c, c, t, f).transpose(2, 0, 3, 1).reshape(t * c, f * c)
        return MelSpectrogram(np.ascontiguousarray(values), params.n_fft, params.hop_length,
                              params.sample_rate, params.valid_frames)
    assert params.vae is not None
    with torch.no_grad():
        mel = params.vae.decode(latent.to_tensor()[None])[0, 0]
    return MelSpectrogram(mel.numpy(), params.n_fft, params.hop_length, params.sample_rate,
                          params.valid_frames)


def init_toy_vae(seed: int = 0, latent_channels: int = settings.VAE_CHANNELS) -> ToyVAE:
    """Seeded initialization; the caller's global torch RNG is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToyVAE(latent_channels)


def train_toy_vae(
    mels: Sequence[MelSpectrogram] | np.ndarray,
    epochs: int,
    kl_weight: float,
    *,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
    min_examples: int = 100,
) -> CodecParams:
    """Fit the toy VAE; per-epoch mean losses are kept in `params.history`."""
    data = np.stack([m.values if isinstance(m, MelSpectrogram) else m for m in mels])
    if data.shape[0] < min_examples:
        raise RefAudioValueError(f"train_toy_vae needs at least {min_examples} mels, got {data.shape[0]}")
    if epochs < 0:
        raise RefAudioValueError("epochs must be non-negative")
    vae = init_toy_vae(seed)
    params = CodecParams(mode="vae", vae=vae)
    _check_mel(MelSpectrogram(data[0]), params)

    tensor = torch.from_numpy(data.astype(np.float32))[:, None]
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.Adam(vae.parameters(), lr=lr)
    for epoch in range(epochs):
        order = torch.randperm(tensor.shape[0], generator=generator)
        recon_total, kl_total, batches = 0.0, 0.0, 0
        for start in range(0, tensor.shape[0], batch_size):
            batch = tensor[order[start:start + batch_size]]
            mean, logvar = vae.encode(batch)
            eps = torch.randn(mean.shape, generator=generator)
            z = mean + torch.exp(0.5 * logvar) * eps
            recon = F.mse_loss(vae.decode(z), batch)
            kl = 0.5 * torch.mean(mean ** 2 + logvar.exp() - 1.0 - logvar)
            loss = recon + kl_weight * kl
            if not torch.isfinite(loss):
                raise TrainingError(
                    "toy VAE diverged",
                    diagnostics={"epoch": epoch, "batch_start": start,
                                 "recon": float(recon), "kl": float(kl)},
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            recon_total += float(recon)
            kl_total += float(kl)
            batches += 1
        record = {"epoch": epoch, "recon": recon_total / batches, "kl": kl_total / batches}
        params.history.append(record)
        logger.info("VAE epoch", **record)
    vae.eval()
    return params


def roundtrip_mse(mels: np.ndarray, params: CodecParams) -> float:
    errors = [
        float(np.mean((decode_latent(encode_latent(MelSpectrogram(m), params), params).values - m) ** 2))
        for m in mels
    ]
    return float(np.mean(errors))


def _mel_to_magnitude(mel: MelSpectrogram, params: CodecParams, method: str) -> np.ndarray:
    frames = mel.values[: params.valid_frames].astype(np.float64)
    mel_mag = np.maximum(np.expm1(np.maximum(frames, 0.0)), 0.0).T
    if not np.any(mel_mag):
        return np.zeros((params.n_fft // 2 + 1, params.valid_frames))
    if method == "nnls":
        return librosa.feature.inverse.mel_to_stft(
            mel_mag, sr=params.sample_rate, n_fft=params.n_fft, power=1.0,
            fmin=0.0, fmax=params.sample_rate / 2,
        )
    if method == "pinv":
        return np.maximum(np.linalg.pinv(params.mel_basis()) @ mel_mag, 0.0)
    raise RefAudioValueError(f"unknown mel inversion method {method!r}")


def griffin_lim_with_errors(
    mel: MelSpectrogram,
    params: CodecParams,
    iterations: int,
    *,
    seed: int = 0,
    mel_inverse: str = "nnls",
) -> tuple[AudioClip, list[float]]:
    """Classic Griffin-Lim; also returns the relative STFT-magnitude consistency error per iteration."""
    if iterations < 1:
        raise RefAudioValueError(f"iterations must be at least 1, got {iterations}")
    _check_mel(mel, params)
    target = _mel_to_magnitude(mel, params, mel_inverse)
    # center=True framing of a 10 s clip has one more frame than the mel keeps
    target = np.pad(target, ((0, 0), (0, 1)), mode="edge")
    n = params.clip_samples
    norm = np.linalg.norm(target)
    if norm == 0.0:
        return AudioClip(np.zeros(n), params.sample_rate), [0.0] * iterations

    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(target.shape))
    errors: list[float] = []
    samples = np.zeros(n)
    for _ in range(iterations):
        samples = librosa.istft(target * angles, hop_length=params.hop_length,
                                n_fft=params.n_fft, window="hann", center=True, length=n)
        rebuilt = _stft(samples, params)
        errors.append(float(np.linalg.norm(np.abs(rebuilt) - target) / norm))
        angles = rebuilt / np.maximum(np.abs(rebuilt), 1e-12)
    return AudioClip(np.clip(samples, -1.0, 1.0), params.sample_rate), errors


def griffin_lim(mel: MelSpectrogram, params: CodecParams, iterations: int, **kwargs) -> AudioClip:
    clip, _ = griffin_lim_with_errors(mel, params, iterations, **kwargs)
    return clip


def latent_from_clip(clip: AudioClip, params: CodecParams) -> LatentGrid:
    return encode_latent(mel_forward(clip, params), params)


def clip_from_latent(latent: LatentGrid, params: CodecParams, iterations: int = 60,
                     **kwargs) -> AudioClip:
    return griffin_lim(decode_latent(latent, params), params, iterations, **kwargs)


# Binary tensor container: magic, version, dtype code, ndim, shape, row-major payload
_MAGIC = b"RFAT"
_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_DTYPE_CODES = {dtype: code for code, dtype in _DTYPES.items()}


def tensor_to_bytes(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise RefAudioValueError(f"unsupported tensor dtype {array.dtype}")
    header = struct.pack("<4sBBB", _MAGIC, _VERSION, _DTYPE_CODES[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def tensor_from_bytes(payload: bytes) -> np.ndarray:
    try:
        magic, version, code, ndim = struct.unpack_from("<4sBBB", payload, 0)
        if magic != _MAGIC or version != _VERSION or code not in _DTYPES:
            raise RefAudioValueError("not a refaudio tensor container")
        offset = struct.calcsize("<4sBBB")
        shape = struct.unpack_from(f"<{ndim}I", payload, offset)
        offset += 4 * ndim
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, RefAudioValueError):
            raise
        raise RefAudioValueError(f"truncated tensor container: {exc}") from exc
    return data.reshape(shape).copy()


def save_tensor(path: str | os.PathLike[str], array: np.ndarray) -> None:
    atomic_write_bytes(path, tensor_to_bytes(array))


def load_tensor(path: str | os.PathLike[str]) -> np.ndarray:
    source = Path(path)
    try:
        payload = source.read_bytes()
    except OSError as exc:
        raise RefAudioOSError(f"Cannot read {source}: {exc}", path=source) from exc
    return tensor_from_bytes(payload)
