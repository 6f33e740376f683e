"""
Event Bank
Deterministic synthetic catalog of distinguishable sound events, plus WAV ingestion
for hand-collected recordings.
"""

import os
import zlib
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import soundfile as sf
from scipy import signal

from . import settings
from ._logging import get_logger
from .errors import RefAudioOSError, RefAudioValueError
from .schemas import EventSpec, Timbre, read_jsonl, write_jsonl

logger = get_logger(__name__)

FAMILIES = ("sine-stack", "fm", "filtered-noise", "impulse-train")

# FM modulator frequency is base_hz * FM_RATIO with modulation index FM_INDEX
FM_RATIO = 1.5
FM_INDEX = 2.0
# impulse-train: base_hz is the pulse rate, each pulse rings at base_hz * RING_FACTOR
RING_FACTOR = 40.0
RING_DECAY_S = 0.012

DEFAULT_LABELS = (
    "a dog barking",
    "a siren wailing",
    "a bell ringing",
    "a bird chirping",
    "an engine humming",
    "rain falling",
    "someone knocking on a door",
    "a whistle blowing",
    "a phone ringing",
    "wind blowing",
    "a clock ticking",
    "a drum beating",
    "a car horn honking",
    "water dripping",
    "a cat meowing",
    "an alarm beeping",
)

# (attack fraction, sustain gain, release start) shapes cycled across the catalog
_ENVELOPE_SHAPES = (
    ((0.0, 0.0), (0.02, 1.0), (0.3, 0.4), (1.0, 0.0)),  # percussive
    ((0.0, 0.0), (0.4, 1.0), (0.8, 0.8), (1.0, 0.0)),  # swell
    ((0.0, 0.0), (0.05, 1.0), (0.95, 1.0), (1.0, 0.0)),  # flat
    ((0.0, 0.0), (0.1, 1.0), (0.5, 0.2), (0.6, 1.0), (1.0, 0.0)),  # double hit
)


@dataclass
class AudioClip:
    """Mono waveform in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int = settings.SAMPLE_RATE
    label: Optional[str] = None

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise RefAudioValueError(f"AudioClip expects mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise RefAudioValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.size and np.max(np.abs(samples)) > 1.0:
            raise RefAudioValueError("AudioClip samples must lie in [-1, 1]")
        self.samples = samples

    @classmethod
    def silence(cls, duration_s: float = settings.CLIP_SECONDS,
                sample_rate: int = settings.SAMPLE_RATE) -> "AudioClip":
        return cls(np.zeros(int(round(duration_s * sample_rate))), sample_rate)

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate

    def rms(self) -> float:
        if self.num_samples == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples ** 2)))

    def is_silent(self) -> bool:
        return not np.any(self.samples)

    def fitted(self, num_samples: int) -> "AudioClip":
        """Zero-pad or trim to exactly `num_samples`."""
        out = np.zeros(num_samples)
        n = min(num_samples, self.num_samples)
        out[:n] = self.samples[:n]
        return AudioClip(out, self.sample_rate, self.label)


def _validate_spec(spec: EventSpec, sample_rate: int) -> None:
    timbre = spec.timbre
    if not 0.0 < spec.duration_s <= settings.MAX_EVENT_SECONDS:
        raise RefAudioValueError(
            f"{spec.event_id}: duration_s must be in (0, {settings.MAX_EVENT_SECONDS}], "
            f"got {spec.duration_s}"
        )
    if timbre.family not in FAMILIES:
        raise RefAudioValueError(f"{spec.event_id}: unknown timbre family {timbre.family!r}")
    nyquist = sample_rate / 2
    if timbre.base_hz <= 0 or timbre.base_hz >= nyquist:
        raise RefAudioValueError(
            f"{spec.event_id}: base frequency {timbre.base_hz} Hz outside (0, {nyquist})"
        )
    top = max((k + 1 for k, a in enumerate(timbre.partials) if a != 0.0), default=0)
    highest = timbre.base_hz * top
    if timbre.family == "impulse-train":
        highest *= RING_FACTOR
    if highest >= nyquist:
        raise RefAudioValueError(
            f"{spec.event_id}: highest partial {highest:.1f} Hz is at or above Nyquist {nyquist}"
        )
    if not 0.0 <= timbre.noise_mix <= 1.0:
        raise RefAudioValueError(f"{spec.event_id}: noise_mix must be in [0, 1]")


def _envelope(breakpoints: Iterable[tuple[float, float]], n: int) -> np.ndarray:
    points = np.asarray(list(breakpoints), dtype=np.float64)
    if points.size == 0:
        return np.ones(n)
    t = np.linspace(0.0, 1.0, n, endpoint=False)
    return np.interp(t, points[:, 0], points[:, 1])


def _tonal(timbre: Timbre, t: np.ndarray, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    out = np.zeros_like(t)
    f0 = timbre.base_hz
    if timbre.family == "impulse-train":
        ring = np.zeros_like(t)
        ring_t = t[: int(RING_DECAY_S * 6 * sample_rate)]
        for k, amp in enumerate(timbre.partials):
            if amp:
                ring[: ring_t.size] += amp * np.sin(2 * np.pi * f0 * RING_FACTOR * (k + 1) * ring_t)
        ring[: ring_t.size] *= np.exp(-ring_t / RING_DECAY_S)
        pulses = np.zeros_like(t)
        period = max(1, int(round(sample_rate / f0)))
        offset = int(rng.integers(0, period))
        pulses[offset::period] = 1.0
        return signal.fftconvolve(pulses, ring[: ring_t.size])[: t.size]
    for k, amp in enumerate(timbre.partials):
        if not amp:
            continue
        phase = rng.uniform(0, 2 * np.pi)
        carrier = 2 * np.pi * f0 * (k + 1) * t + phase
        if timbre.family == "fm":
            carrier = carrier + FM_INDEX * np.sin(2 * np.pi * f0 * FM_RATIO * t)
        out += amp * np.sin(carrier)
    return out


def _noise(timbre: Timbre, n: int, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    white = rng.standard_normal(n)
    if timbre.family != "filtered-noise":
        return white
    nyquist = sample_rate / 2
    low = max(timbre.base_hz / 1.5, 20.0) / nyquist
    high = min(timbre.base_hz * 1.5, nyquist * 0.95) / nyquist
    sos = signal.butter(4, [low, high], btype="bandpass", output="sos")
    return signal.sosfilt(sos, white)


def synthesize_event(spec: EventSpec, seed: int,
                     sample_rate: int = settings.SAMPLE_RATE) -> AudioClip:
    """Render `spec` deterministically for `(spec, seed)`, peak-normalized to PEAK_LEVEL."""
    _validate_spec(spec, sample_rate)
    n = int(round(spec.duration_s * sample_rate))
    # zlib.crc32 keeps the stream stable across interpreter runs (str hash is salted)
    rng = np.random.default_rng([seed, zlib.crc32(spec.event_id.encode("utf-8"))])
    t = np.arange(n) / sample_rate
    timbre = spec.timbre

    tonal = _tonal(timbre, t, rng, sample_rate)
    noise = _noise(timbre, n, rng, sample_rate) if timbre.noise_mix > 0 else np.zeros(n)
    for part in (tonal, noise):
        peak = np.max(np.abs(part)) if n else 0.0
        if peak > 0:
            part /= peak
    mixed = (1.0 - timbre.noise_mix) * tonal + timbre.noise_mix * noise
    mixed *= _envelope(timbre.envelope, n)

    peak = np.max(np.abs(mixed)) if n else 0.0
    if peak > 0:
        mixed *= settings.PEAK_LEVEL / peak
    return AudioClip(mixed, sample_rate, spec.label)


def default_catalog(n_events: int, seed: int) -> list[EventSpec]:
    """Build `n_events` pairwise-distinct specs, deterministic for `seed`."""
    if n_events < 2:
        raise RefAudioValueError(f"n_events must be at least 2, got {n_events}")
    rng = np.random.default_rng(seed)
    # Log-spaced base ladder, shuffled across events so neighbouring families
    # never share a pitch region.
    ladder = np.geomspace(140.0, 2000.0, n_events)
    order = rng.permutation(n_events)
    specs: list[EventSpec] = []
    for i in range(n_events):
        family = FAMILIES[i % len(FAMILIES)]
        base_hz = float(round(ladder[order[i]], 2))
        if family == "impulse-train":
            # pulse rate rather than pitch; ring frequency stays below Nyquist
            base_hz = float(round(3.0 + 12.0 * order[i] / max(1, n_events - 1), 2))
        n_partials = 1 + i % 3
        partials = tuple(float(round(1.0 / (k + 1) ** rng.uniform(0.5, 1.5), 3))
                         for k in range(n_partials))
        while base_hz * len(partials) * (RING_FACTOR if family == "impulse-train" else 1) >= 7600:
            partials = partials[:-1]
        noise_mix = 0.6 if family == "filtered-noise" else float(round(rng.uniform(0.0, 0.15), 3))
        label = DEFAULT_LABELS[i % len(DEFAULT_LABELS)]
        if i >= len(DEFAULT_LABELS):
            label = f"{label} variant {i // len(DEFAULT_LABELS) + 1}"
        specs.append(
            EventSpec(
                event_id=f"ev{i:03d}",
                label=label,
                timbre=Timbre(
                    family=family,
                    base_hz=base_hz,
                    partials=partials,
                    envelope=_ENVELOPE_SHAPES[(i // len(FAMILIES)) % len(_ENVELOPE_SHAPES)],
                    noise_mix=noise_mix,
                ),
                duration_s=float(round(rng.uniform(1.0, 4.5), 2)),
            )
        )
    check_catalog_unique(specs)
    return specs


def check_catalog_unique(specs: Iterable[EventSpec]) -> None:
    seen: dict[tuple, str] = {}
    ids: set[str] = set()
    for spec in specs:
        if spec.event_id in ids:
            raise RefAudioValueError(f"duplicate event_id {spec.event_id}")
        ids.add(spec.event_id)
        key = (spec.timbre.family, spec.timbre.base_hz, spec.timbre.partials,
               spec.timbre.envelope, spec.timbre.noise_mix)
        if key in seen:
            raise RefAudioValueError(
                f"events {seen[key]} and {spec.event_id} share the same timbre recipe"
            )
        seen[key] = spec.event_id


def export_catalog(specs: Iterable[EventSpec], path: str | os.PathLike[str]) -> None:
    write_jsonl(path, specs)


def load_catalog(path: str | os.PathLike[str]) -> list[EventSpec]:
    specs = read_jsonl(path, EventSpec)
    check_catalog_unique(specs)
    return specs


def ingest_wav(path: str | os.PathLike[str],
               sample_rate: int = settings.SAMPLE_RATE,
               label: Optional[str] = None) -> AudioClip:
    """Read a mono or stereo PCM16 WAV, downmix, resample and scale to [-1, 1]."""
    source = Path(path)
    try:
        info = sf.info(str(source))
        if info.format != "WAV" or info.subtype != "PCM_16":
            raise RefAudioOSError(
                f"Unsupported audio file {source}: expected PCM16 WAV, "
                f"got {info.format}/{info.subtype}", path=source,
            )
        data, rate = sf.read(str(source), dtype="float64", always_2d=True)
    except RefAudioOSError:
        raise
    except (RuntimeError, OSError, sf.LibsndfileError) as exc:
        raise RefAudioOSError(f"Cannot read audio file {source}: {exc}", path=source) from exc

    mono = data.mean(axis=1)
    if rate != sample_rate:
        # polyphase FIR with a Kaiser-windowed sinc kernel
        g = gcd(int(rate), int(sample_rate))
        mono = signal.resample_poly(mono, sample_rate // g, rate // g)
    mono = np.clip(mono, -1.0, 1.0)
    logger.debug("Ingested recording", path=str(source), rate=rate, samples=mono.size)
    return AudioClip(mono, sample_rate, label)


def write_wav(clip: AudioClip, path: str | os.PathLike[str]) -> None:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        sf.write(str(target), clip.samples, clip.sample_rate, subtype="PCM_16", format="WAV")
    except (RuntimeError, OSError) as exc:
        raise RefAudioOSError(f"Cannot write {target}: {exc}", path=target) from exc


def label_phrase(label: str) -> str:
    """Turn a bare class label ("dog_bark") into a caption phrase."""
    cleaned = label.replace("_", " ").replace("-", " ").strip()
    if " " in label.strip():
        return label.strip()
    return f"the sound of {cleaned}"


@dataclass
class EventBank:
    """Synthesized catalog events plus ingested recordings, addressed by event_id."""

    specs: dict[str, EventSpec] = field(default_factory=dict)
    recordings: dict[str, AudioClip] = field(default_factory=dict)
    sample_rate: int = settings.SAMPLE_RATE

    @classmethod
    def from_catalog(cls, specs: Iterable[EventSpec],
                     sample_rate: int = settings.SAMPLE_RATE) -> "EventBank":
        specs = list(specs)
        check_catalog_unique(specs)
        return cls({spec.event_id: spec for spec in specs}, {}, sample_rate)

    @classmethod
    def default(cls, n_events: int = 12, seed: int = 7) -> "EventBank":
        return cls.from_catalog(default_catalog(n_events, seed))

    def add_recording(self, event_id: str, label: str, clip: AudioClip) -> None:
        if event_id in self.specs or event_id in self.recordings:
            raise RefAudioValueError(f"duplicate event_id {event_id}")
        if clip.sample_rate != self.sample_rate:
            raise RefAudioValueError(
                f"recording {event_id} at {clip.sample_rate} Hz, bank is {self.sample_rate} Hz"
            )
        self.recordings[event_id] = AudioClip(clip.samples, clip.sample_rate, label_phrase(label))

    @property
    def event_ids(self) -> list[str]:
        return sorted([*self.specs, *self.recordings])

    def label(self, event_id: str) -> str:
        if event_id in self.specs:
            return label_phrase(self.specs[event_id].label)
        return self.recordings[event_id].label or event_id

    def duration_s(self, event_id: str) -> float:
        if event_id in self.specs:
            return self.specs[event_id].duration_s
        return self.recordings[event_id].duration_s

    def short_event_ids(self) -> list[str]:
        return [e for e in self.event_ids if self.duration_s(e) < settings.MAX_EVENT_SECONDS]

    def render(self, event_id: str, seed: int) -> AudioClip:
        if event_id in self.specs:
            clip = synthesize_event(self.specs[event_id], seed, self.sample_rate)
        elif event_id in self.recordings:
            clip = self.recordings[event_id]
        else:
            raise RefAudioValueError(f"unknown event_id {event_id}")
        return AudioClip(clip.samples, clip.sample_rate, self.label(event_id))

    @classmethod
    def from_directory(cls, bank_dir: str | os.PathLike[str], n_events: int = 12,
                       seed: int = 7) -> "EventBank":
        """`catalog.jsonl` if present (else the default catalog) plus `recordings/*.wav`."""
        root = Path(bank_dir)
        catalog = root / "catalog.jsonl"
        bank = cls.from_catalog(load_catalog(catalog) if catalog.is_file() else default_catalog(n_events, seed))
        for wav in sorted((root / "recordings").glob("*.wav")):
            bank.add_recording(f"rec-{wav.stem}", wav.stem, ingest_wav(wav, bank.sample_rate))
        logger.info("Loaded event bank", bank_dir=str(root), synthesized=len(bank.specs),
                    recordings=len(bank.recordings))
        return bank
