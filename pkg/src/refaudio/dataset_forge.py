"""
Dataset Forge
Builds Customized-Concatenation, Customized-Overlay and General (empty reference)
datasets from an event bank, writes clips as PCM16 WAV and records as jsonl manifests.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import msgspec
import numpy as np

from . import settings
from ._logging import get_logger
from .errors import ForgeError, RefAudioValueError
from .event_bank import AudioClip, EventBank, ingest_wav, write_wav
from .schemas import ManifestRecord, ReferenceRecord, RegionRecord, read_jsonl, write_jsonl

logger = get_logger(__name__)

FORGE_MODES = ("concatenation", "overlay", "general")
OVERLAY_BASES = ("event", "noise")
NOISE_BED_ID = "noise-bed"
NOISE_BED_LABEL = "background noise"
NOISE_BED_RMS = 0.1


class ForgeConfig(msgspec.Struct, kw_only=True):
    mode: str = "concatenation"
    n_examples: int = 100
    k_max: int = settings.K_MAX
    snr_range_db: tuple[float, float] = settings.SNR_RANGE_DB
    connection_phrases: tuple[str, ...] = settings.CONNECTION_PHRASES
    rng_seed: int = 0
    train_fraction: float = 0.8
    # explicit test count; overrides train_fraction (paper-scale presets)
    n_test: Optional[int] = None
    overlay_base: str = "event"
    sample_rate: int = settings.SAMPLE_RATE
    max_draws: int = 200
    min_fragment_s: float = 0.25
    workers: int = 1

    def __post_init__(self) -> None:
        if self.mode not in FORGE_MODES:
            raise RefAudioValueError(f"forge mode must be one of {FORGE_MODES}, got {self.mode!r}")
        if self.k_max < 1:
            raise RefAudioValueError(f"k_max must be at least 1, got {self.k_max}")
        lo, hi = self.snr_range_db
        if not lo <= hi:
            raise RefAudioValueError(f"snr_range_db must be a closed interval, got {self.snr_range_db}")
        if self.n_examples < 1:
            raise RefAudioValueError("n_examples must be positive")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise RefAudioValueError("train_fraction must be in [0, 1]")
        if self.n_test is not None and not 0 <= self.n_test <= self.n_examples:
            raise RefAudioValueError("n_test must be in [0, n_examples]")
        if self.overlay_base not in OVERLAY_BASES:
            raise RefAudioValueError(f"overlay_base must be one of {OVERLAY_BASES}")

    @classmethod
    def paper_scale(cls, mode: str, **overrides) -> "ForgeConfig":
        n_train, n_test = settings.PAPER_SCALE_COUNTS[mode]
        return cls(mode=mode, n_examples=n_train + n_test, n_test=n_test, **overrides)

    @property
    def clip_samples(self) -> int:
        return int(round(settings.CLIP_SECONDS * self.sample_rate))

    @property
    def test_count(self) -> int:
        if self.n_test is not None:
            return self.n_test
        return self.n_examples - int(round(self.n_examples * self.train_fraction))


@dataclass
class Region:
    start_s: float
    end_s: float
    event_id: str
    label: str


@dataclass
class ReferencePair:
    audio: AudioClip
    caption: str = ""
    # event regions inside this reference clip (used for content masking)
    regions: list[Region] = field(default_factory=list)

    @classmethod
    def null(cls, sample_rate: int = settings.SAMPLE_RATE) -> "ReferencePair":
        return cls(AudioClip.silence(settings.CLIP_SECONDS, sample_rate), "")

    @property
    def is_null(self) -> bool:
        return not self.caption

    def __post_init__(self) -> None:
        if self.audio.duration_s > settings.CLIP_SECONDS + 1e-9:
            raise RefAudioValueError("reference audio must be at most 10 s")


@dataclass
class CustomizedExample:
    example_id: str
    mode: str
    target: AudioClip
    target_caption: str
    references: list[ReferencePair]
    regions: list[Region]
    snr_db: list[float] = field(default_factory=list)


def mixing_gain(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if signal.shape != noise.shape:
        raise RefAudioValueError(f"segment lengths differ: {signal.shape} vs {noise.shape}")
    noise_rms = np.sqrt(np.mean(noise ** 2)) if noise.size else 0.0
    if noise_rms <= 0.0:
        raise RefAudioValueError("noise segment has zero RMS")
    signal_rms = np.sqrt(np.mean(signal ** 2))
    return float((signal_rms / noise_rms) / 10.0 ** (snr_db / 20.0))


def mix_at_snr(signal: np.ndarray | AudioClip, noise: np.ndarray | AudioClip,
               snr_db: float) -> np.ndarray:
    """signal + g * noise, with g chosen so the signal-to-scaled-noise ratio is `snr_db`."""
    s = signal.samples if isinstance(signal, AudioClip) else np.asarray(signal, dtype=np.float64)
    n = noise.samples if isinstance(noise, AudioClip) else np.asarray(noise, dtype=np.float64)
    if isinstance(signal, AudioClip) and isinstance(noise, AudioClip) \
            and signal.sample_rate != noise.sample_rate:
        raise RefAudioValueError("segments have different sample rates")
    return s + mixing_gain(s, n, snr_db) * n


def caption_from_labels(labels: Sequence[str], phrases: Sequence[str],
                        seed: int | np.random.Generator = 0) -> str:
    if not labels:
        raise RefAudioValueError("caption_from_labels needs at least one label")
    if len(labels) > 1 and not phrases:
        raise RefAudioValueError("connection phrase list is empty")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    caption = labels[0]
    for label in labels[1:]:
        caption = f"{caption} {phrases[int(rng.integers(len(phrases)))]} {label}"
    return caption


@dataclass
class _Piece:
    event_id: str
    label: str
    samples: np.ndarray


def _draw_concatenation(bank: EventBank, config: ForgeConfig,
                        rng: np.random.Generator) -> list[_Piece]:
    ids = bank.short_event_ids()
    if not ids:
        raise ForgeError("bank has no events shorter than 5 s")
    total = config.clip_samples
    min_fragment = int(round(config.min_fragment_s * config.sample_rate))
    pieces: list[_Piece] = []
    filled = 0
    for _ in range(config.max_draws):
        remaining = total - filled
        if remaining <= 0:
            break
        if remaining < min_fragment and pieces:
            # closing fragment too short to be an event: pad the previous clip instead
            last = pieces[-1]
            last.samples = np.concatenate([last.samples, np.zeros(remaining)])
            filled = total
            break
        event_id = ids[int(rng.integers(len(ids)))]
        clip = bank.render(event_id, int(rng.integers(2 ** 31)))
        segment = clip.samples[:remaining]
        if segment.size == 0:
            continue
        pieces.append(_Piece(event_id, bank.label(event_id), segment))
        filled += segment.size
    if filled < total:
        raise ForgeError(f"could not fill {settings.CLIP_SECONDS} s within {config.max_draws} draws")
    return pieces


def _tile_regions(pieces: Sequence[_Piece], sample_rate: int) -> list[Region]:
    regions = []
    offset = 0
    for piece in pieces:
        regions.append(Region(offset / sample_rate, (offset + piece.samples.size) / sample_rate,
                              piece.event_id, piece.label))
        offset += piece.samples.size
    return regions


def _concatenation_parts(bank: EventBank, config: ForgeConfig, rng: np.random.Generator):
    pieces = _draw_concatenation(bank, config, rng)
    target = AudioClip(np.concatenate([p.samples for p in pieces]), config.sample_rate)
    caption = caption_from_labels([p.label for p in pieces], config.connection_phrases, rng)
    return pieces, target, caption, _tile_regions(pieces, config.sample_rate)


def build_concatenation_example(bank: EventBank, config: ForgeConfig, seed: int,
                                example_id: str = "") -> CustomizedExample:
    rng = np.random.default_rng(seed)
    pieces, target, caption, regions = _concatenation_parts(bank, config, rng)

    # disjoint groups covering every piece; groups keep target order
    order = rng.permutation(len(pieces))
    references: list[ReferencePair] = []
    for g in range(config.k_max):
        members = sorted(int(i) for i in order[g::config.k_max])
        if not members:
            references.append(ReferencePair.null(config.sample_rate))
            continue
        group = [pieces[i] for i in members]
        audio = AudioClip(np.concatenate([p.samples for p in group]), config.sample_rate)
        references.append(ReferencePair(
            audio,
            caption_from_labels([p.label for p in group], config.connection_phrases, rng),
            _tile_regions(group, config.sample_rate),
        ))
    return CustomizedExample(example_id, "concatenation", target, caption, references, regions)


def build_general_example(bank: EventBank, config: ForgeConfig, seed: int,
                          example_id: str = "") -> CustomizedExample:
    rng = np.random.default_rng(seed)
    _, target, caption, regions = _concatenation_parts(bank, config, rng)
    references = [ReferencePair.null(config.sample_rate) for _ in range(config.k_max)]
    return CustomizedExample(example_id, "general", target, caption, references, regions)


def _noise_bed(n: int, rng: np.random.Generator) -> np.ndarray:
    # pink-ish bed: white noise shaped by 1/sqrt(f)
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.arange(spectrum.size)
    spectrum[1:] /= np.sqrt(freqs[1:])
    spectrum[0] = 0.0
    bed = np.fft.irfft(spectrum, n)
    return bed * (NOISE_BED_RMS / np.sqrt(np.mean(bed ** 2)))


def _overlay_window(n_target: int, length: int, placement: str) -> slice:
    return slice(0, length) if placement == "front" else slice(n_target - length, n_target)


def _add_event(target: np.ndarray, base: np.ndarray, event: np.ndarray,
               placement: str, snr_db: float) -> None:
    window = _overlay_window(base.size, event.size, placement)
    # event-to-base ratio equals snr_db, i.e. the base is the "signal" at -snr_db
    target[window] += mixing_gain(base[window], event, -snr_db) * event


def _peak_limit(samples: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(samples))
    return samples / peak if peak > 1.0 else samples


def build_overlay_example(bank: EventBank, config: ForgeConfig, seed: int,
                          example_id: str = "") -> CustomizedExample:
    if config.k_max < 3:
        raise RefAudioValueError("overlay examples need k_max >= 3 (front, back, base)")
    rng = np.random.default_rng(seed)
    short_ids = bank.short_event_ids()
    if not short_ids:
        raise ForgeError("bank has no events shorter than 5 s")
    n = config.clip_samples
    sr = config.sample_rate

    for _ in range(config.max_draws):
        picks = rng.permutation(len(short_ids))
        front_id = short_ids[int(picks[0])]
        back_id = short_ids[int(picks[1 % len(short_ids)])]
        front = bank.render(front_id, int(rng.integers(2 ** 31)))
        back = bank.render(back_id, int(rng.integers(2 ** 31)))

        if config.overlay_base == "noise":
            base_id, base_label = NOISE_BED_ID, NOISE_BED_LABEL
            base = _noise_bed(n, rng)
        else:
            others = [e for e in bank.event_ids if e not in (front_id, back_id)] or bank.event_ids
            base_id = others[int(rng.integers(len(others)))]
            base_label = bank.label(base_id)
            one = bank.render(base_id, int(rng.integers(2 ** 31))).samples
            base = np.resize(one, n)  # loop to full length
        front_window = base[_overlay_window(n, front.num_samples, "front")]
        back_window = base[_overlay_window(n, back.num_samples, "back")]
        if min(np.sqrt(np.mean(front_window ** 2)), np.sqrt(np.mean(back_window ** 2))) > 1e-6 \
                and front.rms() > 0 and back.rms() > 0:
            break
    else:
        raise ForgeError(f"no usable overlay draw within {config.max_draws} attempts")

    lo, hi = config.snr_range_db
    snr_front, snr_back = (float(x) for x in rng.uniform(lo, hi, size=2))
    mixed = base.copy()
    _add_event(mixed, base, front.samples, "front", snr_front)
    _add_event(mixed, base, back.samples, "back", snr_back)
    target = AudioClip(_peak_limit(mixed), sr)

    events = caption_from_labels([front.label, back.label], config.connection_phrases, rng)
    caption = f"{events}, with {base_label} in the background"
    front_end = front.num_samples / sr
    back_start = (n - back.num_samples) / sr
    regions = [
        Region(0.0, front_end, front_id, front.label),
        Region(back_start, n / sr, back_id, back.label),
        Region(0.0, n / sr, base_id, base_label),
    ]
    references = [
        ReferencePair(front, front.label, [Region(0.0, front_end, front_id, front.label)]),
        ReferencePair(back, back.label, [Region(0.0, back.duration_s, back_id, back.label)]),
        ReferencePair(AudioClip(base, sr), base_label, [Region(0.0, n / sr, base_id, base_label)]),
    ]
    references += [ReferencePair.null(sr) for _ in range(config.k_max - 3)]
    return CustomizedExample(example_id, "overlay", target, caption, references, regions,
                             [snr_front, snr_back])


def reconstruct_overlay(example: CustomizedExample) -> AudioClip:
    """Rebuild an overlay target from its references, regions and stored SNRs."""
    if example.mode != "overlay" or len(example.snr_db) != 2:
        raise RefAudioValueError("reconstruct_overlay needs an overlay example")
    front, back, base = (ref.audio.samples for ref in example.references[:3])
    mixed = base.copy()
    _add_event(mixed, base, front, "front", example.snr_db[0])
    _add_event(mixed, base, back, "back", example.snr_db[1])
    return AudioClip(_peak_limit(mixed), example.target.sample_rate)


BUILDERS = {
    "concatenation": build_concatenation_example,
    "overlay": build_overlay_example,
    "general": build_general_example,
}


def example_seed(rng_seed: int, index: int) -> int:
    """Per-example seed; independent of worker count and scheduling."""
    return int(np.random.SeedSequence([rng_seed, index]).generate_state(1)[0])


def _region_record(region: Region) -> RegionRecord:
    return RegionRecord(start_s=region.start_s, end_s=region.end_s,
                        label=region.label, event_id=region.event_id)


def write_example(example: CustomizedExample, root: Path) -> ManifestRecord:
    clip_dir = Path("audio") / example.example_id
    target_path = clip_dir / "target.wav"
    write_wav(example.target, root / target_path)
    references = []
    for k, ref in enumerate(example.references):
        if ref.is_null:
            references.append(ReferenceRecord(path="", caption=""))
            continue
        path = clip_dir / f"ref{k}.wav"
        write_wav(ref.audio, root / path)
        references.append(ReferenceRecord(path=path.as_posix(), caption=ref.caption,
                                          regions=[_region_record(r) for r in ref.regions]))
    return ManifestRecord(
        id=example.example_id,
        target_path=target_path.as_posix(),
        target_caption=example.target_caption,
        references=references,
        regions=[_region_record(r) for r in example.regions],
        snr_db=list(example.snr_db),
        mode=example.mode,
    )


def build_dataset(bank: EventBank, config: ForgeConfig,
                  out_dir: str | os.PathLike[str]) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
    """Forge `config.n_examples` examples into `out_dir`; returns (train, test) records."""
    root = Path(out_dir)
    builder = BUILDERS[config.mode]
    prefix = config.mode[:3]

    def forge_one(index: int) -> ManifestRecord:
        example = builder(bank, config, example_seed(config.rng_seed, index), f"{prefix}-{index:06d}")
        return write_example(example, root)

    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        records = list(pool.map(forge_one, range(config.n_examples)))

    split_rng = np.random.default_rng(np.random.SeedSequence([config.rng_seed, 0x5EED]))
    test_index = set(int(i) for i in split_rng.permutation(config.n_examples)[: config.test_count])
    train = [r for i, r in enumerate(records) if i not in test_index]
    test = [r for i, r in enumerate(records) if i in test_index]
    write_jsonl(root / "train.jsonl", train)
    write_jsonl(root / "test.jsonl", test)
    logger.info("Forged dataset", mode=config.mode, out_dir=str(root),
                train=len(train), test=len(test))
    return train, test


def read_manifest(path: str | os.PathLike[str]) -> list[ManifestRecord]:
    return read_jsonl(path, ManifestRecord)


def write_manifest(path: str | os.PathLike[str], records: Sequence[ManifestRecord]) -> None:
    write_jsonl(path, records)


def _region(record: RegionRecord) -> Region:
    return Region(record.start_s, record.end_s, record.event_id, record.label)


def load_example(record: ManifestRecord, root: str | os.PathLike[str],
                 k_max: int = settings.K_MAX,
                 sample_rate: int = settings.SAMPLE_RATE) -> CustomizedExample:
    """Read one manifest record (and its WAVs, relative to `root`) back into memory."""
    base = Path(root)
    if len(record.references) > k_max:
        raise RefAudioValueError(
            f"{record.id}: {len(record.references)} references exceed k_max={k_max}"
        )
    target = ingest_wav(base / record.target_path, sample_rate).fitted(
        int(round(settings.CLIP_SECONDS * sample_rate)))
    references = []
    for ref in record.references:
        if not ref.path:
            references.append(ReferencePair.null(sample_rate))
            continue
        audio = ingest_wav(base / ref.path, sample_rate)
        if audio.duration_s > settings.CLIP_SECONDS:
            audio = audio.fitted(int(round(settings.CLIP_SECONDS * sample_rate)))
        references.append(ReferencePair(audio, ref.caption, [_region(r) for r in ref.regions]))
    references += [ReferencePair.null(sample_rate) for _ in range(k_max - len(references))]
    return CustomizedExample(record.id, record.mode, target, record.target_caption, references,
                             [_region(r) for r in record.regions], list(record.snr_db))
