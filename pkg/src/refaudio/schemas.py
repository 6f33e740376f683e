"""Structured records persisted as line-delimited JSON.

Catalogs, manifests, training logs and metric reports all share the same
encoding: one msgspec struct per line, fields in declaration order, so
re-running a deterministic job yields byte-identical files.
"""

import json
import os
import tempfile

from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence, Type, TypeAlias, TypeVar

import msgspec
from msgspec import Struct

from .errors import RefAudioOSError, RefAudioValueError

__all__ = [
    "RefAudioStruct",
    "Timbre",
    "EventSpec",
    "ReferenceRecord",
    "RegionRecord",
    "ManifestRecord",
    "TrainLogRecord",
    "MetricRecord",
    "read_jsonl",
    "write_jsonl",
    "atomic_write_bytes",
]

DictObject: TypeAlias = Mapping[str, Any]

TStruct = TypeVar("TStruct", bound=Struct)


def _format_json(data: Any, *, sort_keys: bool = True) -> str:
    return json.dumps(data, indent=2, sort_keys=sort_keys)


class RefAudioStruct(Struct, kw_only=True):
    """Base class for every persisted record."""

    def to_dict(self) -> dict[str, Any]:
        return msgspec.to_builtins(self)

    def __str__(self) -> str:
        return _format_json(self.to_dict(), sort_keys=False)


class Timbre(RefAudioStruct):
    # family in {"sine-stack", "fm", "filtered-noise", "impulse-train"}
    family: str
    base_hz: float
    partials: tuple[float, ...]
    # (time fraction, gain) breakpoints, time fractions ascending in [0, 1]
    envelope: tuple[tuple[float, float], ...]
    noise_mix: float


class EventSpec(RefAudioStruct):
    """One catalog event. Line format: event_id, label, timbre, duration_s."""

    event_id: str
    label: str
    timbre: Timbre
    duration_s: float


class RegionRecord(RefAudioStruct):
    start_s: float
    end_s: float
    label: str
    event_id: str = ""


class ReferenceRecord(RefAudioStruct):
    # empty path and caption mark a null slot
    path: str
    caption: str
    # event regions inside the reference clip itself
    regions: list[RegionRecord] = []


class ManifestRecord(RefAudioStruct):
    id: str
    target_path: str
    target_caption: str
    references: list[ReferenceRecord]
    regions: list[RegionRecord]
    snr_db: list[float] = []
    mode: str = ""


class TrainLogRecord(RefAudioStruct):
    step: int
    loss: float
    smoothed_loss: float
    lr: float


class MetricRecord(RefAudioStruct):
    metric: str
    value: float
    extractor: str
    per_example: dict[str, float] = {}


def atomic_write_bytes(path: str | os.PathLike[str], payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename over `path`."""
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, target)
    except OSError as exc:
        raise RefAudioOSError(f"Cannot write {target}: {exc}", path=target) from exc


def write_jsonl(path: str | os.PathLike[str], records: Iterable[Struct]) -> None:
    encoder = msgspec.json.Encoder()
    payload = b"".join(encoder.encode(record) + b"\n" for record in records)
    atomic_write_bytes(path, payload)


def read_jsonl(path: str | os.PathLike[str], record_type: Type[TStruct]) -> list[TStruct]:
    source = Path(path)
    try:
        lines = source.read_bytes().splitlines()
    except OSError as exc:
        raise RefAudioOSError(f"Cannot read {source}: {exc}", path=source) from exc
    decoder = msgspec.json.Decoder(record_type)
    records: list[TStruct] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(decoder.decode(line))
        except msgspec.ValidationError as exc:
            raise RefAudioValueError(f"{source}:{lineno}: {exc}") from exc
        except msgspec.DecodeError as exc:
            raise RefAudioValueError(f"{source}:{lineno}: malformed record: {exc}") from exc
    return records


def records_by_id(records: Sequence[ManifestRecord]) -> dict[str, ManifestRecord]:
    return {record.id: record for record in records}
