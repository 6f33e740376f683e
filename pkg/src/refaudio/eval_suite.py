"""
Evaluation suite
FAD, KL, CLAP and CLAP_A over pluggable embeddings, with a small event
classifier standing in for pretrained audio taggers.
"""

import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._logging import get_logger
from .codecs import CodecParams, mel_forward
from .errors import MetricError, RefAudioOSError, RefAudioValueError, TrainingError
from .event_bank import AudioClip, EventBank, ingest_wav
from .schemas import ManifestRecord, MetricRecord, atomic_write_bytes, records_by_id, write_jsonl

logger = get_logger(__name__)

CLASSIFIER_EXTRACTOR = "event-classifier"
ACCURACY_GATE = 0.90
PSD_TOLERANCE = 1e-8
SQRTM_TOLERANCE = 1e-6


@dataclass
class FeatureSet:
    embeddings: np.ndarray  # (N, d)
    extractor: str

    def __post_init__(self) -> None:
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if not np.all(np.isfinite(self.embeddings)):
            raise RefAudioValueError(f"{self.extractor}: non-finite embedding entries")

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise RefAudioValueError(f"covariance shape {self.cov.shape} does not match mean dimension {d}")
        scale = max(1.0, float(np.max(np.abs(self.cov))) if self.cov.size else 1.0)
        if not np.allclose(self.cov, self.cov.T, atol=PSD_TOLERANCE * scale):
            raise RefAudioValueError("covariance is not symmetric")
        if d and np.min(np.linalg.eigvalsh(self.cov)) < -PSD_TOLERANCE * scale:
            raise RefAudioValueError("covariance is not positive semidefinite")

    @classmethod
    def fit(cls, features: FeatureSet) -> "GaussianStats":
        if len(features) < 2:
            raise RefAudioValueError(f"{features.extractor}: need at least 2 embeddings to fit a Gaussian")
        x = features.embeddings
        return cls(x.mean(axis=0), np.cov(x, rowvar=False, ddof=1))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def _sqrtm_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Symmetric root of a^(1/2) b a^(1/2); its trace equals tr((a b)^(1/2))."""
    half = _psd_sqrt(a)
    product = half @ b @ half
    root = _psd_sqrt(product)
    tolerance = SQRTM_TOLERANCE * max(1.0, float(np.linalg.norm(product)))
    if not np.all(np.isfinite(root)) or np.linalg.norm(root @ root - product) > tolerance:
        raise np.linalg.LinAlgError("matrix square root failed verification")
    return root


def frechet_distance(a: GaussianStats, b: GaussianStats, eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))."""
    if a.mean.shape != b.mean.shape:
        raise RefAudioValueError(f"dimension mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    try:
        root = _sqrtm_product(a.cov, b.cov)
        offset = np.zeros_like(a.cov)
    except np.linalg.LinAlgError:
        # near-singular products: retry with a small diagonal offset
        logger.warn("Frechet distance: singular product, adding offset", eps=eps)
        offset = np.eye(a.cov.shape[0]) * eps
        try:
            root = _sqrtm_product(a.cov + offset, b.cov + offset)
        except np.linalg.LinAlgError as exc:
            raise MetricError(f"matrix square root did not verify: {exc}") from exc
    diff = a.mean - b.mean
    value = diff @ diff + np.trace(a.cov + offset) + np.trace(b.cov + offset) - 2.0 * np.trace(root)
    return float(max(value, 0.0))


def kl_divergence(p: Sequence[float] | np.ndarray, q: Sequence[float] | np.ndarray,
                  floor: float = 1e-12) -> float:
    """sum p_i ln(p_i / q_i) in nats; q is clipped below at `floor`."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise RefAudioValueError(f"probability vectors differ in shape: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise RefAudioValueError("probability vectors must be non-negative")
    for name, v in (("p", p), ("q", q)):
        if abs(v.sum() - 1.0) > 1e-6:
            raise RefAudioValueError(f"{name} sums to {v.sum():.8f}, expected 1")
    q = np.maximum(q, floor)
    support = p > 0
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def _cosine(x: Sequence[float] | np.ndarray, y: Sequence[float] | np.ndarray, epsilon: float) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise RefAudioValueError(f"embedding dimensions differ: {x.shape} vs {y.shape}")
    return float(x @ y / max(np.linalg.norm(x) * np.linalg.norm(y), epsilon))


def clap_score(e_a, e_t, epsilon: float = 1e-8) -> float:
    """Audio-text cosine similarity."""
    return _cosine(e_a, e_t, epsilon)


def clap_a_score(e_a, e_hat, epsilon: float = 1e-8) -> float:
    """Audio-audio cosine similarity between target and generated embeddings."""
    return _cosine(e_a, e_hat, epsilon)


class EventClassifier(nn.Module):
    """Small conv net on log-mels; its pooled penultimate layer is the audio embedding."""

    def __init__(self, labels: Sequence[str], embed_dim: int = 64) -> None:
        super().__init__()
        self.labels = list(labels)
        self.embed_dim = embed_dim
        self.features = nn.Sequential(
            nn.AvgPool2d((4, 1)),
            nn.Conv2d(1, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, embed_dim, 3, padding=1),
            nn.ReLU(),
        )
        self.head = nn.Linear(2 * embed_dim, len(self.labels))
        self.register_buffer("prototypes", torch.zeros(len(self.labels), 2 * embed_dim))
        self.accuracy = float("nan")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def embed(self, mels: torch.Tensor) -> torch.Tensor:
        h = self.features(mels)
        return torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)

    def forward(self, mels: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(mels))

    def extract(self, clips: Sequence[AudioClip], codec: Optional[CodecParams] = None,
                workers: int = 4) -> tuple[FeatureSet, np.ndarray]:
        """(embeddings, class probabilities) for each clip."""
        mels = clips_to_mels(clips, codec, workers)
        self.eval()
        with torch.no_grad():
            emb = self.embed(mels)
            probs = torch.softmax(self.head(emb).double(), dim=1)
        return FeatureSet(emb.double().numpy(), CLASSIFIER_EXTRACTOR), probs.numpy()

    def label_index(self, label: str) -> Optional[int]:
        try:
            return self.labels.index(label)
        except ValueError:
            return None

    def text_embedding(self, labels: Sequence[str]) -> Optional[np.ndarray]:
        """Mean label prototype over the known labels, or None when none is known."""
        index = [i for i in (self.label_index(label) for label in labels) if i is not None]
        if not index:
            return None
        return self.prototypes[index].double().mean(dim=0).numpy()


def clips_to_mels(clips: Sequence[AudioClip], codec: Optional[CodecParams] = None,
                  workers: int = 4) -> torch.Tensor:
    codec = codec or CodecParams()
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        mels = list(pool.map(lambda c: mel_forward(c, codec).values, clips))
    return torch.from_numpy(np.stack(mels))[:, None]


def _placed(clip: AudioClip, rng: np.random.Generator, n: int) -> AudioClip:
    out = np.zeros(n)
    length = min(n, clip.num_samples)
    start = int(rng.integers(0, n - length + 1))
    out[start:start + length] = clip.samples[:length] * rng.uniform(0.5, 1.0)
    return AudioClip(out, clip.sample_rate, clip.label)


def train_event_classifier(
    bank: EventBank,
    extra: Sequence[tuple[AudioClip, str]] = (),
    *,
    per_event: int = 24,
    epochs: int = 30,
    held_out: float = 0.25,
    seed: int = 0,
    lr: float = 3e-3,
    gate: float = ACCURACY_GATE,
) -> EventClassifier:
    """Fit the classifier on randomly placed renders of every bank event."""
    if per_event < 20:
        raise RefAudioValueError(f"need at least 20 examples per event, got {per_event}")
    rng = np.random.default_rng(seed)
    labels = [bank.label(e) for e in bank.event_ids]
    codec = CodecParams(sample_rate=bank.sample_rate)
    n = codec.clip_samples

    clips: list[AudioClip] = []
    targets: list[int] = []
    for index, event_id in enumerate(bank.event_ids):
        for _ in range(per_event):
            clips.append(_placed(bank.render(event_id, int(rng.integers(2 ** 31))), rng, n))
            targets.append(index)
    for clip, label in extra:
        if label in labels:
            clips.append(clip)
            targets.append(labels.index(label))

    mels = clips_to_mels(clips, codec)
    y = torch.tensor(targets)
    order = torch.from_numpy(rng.permutation(len(clips)))
    n_test = max(len(labels), int(round(held_out * len(clips))))
    test_idx, train_idx = order[:n_test], order[n_test:]

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = EventClassifier(labels)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        model.train()
        perm = train_idx[torch.randperm(train_idx.numel(), generator=generator)]
        total = 0.0
        for start in range(0, perm.numel(), 32):
            batch = perm[start:start + 32]
            loss = F.cross_entropy(model(mels[batch]), y[batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss) * batch.numel()
        logger.debug("Classifier epoch", epoch=epoch, loss=total / max(1, perm.numel()))

    model.eval()
    with torch.no_grad():
        accuracy = float((model(mels[test_idx]).argmax(dim=1) == y[test_idx]).float().mean())
        emb = model.embed(mels[train_idx])
        for index in range(len(labels)):
            members = emb[y[train_idx] == index]
            if members.numel():
                model.prototypes[index] = members.mean(dim=0)
    model.accuracy = accuracy
    logger.info("Trained event classifier", accuracy=accuracy, classes=len(labels))
    if accuracy < gate:
        raise TrainingError(
            f"event classifier held-out accuracy {accuracy:.3f} below {gate:.2f}; "
            "increase timbre separation in the event bank",
            diagnostics={"accuracy": accuracy},
        )
    return model


def save_classifier(classifier: EventClassifier, path: str | os.PathLike[str]) -> None:
    buffer = io.BytesIO()
    torch.save({"labels": classifier.labels, "embed_dim": classifier.embed_dim,
                "accuracy": classifier.accuracy, "weights": classifier.state_dict()}, buffer)
    atomic_write_bytes(path, buffer.getvalue())


def load_classifier(path: str | os.PathLike[str]) -> EventClassifier:
    source = Path(path)
    if not source.is_file():
        raise RefAudioOSError(f"Classifier not found: {source}", path=source)
    payload = torch.load(source, map_location="cpu", weights_only=False)
    classifier = EventClassifier(payload["labels"], payload["embed_dim"])
    classifier.load_state_dict(payload["weights"])
    classifier.accuracy = payload["accuracy"]
    classifier.eval()
    return classifier


@dataclass
class MetricReport:
    metrics: list[MetricRecord] = field(default_factory=list)
    config_echo: str = ""

    def value(self, metric: str) -> float:
        for record in self.metrics:
            if record.metric == metric:
                return record.value
        raise KeyError(metric)

    def summary_table(self, clap_scale: float = 1.0) -> str:
        """Plain-text table; CLAP metrics are multiplied by `clap_scale` for display."""
        rows = [("metric", "value", "extractor")]
        for record in self.metrics:
            value = record.value * clap_scale if record.metric.startswith("clap") else record.value
            rows.append((record.metric, f"{value:.4f}", record.extractor))
        widths = [max(len(row[i]) for row in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | os.PathLike[str], clap_scale: float = 1.0) -> None:
        out = Path(out_dir)
        write_jsonl(out / "metrics.jsonl", self.metrics)
        atomic_write_bytes(out / "metrics.txt", self.summary_table(clap_scale).encode("utf-8"))


def _load_clips(records: Sequence[ManifestRecord], root: str | os.PathLike[str],
                sample_rate: int) -> list[AudioClip]:
    base = Path(root)
    return [ingest_wav(base / r.target_path, sample_rate) for r in records]


def _check_alignment(generated: Sequence[ManifestRecord], targets: Sequence[ManifestRecord]) -> None:
    gen_ids = {r.id for r in generated}
    tgt_ids = {r.id for r in targets}
    missing = sorted(tgt_ids - gen_ids)
    extra = sorted(gen_ids - tgt_ids)
    if missing or extra:
        raise RefAudioValueError(
            f"manifests are not aligned by id; missing generated: {missing}; unknown generated: {extra}"
        )


def evaluate_manifest(
    generated: Sequence[ManifestRecord],
    generated_root: str | os.PathLike[str],
    targets: Sequence[ManifestRecord],
    target_root: str | os.PathLike[str],
    classifier: EventClassifier,
    *,
    codec: Optional[CodecParams] = None,
    config_echo: str = "",
) -> MetricReport:
    """FAD (set level), mean KL, mean CLAP_A (paired) and mean CLAP (label prototypes)."""
    _check_alignment(generated, targets)
    codec = codec or CodecParams()
    targets = sorted(targets, key=lambda r: r.id)
    by_id = records_by_id(generated)
    generated = [by_id[r.id] for r in targets]
    ids = [r.id for r in targets]

    gen_features, gen_probs = classifier.extract(_load_clips(generated, generated_root, codec.sample_rate), codec)
    tgt_features, tgt_probs = classifier.extract(_load_clips(targets, target_root, codec.sample_rate), codec)

    fad = frechet_distance(GaussianStats.fit(tgt_features), GaussianStats.fit(gen_features))
    kl = {i: kl_divergence(p, q) for i, p, q in zip(ids, tgt_probs, gen_probs)}
    clap_a = {i: clap_a_score(a, b) for i, a, b in
              zip(ids, tgt_features.embeddings, gen_features.embeddings)}
    clap: dict[str, float] = {}
    for record, emb in zip(targets, gen_features.embeddings):
        text = classifier.text_embedding([r.label for r in record.regions])
        if text is not None:
            clap[record.id] = clap_score(emb, text)

    metrics = [
        MetricRecord(metric="fad", value=fad, extractor=CLASSIFIER_EXTRACTOR),
        MetricRecord(metric="kl", value=float(np.mean(list(kl.values()))),
                     extractor=CLASSIFIER_EXTRACTOR, per_example=kl),
        MetricRecord(metric="clap_a", value=float(np.mean(list(clap_a.values()))),
                     extractor=CLASSIFIER_EXTRACTOR, per_example=clap_a),
    ]
    if clap:
        metrics.append(MetricRecord(metric="clap", value=float(np.mean(list(clap.values()))),
                                    extractor=f"{CLASSIFIER_EXTRACTOR}/label-prototype", per_example=clap))
    else:
        logger.warn("No region label is known to the classifier; CLAP skipped")
    report = MetricReport(metrics, config_echo)
    logger.info("Evaluated manifest", examples=len(ids),
                **{m.metric: m.value for m in metrics})
    return report


def customization_fidelity(
    classifier: EventClassifier,
    generated: Sequence[AudioClip],
    reference_labels: Sequence[str],
    targets: Sequence[AudioClip],
    codec: Optional[CodecParams] = None,
) -> tuple[float, float]:
    """(top-1 accuracy of the reference label on generated audio, mean CLAP_A vs targets)."""
    if not len(generated) == len(reference_labels) == len(targets):
        raise RefAudioValueError("generated clips, reference labels and targets must align")
    gen_features, gen_probs = classifier.extract(generated, codec)
    tgt_features, _ = classifier.extract(targets, codec)
    top1 = gen_probs.argmax(axis=1)
    hits = [classifier.label_index(label) == int(k) for label, k in zip(reference_labels, top1)]
    clap_a = [clap_a_score(a, b) for a, b in zip(tgt_features.embeddings, gen_features.embeddings)]
    return float(np.mean(hits)), float(np.mean(clap_a))
