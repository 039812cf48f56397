"""Transferability and noise measures over adversarial batches.

ASR of one target's adversarial examples on m test models::

    S = (a_1/A + ... + a_m/A) / m

AASR of a group of n targets is the plain mean of their ASRs, and the noise
magnitude of o image pairs of size c x r x 3 is::

    M = sum_i sum_pixels sum_channels |p_i - q_i| / (o * c * r)

Channels are summed, not averaged.  ``mode="per-value"`` divides by the extra
channel factor for comparison with per-value conventions.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn

NOISE_MODES = ("literal", "per-value")


class MetricError(ValueError):
    pass


@dataclass
class AsrResult:
    fool_counts: list[int]
    total: int
    value: float
    test_ids: list[str] = field(default_factory=list)
    target_id: str = ""

    @property
    def m(self) -> int:
        return len(self.fool_counts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["m"] = self.m
        return d


@dataclass
class AasrResult:
    asrs: list[float]
    value: float
    target_ids: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.asrs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n"] = self.n
        return d


@dataclass
class NoiseReport:
    count: int
    rows: int
    cols: int
    channels: int
    value: float
    mode: str = "literal"
    target_id: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def fool_count(predictions: np.ndarray, labels: np.ndarray) -> int:
    """Adversarial images whose prediction differs from the ground-truth label."""
    return int(np.count_nonzero(np.asarray(predictions) != np.asarray(labels)))


def asr_from_predictions(predictions: Sequence[np.ndarray], labels: np.ndarray,
                         test_ids: Sequence[str] = (), target_id: str = "") -> AsrResult:
    if len(predictions) == 0:
        raise MetricError("ASR needs at least one test model")
    labels = np.asarray(labels)
    total = len(labels)
    if total == 0:
        raise MetricError("ASR needs at least one adversarial example")
    counts = [fool_count(p, labels) for p in predictions]
    acc = 0.0
    for a in counts:
        acc += a / total
    return AsrResult(counts, total, acc / len(counts), list(test_ids), target_id)


def compute_asr(batch, test_models: Sequence) -> AsrResult:
    if len(test_models) == 0:
        raise MetricError("ASR needs at least one test model")
    preds = [nn.model_predict(t, batch.adversarial) for t in test_models]
    return asr_from_predictions(preds, batch.labels, [t.model_id for t in test_models], batch.target_id)


def compute_aasr(asrs: Sequence[AsrResult | float]) -> AasrResult:
    if len(asrs) == 0:
        raise MetricError("AASR needs at least one target")
    vals = [a.value if isinstance(a, AsrResult) else float(a) for a in asrs]
    ids = [a.target_id for a in asrs if isinstance(a, AsrResult)]
    acc = 0.0
    for v in vals:
        acc += v
    return AasrResult(vals, acc / len(vals), ids)


def noise_magnitude(batch, mode: str = "literal") -> NoiseReport:
    p = np.asarray(batch.source, dtype=np.float64)
    q = np.asarray(batch.adversarial, dtype=np.float64)
    return noise_magnitude_arrays(p, q, mode, getattr(batch, "target_id", ""))


def noise_magnitude_arrays(p: np.ndarray, q: np.ndarray, mode: str = "literal",
                           target_id: str = "") -> NoiseReport:
    if mode not in NOISE_MODES:
        raise MetricError(f"unknown noise mode {mode!r}")
    if p.shape != q.shape or p.ndim != 4:
        raise MetricError(f"source/adversarial shapes differ or are not (o, 3, c, r): {p.shape} {q.shape}")
    o, ch, rows, cols = p.shape
    denom = o * rows * cols * (ch if mode == "per-value" else 1)
    value = float(np.abs(p - q).sum() / denom) if denom else 0.0
    return NoiseReport(o, rows, cols, ch, value, mode, target_id)


def per_image_magnitude(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Each image's own literal-mode magnitude (o = 1)."""
    rows, cols = p.shape[2], p.shape[3]
    return np.abs(p - q).reshape(len(p), -1).sum(axis=1) / (rows * cols)
