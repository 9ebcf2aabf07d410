"""Endpoint, angular and N-pixel flow errors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from ..flow import FlowField

NPE_THRESHOLDS = (1, 2, 3)


def _arrays(pred, gt, mask):
    p = pred.data if isinstance(pred, FlowField) else np.asarray(pred)
    g = gt.data if isinstance(gt, FlowField) else np.asarray(gt)
    if p.shape != g.shape or p.shape[-1] != 2:
        raise ValidationError(f"prediction {p.shape} and ground truth {g.shape} must match (.., 2)")
    m = np.ones(p.shape[:-1], bool) if mask is None else np.asarray(mask, bool)
    if m.shape != p.shape[:-1]:
        raise ValidationError("mask shape does not match the flow grid")
    if not m.any():
        raise ValidationError("valid mask is empty")
    return p.astype(np.float64)[m], g.astype(np.float64)[m]


def endpoint_errors(pred, gt, mask=None) -> np.ndarray:
    p, g = _arrays(pred, gt, mask)
    return np.sqrt(((p - g) ** 2).sum(-1))


def epe(pred, gt, mask=None) -> float:
    return float(endpoint_errors(pred, gt, mask).mean())


def angular_errors(pred, gt, mask=None) -> np.ndarray:
    """Per-pixel angle in degrees between ``(u, v, 1)`` vectors."""
    p, g = _arrays(pred, gt, mask)
    num = (p * g).sum(-1) + 1.0
    den = np.sqrt(((p**2).sum(-1) + 1.0) * ((g**2).sum(-1) + 1.0))
    return np.degrees(np.arccos(np.clip(num / den, -1.0, 1.0)))


def angular_error(pred, gt, mask=None) -> float:
    return float(angular_errors(pred, gt, mask).mean())


def npe(pred, gt, mask=None, n: float = 1) -> float:
    """Percent of valid pixels whose endpoint error is strictly above ``n``."""
    if n <= 0:
        raise ValidationError("NPE threshold must be positive")
    e = endpoint_errors(pred, gt, mask)
    return float(100.0 * (e > n).sum() / e.size)


@dataclass
class EvalReport:
    epe: float
    ae: float
    npe: dict[int, float]
    n_valid: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"epe": self.epe, "ae": self.ae, "npe": {str(k): v for k, v in self.npe.items()}, "n_valid": self.n_valid}
        d.update(self.extra)
        return d


class MetricAccumulator:
    """Pixel-weighted running sums, so aggregates equal metrics over all pixels pooled."""

    def __init__(self):
        self.sum_epe = 0.0
        self.sum_ae = 0.0
        self.over = {n: 0 for n in NPE_THRESHOLDS}
        self.count = 0

    def add(self, pred, gt, mask=None) -> EvalReport:
        e = endpoint_errors(pred, gt, mask)
        a = angular_errors(pred, gt, mask)
        self.sum_epe += float(e.sum())
        self.sum_ae += float(a.sum())
        for n in NPE_THRESHOLDS:
            self.over[n] += int((e > n).sum())
        self.count += e.size
        return EvalReport(
            float(e.mean()),
            float(a.mean()),
            {n: float(100.0 * (e > n).sum() / e.size) for n in NPE_THRESHOLDS},
            int(e.size),
        )

    def report(self) -> EvalReport:
        if not self.count:
            raise ValidationError("no pixels accumulated")
        return EvalReport(
            self.sum_epe / self.count,
            self.sum_ae / self.count,
            {n: 100.0 * self.over[n] / self.count for n in NPE_THRESHOLDS},
            self.count,
        )


def evaluate(pred, gt, mask=None) -> EvalReport:
    return MetricAccumulator().add(pred, gt, mask)
