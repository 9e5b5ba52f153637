"""MSLE, MALE, MAPE and PCC on ``log2(x + 1)``-transformed popularity.

MAPE divides each absolute log error by ``log2(label + 2)`` so a zero label
gives denominator 1. PCC is NaN (``null`` in JSON) when either side has zero
variance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

N_BUCKETS = 5


@dataclass
class MetricReport:
    msle: float
    male: float
    mape: float
    pcc: float
    n: int
    buckets: list[dict] | None = field(default=None)

    def as_dict(self) -> dict:
        out = {k: _jsonable(v) for k, v in asdict(self).items() if k != "buckets"}
        if self.buckets is not None:
            out["buckets"] = [{k: _jsonable(v) for k, v in b.items()} for b in self.buckets]
        return out


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    if denom == 0.0:
        return math.nan
    return float(np.clip(np.dot(xc, yc) / denom, -1.0, 1.0))


def compute_metrics(predicted_log, labels) -> MetricReport:
    pred = np.asarray(predicted_log, dtype=np.float64).ravel()
    lab = np.asarray(labels, dtype=np.float64).ravel()
    if pred.size == 0:
        raise ValueError("no predictions to evaluate")
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions, {lab.size} labels")
    if np.any(lab < 0):
        raise ValueError("labels must be non-negative")
    target = np.log2(lab + 1)
    err = pred - target
    return MetricReport(
        msle=float(np.mean(err ** 2)),
        male=float(np.mean(np.abs(err))),
        mape=float(np.mean(np.abs(err) / np.log2(lab + 2))),
        pcc=pearson(pred, target),
        n=int(pred.size),
    )


def publication_buckets(publish_times, n_buckets: int = N_BUCKETS) -> np.ndarray:
    """Bucket id per cascade by publication-time percentile rank (ties by input order)."""
    t = np.asarray(publish_times, dtype=np.float64)
    order = np.argsort(t, kind="stable")
    rank = np.empty(len(t), dtype=np.int64)
    rank[order] = np.arange(len(t))
    return np.minimum(rank * n_buckets // max(len(t), 1), n_buckets - 1)


def bucketed_metrics(predicted_log, labels, publish_times, n_buckets: int = N_BUCKETS) -> list[dict]:
    pred = np.asarray(predicted_log, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    ids = publication_buckets(publish_times, n_buckets)
    width = 100 // n_buckets
    out = []
    for b in range(n_buckets):
        mask = ids == b
        entry = {"bucket": b, "percentile_low": b * width, "percentile_high": (b + 1) * width}
        if mask.any():
            rep = compute_metrics(pred[mask], lab[mask])
            entry.update(msle=rep.msle, male=rep.male, mape=rep.mape, pcc=rep.pcc, n=rep.n)
        else:
            entry.update(msle=math.nan, male=math.nan, mape=math.nan, pcc=math.nan, n=0)
        out.append(entry)
    return out
