"""Reconstruction-error anomaly scoring, daily percentile flags, trend test."""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from raingraph.gat import EdgeIndex, ModelParams, reconstruct
from raingraph.grid import RAIN_COL, ClimateSnapshot, DimensionMismatchError, SpatialGraph, nearest_rank, validate_snapshot

PRESETS = {"p90": 90.0, "p95": 95.0}


class TooShortError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AnomalyReport:
    """One day's scores and flags.

    ``mask`` marks nodes excluded because the model reconstructs more rain
    than observed. An all-masked day has ``threshold_value`` NaN and no flags.
    """

    date: Optional[dt.date]
    scores: np.ndarray
    threshold_percentile: float
    threshold_value: float
    flags: np.ndarray
    mask: np.ndarray

    @property
    def is_empty(self) -> bool:
        return bool(self.mask.all())

    @property
    def n_flagged(self) -> int:
        return int(self.flags.sum())

    def __eq__(self, other):
        if not isinstance(other, AnomalyReport):
            return NotImplemented
        same_thr = (self.threshold_value == other.threshold_value
                    or (math.isnan(self.threshold_value) and math.isnan(other.threshold_value)))
        return (self.date == other.date and same_thr
                and self.threshold_percentile == other.threshold_percentile
                and np.array_equal(self.scores, other.scores)
                and np.array_equal(self.flags, other.flags)
                and np.array_equal(self.mask, other.mask))

    __hash__ = None


def _edges(graph, edges):
    if edges is not None:
        return edges
    return EdgeIndex.from_graph(graph)


def score_from_reconstruction(features: np.ndarray, reconstruction: np.ndarray,
                              columns: Sequence[int] = (RAIN_COL,)) -> np.ndarray:
    """Per-node squared error restricted to ``columns`` (rainfall by default)."""
    x = np.asarray(features, dtype=np.float64)
    r = np.asarray(reconstruction, dtype=np.float64)
    if x.shape != r.shape:
        raise DimensionMismatchError(f"reconstruction {r.shape} vs features {x.shape}")
    cols = list(columns)
    return np.sum((x[:, cols] - r[:, cols]) ** 2, axis=1)


def score_snapshot(params: ModelParams, snapshot: ClimateSnapshot, graph: SpatialGraph,
                   columns: Sequence[int] = (RAIN_COL,), edges: Optional[EdgeIndex] = None) -> np.ndarray:
    """Squared reconstruction error per node, in raw (mm/day)^2 units."""
    validate_snapshot(snapshot, graph)
    rec = reconstruct(snapshot.features, _edges(graph, edges), params)
    return score_from_reconstruction(snapshot.features, rec, columns)


def overestimation_mask(snapshot, reconstruction: np.ndarray) -> np.ndarray:
    """True where reconstructed rainfall exceeds the observation (ties are not masked)."""
    feats = snapshot.features if isinstance(snapshot, ClimateSnapshot) else np.asarray(snapshot)
    rec = np.asarray(reconstruction, dtype=np.float64)
    if feats.shape[0] != rec.shape[0]:
        raise DimensionMismatchError("snapshot and reconstruction differ in node count")
    return rec[:, RAIN_COL] > feats[:, RAIN_COL]


def flag_anomalies(scores, mask, percentile: float, date: Optional[dt.date] = None) -> AnomalyReport:
    """Flag unmasked nodes whose score is strictly above the day's threshold.

    The threshold is the nearest-rank percentile of the unmasked scores only.
    """
    if not 0 < percentile < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {percentile}")
    scores = np.asarray(scores, dtype=np.float64).copy()
    mask = np.asarray(mask, dtype=bool).copy()
    if scores.shape != mask.shape or scores.ndim != 1:
        raise DimensionMismatchError("scores and mask must be equal-length vectors")
    if (scores < 0).any() or not np.isfinite(scores).all():
        raise ValueError("scores must be finite and non-negative")
    live = ~mask
    if not live.any():
        flags = np.zeros_like(mask)
        threshold = math.nan
    else:
        threshold = nearest_rank(scores[live], percentile)
        flags = live & (scores > threshold)
    for a in (scores, mask, flags):
        a.setflags(write=False)
    return AnomalyReport(date, scores, float(percentile), float(threshold), flags, mask)


def detect_snapshot(params: ModelParams, snapshot: ClimateSnapshot, graph: SpatialGraph,
                    percentile: float = 95.0, use_mask: bool = True,
                    edges: Optional[EdgeIndex] = None) -> AnomalyReport:
    """Reconstruct once, then score, mask and flag."""
    validate_snapshot(snapshot, graph)
    rec = reconstruct(snapshot.features, _edges(graph, edges), params)
    scores = score_from_reconstruction(snapshot.features, rec)
    mask = overestimation_mask(snapshot, rec) if use_mask else np.zeros(len(scores), dtype=bool)
    return flag_anomalies(scores, mask, percentile, snapshot.date)


def yearly_counts(reports: Sequence[AnomalyReport]) -> tuple[np.ndarray, int]:
    """Per-node number of flagged days, and the total number of flags."""
    if not reports:
        raise ValueError("need at least one report")
    n = len(reports[0].flags)
    if any(len(r.flags) != n for r in reports):
        raise DimensionMismatchError("reports cover different node counts")
    per_node = np.sum([r.flags for r in reports], axis=0).astype(np.int64)
    return per_node, int(per_node.sum())


@dataclass(frozen=True)
class MKResult:
    s: int
    var_s: float
    z: float
    p_value: float
    trend: str


def mann_kendall(series, alpha: float = 0.05) -> MKResult:
    """Two-sided Mann-Kendall test with tie-corrected variance.

    S = sum_{k<l} sign(x_l - x_k);
    Var(S) = [n(n-1)(2n+5) - sum_t t(t-1)(2t+5)] / 18 over tie groups t;
    Z uses a continuity correction of 1 towards zero.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    n = len(x)
    if n < 4:
        raise TooShortError(f"Mann-Kendall needs at least 4 values, got {n}")
    s = 0
    for k in range(n - 1):
        s += int(np.sign(x[k + 1:] - x[k]).sum())
    _, ties = np.unique(x, return_counts=True)
    var_s = (n * (n - 1) * (2 * n + 5) - float(np.sum(ties * (ties - 1) * (2 * ties + 5)))) / 18.0
    if s > 0 and var_s > 0:
        z = (s - 1) / math.sqrt(var_s)
    elif s < 0 and var_s > 0:
        z = (s + 1) / math.sqrt(var_s)
    else:
        z = 0.0
    p = math.erfc(abs(z) / math.sqrt(2.0))
    # fixed critical value for the default level, erfc-based otherwise
    if alpha == 0.05:
        significant = abs(z) > 1.96
    else:
        significant = p < alpha
    trend = "no trend"
    if significant:
        trend = "increasing" if z > 0 else "decreasing"
    return MKResult(int(s), float(var_s), float(z), float(p), trend)
