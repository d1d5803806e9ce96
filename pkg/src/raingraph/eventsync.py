"""Wet-day event extraction and event-synchronization (ES) networks.

For events t_i^l at node i the local tolerance is half the smaller of the two
inter-event gaps, s = min(dt_i^l, dt_j^m) / 2, where dt^l is the gap to the
next event (the previous one for the last event). A pair of events counts 1
towards c(i|j) when 0 < t_i^l - t_j^m <= s and 1/2 towards both directions
when the two events coincide. Strength is

    Q_ij = (c(i|j) + c(j|i)) / sqrt(l_i * l_j)

so identical series score exactly 1.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from raingraph.grid import EventSeries, GridPoint, SpatialGraph, ValidationError, nearest_rank

JJAS_DAYS = 122
TIE_RTOL = 1e-12


class NoEdgesError(ValueError):
    """Every pairwise strength is zero, so no adjacency can be derived."""


@dataclass(frozen=True)
class ESConfig:
    event_threshold_mm: float = 1.0
    q_edge_percentile: float = 99.3
    min_events: int = 3
    tau_max_days: Optional[float] = None
    window_days: int = JJAS_DAYS

    def __post_init__(self):
        if self.event_threshold_mm < 0:
            raise ValueError("event_threshold_mm must be >= 0")
        if not 0 < self.q_edge_percentile < 100:
            raise ValueError("q_edge_percentile must lie in (0, 100)")
        if self.min_events < 2:
            raise ValueError("min_events must be >= 2")
        if self.tau_max_days is not None and self.tau_max_days <= 0:
            raise ValueError("tau_max_days must be positive")
        if self.window_days < 1:
            raise ValueError("window_days must be positive")


@dataclass(frozen=True)
class SyncResult:
    i: int
    j: int
    c_ij: float
    c_ji: float
    q: float


def extract_events(daily_rainfall, config: ESConfig = ESConfig()) -> list[EventSeries]:
    """Event days per node: indices where rainfall strictly exceeds the threshold.

    ``daily_rainfall`` is an (N, window_days) array, one row per node.
    """
    rain = np.asarray(daily_rainfall, dtype=np.float64)
    if rain.ndim == 1:
        rain = rain[None, :]
    if rain.ndim != 2 or rain.shape[1] != config.window_days:
        raise ValidationError(
            f"expected series of {config.window_days} days, got shape {rain.shape}")
    return [EventSeries(n, tuple(np.flatnonzero(row > config.event_threshold_mm).tolist()))
            for n, row in enumerate(rain)]


def _gaps(times: np.ndarray) -> np.ndarray:
    """Adjacent inter-event gap per event; 0 marks an event without any neighbour."""
    g = np.zeros(len(times), dtype=np.int64)
    if len(times) >= 2:
        d = np.diff(times)
        g[:-1] = d
        g[-1] = d[-1]
    return g


@numba.njit(cache=True, nogil=True)
def _pair_counts(ta, ga, la, tb, gb, lb, tau_max):
    c_ab = 0.0
    c_ba = 0.0
    for l in range(la):
        gl = ga[l]
        if gl == 0:
            continue
        for m in range(lb):
            gm = gb[m]
            if gm == 0:
                continue
            d = ta[l] - tb[m]
            if d == 0:
                c_ab += 0.5
                c_ba += 0.5
                continue
            s = 0.5 * min(gl, gm)
            if tau_max > 0.0 and tau_max < s:
                s = tau_max
            if 0 < d <= s:
                c_ab += 1.0
            elif 0 < -d <= s:
                c_ba += 1.0
    return c_ab, c_ba


@numba.njit(cache=True, nogil=True)
def _rows_kernel(rows, times, gaps, counts, min_events, tau_max, out):
    n = counts.shape[0]
    for r in range(rows.shape[0]):
        i = rows[r]
        li = counts[i]
        # offset of pair (i, i+1) in the condensed upper-triangle layout
        base = i * n - (i * (i + 1)) // 2
        for j in range(i + 1, n):
            lj = counts[j]
            k = base + (j - i - 1)
            if li < min_events or lj < min_events:
                out[k] = 0.0
                continue
            c_ab, c_ba = _pair_counts(times[i], gaps[i], li, times[j], gaps[j], lj, tau_max)
            out[k] = (c_ab + c_ba) / math.sqrt(li * lj)


def _tau(config: ESConfig) -> float:
    return -1.0 if config.tau_max_days is None else float(config.tau_max_days)


def _check_sorted(series: EventSeries):
    t = series.times
    if any(b <= a for a, b in zip(t, t[1:])):
        raise ValidationError(f"event series of node {series.node_id} is not sorted")


def sync_pair(a: EventSeries, b: EventSeries, config: ESConfig = ESConfig()) -> SyncResult:
    _check_sorted(a)
    _check_sorted(b)
    la, lb = a.count, b.count
    if la < config.min_events or lb < config.min_events:
        return SyncResult(a.node_id, b.node_id, 0.0, 0.0, 0.0)
    ta = np.asarray(a.times, dtype=np.int64)
    tb = np.asarray(b.times, dtype=np.int64)
    c_ab, c_ba = _pair_counts(ta, _gaps(ta), la, tb, _gaps(tb), lb, _tau(config))
    return SyncResult(a.node_id, b.node_id, c_ab, c_ba, (c_ab + c_ba) / math.sqrt(la * lb))


def _pack(events: Sequence[EventSeries]):
    n = len(events)
    width = max([e.count for e in events] + [1])
    times = np.zeros((n, width), dtype=np.int64)
    gaps = np.zeros((n, width), dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    for k, e in enumerate(events):
        t = np.asarray(e.times, dtype=np.int64)
        times[k, :len(t)] = t
        gaps[k, :len(t)] = _gaps(t)
        counts[k] = len(t)
    return times, gaps, counts


def pairwise_q(events: Sequence[EventSeries], config: ESConfig = ESConfig(),
               threads: Optional[int] = None) -> np.ndarray:
    """Condensed upper-triangle vector of Q over all unordered pairs (i < j).

    Row blocks are dealt round-robin to a thread pool; each row writes its own
    slice of the output, so the result does not depend on thread count.
    """
    for e in events:
        _check_sorted(e)
    times, gaps, counts = _pack(events)
    n = len(events)
    out = np.zeros(n * (n - 1) // 2, dtype=np.float64)
    threads = threads or os.cpu_count() or 1
    tau = _tau(config)
    if threads <= 1 or n < 64:
        _rows_kernel(np.arange(n, dtype=np.int64), times, gaps, counts, config.min_events, tau, out)
        return out
    row_sets = [np.arange(w, n, threads, dtype=np.int64) for w in range(threads)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda rows: _rows_kernel(rows, times, gaps, counts,
                                                config.min_events, tau, out), row_sets))
    return out


def condensed_to_pairs(k: np.ndarray, n: int) -> np.ndarray:
    """Map condensed upper-triangle offsets back to (i, j) rows."""
    i_all = np.arange(n, dtype=np.int64)
    starts = i_all * n - (i_all * (i_all + 1)) // 2
    i = np.searchsorted(starts, k, side="right") - 1
    j = k - starts[i] + i + 1
    return np.stack([i, j], axis=1).astype(np.int64)


def q_threshold(q: np.ndarray, percentile: float) -> float:
    positive = q[q > 0]
    if len(positive) == 0:
        raise NoEdgesError("all synchronization strengths are zero; no edges derivable")
    return nearest_rank(positive, percentile)


def build_graph(events: Sequence[EventSeries], points: Sequence[GridPoint],
                config: ESConfig = ESConfig(), year_label: int = 0,
                threads: Optional[int] = None) -> SpatialGraph:
    """Threshold all-pairs Q at a nearest-rank percentile of the positive values.

    Edges with Q >= threshold are kept (inclusive, so tied top strengths such as
    a fully synchronized cluster are never dropped together). Values within a
    relative 1e-12 of the threshold count as ties: different (c, l_i, l_j)
    combinations can give the same exact Q but differ in the last bit.
    """
    if len(events) == 0:
        raise ValidationError("empty event set")
    if len(events) != len(points):
        raise ValidationError(f"{len(events)} event series for {len(points)} points")
    for k, (e, p) in enumerate(zip(events, points)):
        if e.node_id != k or p.id != k:
            raise ValidationError(f"events and points not aligned at position {k}")
    q = pairwise_q(events, config, threads)
    theta = q_threshold(q, config.q_edge_percentile)
    keep = np.flatnonzero(q >= theta * (1.0 - TIE_RTOL))
    edges = condensed_to_pairs(keep, len(events))
    return SpatialGraph(tuple(points), edges, q[keep], year_label)
