"""Shared data model: grid points, event series, climate graphs, snapshots.

Time inside a season is an integer day index counted from June 1 (0-based).
Node ids are contiguous from 0 and follow ascending (lat, lon) order.
Feature matrices keep rainfall in column 0 and (lat, lon) in the last two
columns; any extra variables sit in between.
"""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

EARTH_RADIUS_KM = 6371.0
RAIN_COL = 0


class ValidationError(ValueError):
    """Input violates a data-model invariant."""


class DimensionMismatchError(ValidationError):
    pass


class NonFiniteError(ValidationError):
    pass


class NegativeRainfallError(ValidationError):
    pass


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridPoint:
    id: int
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValidationError(f"longitude out of range: {self.lon}")


@dataclass(frozen=True)
class EventSeries:
    node_id: int
    times: tuple[int, ...]

    def __post_init__(self):
        t = tuple(int(x) for x in self.times)
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValidationError(f"event times of node {self.node_id} not strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def count(self) -> int:
        return len(self.times)


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    """Nodes plus the retained, undirected synchronization edges.

    ``edges`` is an (E, 2) int array with i < j per row and ``weights`` holds
    the matching synchronization strengths Q.
    """

    nodes: tuple[GridPoint, ...]
    edges: np.ndarray
    weights: np.ndarray
    year_label: int = 0

    def __post_init__(self):
        nodes = tuple(self.nodes)
        for k, p in enumerate(nodes):
            if p.id != k:
                raise ValidationError(f"node ids must be contiguous from 0; got {p.id} at position {k}")
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(weights) != len(edges):
            raise ValidationError("edges and weights differ in length")
        if len(edges):
            if (edges[:, 0] >= edges[:, 1]).any():
                raise ValidationError("edges must be stored once with i < j (no self-loops)")
            if edges.min() < 0 or edges.max() >= len(nodes):
                raise ValidationError("edge endpoint is not a valid node id")
            if (weights < 0).any() or not np.isfinite(weights).all():
                raise ValidationError("synchronization strengths must be finite and >= 0")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", _frozen(edges, np.int64))
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "year_label", int(self.year_label))

    @classmethod
    def from_edge_list(cls, nodes: Sequence[GridPoint], edge_list, year_label: int = 0) -> "SpatialGraph":
        """Build from (i, j, q) triples in any orientation; duplicates keep the first q."""
        seen = {}
        for i, j, q in edge_list:
            i, j = int(i), int(j)
            if i == j:
                raise ValidationError(f"self-loop at node {i}")
            key = (min(i, j), max(i, j))
            seen.setdefault(key, float(q))
        keys = sorted(seen)
        return cls(tuple(nodes), np.array(keys, dtype=np.int64).reshape(-1, 2),
                   np.array([seen[k] for k in keys]), year_label)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def graph_ref(self) -> str:
        return str(self.year_label)

    def edge_list(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(q)) for (i, j), q in zip(self.edges, self.weights)]

    def coords(self) -> np.ndarray:
        return np.array([[p.lat, p.lon] for p in self.nodes], dtype=np.float64).reshape(-1, 2)

    def __eq__(self, other):
        if not isinstance(other, SpatialGraph):
            return NotImplemented
        return (self.nodes == other.nodes and self.year_label == other.year_label
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.weights, other.weights))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ClimateSnapshot:
    date: dt.date
    features: np.ndarray
    graph_ref: str = "0"
    feature_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionMismatchError("features must be an N x F matrix")
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "graph_ref", str(self.graph_ref))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]

    @property
    def rainfall(self) -> np.ndarray:
        return self.features[:, RAIN_COL]

    def __eq__(self, other):
        if not isinstance(other, ClimateSnapshot):
            return NotImplemented
        return (self.date == other.date and self.graph_ref == other.graph_ref
                and self.feature_names == other.feature_names
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))

    __hash__ = None


def validate_snapshot(snapshot: ClimateSnapshot, graph: SpatialGraph) -> None:
    """Raise the first invariant violation found; return None if the snapshot is usable."""
    feats = snapshot.features
    if feats.shape[0] != graph.n_nodes:
        raise DimensionMismatchError(
            f"snapshot {snapshot.date} has {feats.shape[0]} rows, graph has {graph.n_nodes} nodes")
    if feats.shape[1] < 3:
        raise DimensionMismatchError("features need rainfall plus trailing lat, lon columns")
    if not np.isfinite(feats).all():
        row = int(np.argwhere(~np.isfinite(feats))[0, 0])
        raise NonFiniteError(f"snapshot {snapshot.date} has a non-finite entry at node {row}")
    if (feats[:, RAIN_COL] < 0).any():
        row = int(np.argmin(feats[:, RAIN_COL]))
        raise NegativeRainfallError(f"snapshot {snapshot.date} has negative rainfall at node {row}")


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance on a 6371 km sphere; broadcasts over arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def nearest_rank(values, percentile: float) -> float:
    """Value at 1-based rank ceil(p/100 * n) of the sorted sample."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if len(v) == 0:
        raise ValueError("percentile of an empty sample")
    if not 0 < percentile < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {percentile}")
    # round to dodge float noise such as 95/100*100 = 95.00000000000001
    rank = math.ceil(round(percentile / 100.0 * len(v), 9))
    return float(v[max(rank, 1) - 1])
