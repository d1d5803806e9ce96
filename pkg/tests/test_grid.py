import datetime as dt

import numpy as np
import pytest

from raingraph.grid import (ClimateSnapshot, DimensionMismatchError, EventSeries, GridPoint,
                            NegativeRainfallError, NonFiniteError, SpatialGraph, ValidationError,
                            haversine_km, nearest_rank, validate_snapshot)

from oracles import nearest_rank_sorted


def _graph(n=4):
    pts = tuple(GridPoint(k, 10.0 + k, 70.0) for k in range(n))
    return SpatialGraph(pts, np.array([[0, 1], [1, 2]]), np.array([0.5, 0.7]), 2001)


def _snap(feats):
    return ClimateSnapshot(dt.date(2001, 6, 1), np.asarray(feats, dtype=float), "2001")


def test_gridpoint_ranges():
    GridPoint(0, -90, 180)
    with pytest.raises(ValidationError):
        GridPoint(0, 91, 0)
    with pytest.raises(ValidationError):
        GridPoint(0, 0, -181)


def test_event_series_must_increase():
    assert EventSeries(0, (1, 4, 9)).count == 3
    with pytest.raises(ValidationError):
        EventSeries(0, (1, 1, 2))
    with pytest.raises(ValidationError):
        EventSeries(0, (5, 2))


def test_graph_edges_normalized():
    g = _graph()
    assert g.n_edges == 2 and g.graph_ref == "2001"
    assert all(i < j for i, j, _ in g.edge_list())
    pts = g.nodes
    with pytest.raises(ValidationError):
        SpatialGraph(pts, np.array([[1, 0]]), np.array([1.0]))
    with pytest.raises(ValidationError):
        SpatialGraph(pts, np.array([[2, 2]]), np.array([1.0]))
    with pytest.raises(ValidationError):
        SpatialGraph(pts, np.array([[0, 9]]), np.array([1.0]))
    with pytest.raises(ValidationError):
        SpatialGraph(pts, np.array([[0, 1]]), np.array([-1.0]))


def test_from_edge_list_orients_edges():
    g = SpatialGraph.from_edge_list(_graph().nodes, [(2, 0, 0.3), (1, 3, 0.9), (0, 2, 0.4)])
    assert g.edges.tolist() == [[0, 2], [1, 3]]
    assert g.weights.tolist() == [0.3, 0.9]


def test_graph_is_read_only():
    g = _graph()
    with pytest.raises(ValueError):
        g.edges[0, 0] = 5


def test_node_ids_contiguous():
    with pytest.raises(ValidationError):
        SpatialGraph((GridPoint(0, 0, 0), GridPoint(2, 0, 1)), np.zeros((0, 2)), np.zeros(0))


def test_validate_snapshot_success():
    g = _graph()
    assert validate_snapshot(_snap(np.c_[np.arange(4.0), g.coords()]), g) is None


def test_validate_snapshot_errors_are_distinct():
    g = _graph()
    good = np.c_[np.arange(4.0), g.coords()]
    with pytest.raises(DimensionMismatchError):
        validate_snapshot(_snap(good[:3]), g)
    bad = good.copy()
    bad[2, 0] = np.nan
    with pytest.raises(NonFiniteError):
        validate_snapshot(_snap(bad), g)
    bad = good.copy()
    bad[1, 0] = -0.1
    with pytest.raises(NegativeRainfallError):
        validate_snapshot(_snap(bad), g)


def test_haversine_known_distance():
    # one degree of longitude on the equator
    assert haversine_km(0, 0, 0, 1) == pytest.approx(6371 * np.pi / 180, rel=1e-12)
    assert haversine_km(10, 20, 10, 20) == 0.0
    assert haversine_km(-30, 10, 40, 100) == pytest.approx(haversine_km(40, 100, -30, 10))


def test_nearest_rank_against_definition():
    rng = np.random.default_rng(3)
    for _ in range(200):
        v = rng.integers(0, 20, size=int(rng.integers(1, 60))).astype(float)
        p = float(rng.uniform(0.5, 99.5))
        assert nearest_rank(v, p) == nearest_rank_sorted(v, p)
    assert nearest_rank(np.arange(1, 101), 95) == 95
