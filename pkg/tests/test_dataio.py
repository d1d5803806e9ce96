import datetime as dt
import json
import random

import numpy as np
import pytest

from raingraph import dataio
from raingraph.anomaly import flag_anomalies
from raingraph.eventsync import ESConfig, build_graph, extract_events
from raingraph.gat import IncompatibleParamsError
from raingraph.grid import GridPoint, SpatialGraph
from raingraph.spatial import build_weights
from raingraph.training import TrainConfig, evaluate, train


def _write(path, rows, header="date,lat,lon,rainfall"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return dataio.IngestSpec(str(path))


def _grid_rows(dates, coords, value=lambda d, k: 1.0 + k):
    return [f"{d},{lat},{lon},{value(d, k)}" for d in dates for k, (lat, lon) in enumerate(coords)]


COORDS = [(21.0, 75.0), (20.0, 75.5), (20.0, 75.0), (21.0, 75.5)]


def test_ingest_small_grid(tmp_path):
    data = dataio.ingest(_write(tmp_path / "t.csv", _grid_rows(["2001-06-01", "2001-06-02"], COORDS)))
    assert len(data.points) == 4 and len(data.snapshots) == 2
    assert [(p.lat, p.lon) for p in data.points] == sorted(COORDS)
    assert data.snapshots[0].features.shape == (4, 3)
    assert data.rainfall[2001].shape == (4, 2)


def test_ingest_drops_non_monsoon_rows(tmp_path):
    rows = _grid_rows(["2001-06-01", "2001-12-05"], COORDS)
    data = dataio.ingest(_write(tmp_path / "t.csv", rows))
    assert [s.date for s in data.snapshots] == [dt.date(2001, 6, 1)]
    spec = dataio.IngestSpec(str(tmp_path / "t.csv"), jjas_only=False)
    assert len(dataio.ingest(spec).snapshots) == 2


def test_ingest_errors_name_the_line(tmp_path):
    rows = _grid_rows(["2001-06-01"], COORDS)
    rows[2] = "2001-06-01,20.0,75.0,NaN"
    with pytest.raises(dataio.IngestError, match="line 4"):
        dataio.ingest(_write(tmp_path / "a.csv", rows))
    rows[2] = "2001-06-01,20.0,75.0,-3"
    with pytest.raises(dataio.IngestError, match="line 4"):
        dataio.ingest(_write(tmp_path / "b.csv", rows))
    with pytest.raises(dataio.IngestError, match="missing column"):
        dataio.ingest(_write(tmp_path / "c.csv", ["2001-06-01,1,2"], header="date,lat,lon"))
    rows = _grid_rows(["2001-06-01", "2001-06-02"], COORDS)[:-1]
    with pytest.raises(dataio.IngestError, match="inconsistent grid"):
        dataio.ingest(_write(tmp_path / "d.csv", rows))
    rows = _grid_rows(["2001-06-01"], COORDS) + ["2001-06-01,21.0,75.0,3"]
    with pytest.raises(dataio.IngestError, match="duplicate"):
        dataio.ingest(_write(tmp_path / "e.csv", rows))
    with pytest.raises(dataio.IngestError, match="date"):
        dataio.ingest(_write(tmp_path / "f.csv", ["June 1,21.0,75.0,3"]))


def test_ingest_order_insensitive(tmp_path):
    dates = [f"2001-06-{d:02d}" for d in range(1, 6)]
    rows = _grid_rows(dates, COORDS, value=lambda d, k: float(int(d[-2:]) * 3 + k))
    shuffled = rows[:]
    random.Random(0).shuffle(shuffled)
    a = dataio.ingest(_write(tmp_path / "a.csv", rows))
    b = dataio.ingest(_write(tmp_path / "b.csv", shuffled))
    assert a.points == b.points
    assert all(x == y for x, y in zip(a.snapshots, b.snapshots))
    assert np.array_equal(a.rainfall[2001], b.rainfall[2001])


def test_extra_columns_sit_between_rain_and_coords(tmp_path):
    rows = [f"2001-06-01,{lat},{lon},{k},{10 + k}" for k, (lat, lon) in enumerate(COORDS)]
    (tmp_path / "x.csv").write_text("date,lat,lon,rainfall,temp\n" + "\n".join(rows) + "\n")
    data = dataio.ingest(dataio.IngestSpec(str(tmp_path / "x.csv"), extra_cols=("temp",)))
    assert data.snapshots[0].feature_names == ("rainfall", "temp", "lat", "lon")
    np.testing.assert_array_equal(data.snapshots[0].features[:, 1] - data.snapshots[0].features[:, 0], 10)


def test_table_roundtrip(tmp_path):
    data = dataio.generate_synthetic(dataio.SyntheticSpec(days=20, years=(2000, 2001)))
    dataio.write_table(data, tmp_path / "t.csv")
    back = dataio.ingest(dataio.IngestSpec(str(tmp_path / "t.csv")))
    assert back.points == data.points
    assert all(x == y for x, y in zip(back.snapshots, data.snapshots))


def test_synthetic_is_deterministic():
    spec = dataio.SyntheticSpec(seed=4, anomalies=(dataio.PlantedAnomaly(3, 7),))
    a, b = dataio.generate_synthetic(spec), dataio.generate_synthetic(spec)
    assert all(np.array_equal(a.rainfall[y], b.rainfall[y]) for y in a.years)
    assert a.truth_anomalies == b.truth_anomalies
    c = dataio.generate_synthetic(dataio.SyntheticSpec(seed=5))
    assert not np.array_equal(a.rainfall[2000], c.rainfall[2000])


def test_no_anomalies_means_empty_truth():
    assert dataio.generate_synthetic(dataio.SyntheticSpec()).truth_anomalies == set()


def test_planted_spikes_exceed_background_p99():
    rng = np.random.default_rng(0)
    planted = tuple(dataio.PlantedAnomaly(int(n), int(d), 1.5) for n, d in
                    zip(rng.choice(25, 10, replace=False), rng.choice(122, 10, replace=False)))
    clean = dataio.generate_synthetic(dataio.SyntheticSpec(seed=2))
    data = dataio.generate_synthetic(dataio.SyntheticSpec(seed=2, anomalies=planted))
    p99 = np.percentile(clean.rainfall[2000], 99, axis=1)
    for a in planted:
        assert data.rainfall[2000][a.node, a.day] > p99[a.node]
        assert (a.node, dt.date(2000, 6, 1) + dt.timedelta(a.day)) in data.truth_anomalies
    snap = data.snapshots[planted[0].day]
    assert snap.features[planted[0].node, 0] == data.rainfall[2000][planted[0].node, planted[0].day]


def test_planted_cluster_is_recovered():
    cluster = (0, 1, 2, 5, 6, 7)
    data = dataio.generate_synthetic(dataio.SyntheticSpec(clusters=(dataio.PlantedCluster(cluster, 10),), seed=3))
    g = build_graph(extract_events(data.rainfall[2000]), data.points, ESConfig(), 2000)
    inside = {(i, j) for i in cluster for j in cluster if i < j}
    assert inside <= {tuple(e) for e in g.edges.tolist()}


def test_spatially_coherent_background():
    near = dataio.generate_synthetic(dataio.SyntheticSpec(rows=10, cols=10, corr_cells=2.0))
    flat = dataio.generate_synthetic(dataio.SyntheticSpec(rows=10, cols=10, corr_cells=0.0))

    def neighbour_corr(r):
        return np.corrcoef(r[0], r[1])[0, 1]

    assert neighbour_corr(near.rainfall[2000]) > neighbour_corr(flat.rainfall[2000]) + 0.3


def test_infeasible_specs():
    with pytest.raises(ValueError):
        dataio.SyntheticSpec(clusters=(dataio.PlantedCluster(tuple(range(30))),))
    with pytest.raises(ValueError):
        dataio.SyntheticSpec(anomalies=(dataio.PlantedAnomaly(0, 200),))
    with pytest.raises(ValueError):
        dataio.SyntheticSpec(anomalies=(dataio.PlantedAnomaly(0, 1, factor=1.0),))
    with pytest.raises(ValueError):
        dataio.SyntheticSpec(n_nodes=99)


def test_graph_roundtrip(tmp_path):
    pts = tuple(GridPoint(k, 20.1 + k / 3, 75.7 - k / 7) for k in range(3))
    g = SpatialGraph(pts, np.array([[0, 1], [1, 2]]), np.array([0.1 + 0.2, 1 / 3]), 1999)
    dataio.save_graph(g, tmp_path / "g.txt")
    back = dataio.load_graph(tmp_path / "g.txt")
    assert back == g and back.edge_list() == g.edge_list()


def test_graph_truncation_detected(tmp_path):
    pts = tuple(GridPoint(k, 20.0, 75.0 + k) for k in range(3))
    dataio.save_graph(SpatialGraph(pts, np.array([[0, 1], [1, 2]]), np.array([0.5, 0.4])), tmp_path / "g.txt")
    lines = (tmp_path / "g.txt").read_text().splitlines()
    (tmp_path / "t.txt").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(dataio.FormatError):
        dataio.load_graph(tmp_path / "t.txt")
    (tmp_path / "u.txt").write_text("hello\n")
    with pytest.raises(dataio.FormatError):
        dataio.load_graph(tmp_path / "u.txt")


def _trained_small(n_snap=4):
    data = dataio.generate_synthetic(dataio.SyntheticSpec(days=n_snap))
    g = SpatialGraph(tuple(data.points), np.array([[0, 1], [2, 3], [3, 8]]), np.ones(3), 2000)
    res = train(data.snapshots, g, build_weights(data.points), TrainConfig(epochs=2, hidden_dim=8))
    return data, g, res


def test_checkpoint_roundtrip(tmp_path):
    data, g, res = _trained_small()
    dataio.save_checkpoint(res.params, tmp_path / "m.ckpt")
    back = dataio.load_checkpoint(tmp_path / "m.ckpt", n_features=3)
    assert all(np.array_equal(back.weights[k], res.params.weights[k]) for k in res.params.names())
    assert np.array_equal(back.feature_std, res.params.feature_std)
    assert back.config["hidden_dim"] == 8 and back.dims == res.params.dims
    assert evaluate(back, data.snapshots, g) == evaluate(res.params, data.snapshots, g)


def test_checkpoint_failures(tmp_path):
    _, _, res = _trained_small()
    path = tmp_path / "m.ckpt"
    dataio.save_checkpoint(res.params, path)
    with pytest.raises(IncompatibleParamsError):
        dataio.load_checkpoint(path, n_features=5)
    text = path.read_text()
    (tmp_path / "trunc.ckpt").write_text(text[: len(text) // 2])
    with pytest.raises(dataio.FormatError):
        dataio.load_checkpoint(tmp_path / "trunc.ckpt")
    doc = json.loads(text)
    doc["payload"]["leaky_slope"] = 0.3
    (tmp_path / "tamper.ckpt").write_text(json.dumps(doc))
    with pytest.raises(dataio.FormatError, match="checksum"):
        dataio.load_checkpoint(tmp_path / "tamper.ckpt")
    doc = json.loads(text)
    doc["payload"]["version"] = 99
    (tmp_path / "ver.ckpt").write_text(json.dumps(doc))
    with pytest.raises(dataio.FormatError, match="version"):
        dataio.load_checkpoint(tmp_path / "ver.ckpt")


def test_training_log_roundtrip(tmp_path):
    _, _, res = _trained_small()
    dataio.save_training_log(res.history, tmp_path / "log.csv")
    assert dataio.load_training_log(tmp_path / "log.csv") == res.history


def test_report_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    r = flag_anomalies(rng.exponential(size=30) / 3, rng.random(30) < 0.3, 90, dt.date(2003, 7, 4))
    dataio.save_report(r, tmp_path / "r.csv")
    assert dataio.load_report(tmp_path / "r.csv") == r
    empty = flag_anomalies(np.ones(4), np.ones(4, bool), 95)
    dataio.save_report(empty, tmp_path / "e.csv")
    assert dataio.load_report(tmp_path / "e.csv") == empty
    lines = (tmp_path / "r.csv").read_text().splitlines()
    (tmp_path / "t.csv").write_text("\n".join(lines[:-2]) + "\n")
    with pytest.raises(dataio.FormatError):
        dataio.load_report(tmp_path / "t.csv")


def test_truth_roundtrip(tmp_path):
    data = dataio.generate_synthetic(dataio.SyntheticSpec(
        anomalies=(dataio.PlantedAnomaly(2, 5), dataio.PlantedAnomaly(7, 1)),
        clusters=(dataio.PlantedCluster((0, 1, 2)),)))
    dataio.save_truth(data, tmp_path / "truth.json")
    anomalies, clusters = dataio.load_truth(tmp_path / "truth.json")
    assert anomalies == data.truth_anomalies and clusters == [[0, 1, 2]]


def test_heatmap_frequencies(tmp_path):
    pts = [GridPoint(0, 20.0, 75.0), GridPoint(1, 20.5, 75.0)]
    dataio.save_heatmap(pts, np.array([3, 0]), 12, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines == ["lat,lon,count,frequency", "20.0,75.0,3,0.25", "20.5,75.0,0,0.0"]
