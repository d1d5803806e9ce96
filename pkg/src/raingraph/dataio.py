"""Table ingestion, synthetic data, and every on-disk format.

Input table: one row per grid cell and day, delimited text with a header,
at least ``date`` (ISO), ``lat``, ``lon`` and ``rainfall`` (mm/day) columns.
Floats are written with ``repr`` so every round-trip is bit-exact.
"""
from __future__ import annotations

import base64
import csv
import datetime as dt
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage, stats

from raingraph.anomaly import AnomalyReport
from raingraph.eventsync import JJAS_DAYS
from raingraph.gat import IncompatibleParamsError, ModelParams
from raingraph.grid import ClimateSnapshot, GridPoint, SpatialGraph, ValidationError
from raingraph.training import LossBreakdown

GRAPH_MAGIC = "# raingraph-graph v1"
REPORT_MAGIC = "# raingraph-report v1"
CHECKPOINT_FORMAT = "raingraph-checkpoint"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A file is truncated, corrupted, or of an unknown version."""


class IngestError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    points: list[GridPoint]
    rainfall: dict[int, np.ndarray]          # year -> (N, days) daily rainfall
    dates: dict[int, list[dt.date]]
    snapshots: list[ClimateSnapshot]
    extra_names: tuple[str, ...] = ()
    truth_anomalies: set = field(default_factory=set)   # {(node, date)}
    truth_clusters: list = field(default_factory=list)  # [[node, ...], ...]

    @property
    def years(self) -> list[int]:
        return sorted(self.rainfall)

    def snapshots_for(self, year: int) -> list[ClimateSnapshot]:
        return [s for s in self.snapshots if s.date.year == year]


def jjas_day(date: dt.date) -> int:
    """0-based day index from June 1; -1 outside June-September."""
    if 6 <= date.month <= 9:
        return (date - dt.date(date.year, 6, 1)).days
    return -1


def feature_names(extra: Sequence[str]) -> tuple[str, ...]:
    return ("rainfall", *extra, "lat", "lon")


def _assemble(coords: list[tuple[float, float]], by_date: dict, extra: Sequence[str]) -> Dataset:
    points = [GridPoint(k, lat, lon) for k, (lat, lon) in enumerate(coords)]
    names = feature_names(extra)
    lat = np.array([c[0] for c in coords])
    lon = np.array([c[1] for c in coords])
    rainfall, dates, snaps = {}, {}, []
    for year in sorted({d.year for d in by_date}):
        days = sorted(d for d in by_date if d.year == year)
        dates[year] = days
        rainfall[year] = np.stack([by_date[d][:, 0] for d in days], axis=1)
        for d in days:
            vals = by_date[d]
            feats = np.column_stack([vals, lat, lon])
            snaps.append(ClimateSnapshot(d, feats, str(year), names))
    return Dataset(points, rainfall, dates, snaps, tuple(extra))


@dataclass(frozen=True)
class IngestSpec:
    path: str
    date_col: str = "date"
    lat_col: str = "lat"
    lon_col: str = "lon"
    rain_col: str = "rainfall"
    extra_cols: tuple[str, ...] = ()
    years: Optional[tuple[int, int]] = None
    jjas_only: bool = True
    delimiter: str = ","


def _parse_float(text: str, what: str, line: int) -> float:
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise IngestError(f"line {line}: cannot parse {what} {text!r}") from None
    if not math.isfinite(v):
        raise IngestError(f"line {line}: non-finite {what} {text!r}")
    return v


def ingest(spec: IngestSpec) -> Dataset:
    """Read a gridded daily table into points, yearly series and snapshots.

    Nodes are deduplicated by (lat, lon) and numbered in ascending order;
    every retained day must cover exactly the same set of cells.
    """
    path = Path(spec.path)
    rows = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter=spec.delimiter)
        need = [spec.date_col, spec.lat_col, spec.lon_col, spec.rain_col, *spec.extra_cols]
        missing = [c for c in need if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"missing column(s): {', '.join(missing)}")
        for rec in reader:
            line = reader.line_num
            try:
                date = dt.date.fromisoformat(rec[spec.date_col].strip())
            except (AttributeError, ValueError):
                raise IngestError(f"line {line}: cannot parse date {rec[spec.date_col]!r}") from None
            if spec.jjas_only and jjas_day(date) < 0:
                continue
            if spec.years and not spec.years[0] <= date.year <= spec.years[1]:
                continue
            lat = _parse_float(rec[spec.lat_col], "lat", line)
            lon = _parse_float(rec[spec.lon_col], "lon", line)
            rain = _parse_float(rec[spec.rain_col], "rainfall", line)
            if rain < 0:
                raise IngestError(f"line {line}: negative rainfall {rain}")
            extras = [_parse_float(rec[c], c, line) for c in spec.extra_cols]
            key = (date, lat, lon)
            if key in rows:
                raise IngestError(f"line {line}: duplicate cell {lat}, {lon} on {date}")
            rows[key] = [rain, *extras]
    if not rows:
        raise IngestError(f"{path}: no rows left after filtering")
    coords = sorted({(lat, lon) for _, lat, lon in rows})
    index = {c: k for k, c in enumerate(coords)}
    by_date: dict[dt.date, np.ndarray] = {}
    counts: dict[dt.date, int] = {}
    width = 1 + len(spec.extra_cols)
    for (date, lat, lon), vals in rows.items():
        if date not in by_date:
            by_date[date] = np.full((len(coords), width), np.nan)
            counts[date] = 0
        by_date[date][index[(lat, lon)]] = vals
        counts[date] += 1
    for date in sorted(counts):
        if counts[date] != len(coords):
            raise IngestError(f"inconsistent grid: {date} has {counts[date]} of {len(coords)} cells")
    for p in coords:
        GridPoint(0, *p)
    return _assemble(coords, by_date, spec.extra_cols)


def write_table(data: Dataset, path) -> None:
    """Inverse of :func:`ingest` for a dataset (one row per cell and day)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "lat", "lon", "rainfall", *data.extra_names])
        for s in data.snapshots:
            for p, row in zip(data.points, s.features):
                w.writerow([s.date.isoformat(), repr(p.lat), repr(p.lon),
                            *(repr(float(v)) for v in row[:-2])])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class PlantedCluster:
    nodes: tuple[int, ...]
    n_events: int = 10
    magnitude_mm: float = 20.0


@dataclass(frozen=True)
class PlantedAnomaly:
    node: int
    day: int
    factor: float = 6.0   # multiple of the node's background 99th percentile
    year: Optional[int] = None


@dataclass(frozen=True)
class SyntheticSpec:
    """Gridded rainfall with planted synchronized clusters and spikes.

    Background: each day a Gaussian field smoothed over ``corr_cells`` grid
    cells decides which cells are wet (marginal probability ``wet_prob``) and
    a second smoothed field sets the Gamma(``gamma_shape``) amount, whose
    mean follows a smooth climatology. ``corr_cells=0`` gives independent
    cells. Cluster cells share ``n_events`` common event days and stay wet
    with only ``cluster_wet_prob`` otherwise. With
    ``snapshot_mode="climatology"`` every snapshot carries the constant
    climatology field while the daily series still drive the graph.
    """

    rows: int = 5
    cols: int = 5
    spacing_deg: float = 0.25
    origin: tuple[float, float] = (20.0, 75.0)
    n_nodes: Optional[int] = None
    years: tuple[int, ...] = (2000,)
    days: int = JJAS_DAYS
    seed: int = 0
    wet_prob: float = 0.3
    gamma_shape: float = 0.8
    mean_wet_mm: float = 10.0
    climatology_amp: float = 0.5
    corr_cells: float = 0.5
    cluster_wet_prob: float = 0.0
    clusters: tuple[PlantedCluster, ...] = ()
    anomalies: tuple[PlantedAnomaly, ...] = ()
    snapshot_mode: str = "daily"

    def __post_init__(self):
        n = self.rows * self.cols
        if self.n_nodes is not None and not 1 <= self.n_nodes <= n:
            raise ValueError(f"n_nodes must lie in [1, {n}]")
        n = self.n_nodes or n
        if not 1 <= self.days <= JJAS_DAYS:
            raise ValueError(f"days must lie in [1, {JJAS_DAYS}]")
        if self.corr_cells < 0:
            raise ValueError("corr_cells must be >= 0")
        if self.snapshot_mode not in ("daily", "climatology"):
            raise ValueError(f"unknown snapshot_mode {self.snapshot_mode!r}")
        for c in self.clusters:
            if len(c.nodes) > n or any(not 0 <= k < n for k in c.nodes):
                raise ValueError("cluster larger than grid or referencing missing nodes")
            if not 1 <= c.n_events <= self.days:
                raise ValueError("cluster event count must fit the season")
        for a in self.anomalies:
            if a.factor <= 1:
                raise ValueError("anomaly factor must exceed 1")
            if not 0 <= a.node < n or not 0 <= a.day < self.days:
                raise ValueError(f"planted anomaly {a} outside the grid or season")
            if a.year is not None and a.year not in self.years:
                raise ValueError(f"planted anomaly year {a.year} not generated")


def climatology(lat: np.ndarray, lon: np.ndarray, mean_mm: float, amp: float) -> np.ndarray:
    """Smooth positive field with a wavelength of a few degrees."""
    u = np.radians(lat) * 40.0
    v = np.radians(lon) * 40.0
    return mean_mm * (1.0 + amp * 0.5 * (np.sin(u) + np.cos(0.7 * v + 0.3 * u)))


def _coherent_normals(rng, spec: SyntheticSpec, n: int) -> np.ndarray:
    """(n, days) standard normals, spatially correlated over the grid per day."""
    white = rng.standard_normal((spec.days, spec.rows, spec.cols))
    if spec.corr_cells > 0:
        field = ndimage.gaussian_filter(white, sigma=(0, spec.corr_cells, spec.corr_cells), mode="reflect")
        sd = field.reshape(spec.days, -1).std(axis=1)
        field = field / np.where(sd > 0, sd, 1.0)[:, None, None]
    else:
        field = white
    return field.reshape(spec.days, -1)[:, :n].T


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    lat0, lon0 = spec.origin
    coords = [(lat0 + r * spec.spacing_deg, lon0 + c * spec.spacing_deg)
              for r in range(spec.rows) for c in range(spec.cols)]
    coords = sorted(coords)[: spec.n_nodes or len(coords)]
    n = len(coords)
    lat = np.array([c[0] for c in coords])
    lon = np.array([c[1] for c in coords])
    clim = climatology(lat, lon, spec.mean_wet_mm, spec.climatology_amp)

    wet_p = np.full(n, spec.wet_prob)
    for c in spec.clusters:
        wet_p[list(c.nodes)] = spec.cluster_wet_prob

    series = {}
    for year in spec.years:
        u_wet = _coherent_normals(rng, spec, n)
        u_amt = _coherent_normals(rng, spec, n)
        wet = stats.norm.cdf(u_wet) > 1.0 - wet_p[:, None]
        # clip so the far tail never maps to an infinite Gamma quantile
        prob = np.clip(stats.norm.cdf(u_amt), 1e-12, 1.0 - 1e-12)
        amount = stats.gamma.ppf(prob, spec.gamma_shape, scale=(clim / spec.gamma_shape)[:, None])
        # dry days keep a trace below the 1 mm event threshold
        trace = rng.uniform(0.0, 0.5, size=(n, spec.days))
        rain = np.where(wet, amount, trace)
        for c in spec.clusters:
            days = np.sort(rng.choice(spec.days, size=c.n_events, replace=False))
            idx = np.ix_(list(c.nodes), days)
            rain[idx] = c.magnitude_mm * (1.0 + 0.2 * rng.random((len(c.nodes), len(days))))
        series[year] = rain

    background = np.concatenate([series[y] for y in spec.years], axis=1)
    p99 = np.percentile(background, 99, axis=1)
    fallback = float(np.percentile(background, 99))
    start = {y: dt.date(y, 6, 1) for y in spec.years}
    truth = set()
    for a in spec.anomalies:
        year = a.year if a.year is not None else spec.years[0]
        base = p99[a.node] if p99[a.node] > 0 else fallback
        series[year][a.node, a.day] = a.factor * base
        truth.add((a.node, start[year] + dt.timedelta(days=a.day)))

    by_date = {}
    for year in spec.years:
        for d in range(spec.days):
            date = start[year] + dt.timedelta(days=d)
            if spec.snapshot_mode == "climatology":
                by_date[date] = clim.reshape(-1, 1).copy()
            else:
                by_date[date] = series[year][:, d].reshape(-1, 1)
    data = _assemble(coords, by_date, ())
    # graph input always follows the daily series, even for constant snapshots
    data.rainfall = {y: series[y].copy() for y in spec.years}
    data.truth_anomalies = truth
    data.truth_clusters = [list(c.nodes) for c in spec.clusters]
    return data


def save_truth(data: Dataset, path) -> None:
    obj = {
        "anomalies": sorted([[int(n), d.isoformat()] for n, d in data.truth_anomalies]),
        "clusters": [sorted(int(k) for k in c) for c in data.truth_clusters],
    }
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_truth(path) -> tuple[set, list]:
    obj = json.loads(Path(path).read_text())
    anomalies = {(int(n), dt.date.fromisoformat(d)) for n, d in obj["anomalies"]}
    return anomalies, [list(c) for c in obj["clusters"]]


# ---------------------------------------------------------------------------
# graphs


def save_graph(graph: SpatialGraph, path) -> None:
    lines = [GRAPH_MAGIC, f"N {graph.n_nodes}", f"year {graph.year_label}"]
    lines += [f"node {p.id} {p.lat!r} {p.lon!r}" for p in graph.nodes]
    lines.append(f"edges {graph.n_edges}")
    lines += [f"{i} {j} {q!r}" for i, j, q in graph.edge_list()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_graph(path) -> SpatialGraph:
    lines = Path(path).read_text().splitlines()
    try:
        if not lines or lines[0] != GRAPH_MAGIC:
            raise FormatError(f"{path}: not a v1 graph file")
        n = int(lines[1].split()[1])
        year = int(lines[2].split()[1])
        nodes = []
        for k in range(n):
            tag, nid, lat, lon = lines[3 + k].split()
            if tag != "node":
                raise FormatError(f"{path}: expected node line {k}")
            nodes.append(GridPoint(int(nid), float(lat), float(lon)))
        tag, m = lines[3 + n].split()
        if tag != "edges":
            raise FormatError(f"{path}: missing edge header")
        body = lines[4 + n:]
        if len(body) != int(m):
            raise FormatError(f"{path}: expected {m} edges, found {len(body)} (truncated?)")
        triples = [(int(i), int(j), float(q)) for i, j, q in (ln.split() for ln in body)]
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: malformed graph file ({exc})") from None
    edges = np.array([(i, j) for i, j, _ in triples], dtype=np.int64).reshape(-1, 2)
    return SpatialGraph(tuple(nodes), edges, np.array([q for _, _, q in triples]), year)


# ---------------------------------------------------------------------------
# checkpoints


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def save_checkpoint(params: ModelParams, path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dims": list(params.dims),
        "mode": params.mode,
        "scr_enabled": params.scr_enabled,
        "leaky_slope": params.leaky_slope,
        "use_bias": params.use_bias,
        "config": params.config,
        "weights": {k: _encode_array(v) for k, v in sorted(params.weights.items())},
        "feature_mean": None if params.feature_mean is None else _encode_array(params.feature_mean),
        "feature_std": None if params.feature_std is None else _encode_array(params.feature_std),
    }
    doc = {"payload": payload, "sha256": _digest(payload)}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path, n_features: Optional[int] = None) -> ModelParams:
    """Load and verify a checkpoint; ``n_features`` checks input compatibility."""
    try:
        doc = json.loads(Path(path).read_text())
        payload, digest = doc["payload"], doc["sha256"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: truncated or malformed checkpoint ({exc})") from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {payload.get('version')} unsupported "
                          f"(expected {CHECKPOINT_VERSION})")
    if _digest(payload) != digest:
        raise FormatError(f"{path}: checksum mismatch")
    mean, std = payload["feature_mean"], payload["feature_std"]
    params = ModelParams(
        {k: _decode_array(v) for k, v in payload["weights"].items()},
        tuple(payload["dims"]), payload["mode"], payload["scr_enabled"],
        payload["leaky_slope"], payload["use_bias"],
        None if mean is None else _decode_array(mean),
        None if std is None else _decode_array(std),
        payload["config"],
    )
    if n_features is not None and n_features != params.input_dim:
        raise IncompatibleParamsError(
            f"checkpoint expects {params.input_dim} features, data has {n_features}")
    return params


# ---------------------------------------------------------------------------
# training logs and reports


def save_training_log(history: Iterable[LossBreakdown], path) -> None:
    lines = ["epoch,recon,spatial,total"]
    lines += [f"{h.epoch},{h.recon!r},{h.spatial!r},{h.total!r}" for h in history]
    Path(path).write_text("\n".join(lines) + "\n")


def load_training_log(path) -> list[LossBreakdown]:
    rows = list(csv.DictReader(Path(path).open()))
    return [LossBreakdown(int(r["epoch"]), float(r["recon"]), float(r["spatial"]), float(r["total"]))
            for r in rows]


def save_report(report: AnomalyReport, path) -> None:
    date = report.date.isoformat() if report.date else ""
    lines = [REPORT_MAGIC, f"# date={date}", f"# percentile={report.threshold_percentile!r}",
             f"# threshold={report.threshold_value!r}", f"# n={len(report.scores)}",
             "id,score,masked,flagged"]
    lines += [f"{k},{float(s)!r},{int(m)},{int(f)}"
              for k, (s, m, f) in enumerate(zip(report.scores, report.mask, report.flags))]
    Path(path).write_text("\n".join(lines) + "\n")


def load_report(path) -> AnomalyReport:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != REPORT_MAGIC:
        raise FormatError(f"{path}: not a v1 report")
    try:
        meta = dict(ln[2:].split("=", 1) for ln in lines[1:5])
        body = [ln.split(",") for ln in lines[6:]]
        if len(body) != int(meta["n"]):
            raise FormatError(f"{path}: expected {meta['n']} nodes, found {len(body)} (truncated?)")
        scores = np.array([float(b[1]) for b in body])
        mask = np.array([b[2] == "1" for b in body], dtype=bool)
        flags = np.array([b[3] == "1" for b in body], dtype=bool)
        if [int(b[0]) for b in body] != list(range(len(body))):
            raise FormatError(f"{path}: node ids not contiguous")
    except FormatError:
        raise
    except (IndexError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed report ({exc})") from None
    for a in (scores, mask, flags):
        a.setflags(write=False)
    date = dt.date.fromisoformat(meta["date"]) if meta["date"] else None
    return AnomalyReport(date, scores, float(meta["percentile"]), float(meta["threshold"]), flags, mask)


def save_heatmap(points: Sequence[GridPoint], counts: np.ndarray, n_days: int, path) -> None:
    """Per-node flag count and frequency over ``n_days`` as a lat/lon table."""
    lines = ["lat,lon,count,frequency"]
    for p, c in zip(points, counts):
        lines.append(f"{p.lat!r},{p.lon!r},{int(c)},{(int(c) / n_days if n_days else 0.0)!r}")
    Path(path).write_text("\n".join(lines) + "\n")
