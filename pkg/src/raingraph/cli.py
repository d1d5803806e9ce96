"""Command-line pipeline: synth -> build-graph -> train -> detect -> heatmap/trend/eval.

Every flag can also be set through an environment variable named
RAINGRAPH_<FLAG>, e.g. RAINGRAPH_PERCENTILE=90 for --percentile. Command-line
values win over the environment.

Failures print one JSON line to stderr, {"error": ..., "type": ..., "code": n},
and exit with 1 (usage), 2 (input validation), 3 (divergence) or 4 (I/O).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from raingraph import dataio
from raingraph.anomaly import detect_snapshot, mann_kendall, yearly_counts
from raingraph.eventsync import ESConfig, build_graph, extract_events
from raingraph.gat import EdgeIndex
from raingraph.grid import ValidationError
from raingraph.spatial import build_weights
from raingraph.training import LATENT_PRESETS, OPTIMIZERS, DivergenceError, TrainConfig, evaluate, train

ENV_PREFIX = "RAINGRAPH_"
EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED, EXIT_IO = 1, 2, 3, 4

log = logging.getLogger("raingraph")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fail(exc: BaseException, code: int) -> int:
    line = json.dumps({"error": str(exc).replace("\n", " "), "type": type(exc).__name__, "code": code})
    print(line, file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# argument helpers


def _years(text: str):
    if "-" in text:
        a, b = text.split("-", 1)
        return int(a), int(b)
    return int(text), int(text)


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _add_data_args(p):
    p.add_argument("--data", required=True, help="daily rainfall table (CSV)")
    p.add_argument("--extra-cols", type=lambda s: tuple(c for c in s.split(",") if c), default=(),
                   help="comma-separated extra feature columns")
    p.add_argument("--no-jjas", action="store_true", help="keep all months instead of June-September")
    p.add_argument("--years", type=_years, default=None, help="year or inclusive range, e.g. 2000-2004")


def _add_graph_args(p):
    p.add_argument("--graphs", required=True, help="directory of graph_<year>.txt files or one graph file")


def _apply_env(parser: argparse.ArgumentParser):
    """Replace defaults with RAINGRAPH_* environment values."""
    for action in parser._actions:
        if not action.option_strings or action.dest == "help":
            continue
        key = ENV_PREFIX + action.option_strings[-1].lstrip("-").replace("-", "_").upper()
        if key not in os.environ:
            continue
        raw = os.environ[key]
        if isinstance(action, argparse._StoreTrueAction):
            action.default = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            try:
                action.default = action.type(raw) if action.type else raw
            except (TypeError, ValueError):
                raise UsageError(f"bad value for {key}: {raw!r}") from None
            if action.choices is not None and action.default not in action.choices:
                raise UsageError(f"bad value for {key}: {raw!r}")
        action.required = False


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="raingraph", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory (rainfall.csv, truth.json)")
    p.add_argument("--rows", type=int, default=5, help="grid rows")
    p.add_argument("--cols", type=int, default=5, help="grid columns")
    p.add_argument("--n-nodes", type=int, default=None, help="crop the grid to this many nodes")
    p.add_argument("--spacing", type=float, default=0.25, help="grid spacing in degrees")
    p.add_argument("--years", type=_int_list, default=(2000,), help="comma-separated years")
    p.add_argument("--days", type=int, default=122, help="days per season from June 1")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--wet-prob", type=float, default=0.3, help="mean probability of a wet day")
    p.add_argument("--corr-cells", type=float, default=0.5,
                   help="spatial correlation length of daily rain in grid cells (0 = independent)")
    p.add_argument("--cluster", action="append", type=_int_list, default=None,
                   help="comma-separated node ids sharing event days (repeatable)")
    p.add_argument("--cluster-events", type=int, default=10,
                   help="shared event days per planted cluster")
    p.add_argument("--anomalies", type=int, default=0, help="number of random planted spikes")
    p.add_argument("--anomaly-years", type=_int_list, default=None,
                   help="comma-separated years that receive spikes; unset means every year")
    p.add_argument("--anomaly-factor", type=float, default=6.0,
                   help="spike size as a multiple of the node's background 99th percentile")

    p = sub.add_parser("build-graph", help="event-synchronization graph per year", formatter_class=fmt)
    _add_data_args(p)
    p.add_argument("--out", required=True, help="output directory for graph_<year>.txt")
    p.add_argument("--event-threshold", type=float, default=1.0, help="wet-day cutoff in mm")
    p.add_argument("--q-percentile", type=float, default=ESConfig.q_edge_percentile,
                   help="percentile of positive Q used as the edge threshold")
    p.add_argument("--min-events", type=int, default=3,
                   help="series with fewer events never synchronize")
    p.add_argument("--tau-max", type=float, default=None, help="optional cap on the ES tolerance (days)")
    p.add_argument("--window-days", type=int, default=122,
                   help="days per season used for event extraction")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker pool size")

    p = sub.add_parser("train", help="train the autoencoder", formatter_class=fmt)
    _add_data_args(p)
    _add_graph_args(p)
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--log", default=None, help="training log path (CSV)")
    p.add_argument("--lam", type=float, default=0.01, help="spatial regularization weight")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate")
    p.add_argument("--epochs", type=int, default=50, help="passes over the snapshots")
    p.add_argument("--seed", type=int, default=0, help="weight initialization seed")
    p.add_argument("--optimizer", choices=OPTIMIZERS, default="plain", help="update rule")
    p.add_argument("--mode", choices=("gat", "gcn"), default="gat", help="graph layer type")
    p.add_argument("--hidden", type=int, default=256, help="hidden layer width")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--latent", choices=sorted(LATENT_PRESETS), default=None,
                   help="latent preset: compact=4, wide=64")
    g.add_argument("--latent-dim", type=int, default=None, help="explicit latent width; unset means 4")
    p.add_argument("--no-standardize", action="store_true",
                   help="train on raw features instead of z-scores")
    p.add_argument("--bias", action="store_true", help="add bias terms to every layer")
    p.add_argument("--sigma-km", type=float, default=None,
                   help="Gaussian bandwidth in km; unset means twice the median nearest-neighbour distance")
    p.add_argument("--k-neighbors", type=int, default=8,
                   help="nearest neighbours per node in the spatial weights")
    p.add_argument("--max-snapshots", type=int, default=None, help="use only the first n snapshots")

    p = sub.add_parser("detect", help="score and flag every snapshot", formatter_class=fmt)
    _add_data_args(p)
    _add_graph_args(p)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--out", required=True, help="output directory for report_<date>.csv")
    p.add_argument("--percentile", type=float, default=95.0,
                   help="nearest-rank percentile of scores used as the flag threshold")
    p.add_argument("--mask", action="store_true",
                   help="exclude nodes where the model reconstructs more rain than observed")

    p = sub.add_parser("heatmap", help="per-node anomaly frequency grid", formatter_class=fmt)
    p.add_argument("--reports", required=True, help="directory of report files")
    _add_graph_args(p)
    p.add_argument("--out", required=True, help="output CSV (lat, lon, count, frequency)")
    p.add_argument("--years", type=_years, default=None, help="year or inclusive range to include")

    p = sub.add_parser("trend", help="Mann-Kendall test on yearly anomaly counts", formatter_class=fmt)
    p.add_argument("--reports", required=True, help="directory of report files")
    p.add_argument("--out", default=None, help="optional JSON output path")

    p = sub.add_parser("eval", help="reconstruction MSE/MAE", formatter_class=fmt)
    _add_data_args(p)
    _add_graph_args(p)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--out", default=None, help="optional JSON output path")

    for action in sub.choices.values():
        _apply_env(action)
    _apply_env(parser)
    return parser


# ---------------------------------------------------------------------------
# subcommands


def _load_data(args) -> dataio.Dataset:
    spec = dataio.IngestSpec(args.data, extra_cols=tuple(args.extra_cols), years=args.years,
                             jjas_only=not args.no_jjas)
    return dataio.ingest(spec)


def _load_graphs(path) -> dict:
    path = Path(path)
    files = sorted(path.glob("graph_*.txt")) if path.is_dir() else [path]
    if not files:
        raise FileNotFoundError(f"no graph files in {path}")
    graphs = {}
    for f in files:
        g = dataio.load_graph(f)
        graphs[g.graph_ref] = g
    if not path.is_dir():
        return {"*": next(iter(graphs.values()))}
    return graphs


def _check_graphs(data, graphs):
    for g in graphs.values():
        coords = [(p.lat, p.lon) for p in g.nodes]
        if coords != [(p.lat, p.lon) for p in data.points]:
            raise ValidationError(f"graph {g.graph_ref} nodes do not match the data grid")


def cmd_synth(args):
    years = tuple(args.years)
    n = args.n_nodes or args.rows * args.cols
    rng = np.random.default_rng(args.seed + 7919)
    anomalies = []
    if args.anomalies:
        spiked = tuple(args.anomaly_years) if args.anomaly_years else years
        if not set(spiked) <= set(years):
            raise ValidationError(f"anomaly years {spiked} not among generated years {years}")
        n_days = args.days * len(spiked)
        if args.anomalies > n * n_days:
            raise ValidationError("more anomalies requested than (node, day) cells")
        # distinct days first, so each spike competes only with background nodes
        if args.anomalies <= n_days:
            slots = rng.choice(n_days, size=args.anomalies, replace=False) * n + rng.integers(0, n, args.anomalies)
        else:
            slots = rng.choice(n * n_days, size=args.anomalies, replace=False)
        for s in sorted(int(x) for x in slots):
            y, rest = divmod(s, n * args.days)
            day, node = divmod(rest, n)
            anomalies.append(dataio.PlantedAnomaly(node, day, args.anomaly_factor, spiked[y]))
    clusters = tuple(dataio.PlantedCluster(tuple(c), args.cluster_events) for c in (args.cluster or []))
    spec = dataio.SyntheticSpec(rows=args.rows, cols=args.cols, spacing_deg=args.spacing,
                                n_nodes=args.n_nodes, years=years, days=args.days, seed=args.seed,
                                wet_prob=args.wet_prob, corr_cells=args.corr_cells, clusters=clusters, anomalies=tuple(anomalies))
    data = dataio.generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_table(data, out / "rainfall.csv")
    dataio.save_truth(data, out / "truth.json")
    print(json.dumps({"nodes": len(data.points), "snapshots": len(data.snapshots),
                      "anomalies": len(data.truth_anomalies)}))


def cmd_build_graph(args):
    data = _load_data(args)
    config = ESConfig(args.event_threshold, args.q_percentile, args.min_events, args.tau_max,
                      args.window_days)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    for year in data.years:
        events = extract_events(data.rainfall[year], config)
        graph = build_graph(events, data.points, config, year, threads=args.threads)
        dataio.save_graph(graph, out / f"graph_{year}.txt")
        summary[str(year)] = graph.n_edges
    print(json.dumps({"edges": summary}, sort_keys=True))


def cmd_train(args):
    data = _load_data(args)
    graphs = _load_graphs(args.graphs)
    _check_graphs(data, graphs)
    latent = LATENT_PRESETS[args.latent] if args.latent else (args.latent_dim or 4)
    config = TrainConfig(lam=args.lam, learning_rate=args.lr, epochs=args.epochs, seed=args.seed,
                         optimizer=args.optimizer, standardize_features=not args.no_standardize,
                         latent_dim=latent, hidden_dim=args.hidden, mode=args.mode,
                         use_bias=args.bias)
    weights = build_weights(data.points, args.sigma_km, args.k_neighbors)
    snaps = data.snapshots[: args.max_snapshots] if args.max_snapshots else data.snapshots
    result = train(snaps, graphs, weights, config)
    dataio.save_checkpoint(result.params, args.checkpoint)
    if args.log:
        dataio.save_training_log(result.history, args.log)
    h0, h1 = result.history[0], result.history[-1]
    print(json.dumps({"initial_total": h0.total, "final_total": h1.total, "epochs": config.epochs}))


def cmd_detect(args):
    data = _load_data(args)
    graphs = _load_graphs(args.graphs)
    _check_graphs(data, graphs)
    n_feat = data.snapshots[0].features.shape[1]
    params = dataio.load_checkpoint(args.checkpoint, n_features=n_feat)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edge_cache = {}
    rows = ["date,n_unmasked,threshold,n_flagged"]
    for snap in data.snapshots:
        g = graphs.get("*") or graphs.get(snap.graph_ref)
        if g is None:
            raise ValidationError(f"no graph for year {snap.graph_ref}")
        if id(g) not in edge_cache:
            edge_cache[id(g)] = EdgeIndex.from_graph(g)
        rep = detect_snapshot(params, snap, g, args.percentile, args.mask, edge_cache[id(g)])
        dataio.save_report(rep, out / f"report_{snap.date.isoformat()}.csv")
        rows.append(f"{snap.date.isoformat()},{int((~rep.mask).sum())},{rep.threshold_value!r},{rep.n_flagged}")
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    print(json.dumps({"reports": len(data.snapshots)}))


def _load_reports(directory):
    files = sorted(Path(directory).glob("report_*.csv"))
    if not files:
        raise FileNotFoundError(f"no report files in {directory}")
    return [dataio.load_report(f) for f in files]


def cmd_heatmap(args):
    reports = _load_reports(args.reports)
    if args.years:
        lo, hi = args.years
        reports = [r for r in reports if r.date and lo <= r.date.year <= hi]
        if not reports:
            raise ValidationError("no reports in the requested years")
    graph = next(iter(_load_graphs(args.graphs).values()))
    counts, _ = yearly_counts(reports)
    if len(counts) != graph.n_nodes:
        raise ValidationError("reports and graph cover different node counts")
    dataio.save_heatmap(graph.nodes, counts, len(reports), args.out)


def cmd_trend(args):
    reports = _load_reports(args.reports)
    by_year = {}
    for r in reports:
        by_year.setdefault(r.date.year, []).append(r)
    years = sorted(by_year)
    totals = [yearly_counts(by_year[y])[1] for y in years]
    mk = mann_kendall(totals)
    result = {"years": years, "counts": totals, "S": mk.s, "var_S": mk.var_s, "Z": mk.z,
              "p_value": mk.p_value, "trend": mk.trend}
    text = json.dumps(result, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_eval(args):
    data = _load_data(args)
    graphs = _load_graphs(args.graphs)
    _check_graphs(data, graphs)
    params = dataio.load_checkpoint(args.checkpoint, n_features=data.snapshots[0].features.shape[1])
    mse, mae = evaluate(params, data.snapshots, graphs)
    text = json.dumps({"mse": mse, "mae": mae}, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


COMMANDS = {
    "synth": cmd_synth,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "detect": cmd_detect,
    "heatmap": cmd_heatmap,
    "trend": cmd_trend,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc, EXIT_USAGE)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        COMMANDS[args.command](args)
    except DivergenceError as exc:
        return _fail(exc, EXIT_DIVERGED)
    except dataio.FormatError as exc:
        return _fail(exc, EXIT_IO)
    except (ValueError, KeyError) as exc:
        return _fail(exc, EXIT_INPUT)
    except OSError as exc:
        return _fail(exc, EXIT_IO)
    except FloatingPointError as exc:
        return _fail(exc, EXIT_DIVERGED)
    return 0


if __name__ == "__main__":
    sys.exit(main())
