"""Composite reconstruction + spatial loss, the training loop, MSE/MAE."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from raingraph import autodiff as ad
from raingraph.gat import GAT, EdgeIndex, ModelParams, decode, encode, init_params, reconstruct
from raingraph.grid import ClimateSnapshot, SpatialGraph, validate_snapshot
from raingraph.spatial import SpatialWeights, scr_loss

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, step: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, snapshot {step}: {detail}")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.01
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    optimizer: str = "plain"
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    standardize_features: bool = True
    latent_dim: int = 4
    hidden_dim: int = 256
    mode: str = GAT
    use_bias: bool = False
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ValueError("layer widths must be >= 1")


LATENT_PRESETS = {"compact": 4, "wide": 64}
OPTIMIZERS = ("plain", "momentum", "adam")


@dataclass(frozen=True)
class LossBreakdown:
    epoch: int
    recon: float
    spatial: float
    total: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[LossBreakdown] = field(default_factory=list)


def recon_loss(X, X_hat):
    """Squared Frobenius norm of X - X_hat."""
    xv, hv = ad.value_of(X), ad.value_of(X_hat)
    if xv.shape != hv.shape:
        raise ad.ShapeError(f"reconstruction shape {hv.shape} differs from input {xv.shape}")
    return ad.frobenius_sq(ad.sub(X, X_hat))


def _graph_lookup(graphs) -> dict[str, SpatialGraph]:
    if isinstance(graphs, SpatialGraph):
        return {"*": graphs}
    return {str(k): g for k, g in graphs.items()}


def _graph_for(snap: ClimateSnapshot, lookup: Mapping[str, SpatialGraph]) -> SpatialGraph:
    if "*" in lookup:
        return lookup["*"]
    try:
        return lookup[snap.graph_ref]
    except KeyError:
        raise ValueError(f"no graph {snap.graph_ref!r} for snapshot {snap.date}") from None


class _EdgeCache:
    def __init__(self, graphs):
        self.lookup = _graph_lookup(graphs)
        self._cache: dict[int, EdgeIndex] = {}

    def graph(self, snap):
        return _graph_for(snap, self.lookup)

    def edges(self, snap) -> EdgeIndex:
        g = self.graph(snap)
        if id(g) not in self._cache:
            self._cache[id(g)] = EdgeIndex.from_graph(g)
        return self._cache[id(g)]


def feature_stats(snapshots: Sequence[ClimateSnapshot]):
    """Per-column mean and std over all nodes and days; zero std maps to 1."""
    stacked = np.concatenate([s.features for s in snapshots], axis=0)
    mean = stacked.mean(axis=0, keepdims=True)
    std = stacked.std(axis=0, keepdims=True)
    std[std == 0] = 1.0
    return mean, std


def loss_terms(weights: Mapping[str, ad.Tensor], Xs: np.ndarray, edges: EdgeIndex,
               params: ModelParams, spatial: Optional[SpatialWeights], lam: float):
    """(recon, spatial, total) tensors for one standardized snapshot.

    With lam == 0 the spatial term is identically zero and never evaluated.
    """
    Z = encode(Xs, edges, params, weights)
    X_hat = decode(Z, edges, params, weights)
    recon = recon_loss(Xs, X_hat)
    if lam > 0 and spatial is not None and params.scr_enabled:
        pen = ad.scale(scr_loss(Z, spatial), lam)
    else:
        pen = ad.scale(recon, 0.0)
    return recon, pen, ad.add(recon, pen)


def loss_and_grads(params: ModelParams, Xs: np.ndarray, edges: EdgeIndex,
                   spatial: Optional[SpatialWeights], lam: float):
    tape = ad.Tape()
    names = params.names()
    tensors = {k: tape.variable(params.weights[k]) for k in names}
    recon, pen, total = loss_terms(tensors, Xs, edges, params, spatial, lam)
    grads = ad.backward(tape, total, [tensors[k] for k in names])
    values = (float(recon.value[0, 0]), float(pen.value[0, 0]), float(total.value[0, 0]))
    return values, dict(zip(names, grads))


def _forward_losses(params, Xs, edges, spatial, lam):
    w = params.weights
    recon, pen, total = loss_terms(w, Xs, edges, params, spatial, lam)
    return float(recon[0, 0]), float(pen[0, 0]), float(total[0, 0])


def _epoch_row(epoch: int, rows) -> LossBreakdown:
    r = float(np.mean([x[0] for x in rows]))
    s = float(np.mean([x[1] for x in rows]))
    return LossBreakdown(epoch, r, s, r + s)


class _Optimizer:
    """In-place parameter update.

    plain:    p <- p - lr * g
    momentum: v <- beta * v + g;  p <- p - lr * v
    adam:     bias-corrected first/second moment estimates
    """

    def __init__(self, config: TrainConfig, weights):
        self.cfg = config
        self.m = {k: np.zeros_like(v) for k, v in weights.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.items()}
        self.t = 0

    def __call__(self, w, grads):
        cfg, lr = self.cfg, self.cfg.learning_rate
        self.t += 1
        for k, g in grads.items():
            if cfg.optimizer == "plain":
                w[k] = w[k] - lr * g
            elif cfg.optimizer == "momentum":
                self.m[k] = cfg.momentum * self.m[k] + g
                w[k] = w[k] - lr * self.m[k]
            else:
                b1, b2 = cfg.adam_betas
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mhat = self.m[k] / (1 - b1 ** self.t)
                vhat = self.v[k] / (1 - b2 ** self.t)
                w[k] = w[k] - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def train(snapshots: Sequence[ClimateSnapshot],
          graphs: Union[SpatialGraph, Mapping[str, SpatialGraph]],
          weights: Optional[SpatialWeights],
          config: TrainConfig = TrainConfig()) -> TrainResult:
    """Gradient descent, one step per snapshot in chronological order.

    History entry 0 holds the losses of the initial parameters over every
    snapshot; entry e >= 1 averages the per-step losses seen during epoch e.
    """
    if not snapshots:
        raise ValueError("need at least one snapshot")
    cache = _EdgeCache(graphs)
    for s in snapshots:
        validate_snapshot(s, cache.graph(s))
    n_feat = snapshots[0].features.shape[1]
    params = init_params(n_feat, config.hidden_dim, config.latent_dim, config.mode, config.seed,
                         scr_enabled=config.lam > 0, leaky_slope=config.leaky_slope,
                         use_bias=config.use_bias)
    order = sorted(range(len(snapshots)), key=lambda k: snapshots[k].date)
    if config.standardize_features:
        params.feature_mean, params.feature_std = feature_stats([snapshots[k] for k in order])
    params.config = asdict(config)
    inputs = [params.standardize(snapshots[k].features) for k in order]
    edge_idx = [cache.edges(snapshots[k]) for k in order]

    lam = config.lam
    init_rows = [_forward_losses(params, x, e, weights, lam) for x, e in zip(inputs, edge_idx)]
    history = [_epoch_row(0, init_rows)]
    ceiling = DIVERGENCE_FACTOR * max(history[0].total, 1e-300)
    w = {k: v.copy() for k, v in params.weights.items()}
    update = _Optimizer(config, w)

    for epoch in range(1, config.epochs + 1):
        rows = []
        for step, (x, e) in enumerate(zip(inputs, edge_idx)):
            current = params.replace_weights(w)
            try:
                vals, grads = loss_and_grads(current, x, e, weights, lam)
            except (ad.NonFiniteError, FloatingPointError) as exc:
                raise DivergenceError(epoch, step, str(exc)) from exc
            if not np.isfinite(vals[2]) or vals[2] > ceiling:
                raise DivergenceError(epoch, step, f"total loss {vals[2]:.6g}")
            rows.append(vals)
            update(w, grads)
        history.append(_epoch_row(epoch, rows))
        log.debug("epoch %d recon %.6g spatial %.6g", epoch, history[-1].recon, history[-1].spatial)
    return TrainResult(params.replace_weights(w), history)


def final_losses(params: ModelParams, snapshots: Sequence[ClimateSnapshot], graphs,
                 weights: Optional[SpatialWeights] = None, lam: float = 0.0) -> LossBreakdown:
    """Mean standardized losses of ``params`` over ``snapshots`` (no update)."""
    cache = _EdgeCache(graphs)
    rows = [_forward_losses(params, params.standardize(s.features), cache.edges(s), weights, lam)
            for s in snapshots]
    return _epoch_row(-1, rows)


def reconstruct_all(params: ModelParams, snapshots: Sequence[ClimateSnapshot], graphs):
    cache = _EdgeCache(graphs)
    out = []
    for s in snapshots:
        validate_snapshot(s, cache.graph(s))
        if s.features.shape[1] != params.input_dim:
            raise ValueError(f"snapshot has {s.features.shape[1]} features, model expects {params.input_dim}")
        out.append(reconstruct(s.features, cache.edges(s), params))
    return out


def evaluate(params: ModelParams, snapshots: Sequence[ClimateSnapshot], graphs) -> tuple[float, float]:
    """(MSE, MAE) per entry over all snapshots, nodes and features, in raw units."""
    recs = reconstruct_all(params, snapshots, graphs)
    err = np.concatenate([(s.features - r).ravel() for s, r in zip(snapshots, recs)])
    return float(np.mean(err ** 2)), float(np.mean(np.abs(err)))
