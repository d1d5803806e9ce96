"""Graph attention autoencoder: two GAT layers encode, two decode.

    h1 = relu(gat1(X)),  z = relu(gat2(h1))
    h2 = relu(gat3(z)),  X_hat = gat4(h2)

A GCN baseline swaps each attention layer for symmetric-normalized
aggregation. Edges are treated as unweighted connectivity with a self-loop
on every node; Q strengths are not fed to the layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np

from raingraph import autodiff as ad
from raingraph.grid import SpatialGraph

LAYERS = ("enc1", "enc2", "dec1", "dec2")
GAT, GCN = "gat", "gcn"


class IncompatibleParamsError(ValueError):
    pass


class EdgeIndex:
    """Directed message edges src -> dst: both orientations of every graph
    edge followed by one self-loop per node, with cached scatter and aggregation layouts."""

    def __init__(self, n_nodes: int, edges: np.ndarray, self_loops: bool = True):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src = [edges[:, 0], edges[:, 1]]
        dst = [edges[:, 1], edges[:, 0]]
        if self_loops:
            loop = np.arange(n_nodes, dtype=np.int64)
            src.append(loop)
            dst.append(loop)
        self.n = n_nodes
        self.src = np.concatenate(src)
        self.dst = np.concatenate(dst)
        indeg = np.bincount(self.dst, minlength=n_nodes)
        if (indeg == 0).any():
            raise ValueError(f"node {int(np.argmin(indeg))} has an empty neighborhood")
        self.by_dst = ad.Scatter(self.dst, n_nodes)
        self.by_src = ad.Scatter(self.src, n_nodes)
        self.layout = ad.Aggregate(self.dst, self.src, n_nodes)
        self.degree = indeg.astype(np.float64)
        self.gcn_coef = (1.0 / np.sqrt(self.degree[self.dst] * self.degree[self.src])).reshape(-1, 1)

    @classmethod
    def from_graph(cls, graph: SpatialGraph) -> "EdgeIndex":
        return cls(graph.n_nodes, graph.edges)

    def __len__(self):
        return len(self.src)


Array = Union[np.ndarray, ad.Tensor]


def gat_layer(X: Array, edges: EdgeIndex, W: Array, a: Array, slope: float = 0.2,
              bias: Optional[Array] = None, return_alpha: bool = False):
    """Single-head attention: row i = sum_j alpha_ij W x_j over incoming j."""
    H = ad.matmul(X, W)
    d = ad.value_of(W).shape[1]
    if ad.value_of(a).shape != (2 * d, 1):
        raise IncompatibleParamsError(f"attention vector must be ({2 * d}, 1)")
    a_dst = ad.gather_rows(a, np.arange(d))
    a_src = ad.gather_rows(a, np.arange(d, 2 * d))
    f_dst = ad.matmul(H, a_dst)
    f_src = ad.matmul(H, a_src)
    e = ad.add(ad.gather_rows(f_dst, edges.dst, edges.by_dst),
               ad.gather_rows(f_src, edges.src, edges.by_src))
    e = ad.leaky_relu(e, slope)
    alpha = ad.neighborhood_softmax(e, edges.dst, edges.n, edges.by_dst)
    out = ad.edge_aggregate(alpha, H, edges.layout)
    if bias is not None:
        out = ad.add_row(out, bias)
    if return_alpha:
        return out, ad.value_of(alpha)[:, 0]
    return out


def gcn_layer(X: Array, edges: EdgeIndex, W: Array, bias: Optional[Array] = None):
    """D^-1/2 (A + I) D^-1/2 X W with degrees counted including the self-loop."""
    H = ad.matmul(X, W)
    out = ad.edge_aggregate(edges.gcn_coef, H, edges.layout)
    if bias is not None:
        out = ad.add_row(out, bias)
    return out


def _shapes(dims, mode: str, use_bias: bool) -> dict[str, tuple[int, int]]:
    shapes = {}
    for name, i, o in zip(LAYERS, dims[:-1], dims[1:]):
        shapes[f"{name}.W"] = (i, o)
        if mode == GAT:
            shapes[f"{name}.a"] = (2 * o, 1)
        if use_bias:
            shapes[f"{name}.b"] = (1, o)
    return shapes


@dataclass
class ModelParams:
    """Learnable weights plus the feature scaling fitted on the training window.

    ``weights`` maps "layer.name" (e.g. "enc1.W", "enc1.a") to arrays.
    """

    weights: dict[str, np.ndarray]
    dims: tuple[int, int, int, int, int]
    mode: str = GAT
    scr_enabled: bool = True
    leaky_slope: float = 0.2
    use_bias: bool = False
    feature_mean: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in (GAT, GCN):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.dims[2] < 1:
            raise ValueError("latent dimension must be >= 1")
        if self.dims[0] != self.dims[4] or self.dims[1] < 1 or self.dims[3] < 1:
            raise ValueError(f"inconsistent dims {self.dims}")
        for k, shape in self.expected_shapes().items():
            if k not in self.weights or self.weights[k].shape != shape:
                raise IncompatibleParamsError(f"parameter {k} missing or not of shape {shape}")

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def latent_dim(self) -> int:
        return self.dims[2]

    def expected_shapes(self) -> dict[str, tuple[int, int]]:
        return _shapes(self.dims, self.mode, self.use_bias)

    def names(self) -> list[str]:
        return list(self.expected_shapes())

    def standardize(self, X: np.ndarray) -> np.ndarray:
        if self.feature_mean is None:
            return np.asarray(X, dtype=np.float64)
        return (X - self.feature_mean) / self.feature_std

    def destandardize(self, Xs: np.ndarray) -> np.ndarray:
        if self.feature_mean is None:
            return Xs
        return Xs * self.feature_std + self.feature_mean

    def replace_weights(self, weights: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(dict(weights), self.dims, self.mode, self.scr_enabled,
                           self.leaky_slope, self.use_bias, self.feature_mean,
                           self.feature_std, dict(self.config))


def init_params(input_dim: int, hidden: int = 256, latent: int = 4, mode: str = GAT,
                seed: int = 0, scr_enabled: bool = True, leaky_slope: float = 0.2,
                use_bias: bool = False) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = (input_dim, hidden, latent, hidden, input_dim)
    weights = {}
    for k, (r, c) in _shapes(dims, mode, use_bias).items():
        if k.endswith(".b"):
            weights[k] = np.zeros((r, c))
        else:
            lim = np.sqrt(6.0 / (r + c))
            weights[k] = rng.uniform(-lim, lim, size=(r, c))
    return ModelParams(weights, dims, mode, scr_enabled, leaky_slope, use_bias)


def _layer(X, edges, params: ModelParams, name: str, w: Mapping[str, Array]):
    b = w.get(f"{name}.b") if params.use_bias else None
    if params.mode == GAT:
        return gat_layer(X, edges, w[f"{name}.W"], w[f"{name}.a"], params.leaky_slope, b)
    return gcn_layer(X, edges, w[f"{name}.W"], b)


def _check_input(X, dim: int, what: str):
    if ad.value_of(X).shape[1] != dim:
        raise IncompatibleParamsError(f"{what} has {ad.value_of(X).shape[1]} columns, model expects {dim}")


def encode(X: Array, edges: EdgeIndex, params: ModelParams,
           weights: Optional[Mapping[str, Array]] = None):
    w = params.weights if weights is None else weights
    _check_input(X, params.input_dim, "input")
    h1 = ad.relu(_layer(X, edges, params, "enc1", w))
    return ad.relu(_layer(h1, edges, params, "enc2", w))


def decode(Z: Array, edges: EdgeIndex, params: ModelParams,
           weights: Optional[Mapping[str, Array]] = None):
    w = params.weights if weights is None else weights
    _check_input(Z, params.latent_dim, "latent")
    h2 = ad.relu(_layer(Z, edges, params, "dec1", w))
    return _layer(h2, edges, params, "dec2", w)


def reconstruct(X: np.ndarray, edges: EdgeIndex, params: ModelParams) -> np.ndarray:
    """Standardize raw features, run the autoencoder, map back to raw units."""
    xs = params.standardize(np.asarray(X, dtype=np.float64))
    return params.destandardize(ad.value_of(decode(encode(xs, edges, params), edges, params)))


def attention_coefficients(X: np.ndarray, edges: EdgeIndex, params: ModelParams) -> dict[str, np.ndarray]:
    """Per-layer alpha over ``edges`` (GAT mode only)."""
    if params.mode != GAT:
        raise ValueError("attention coefficients exist only in GAT mode")
    w, out, h = params.weights, {}, np.asarray(X, dtype=np.float64)
    for k, name in enumerate(LAYERS):
        h, alpha = gat_layer(h, edges, w[f"{name}.W"], w[f"{name}.a"], params.leaky_slope,
                             w.get(f"{name}.b") if params.use_bias else None, return_alpha=True)
        out[name] = alpha
        if k < 3:
            h = np.maximum(h, 0.0)
    return out
