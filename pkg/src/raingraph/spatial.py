"""Gaussian geographic weights and the spatial consistency penalty on latents.

Weights w_ij = exp(-d_ij^2 / (2 sigma^2)) are kept only for each node's k
nearest geographic neighbours (union over both endpoints). The penalty is

    (1/N) * sum_i sum_j w_ij ||z_i - z_j||^2

where the double sum visits every stored pair in both orders.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from raingraph import autodiff as ad
from raingraph.grid import EARTH_RADIUS_KM, GridPoint, haversine_km


@dataclass(frozen=True, eq=False)
class SpatialWeights:
    pairs: np.ndarray      # (P, 2) int, i < j
    w: np.ndarray          # (P,)
    sigma_km: float
    k_neighbors: int
    n_nodes: int

    def __post_init__(self):
        for a in (self.pairs, self.w):
            a.setflags(write=False)

    def dense(self) -> np.ndarray:
        """Symmetric N x N weight matrix with zeros off the stored pairs."""
        m = np.zeros((self.n_nodes, self.n_nodes))
        m[self.pairs[:, 0], self.pairs[:, 1]] = self.w
        m[self.pairs[:, 1], self.pairs[:, 0]] = self.w
        return m


def _unit_vectors(lat, lon) -> np.ndarray:
    p, l = np.radians(lat), np.radians(lon)
    return np.stack([np.cos(p) * np.cos(l), np.cos(p) * np.sin(l), np.sin(p)], axis=1)


def knn_pairs(lat: np.ndarray, lon: np.ndarray, k: int) -> np.ndarray:
    """Union of each node's k nearest neighbours as sorted (i < j) pairs.

    Chord length on the unit sphere is monotone in great-circle distance, so a
    Euclidean tree on 3-D unit vectors gives exact geographic neighbours.
    """
    n = len(lat)
    k = min(k, n - 1)
    tree = cKDTree(_unit_vectors(lat, lon))
    _, idx = tree.query(_unit_vectors(lat, lon), k=k + 1)
    rows = np.repeat(np.arange(n), k + 1)
    cols = idx.reshape(-1)
    keep = rows != cols
    a, b = rows[keep], cols[keep]
    pairs = np.unique(np.stack([np.minimum(a, b), np.maximum(a, b)], axis=1), axis=0)
    return pairs.astype(np.int64)


def median_nn_distance_km(lat: np.ndarray, lon: np.ndarray) -> float:
    tree = cKDTree(_unit_vectors(lat, lon))
    _, idx = tree.query(_unit_vectors(lat, lon), k=2)
    nn = idx[:, 1]
    return float(np.median(haversine_km(lat, lon, lat[nn], lon[nn])))


def build_weights(points: Sequence[GridPoint], sigma_km: Optional[float] = None,
                  k_neighbors: int = 8) -> SpatialWeights:
    """Gaussian weights over k-nearest-neighbour pairs.

    ``sigma_km`` defaults to twice the median nearest-neighbour distance.
    """
    if len(points) < 2:
        raise ValueError("need at least two points")
    if k_neighbors < 1:
        raise ValueError("k_neighbors must be >= 1")
    lat = np.array([p.lat for p in points], dtype=np.float64)
    lon = np.array([p.lon for p in points], dtype=np.float64)
    if sigma_km is None:
        sigma_km = 2.0 * median_nn_distance_km(lat, lon)
        if sigma_km <= 0:
            # all nearest neighbours coincide; fall back to one degree of arc
            sigma_km = EARTH_RADIUS_KM * np.pi / 180.0
    if not sigma_km > 0:
        raise ValueError("sigma_km must be positive")
    pairs = knn_pairs(lat, lon, k_neighbors)
    i, j = pairs[:, 0], pairs[:, 1]
    d = haversine_km(lat[i], lon[i], lat[j], lon[j])
    w = np.exp(-(d ** 2) / (2.0 * sigma_km ** 2))
    return SpatialWeights(pairs, w, float(sigma_km), int(k_neighbors), len(points))


def scr_loss(Z, weights: SpatialWeights):
    """Spatial consistency penalty; accepts an array or a taped Tensor."""
    zv = ad.value_of(Z)
    if zv.shape[0] != weights.n_nodes:
        raise ad.ShapeError(f"latent has {zv.shape[0]} rows, weights cover {weights.n_nodes} nodes")
    if len(weights.pairs) == 0:
        return ad.scale(ad.frobenius_sq(ad.scale(Z, 0.0)), 0.0)
    diff = ad.sub(ad.gather_rows(Z, weights.pairs[:, 0]), ad.gather_rows(Z, weights.pairs[:, 1]))
    weighted = ad.mul_col(diff, np.sqrt(weights.w).reshape(-1, 1))
    return ad.scale(ad.frobenius_sq(weighted), 2.0 / weights.n_nodes)
