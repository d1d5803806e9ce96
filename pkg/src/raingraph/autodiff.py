"""Minimal tape-based reverse-mode differentiation over 2-D float64 arrays.

Only the primitives the graph autoencoder needs are provided. Every value is
a 2-D array; scalars are (1, 1). Operations on plain arrays (no tape among
the operands) run forward only, which is what inference uses.

    tape = Tape()
    w = tape.variable(np.ones((3, 2)))
    loss = reduce_sum(matmul(x, w))
    grads = backward(tape, loss, [w])
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "index", "parents", "backward_fn")

    def __init__(self, value: np.ndarray, tape: Optional["Tape"] = None,
                 parents: tuple = (), backward_fn: Optional[Callable] = None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn
        self.index = -1
        if tape is not None:
            tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, index={self.index})"


class Tape:
    """Append-only record of tensors; recording order is a topological order."""

    def __init__(self):
        self.records: list[Tensor] = []

    def _record(self, t: Tensor):
        t.index = len(self.records)
        self.records.append(t)

    def variable(self, value) -> Tensor:
        return Tensor(_as2d(value).copy(), self)

    def __len__(self):
        return len(self.records)


def _as2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a 2-D value, got {a.ndim}-D")
    return a


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else _as2d(x)


def _tape_of(*xs) -> Optional[Tape]:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _finish(out: np.ndarray, name: str, xs: tuple, backward_fn: Callable):
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced a non-finite value")
    tape = _tape_of(*xs)
    if tape is None:
        return out
    return Tensor(out, tape, tuple(x if isinstance(x, Tensor) else None for x in xs), backward_fn)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul {av.shape} @ {bv.shape}")
    return _finish(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add {av.shape} + {bv.shape}")
    return _finish(av + bv, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"sub {av.shape} - {bv.shape}")
    return _finish(av - bv, "sub", (a, b), lambda g: (g, -g))


def add_row(a, bias):
    """a + bias with a (1, C) bias repeated over rows."""
    av, bv = value_of(a), value_of(bias)
    if bv.shape != (1, av.shape[1]):
        raise ShapeError(f"row bias {bv.shape} for {av.shape}")
    return _finish(av + bv, "add_row", (a, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def scale(a, c: float):
    av = value_of(a)
    c = float(c)
    return _finish(av * c, "scale", (a,), lambda g: (g * c,))


def mul_col(a, col):
    """Scale row r of ``a`` by col[r]; ``col`` is (R, 1)."""
    av, cv = value_of(a), value_of(col)
    if cv.shape != (av.shape[0], 1):
        raise ShapeError(f"row scaling {cv.shape} for {av.shape}")
    return _finish(av * cv, "mul_col", (a, col),
                   lambda g: (g * cv, (g * av).sum(axis=1, keepdims=True)))


def leaky_relu(a, slope: float = 0.2):
    av = value_of(a)
    d = np.where(av > 0, 1.0, slope)
    return _finish(av * d, "leaky_relu", (a,), lambda g: (g * d,))


def relu(a):
    av = value_of(a)
    d = (av > 0).astype(np.float64)
    return _finish(av * d, "relu", (a,), lambda g: (g * d,))


def exp(a):
    out = np.exp(value_of(a))
    return _finish(out, "exp", (a,), lambda g: (g * out,))


def reduce_sum(a):
    av = value_of(a)
    return _finish(np.array([[av.sum()]]), "reduce_sum", (a,),
                   lambda g: (np.full_like(av, g[0, 0]),))


def frobenius_sq(a):
    av = value_of(a)
    return _finish(np.array([[np.sum(av * av)]]), "frobenius_sq", (a,),
                   lambda g: (2.0 * g[0, 0] * av,))


class Scatter:
    """Sum rows of an (E, C) array into ``n`` groups given by ``index``.

    The incidence matrix is built once; the sparse product sums each group in
    a fixed order, so results are deterministic.
    """

    def __init__(self, index, n: int):
        index = np.asarray(index, dtype=np.int64)
        if len(index) and (index.min() < 0 or index.max() >= n):
            raise ShapeError("scatter index out of range")
        self.index = index
        self.n = n
        e = len(index)
        self.matrix = sp.csr_matrix((np.ones(e), (index, np.arange(e))), shape=(n, e))

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(self.matrix @ values)


def gather_rows(a, index, scatter: Optional[Scatter] = None):
    av = value_of(a)
    index = np.asarray(index, dtype=np.int64)
    if len(index) and (index.min() < 0 or index.max() >= av.shape[0]):
        raise ShapeError("gather index out of range")
    n = av.shape[0]

    def back(g):
        s = scatter if scatter is not None else Scatter(index, n)
        return (s(g),)

    return _finish(av[index], "gather_rows", (a,), back)


def scatter_add(a, index, n: int, scatter: Optional[Scatter] = None):
    av = value_of(a)
    index = np.asarray(index, dtype=np.int64)
    if len(index) != av.shape[0]:
        raise ShapeError(f"scatter index length {len(index)} for {av.shape[0]} rows")
    s = scatter if scatter is not None else Scatter(index, n)
    return _finish(s(av), "scatter_add", (a,), lambda g: (g[index],))


class Aggregate:
    """CSR layout for out[dst] += w_e * h[src] over a fixed directed edge list.

    Edges are sorted by (dst, src) once; each call only permutes the weights,
    so the per-row accumulation order never changes.
    """

    def __init__(self, dst, src, n: int):
        dst = np.asarray(dst, dtype=np.int64)
        src = np.asarray(src, dtype=np.int64)
        if len(dst) != len(src):
            raise ShapeError("dst and src index lengths differ")
        if len(dst) and (min(dst.min(), src.min()) < 0 or max(dst.max(), src.max()) >= n):
            raise ShapeError("aggregate index out of range")
        self.dst, self.src, self.n = dst, src, n
        self.order = np.lexsort((src, dst))
        self.indices = src[self.order]
        self.indptr = np.concatenate([[0], np.cumsum(np.bincount(dst, minlength=n))])

    def matrix(self, weights: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((weights[self.order], self.indices, self.indptr), shape=(self.n, self.n))


EDGE_CHUNK_BYTES = 1 << 25


def edge_aggregate(weights, h, layout: Aggregate):
    """Weighted neighbourhood sum: row i = sum over edges e with dst_e = i of w_e * h[src_e].

    ``weights`` is an (E, 1) column. Nothing of size E x C is kept: the forward
    pass is one sparse product and the weight gradient is accumulated in
    bounded edge chunks.
    """
    wv, hv = value_of(weights), value_of(h)
    if wv.shape != (len(layout.dst), 1):
        raise ShapeError(f"edge weights {wv.shape} for {len(layout.dst)} edges")
    if hv.shape[0] != layout.n:
        raise ShapeError(f"features have {hv.shape[0]} rows, layout covers {layout.n} nodes")
    m = layout.matrix(wv[:, 0])

    def back(g):
        dh = np.asarray(m.T @ g)
        dw = np.empty(len(layout.dst))
        step = max(1, EDGE_CHUNK_BYTES // (8 * max(1, hv.shape[1])))
        for lo in range(0, len(dw), step):
            e = slice(lo, lo + step)
            dw[e] = np.einsum("ij,ij->i", g[layout.dst[e]], hv[layout.src[e]])
        return dw.reshape(-1, 1), dh

    return _finish(np.asarray(m @ hv), "edge_aggregate", (weights, h), back)


def neighborhood_softmax(scores, group, n: int, scatter: Optional[Scatter] = None):
    """Softmax of an (E, 1) score column within each group (target node).

    The per-group maximum is subtracted before exponentiation.
    """
    sv = value_of(scores)
    if sv.shape[1] != 1:
        raise ShapeError("neighborhood_softmax expects an (E, 1) column")
    group = np.asarray(group, dtype=np.int64)
    if len(group) != sv.shape[0]:
        raise ShapeError("group index length differs from score count")
    s = scatter if scatter is not None else Scatter(group, n)
    col = sv[:, 0]
    gmax = np.full(n, -np.inf)
    np.maximum.at(gmax, group, col)
    ex = np.exp(col - gmax[group])
    denom = np.bincount(group, weights=ex, minlength=n)
    alpha = (ex / denom[group]).reshape(-1, 1)

    def back(g):
        dot = s(g * alpha)[:, 0]
        return (alpha * (g - dot[group].reshape(-1, 1)),)

    return _finish(alpha, "neighborhood_softmax", (scores,), back)


# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` for each tensor in ``params``.

    Parameters that do not reach the loss get zero gradients.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise TapeError("loss was not recorded on this tape")
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
    for t in reversed(tape.records[: loss.index + 1]):
        g = grads.pop(t.index, None)
        if g is None or t.backward_fn is None:
            if g is not None:
                grads[t.index] = g
            continue
        parent_grads = t.backward_fn(g)
        for p, pg in zip(t.parents, parent_grads):
            if p is None:
                continue
            if p.index >= t.index:
                raise TapeError("tape is not in topological order")
            if p.index in grads:
                grads[p.index] = grads[p.index] + pg
            else:
                grads[p.index] = pg
    return [grads.get(p.index, np.zeros_like(p.value)) for p in params]
