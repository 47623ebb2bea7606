"""Small reverse-mode differentiation engine over float64 matrices.

Values live on a :class:`Tape`; every operation appends a record and computes
its value eagerly.  ``backward`` walks the records in reverse and returns the
gradient of a scalar node with respect to every node that feeds it.

Supported kinds::

    matmul, add, concat_cols, relu, leaky_relu, sigmoid, elementwise_mul,
    l2_normalize_rows, segment_mean, segment_max, segment_softmax_weighted_sum,
    gather_rows, sum, weighted_bce

Segment ops take ``offsets`` (length ``n_segments + 1``, monotone, starting at
0 and ending at the row count).  Empty segments produce zero rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

__all__ = ["Tape", "Record", "forward_op", "backward", "grad_check", "ShapeError", "NonFiniteError"]


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class Record:
    kind: str
    inputs: tuple[int, ...]
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered operation records plus their output values.

    Not safe for concurrent mutation; use one tape per thread.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.values: list[np.ndarray] = []
        # smallest distance of any relu input from 0 / max-tie gap seen so far
        self.kink_margin = np.inf

    def __len__(self):
        return len(self.records)

    def leaf(self, value, name: str | None = None) -> int:
        v = np.array(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim > 2:
            raise ShapeError(f"rank {v.ndim} tensors are not supported")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite leaf {name or len(self.records)}")
        self.records.append(Record("leaf", (), {"name": name}))
        self.values.append(v)
        return len(self.records) - 1

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    # convenience wrappers
    def matmul(self, a, b):
        return forward_op(self, "matmul", (a, b))

    def add(self, a, b):
        return forward_op(self, "add", (a, b))

    def concat(self, a, b):
        return forward_op(self, "concat_cols", (a, b))

    def relu(self, a):
        return forward_op(self, "relu", (a,))

    def leaky_relu(self, a, alpha=0.2):
        return forward_op(self, "leaky_relu", (a,), alpha=alpha)

    def sigmoid(self, a):
        return forward_op(self, "sigmoid", (a,))

    def mul(self, a, b):
        return forward_op(self, "elementwise_mul", (a, b))

    def normalize(self, a):
        return forward_op(self, "l2_normalize_rows", (a,))

    def gather(self, a, index):
        return forward_op(self, "gather_rows", (a,), index=index)

    def sum(self, a):
        return forward_op(self, "sum", (a,))


def _check_segments(offsets, rows: int) -> np.ndarray:
    if offsets is None:
        raise ShapeError("segment op needs offsets")
    off = np.asarray(offsets, dtype=np.int64)
    if off.ndim != 1 or len(off) < 1 or off[0] != 0 or off[-1] != rows or np.any(np.diff(off) < 0):
        raise ShapeError(f"offsets must be monotone from 0 to {rows}")
    return off


def _segment_matrix(off: np.ndarray, weights: np.ndarray | None = None) -> sp.csr_matrix:
    rows = off[-1]
    n = len(off) - 1
    data = np.ones(rows) if weights is None else weights
    return sp.csr_matrix((data, np.arange(rows), off), shape=(n, rows))


def _segment_reduce(ufunc, x: np.ndarray, off: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """ufunc.reduceat over non-empty segments; empty segments get 0."""
    n = len(off) - 1
    counts = np.diff(off)
    nonempty = counts > 0
    out = np.zeros((n, x.shape[1]))
    if nonempty.any():
        out[nonempty] = ufunc.reduceat(x, off[:-1][nonempty], axis=0)
    return out, nonempty


def _bad_shapes(kind, *shapes):
    return ShapeError(f"{kind}: incompatible shapes {', '.join(str(s) for s in shapes)}")


def forward_op(tape: Tape, kind: str, inputs, segment_spec=None, **attrs) -> int:
    """Append one operation to ``tape`` and return its node id."""
    inputs = tuple(int(i) for i in inputs)
    for i in inputs:
        if not 0 <= i < len(tape.records):
            raise ValueError(f"{kind}: unknown input node {i}")
    xs = [tape.values[i] for i in inputs]
    saved: dict = {}
    with np.errstate(over="ignore", invalid="ignore"):
        out = _compute(tape, kind, xs, segment_spec, attrs, saved)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    tape.records.append(Record(kind, inputs, saved))
    tape.values.append(out)
    return len(tape.records) - 1


def _compute(tape, kind, xs, segment_spec, attrs, saved) -> np.ndarray:
    if kind == "matmul":
        a, b = xs
        if a.shape[1] != b.shape[0]:
            raise _bad_shapes(kind, a.shape, b.shape)
        out = a @ b
    elif kind == "add":
        a, b = xs
        # row-vector bias broadcast is the only broadcasting allowed
        if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
            raise _bad_shapes(kind, a.shape, b.shape)
        out = a + b
    elif kind == "concat_cols":
        a, b = xs
        if a.shape[0] != b.shape[0]:
            raise _bad_shapes(kind, a.shape, b.shape)
        out = np.hstack([a, b])
    elif kind == "relu":
        (a,) = xs
        if a.size:
            tape.kink_margin = min(tape.kink_margin, float(np.abs(a).min()))
        out = np.maximum(a, 0.0)
    elif kind == "leaky_relu":
        (a,) = xs
        alpha = attrs.get("alpha", 0.2)
        saved["alpha"] = alpha
        if a.size:
            tape.kink_margin = min(tape.kink_margin, float(np.abs(a).min()))
        out = np.where(a > 0, a, alpha * a)
    elif kind == "sigmoid":
        (a,) = xs
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
    elif kind == "elementwise_mul":
        a, b = xs
        if a.shape != b.shape:
            raise _bad_shapes(kind, a.shape, b.shape)
        out = a * b
    elif kind == "l2_normalize_rows":
        (a,) = xs
        norm = np.sqrt(np.sum(a * a, axis=1, keepdims=True))
        safe = np.where(norm > 0, norm, 1.0)
        out = np.where(norm > 0, a / safe, 0.0)
        saved["norm"] = norm
    elif kind == "gather_rows":
        (a,) = xs
        index = np.asarray(attrs["index"], dtype=np.int64)
        if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
            raise ShapeError(f"{kind}: index out of range for {a.shape[0]} rows")
        saved["index"] = index
        out = a[index]
    elif kind == "sum":
        (a,) = xs
        out = np.array([[a.sum()]])
    elif kind == "segment_mean":
        (a,) = xs
        off = _check_segments(segment_spec, a.shape[0])
        counts = np.diff(off)
        w = np.repeat(1.0 / np.maximum(counts, 1), counts)
        m = _segment_matrix(off, w)
        saved["m"] = m
        # centre on each segment's first row so identical rows average exactly
        seg = np.repeat(np.arange(len(counts)), counts)
        base = np.zeros((len(counts), a.shape[1]))
        nz = counts > 0
        base[nz] = a[off[:-1][nz]]
        dev = np.asarray(_segment_matrix(off) @ (a - base[seg]))
        out = base + dev / np.maximum(counts, 1)[:, None]
    elif kind == "segment_max":
        (a,) = xs
        off = _check_segments(segment_spec, a.shape[0])
        out, nonempty = _segment_reduce(np.maximum, a, off)
        counts = np.diff(off)
        seg = np.repeat(np.arange(len(counts)), counts)
        # first (lowest-row) maximal element per (segment, column)
        rows = np.arange(a.shape[0])[:, None]
        cand = np.where(a == out[seg], rows, a.shape[0])
        first, _ = _segment_reduce(np.minimum, cand, off)
        saved["argmax"] = first.astype(np.int64)
        saved["nonempty"] = nonempty
        if a.shape[0]:
            masked = np.where(rows == first[seg], -np.inf, a)
            second, _ = _segment_reduce(np.maximum, masked, off)
            gap = out - second
            real = nonempty[:, None] & np.isfinite(gap) & (gap > 0)
            if real.any():
                tape.kink_margin = min(tape.kink_margin, float(gap[real].min()))
    elif kind == "segment_softmax_weighted_sum":
        scores, vals = xs
        if scores.shape != (vals.shape[0], 1):
            raise _bad_shapes(kind, scores.shape, vals.shape)
        off = _check_segments(segment_spec, vals.shape[0])
        counts = np.diff(off)
        seg = np.repeat(np.arange(len(counts)), counts)
        top, _ = _segment_reduce(np.maximum, scores, off)
        e = np.exp(scores[:, 0] - top[seg, 0])
        denom = np.asarray(_segment_matrix(off) @ e)
        w = e / denom[seg]
        m = _segment_matrix(off, w)
        out = np.asarray(m @ vals)
        saved.update(w=w, m=m, seg=seg)
    elif kind == "weighted_bce":
        # mean of -[w*y*log s(z) + (1-y)*log(1-s(z))], stable form
        (z,) = xs
        y = np.asarray(attrs["labels"], dtype=np.float64).reshape(z.shape)
        pw = float(attrs["pos_weight"])
        if pw <= 0:
            raise ValueError("pos_weight must be positive")
        # -log s(z) = softplus(-z); -log(1-s(z)) = softplus(z)
        sp_neg = np.logaddexp(0.0, -z)
        sp_pos = np.logaddexp(0.0, z)
        out = np.array([[np.mean(pw * y * sp_neg + (1 - y) * sp_pos)]])
        saved.update(y=y, pw=pw)
    else:
        raise ValueError(f"unknown op kind {kind!r}")
    return out


def _sig(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def backward(tape: Tape, loss: int) -> dict[int, np.ndarray]:
    """Gradients of the scalar ``loss`` node w.r.t. every node it depends on."""
    if tape.values[loss].size != 1:
        raise ShapeError(f"loss must be scalar, got shape {tape.values[loss].shape}")
    grads: dict[int, np.ndarray] = {loss: np.ones_like(tape.values[loss])}

    def acc(i, g):
        if i in grads:
            grads[i] = grads[i] + g
        else:
            grads[i] = g

    for node in range(loss, -1, -1):
        if node not in grads:
            continue
        rec = tape.records[node]
        g = grads[node]
        kind = rec.kind
        xs = [tape.values[i] for i in rec.inputs]
        out = tape.values[node]
        s = rec.saved
        if kind == "leaf":
            continue
        if kind == "matmul":
            a, b = xs
            acc(rec.inputs[0], g @ b.T)
            acc(rec.inputs[1], a.T @ g)
        elif kind == "add":
            a, b = xs
            acc(rec.inputs[0], g)
            acc(rec.inputs[1], g if b.shape == g.shape else g.sum(axis=0, keepdims=True))
        elif kind == "concat_cols":
            k = xs[0].shape[1]
            acc(rec.inputs[0], g[:, :k])
            acc(rec.inputs[1], g[:, k:])
        elif kind == "relu":
            acc(rec.inputs[0], g * (xs[0] > 0))
        elif kind == "leaky_relu":
            acc(rec.inputs[0], g * np.where(xs[0] > 0, 1.0, s["alpha"]))
        elif kind == "sigmoid":
            acc(rec.inputs[0], g * out * (1 - out))
        elif kind == "elementwise_mul":
            a, b = xs
            acc(rec.inputs[0], g * b)
            acc(rec.inputs[1], g * a)
        elif kind == "l2_normalize_rows":
            norm = s["norm"]
            safe = np.where(norm > 0, norm, 1.0)
            proj = np.sum(g * out, axis=1, keepdims=True)
            acc(rec.inputs[0], np.where(norm > 0, (g - out * proj) / safe, 0.0))
        elif kind == "gather_rows":
            ga = np.zeros_like(xs[0])
            np.add.at(ga, s["index"], g)
            acc(rec.inputs[0], ga)
        elif kind == "sum":
            acc(rec.inputs[0], np.full_like(xs[0], g.item()))
        elif kind == "segment_mean":
            acc(rec.inputs[0], np.asarray(s["m"].T @ g))
        elif kind == "segment_max":
            ga = np.zeros_like(xs[0])
            nz = s["nonempty"]
            first = s["argmax"][nz]
            cols = np.broadcast_to(np.arange(ga.shape[1]), first.shape)
            ga[first, cols] = g[nz]
            acc(rec.inputs[0], ga)
        elif kind == "segment_softmax_weighted_sum":
            scores, vals = xs
            w, m, seg = s["w"], s["m"], s["seg"]
            acc(rec.inputs[1], np.asarray(m.T @ g))
            gs = g[seg]
            ds = w * (np.sum(gs * vals, axis=1) - np.sum(gs * out[seg], axis=1))
            acc(rec.inputs[0], ds.reshape(-1, 1))
        elif kind == "weighted_bce":
            (z,) = xs
            y, pw = s["y"], s["pw"]
            p = _sig(z)
            dz = (pw * y * (p - 1) + (1 - y) * p) / z.size
            acc(rec.inputs[0], g.item() * dz)
        else:  # pragma: no cover
            raise ValueError(f"no backward rule for {kind!r}")
    return grads


def grad_check(
    build: Callable[[Tape, Mapping[str, int]], int],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between backward gradients and central differences.

    ``build(tape, ids)`` must record a scalar loss given parameter leaf ids and
    return the loss node.  Relative error per entry is
    ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(p):
        t = Tape()
        ids = {k: t.leaf(v, k) for k, v in p.items()}
        loss = build(t, ids)
        val = t.values[loss]
        if not np.all(np.isfinite(val)):
            raise NonFiniteError("non-finite loss")
        return t, ids, loss

    tape, ids, loss = run(params)
    grads = backward(tape, loss)
    worst = 0.0
    for name, value in params.items():
        analytic = grads.get(ids[name], np.zeros_like(tape.values[ids[name]])).reshape(value.shape)
        flat = value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            t, _, l = run(params)
            fp = t.values[l].item()
            flat[j] = orig - eps
            t, _, l = run(params)
            fm = t.values[l].item()
            flat[j] = orig
            numeric = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
