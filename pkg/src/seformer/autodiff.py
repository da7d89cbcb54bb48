"""Dense float64 tensors with reverse-mode automatic differentiation.

A define-by-run tape records every primitive applied to tensors that
require gradients.  ``backward`` replays the tape in exact reverse order,
so the recording order is itself the topological order of the graph.

Broadcasting is restricted to the leading-batch case: an operand may be a
suffix of the other operand's shape (e.g. a ``(C,)`` bias added to an
``(N, C)`` activation).  Anything else needs an explicit ``reshape``.

Single-row reductions along the key axis (softmax denominators and
attention mixing with one query) are accumulated with ``math.fsum``, which
is exactly rounded and therefore invariant under permutation of the
summands.  The batched paths use ``numpy`` reductions and agree with the
single-row path to double-precision roundoff.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .exceptions import ContractError, NumericError, ShapeError

_FINITE_CHECKS = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-operation finiteness guard (on by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not _FINITE_CHECKS:
        return
    # cheap screen: the sum is non-finite whenever any element is; a
    # non-finite sum of finite values (overflow) is ruled out by the
    # exact check before raising
    if not math.isfinite(float(arr.sum())):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_recorded")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of primitive operations; replayed in reverse by backward."""

    def __init__(self):
        self.records: list[_Record] = []

    def record(self, out: Tensor, parents, backward_fn) -> None:
        out._recorded = True
        self.records.append(_Record(out, tuple(parents), backward_fn))

    def clear(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)


_TAPE = Tape()
_GRAD_ENABLED = True


def tape() -> Tape:
    return _TAPE


@contextmanager
def no_grad():
    """Disable tape recording (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(out_data: np.ndarray, parents, backward_fn, op: str) -> Tensor:
    _check_finite(out_data, op)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out._recorded = False
    if needs:
        _TAPE.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor, clear: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Walks the tape in exact reverse recording order.  By default the tape
    is cleared afterwards; one graph per step.
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    if not loss.requires_grad:
        if clear:
            _TAPE.clear()
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(_TAPE.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        parent_grads = rec.backward_fn(g)
        for parent, pg in zip(rec.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._recorded:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            else:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg.reshape(parent.data.shape)
    if clear:
        _TAPE.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _suffix_reduce(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over leading batch axes down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) <= len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond a leading batch")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _suffix_reduce(g, a.data.shape), _suffix_reduce(g, b.data.shape)

    return _make(out, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _suffix_reduce(g, a.data.shape), -_suffix_reduce(g, b.data.shape)

    return _make(out, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return (_suffix_reduce(g * b.data, a.data.shape),
                _suffix_reduce(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return _make(out, (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# ---------------------------------------------------------------------------
# reductions and reshaping

def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), bwd, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n)

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make(out, (a,), bwd, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    src = a.data.shape
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bwd(g):
        da = np.zeros_like(a.data)
        np.add.at(da, idx, g)
        return (da,)

    return _make(out, (a,), bwd, "take_rows")


def concat_lastdim(xs: list[Tensor]) -> Tensor:
    """Concatenate along the last axis; all leading extents must agree."""
    if not xs:
        raise ShapeError("concat_lastdim of an empty list")
    lead = xs[0].data.shape[:-1]
    for x in xs[1:]:
        if x.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_lastdim: leading shape {x.data.shape[:-1]} != {lead}")
    out = np.concatenate([x.data for x in xs], axis=-1)
    widths = [x.data.shape[-1] for x in xs]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=-1))

    return _make(out, tuple(xs), bwd, "concat_lastdim")


def slice_lastdim(a: Tensor, start: int, stop: int) -> Tensor:
    out = np.ascontiguousarray(a.data[..., start:stop])

    def bwd(g):
        da = np.zeros_like(a.data)
        da[..., start:stop] = g
        return (da,)

    return _make(out, (a,), bwd, "slice_lastdim")


def stack0(xs: list[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    shape = xs[0].data.shape
    for x in xs[1:]:
        if x.data.shape != shape:
            raise ShapeError("stack0 requires equal shapes")
    out = np.stack([x.data for x in xs], axis=0)

    def bwd(g):
        return tuple(g[i] for i in range(len(xs)))

    return _make(out, tuple(xs), bwd, "stack0")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors with accumulating backward."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bwd, "matmul")


def matmul_bias(a: Tensor, b: Tensor, bias: Tensor) -> Tensor:
    """Fused ``a @ b + bias`` for (N, K) x (K, M) + (M,)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul_bias: incompatible {a.shape} x {b.shape}")
    if bias.data.shape != (b.data.shape[1],):
        raise ShapeError(f"matmul_bias: bias shape {bias.shape}")
    out = a.data @ b.data
    out += bias.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g, g.sum(axis=0)

    return _make(out, (a, b, bias), bwd, "matmul_bias")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Shift-invariant softmax over the last axis.

    Each slice sums to one within a few ulps.  A single-slice input uses an
    exactly rounded (permutation-invariant) denominator.
    """
    data = x.data
    if data.ndim == 0 or data.shape[-1] < 1:
        raise ShapeError("softmax_lastdim needs a non-empty last axis")
    if not np.all(np.isfinite(data)):
        raise NumericError("softmax_lastdim received non-finite input")
    shifted = data - data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    n_slices = int(np.prod(data.shape[:-1])) if data.ndim > 1 else 1
    if n_slices == 1:
        denom = math.fsum(e.reshape(-1).tolist())
        out = e / denom
    else:
        out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (x,), bwd, "softmax_lastdim")


def mask_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Overwrite positions where ``mask`` is true with a constant."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.data.shape:
        raise ShapeError("mask_fill: mask shape must match tensor shape")
    out = np.where(mask, value, x.data)

    def bwd(g):
        return (np.where(mask, 0.0, g),)

    return _make(out, (x,), bwd, "mask_fill")


def blend_rows(x: Tensor, keep: np.ndarray, filler: Tensor) -> Tensor:
    """Replace rows of ``x`` where ``keep`` is false with ``filler``.

    ``x`` is (..., C), ``keep`` is (...), ``filler`` is (C,).
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.data.shape[:-1]:
        raise ShapeError("blend_rows: keep mask must match leading shape")
    if filler.data.shape != x.data.shape[-1:]:
        raise ShapeError("blend_rows: filler width mismatch")
    k = keep[..., None]
    out = np.where(k, x.data, filler.data)

    def bwd(g):
        dx = np.where(k, g, 0.0)
        dfill = g[~keep].sum(axis=0) if (~keep).any() else np.zeros_like(filler.data)
        return dx, dfill

    return _make(out, (x, filler), bwd, "blend_rows")


def qk_scores(q: Tensor, k: Tensor) -> Tensor:
    """Per-query dot products: (Q, C) x (Q, S, C) -> (Q, S)."""
    if q.data.ndim != 2 or k.data.ndim != 3 or q.data.shape[0] != k.data.shape[0] \
            or q.data.shape[1] != k.data.shape[2]:
        raise ShapeError(f"qk_scores: incompatible shapes {q.shape} and {k.shape}")
    out = np.einsum("qc,qsc->qs", q.data, k.data)

    def bwd(g):
        dq = np.einsum("qs,qsc->qc", g, k.data)
        dk = np.einsum("qs,qc->qsc", g, q.data)
        return dq, dk

    return _make(out, (q, k), bwd, "qk_scores")


def attn_mix(alpha: Tensor, v: Tensor) -> Tensor:
    """Attention-weighted sum: (Q, S) x (Q, S, C) -> (Q, C).

    With a single query the channel sums use ``math.fsum`` so the result is
    bitwise invariant under a permutation of the keys.
    """
    if alpha.data.ndim != 2 or v.data.ndim != 3 or alpha.data.shape != v.data.shape[:2]:
        raise ShapeError(f"attn_mix: incompatible shapes {alpha.shape} and {v.shape}")
    nq, ns, nc = v.data.shape
    if nq == 1:
        prod = alpha.data[0, :, None] * v.data[0]
        out = np.array([[math.fsum(prod[:, c].tolist()) for c in range(nc)]])
    else:
        out = np.matmul(alpha.data[:, None, :], v.data)[:, 0, :]

    def bwd(g):
        dalpha = np.matmul(v.data, g[:, :, None])[:, :, 0]
        dv = alpha.data[:, :, None] * g[:, None, :]
        return dalpha, dv

    return _make(out, (alpha, v), bwd, "attn_mix")


def fused_attention(qp: Tensor, kp: Tensor, v: Tensor, scale_factor: float,
                    mask: np.ndarray | None = None):
    """Scaled dot-product attention in one node: softmax(qp.kp) mixing v.

    ``qp`` is (Q, C), ``kp``/``v`` are (Q, S, C); ``mask`` (Q, S) marks keys
    excluded from the softmax.  Returns ``(output, alpha)`` where ``alpha``
    is the plain coefficient array (Q, S).  Single-query calls use exactly
    rounded reductions, so the output is bitwise invariant under key
    permutations (matching the separate softmax/mix primitives).
    """
    nq, ns, nc = v.data.shape
    if qp.data.shape != (nq, nc) or kp.data.shape != (nq, ns, nc):
        raise ShapeError(
            f"fused_attention: {qp.shape} x {kp.shape} x {v.shape}")
    e = np.matmul(kp.data, qp.data[:, :, None])[:, :, 0]
    e *= scale_factor
    if mask is not None:
        e[mask] = -1e30
    if not np.all(np.isfinite(e)):
        raise NumericError("fused_attention received non-finite logits")
    shifted = e - e.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    if nq == 1:
        alpha = ex / math.fsum(ex[0].tolist())
        prod = alpha[0, :, None] * v.data[0]
        out = np.array([[math.fsum(prod[:, c].tolist()) for c in range(nc)]])
    else:
        alpha = ex / ex.sum(axis=-1, keepdims=True)
        out = np.matmul(alpha[:, None, :], v.data)[:, 0, :]

    def bwd(g):
        dalpha = np.matmul(v.data, g[:, :, None])[:, :, 0]
        dv = alpha[:, :, None] * g[:, None, :]
        de = dalpha
        de -= np.einsum("qs,qs->q", dalpha, alpha)[:, None]
        de *= alpha
        de *= scale_factor
        dqp = np.matmul(de[:, None, :], kp.data)[:, 0, :]
        dkp = de[:, :, None] * qp.data[:, None, :]
        return dqp, dkp, dv

    return _make(out, (qp, kp, v), bwd, "fused_attention"), alpha


def gather_matmul(feats: Tensor, slots: np.ndarray, pool: Tensor) -> Tensor:
    """Apply a slot-selected matrix to every key row.

    ``feats`` is (Q, S, C), ``slots`` is (S,) into ``pool`` of shape
    (P, C, C); output[q, s] = feats[q, s] @ pool[slots[s]].
    """
    slots = np.asarray(slots, dtype=np.intp)
    if feats.data.ndim != 3 or pool.data.ndim != 3:
        raise ShapeError("gather_matmul expects (Q,S,C) feats and (P,C,C) pool")
    if slots.shape != (feats.data.shape[1],):
        raise ShapeError("gather_matmul: one slot per key column required")
    if feats.data.shape[2] != pool.data.shape[1]:
        raise ShapeError(
            f"gather_matmul: width {feats.data.shape[2]} vs pool {pool.data.shape[1:]}")
    nq, ns, nc = feats.data.shape
    bounds = np.concatenate([[0], np.flatnonzero(np.diff(slots) != 0) + 1, [ns]])
    runs = [(int(bounds[i]), int(bounds[i + 1]), int(slots[bounds[i]]))
            for i in range(bounds.size - 1)]

    if len(runs) * 4 <= ns:
        # long same-slot runs (slot-sorted keys): few large products
        out = np.empty_like(feats.data)
        for a, b, p in runs:
            blk = feats.data[:, a:b].reshape(-1, nc)
            out[:, a:b] = (blk @ pool.data[p]).reshape(nq, b - a, nc)

        def bwd(g):
            dfeats = np.empty_like(feats.data)
            dpool = np.zeros_like(pool.data)
            for a, b, p in runs:
                gb = g[:, a:b].reshape(-1, nc)
                dfeats[:, a:b] = (gb @ pool.data[p].T).reshape(nq, b - a, nc)
                dpool[p] += feats.data[:, a:b].reshape(-1, nc).T @ gb
            return dfeats, dpool

        return _make(out, (feats, pool), bwd, "gather_matmul")

    sel = pool.data[slots]  # (S, C, C)
    f_t = feats.data.transpose(1, 0, 2)               # (S, Q, C)
    out = np.matmul(f_t, sel).transpose(1, 0, 2)      # (Q, S, C)
    n_pool = pool.data.shape[0]
    onehot = np.zeros((n_pool, ns))
    onehot[slots, np.arange(ns)] = 1.0

    def bwd(g):
        g_t = g.transpose(1, 0, 2)                    # (S, Q, C)
        dfeats = np.matmul(g_t, sel.transpose(0, 2, 1)).transpose(1, 0, 2)
        dsel = np.matmul(f_t.transpose(0, 2, 1), g_t)  # (S, C, C)
        dpool = (onehot @ dsel.reshape(ns, -1)).reshape(pool.data.shape)
        return dfeats, dpool

    return _make(out, (feats, pool), bwd, "gather_matmul")


def weighted_gather(feats: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    """Fixed-weight interpolation: out[i] = sum_j w[i, j] * feats[idx[i, j]].

    ``idx`` rows may repeat; weights are plain constants (geometry), so only
    ``feats`` receives gradient.
    """
    idx = np.asarray(idx, dtype=np.intp)
    w = np.asarray(w, dtype=np.float64)
    if idx.shape != w.shape or idx.ndim != 2 or feats.data.ndim != 2:
        raise ShapeError("weighted_gather: idx and w must be (K,J); feats (M,C)")
    out = np.einsum("kj,kjc->kc", w, feats.data[idx])

    def bwd(g):
        dfeats = np.zeros_like(feats.data)
        contrib = w[:, :, None] * g[:, None, :]
        np.add.at(dfeats, idx.reshape(-1), contrib.reshape(-1, g.shape[-1]))
        return (dfeats,)

    return _make(out, (feats,), bwd, "weighted_gather")


def plan_gather(feats: Tensor, plan) -> Tensor:
    """Interpolation through a prebuilt sparse plan.

    ``plan`` carries ``mat`` (K x M) and ``mat_t`` (M x K) sparse operators;
    semantically identical to ``weighted_gather`` with the plan's indices
    and weights, but reuses the factorized form across calls.
    """
    if feats.data.ndim != 2 or plan.mat.shape[1] != feats.data.shape[0]:
        raise ShapeError(
            f"plan_gather: plan expects {plan.mat.shape[1]} source rows, "
            f"got {feats.data.shape}")
    out = plan.mat @ feats.data

    def bwd(g):
        return (plan.mat_t @ g,)

    return _make(out, (feats,), bwd, "plan_gather")


def layer_norm_lastdim(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError("layer_norm_lastdim: gain/bias must match last extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dgain = (g * xhat).reshape(-1, c).sum(axis=0)
        dbias = g.reshape(-1, c).sum(axis=0)
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), bwd, "layer_norm_lastdim")


def residual_layer_norm(x: Tensor, res: Tensor, gain: Tensor, bias: Tensor,
                        eps: float = 1e-6) -> Tensor:
    """Fused ``layer_norm_lastdim(x + res, gain, bias)``."""
    c = x.data.shape[-1]
    if x.data.shape != res.data.shape:
        raise ShapeError("residual_layer_norm: operand shapes differ")
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError("residual_layer_norm: gain/bias must match last extent")
    y = x.data + res.data
    mu = y.mean(axis=-1, keepdims=True)
    yc = y - mu
    var = (yc * yc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    yhat = yc * inv
    out = yhat * gain.data + bias.data

    def bwd(g):
        dgain = (g * yhat).reshape(-1, c).sum(axis=0)
        dbias = g.reshape(-1, c).sum(axis=0)
        gy = g * gain.data
        dy = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - yhat * (gy * yhat).mean(axis=-1, keepdims=True))
        return dy, dy, dgain, dbias

    return _make(out, (x, res, gain, bias), bwd, "residual_layer_norm")


# ---------------------------------------------------------------------------
# losses

def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise Huber penalty (beta = 1) summed to a scalar."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != pred.data.shape:
        raise ShapeError("smooth_l1: target shape mismatch")
    d = pred.data - t
    a = np.abs(d)
    out = np.asarray(np.where(a < 1.0, 0.5 * d * d, a - 0.5).sum())

    def bwd(g):
        return (g * np.clip(d, -1.0, 1.0),)

    return _make(out, (pred,), bwd, "smooth_l1")


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Binary cross-entropy on logits, summed; stable for large |logit|."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ShapeError("bce_with_logits: target shape mismatch")
    x = logits.data
    out = np.asarray((np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum())
    p = 1.0 / (1.0 + np.exp(-x))

    def bwd(g):
        return (g * (p - t),)

    return _make(out, (logits,), bwd, "bce_with_logits")


def cross_entropy_logits(logits: Tensor, target_idx: np.ndarray) -> Tensor:
    """Softmax cross-entropy over the last axis of (N, K) logits, summed."""
    idx = np.asarray(target_idx, dtype=np.intp)
    x = logits.data
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError("cross_entropy_logits expects (N,K) logits and (N,) targets")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + x.max(axis=1)
    out = np.asarray((lse - x[np.arange(x.shape[0]), idx]).sum())
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)

    def bwd(g):
        dx = p.copy()
        dx[np.arange(x.shape[0]), idx] -= 1.0
        return (g * dx,)

    return _make(out, (logits,), bwd, "cross_entropy_logits")


# ---------------------------------------------------------------------------
# verification

def grad_check(fn, x: Tensor, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``fn`` at ``x`` with central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError(f"grad_check eps {eps} outside [1e-6, 1e-3]")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    out = fn(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check requires fn to return a scalar tensor")
    backward(out)
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(base)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            bump = np.array(base)
            bump.reshape(-1)[i] = flat[i] + eps
            hi = fn(Tensor(bump)).item()
            bump.reshape(-1)[i] = flat[i] - eps
            lo = fn(Tensor(bump)).item()
            numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(base.shape)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
