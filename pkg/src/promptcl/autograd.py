"""Float64 reverse-mode tensor core with an explicit computation tape.

Implements exactly the operations the prefix-tuned transformer stack needs:
matmul (plain and batched), broadcast add, concat/narrow/reshape/transpose,
softmax, layernorm, gelu, masked cross-entropy, plus a few fused ops for
prompt formation (cosine_rows, weighted_sum, gather_components) and loss
assembly (sum_sq_diff). Values live in C-contiguous float64 arrays
(row-major flat storage) and reductions use numpy's fixed left-to-right
order, so forward results are bit-reproducible for identical inputs.

Ops executed while a tape is active append one node each; ``Tape.backward``
walks the nodes in reverse execution order — a valid reverse topological
order, since inputs always exist before their consumers — and accumulates
gradients into ``Tensor.grad``.

Every matmul adds its multiply-accumulate count to a module tally
(``reset_mac_count`` / ``mac_count``) so analytical FLOPs estimates can be
cross-checked against what a forward pass actually executes.
"""

from __future__ import annotations

import math
import os
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_grad_enabled = True
_active_tape: "Tape | None" = None
_debug_checks = os.environ.get("PROMPTCL_DEBUG", "") == "1"
_mac_tally = 0


def set_debug_checks(flag: bool) -> None:
    """Toggle NaN/Inf assertions after every forward and backward op."""
    global _debug_checks
    _debug_checks = bool(flag)


def reset_mac_count() -> None:
    global _mac_tally
    _mac_tally = 0


def mac_count() -> int:
    """Multiply-accumulates executed by matmul since the last reset."""
    return _mac_tally


def _finite(name: str, arr: np.ndarray) -> None:
    if _debug_checks and not np.isfinite(arr).all():
        raise ArithmeticError(f"non-finite values produced by {name}")


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``values`` is the flat row-major view of the data; ``grad`` is allocated
    lazily by the backward pass and always matches the data shape.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)


class _Node:
    __slots__ = ("out", "push")

    def __init__(self, out: Tensor, push: Callable[[np.ndarray], None]):
        self.out = out
        self.push = push


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager around a forward pass, then call ``backward``
    once. Calling it a second time without ``reset`` is an error.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False
        self._outer: Tape | None = None

    def __enter__(self) -> "Tape":
        global _active_tape
        self._outer = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._outer

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every requires_grad tensor reachable from loss."""
        if self._consumed:
            raise ContractError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue  # branch not reachable from the loss
            node.push(g)
            _finite("backward", g)


def backward(loss: Tensor) -> None:
    """Backward pass on the currently active tape."""
    if _active_tape is None:
        raise ContractError("backward requires an active Tape context")
    _active_tape.backward(loss)


@contextmanager
def no_grad():
    """Disable tape recording; forward math is unchanged."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _result(name: str, data: np.ndarray, inputs: Sequence[Tensor],
            push: Callable[[Tensor, np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    _finite(name, out.data)
    if _grad_enabled and _active_tape is not None and out.requires_grad:
        _active_tape.nodes.append(_Node(out, lambda g, o=out: push(o, g)))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape))
    else:
        t.grad += g


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _scalar(g) -> float:
    return float(g.reshape(-1)[0]) if isinstance(g, np.ndarray) else float(g)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for (m,k)x(k,n), (B,m,k)x(k,n) and (B,m,k)x(B,k,n)."""
    global _mac_tally
    ad, bd = a.data, b.data
    ok = (
        (ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[0])
        or (ad.ndim == 3 and bd.ndim == 2 and ad.shape[2] == bd.shape[0])
        or (ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] == bd.shape[0] and ad.shape[2] == bd.shape[1])
    )
    if not ok:
        raise DimensionError(f"matmul shapes incompatible: {ad.shape} @ {bd.shape}")
    data = ad @ bd
    _mac_tally += data.size * ad.shape[-1]

    def push(out, g):
        if a.requires_grad:
            _accum(a, g @ (bd.T if bd.ndim == 2 else np.swapaxes(bd, -1, -2)))
        if b.requires_grad:
            if ad.ndim == 2:
                _accum(b, ad.T @ g)
            elif bd.ndim == 2:
                _accum(b, ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.swapaxes(ad, -1, -2) @ g)

    return _result("matmul", data, (a, b), push)


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may be a trailing-shape broadcast of a (bias style)."""
    ad, bd = a.data, b.data
    if ad.shape != bd.shape:
        if bd.ndim > ad.ndim or ad.shape[ad.ndim - bd.ndim:] != bd.shape:
            raise DimensionError(f"add shapes incompatible: {ad.shape} + {bd.shape}")
    lead = tuple(range(ad.ndim - bd.ndim))

    def push(out, g):
        _accum(a, g)
        _accum(b, g.sum(axis=lead) if lead else g)

    return _result("add", ad + bd, (a, b), push)


def scale(a: Tensor, c: float) -> Tensor:
    """a * c for a python scalar c."""
    c = float(c)

    def push(out, g):
        _accum(a, g * c)

    return _result("scale", a.data * c, (a,), push)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; backward splits the gradient."""
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def push(out, g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), push)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along ``axis``; backward zero-pads."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def push(out, g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _result("narrow", a.data[idx].copy(), (a,), push)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)

    def push(out, g):
        _accum(a, g.reshape(a.data.shape))

    return _result("reshape", a.data.reshape(shape).copy(), (a,), push)


def transpose_last2(a: Tensor) -> Tensor:
    def push(out, g):
        _accum(a, np.swapaxes(g, -1, -2))

    return _result("transpose", np.swapaxes(a.data, -1, -2).copy(), (a,), push)


def repeat_batch(a: Tensor, b: int) -> Tensor:
    """(n,d) -> (b,n,d) by repetition; gradient sums over the new axis."""

    def push(out, g):
        _accum(a, g.sum(axis=0))

    return _result("repeat_batch", np.broadcast_to(a.data, (b,) + a.data.shape).copy(), (a,), push)


def stop_grad(a: Tensor) -> Tensor:
    """Identity forward with no backward edge."""
    return Tensor(a.data.copy())


def sum_all(a: Tensor) -> Tensor:
    """Scalar sum of all elements."""

    def push(out, g):
        _accum(a, np.full_like(a.data, _scalar(g)))

    return _result("sum_all", np.asarray(a.data.sum()), (a,), push)


def sum_sq_diff(a: Tensor, b: Tensor) -> Tensor:
    """Scalar sum((a - b)^2); shapes must match."""
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sum_sq_diff shapes differ: {a.data.shape} vs {b.data.shape}")
    diff = a.data - b.data

    def push(out, g):
        scaled = (2.0 * _scalar(g)) * diff
        _accum(a, scaled)
        _accum(b, -scaled)

    return _result("sum_sq_diff", np.asarray((diff * diff).sum()), (a, b), push)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; slices sum to one."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def push(out, g):
        s = (out.data * g).sum(axis=axis, keepdims=True)
        _accum(x, out.data * (g - s))

    return _result("softmax", data, (x,), push)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine gain/bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layernorm affine shapes {gain.data.shape}/{bias.data.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    lead = tuple(range(x.data.ndim - 1))

    def push(out, g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=lead) if lead else g * xhat)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=lead) if lead else g)
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return _result("layernorm", xhat * gain.data + bias.data, (x, gain, bias), push)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximation gelu."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * (x.data + _GELU_A * x2 * x.data))
    data = 0.5 * x.data * (1.0 + t)

    def push(out, g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _result("gelu", data, (x,), push)


def cross_entropy(logits: Tensor, labels, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood with optional class masking.

    logits: (C,) or (B,C); labels: int or length-B ints; mask: optional bool
    (C,) with True = class participates. Masked classes are excluded from
    the softmax entirely; a masked label is a contract violation.
    """
    ld = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    bsz, ncls = ld.shape
    if lab.shape != (bsz,):
        raise DimensionError(f"labels shape {lab.shape} does not match batch {bsz}")
    if mask is None:
        m = np.ones(ncls, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (ncls,):
            raise DimensionError(f"mask shape {m.shape} does not match classes {ncls}")
    if lab.min() < 0 or lab.max() >= ncls:
        raise ContractError(f"label out of range [0,{ncls})")
    if not m[lab].all():
        raise ContractError("cross_entropy label is masked out")

    shifted = ld - np.where(m, ld, -np.inf).max(axis=1, keepdims=True)
    e = np.exp(shifted) * m
    z = e.sum(axis=1)
    rows = np.arange(bsz)
    loss = float((np.log(z) - shifted[rows, lab]).mean())

    def push(out, g):
        if logits.requires_grad:
            p = e / z[:, None]
            p[rows, lab] -= 1.0
            p *= _scalar(g) / bsz
            _accum(logits, p if logits.data.ndim == 2 else p[0])

    return _result("cross_entropy", np.asarray(loss), (logits,), push)


def mhsa_core(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over all heads in one op.

    q (B,n,D), k/v (B,m,D) are the already-projected inputs; the op splits
    them into ``heads`` slices of width D/heads, applies softmax(q k^T /
    sqrt(D/heads)) v per head, and re-merges. Counts its two matmuls
    (2*B*n*m*D MACs) into the instrumentation tally.
    """
    global _mac_tally
    qd, kd, vd = q.data, k.data, v.data
    if qd.ndim != 3 or kd.ndim != 3 or vd.ndim != 3 or kd.shape != vd.shape \
            or qd.shape[0] != kd.shape[0] or qd.shape[2] != kd.shape[2]:
        raise DimensionError(f"mhsa_core shapes incompatible: {qd.shape}, {kd.shape}, {vd.shape}")
    bsz, n, dim = qd.shape
    m = kd.shape[1]
    if dim % heads != 0:
        raise DimensionError(f"width {dim} not divisible by {heads} heads")
    hd = dim // heads
    scale_f = 1.0 / math.sqrt(hd)

    def split(a):  # (B,t,D) -> (B,H,t,hd)
        return a.reshape(bsz, -1, heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = split(qd), split(kd), split(vd)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale_f
    attn = np.exp(scores - scores.max(axis=-1, keepdims=True))
    attn /= attn.sum(axis=-1, keepdims=True)
    out_h = attn @ vh
    _mac_tally += 2 * bsz * n * m * dim
    data = np.ascontiguousarray(out_h.transpose(0, 2, 1, 3)).reshape(bsz, n, dim)

    def push(out, g):
        gh = split(g)
        d_attn = gh @ vh.transpose(0, 1, 3, 2)
        d_scores = attn * (d_attn - (attn * d_attn).sum(axis=-1, keepdims=True)) * scale_f
        if q.requires_grad:
            dq = d_scores @ kh
            _accum(q, np.ascontiguousarray(dq.transpose(0, 2, 1, 3)).reshape(bsz, n, dim))
        if k.requires_grad:
            dk = d_scores.transpose(0, 1, 3, 2) @ qh
            _accum(k, np.ascontiguousarray(dk.transpose(0, 2, 1, 3)).reshape(bsz, m, dim))
        if v.requires_grad:
            dv = attn.transpose(0, 1, 3, 2) @ gh
            _accum(v, np.ascontiguousarray(dv.transpose(0, 2, 1, 3)).reshape(bsz, m, dim))

    return _result("mhsa_core", data, (q, k, v), push)


# ---------------------------------------------------------------------------
# fused ops for prompt formation
# ---------------------------------------------------------------------------


def cosine_rows(q: Tensor, keys: Tensor) -> Tensor:
    """Row-wise cosine similarities. q (B,D), keys (M,D) -> (B,M)."""
    qd, kd = q.data, keys.data
    if qd.ndim != 2 or kd.ndim != 2 or qd.shape[1] != kd.shape[1]:
        raise DimensionError(f"cosine_rows shapes incompatible: {qd.shape} vs {kd.shape}")
    nq = np.sqrt((qd * qd).sum(axis=1))
    nk = np.sqrt((kd * kd).sum(axis=1))
    if (nq == 0).any() or (nk == 0).any():
        raise ContractError("cosine similarity of a zero vector")
    data = (qd @ kd.T) / (nq[:, None] * nk[None, :])

    def push(out, g):
        c = out.data
        if q.requires_grad:
            dq = ((g / nk[None, :]) @ kd) / nq[:, None]
            dq -= qd * ((g * c).sum(axis=1) / (nq * nq))[:, None]
            _accum(q, dq)
        if keys.requires_grad:
            dk = ((g / nq[:, None]).T @ qd) / nk[:, None]
            dk -= kd * ((g * c).sum(axis=0) / (nk * nk))[:, None]
            _accum(keys, dk)

    return _result("cosine_rows", data, (q, keys), push)


def weighted_sum(w: Tensor, parts: Tensor) -> Tensor:
    """Linear combination of stacked parts. w (B,M), parts (M,...) -> (B,...)."""
    wd, pd = w.data, parts.data
    if wd.ndim != 2 or wd.shape[1] != pd.shape[0]:
        raise DimensionError(f"weighted_sum shapes incompatible: {wd.shape} vs {pd.shape}")
    rest = tuple(range(1, pd.ndim))

    def push(out, g):
        if w.requires_grad:
            _accum(w, np.tensordot(g, pd, axes=(rest, rest)))
        if parts.requires_grad:
            _accum(parts, np.tensordot(wd, g, axes=(0, 0)))

    return _result("weighted_sum", np.tensordot(wd, pd, axes=(1, 0)), (w, parts), push)


def gather_components(parts: Tensor, indices: np.ndarray) -> Tensor:
    """Stack selected components per batch row.

    parts (M,L,D), indices (B,N) ints -> (B, N*L, D). The selection is a
    constant; gradients scatter-add back into the selected components.
    """
    pd = parts.data
    idx = np.asarray(indices, dtype=np.int64)
    if pd.ndim != 3 or idx.ndim != 2:
        raise DimensionError(f"gather_components expects (M,L,D) and (B,N), got {pd.shape} and {idx.shape}")
    bsz, n = idx.shape
    m, length, dim = pd.shape
    if idx.min() < 0 or idx.max() >= m:
        raise ContractError(f"component index out of range [0,{m})")
    data = pd[idx.reshape(-1)].reshape(bsz, n * length, dim)

    def push(out, g):
        if parts.requires_grad:
            dp = np.zeros_like(pd)
            np.add.at(dp, idx.reshape(-1), g.reshape(bsz * n, length, dim))
            _accum(parts, dp)

    return _result("gather_components", data, (parts,), push)


# ---------------------------------------------------------------------------
# verification oracle
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4,
               indices: Sequence[int] | None = None) -> float:
    """Max relative error between tape gradients of f and central differences.

    f must be a deterministic Tensor -> scalar Tensor function. Checks every
    flat coordinate of x unless ``indices`` narrows the sample. Relative
    error uses a max(|analytic|, |numeric|, 1e-8) denominator.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        tape.backward(f(x))
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            fp = f(x).item()
        flat[i] = orig - h
        with no_grad():
            fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        err = abs(numeric - analytic[i]) / max(abs(numeric), abs(analytic[i]), 1e-8)
        worst = max(worst, err)
    return worst
