"""Dense float64 tensors with define-by-run reverse-mode autodiff, plus a
one-sided Jacobi SVD.

Operations record themselves on the active :class:`Tape` whenever one of
their inputs requires gradients; outside a tape they simply compute.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "Tensor",
    "Tape",
    "SvdResult",
    "as_tensor",
    "parameter",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "square",
    "sqrt",
    "exp",
    "log",
    "tanh",
    "relu",
    "transpose",
    "swapaxes",
    "reshape",
    "tsum",
    "mean",
    "take",
    "concat",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "layer_norm",
    "custom_op",
    "backward",
    "svd",
    "matrix_to_json",
    "matrix_from_json",
]


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that may take part in gradient computation.

    The two-dimensional case is the usual carrier (weights, activations);
    higher ranks appear inside batched attention.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf."""
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
    if not np.all(np.isfinite(t.data)):
        raise ContractError("parameter values must be finite")
    return t


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=False, name=name)


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    return out


def custom_op(value, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Record an operation with a hand-written vector-Jacobian product.

    ``backward_fn(g)`` receives the upstream gradient and returns one
    gradient (or ``None``) per parent.
    """
    return _make(np.asarray(value, dtype=np.float64), parents, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make(av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make(np.log(av), (a,), lambda g: (g / av,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# -- structural -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise ContractError("matmul expects operands of rank >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ContractError(f"matmul dimension mismatch: {av.shape} @ {bv.shape}")

    def grad(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), grad)


def transpose(a) -> Tensor:
    return swapaxes(a, -1, -2)


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis`` (embedding lookup, row picks)."""
    a = as_tensor(a)
    index = np.asarray(index)
    shape = a.data.shape

    def grad(g):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0) if index.ndim == 1 else g)
        return (out,)

    if axis != 0 and index.ndim != 1:
        raise ContractError("multi-dimensional take is only supported on axis 0")
    return _make(np.take(a.data, index, axis=axis), (a,), grad)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


# -- normalizations and losses ---------------------------------------------

def _softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = as_tensor(logits)
    if not np.all(np.isfinite(x.data)):
        raise ContractError("softmax logits must be finite")
    p = _softmax_array(x.data, axis)

    def grad(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), grad)


def log_softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise
    softmax of ``logits`` (n x vocab)."""
    x = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if x.data.ndim != 2 or targets.shape != (x.data.shape[0],):
        raise ContractError("cross_entropy expects (n, vocab) logits and n targets")
    n = x.data.shape[0]
    z = x.data - x.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def grad(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (g / n),)

    return _make(np.asarray(loss), (x,), grad)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Affine-free layer normalization over the last axis."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def grad(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _make(y, (a,), grad)


# -- backward ---------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Returns a mapping from every trainable leaf reached to its gradient, and
    also stores each gradient on ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    leaf_grads: dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return leaf_grads
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                prev = leaf_grads.get(parent)
                leaf_grads[parent] = pg.copy() if prev is None else prev + pg
            else:
                key = id(parent)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    if loss.is_leaf:
        leaf_grads[loss] = np.ones_like(loss.data)
    for leaf, g in leaf_grads.items():
        leaf.grad = g
    return leaf_grads


# -- SVD --------------------------------------------------------------------

@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``W = U @ diag(S) @ V.T`` with ``q = min(d, k)`` columns."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairs covering every (p, q) once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        top, bot = players[: m // 2], players[m // 2:][::-1]
        pairs = [(min(p, q), max(p, q)) for p, q in zip(top, bot) if p < n and q < n]
        if pairs:
            ps, qs = zip(*pairs)
            rounds.append((np.array(ps), np.array(qs)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of square ``u`` not in ``keep`` by an orthonormal
    completion built from standard basis vectors (deterministic)."""
    n = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if keep[j]]
    fill = []
    cand = 0
    for _ in range(int((~keep).sum())):
        while True:
            v = np.zeros(n)
            v[cand] = 1.0
            cand += 1
            for _ in range(2):
                for b in basis + fill:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 0.5:
                fill.append(v / nv)
                break
    out = u.copy()
    for j, v in zip(np.flatnonzero(~keep), fill):
        out[:, j] = v
    return out


def _jacobi_square(r: np.ndarray, max_sweeps: int):
    """One-sided Jacobi on the columns of a stack of square matrices."""
    n = r.shape[-1]
    g = r.copy()
    v = np.broadcast_to(np.eye(n), r.shape).copy()
    tol = n * np.finfo(np.float64).eps
    schedule = _round_robin(n)
    for _ in range(max_sweeps):
        rotated = False
        for ps, qs in schedule:
            gp, gq = g[..., :, ps], g[..., :, qs]
            alpha = (gp * gp).sum(axis=-2)
            beta = (gq * gq).sum(axis=-2)
            gamma = (gp * gq).sum(axis=-2)
            act = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not act.any():
                continue
            rotated = True
            safe = np.where(act, gamma, 1.0)
            # zeta may overflow to inf; t then comes out 0, which is the right
            # limit for a negligible rotation
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * safe)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(act, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(act, c * t, 0.0)
            c, s = c[..., None, :], s[..., None, :]
            g[..., :, ps], g[..., :, qs] = c * gp - s * gq, s * gp + c * gq
            vp, vq = v[..., :, ps], v[..., :, qs]
            v[..., :, ps], v[..., :, qs] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    return g, v


def _svd_tall(a: np.ndarray, max_sweeps: int):
    """SVD of a stack of (m, n) matrices with m >= n."""
    n = a.shape[-1]
    q, r = np.linalg.qr(a)
    g, v = _jacobi_square(r, max_sweeps)
    s = np.sqrt((g * g).sum(axis=-2))
    order = np.argsort(-s, axis=-1, kind="stable")
    s = np.take_along_axis(s, order, axis=-1)
    g = np.take_along_axis(g, order[..., None, :], axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)
    smax = s[..., :1]
    zero = s <= smax * n * np.finfo(np.float64).eps
    ur = g / np.where(zero, 1.0, s)[..., None, :]
    if zero.any():
        for idx in np.ndindex(*a.shape[:-2]):
            if zero[idx].any():
                ur[idx] = _complete_basis(ur[idx], ~zero[idx])
    return q @ ur, s, v


def _fix_signs(u: np.ndarray, v: np.ndarray):
    # first entry of each U column that is not negligible made non-negative
    mag = np.abs(u)
    first = np.argmax(mag > 1e-12 * mag.max(axis=-2, keepdims=True), axis=-2)
    lead = np.take_along_axis(u, first[..., None, :], axis=-2)
    sign = np.where(lead < 0, -1.0, 1.0)
    return u * sign, v * sign


def svd_batched(w: np.ndarray, max_sweeps: int = 60):
    """Jacobi SVD over a stack ``(..., d, k)``; returns ``(U, S, V)`` arrays."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim < 2 or min(w.shape[-2:]) < 1:
        raise ContractError("svd needs a non-empty matrix")
    if not np.all(np.isfinite(w)):
        raise ContractError("svd input must be finite")
    if w.shape[-2] >= w.shape[-1]:
        u, s, v = _svd_tall(w, max_sweeps)
    else:
        v, s, u = _svd_tall(np.swapaxes(w, -1, -2), max_sweeps)
    u, v = _fix_signs(u, v)
    return u, s, v


def svd(w) -> SvdResult:
    """Thin singular value decomposition of one matrix.

    One-sided Jacobi with round-robin (parallel) ordering after a QR
    reduction. Singular values come back non-increasing; columns of ``U``
    are signed so their first non-negligible entry is positive.
    """
    arr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError("svd expects a 2-D matrix")
    u, s, v = svd_batched(arr)
    return SvdResult(u, s, v)


# -- serialization ----------------------------------------------------------

def matrix_to_json(m) -> dict:
    arr = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    arr = np.atleast_2d(arr) if arr.ndim < 2 else arr
    if arr.ndim != 2:
        raise ContractError("only 2-D matrices serialize")
    return {"rows": arr.shape[0], "cols": arr.shape[1], "data": arr.reshape(-1).tolist()}


def matrix_from_json(obj: dict) -> np.ndarray:
    rows, cols, data = obj["rows"], obj["cols"], obj["data"]
    if len(data) != rows * cols:
        raise ContractError("matrix payload length does not equal rows * cols")
    return np.asarray(data, dtype=np.float64).reshape(rows, cols)


def iter_params(obj) -> Iterable[Tensor]:
    """Yield the trainable leaves reachable from nested lists/dicts."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from iter_params(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from iter_params(v)
