"""Incremental LoRA: split an adapter's weight by SVD into a frozen
principal part and a trainable residual, and penalize drift of the
principal spectrum and overlap between the two row spaces.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import ContractError, Tensor

# residual directions weaker than this (relative to the top singular value)
# are given unit-norm A rows so the factors do not start at a saddle
_DEAD_REL = 1e-6
DEGENERATE_GAP = 1e-8


class PartitionedAdapter:
    partitioned = True

    def __init__(self, Bp, Ap, Bres, Ares, sigma_p, level: str = "token"):
        self.Bp = nc.constant(Bp)
        self.Ap = nc.constant(Ap)
        self.Bres = nc.parameter(Bres)
        self.Ares = nc.parameter(Ares)
        self.sigma_p = np.array(sigma_p, dtype=np.float64)
        self.level = level
        if self.Bp.shape[1] != self.Ap.shape[0] or self.Bres.shape[1] != self.Ares.shape[0]:
            raise ContractError("inconsistent partition factor shapes")

    @property
    def p(self) -> int:
        return self.Ap.shape[0]

    @property
    def rank(self) -> int:
        return self.p + self.Ares.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.Bp.shape[0], self.Ap.shape[1]

    @property
    def B(self) -> np.ndarray:
        return np.concatenate([self.Bp.data, self.Bres.data], axis=1)

    @property
    def A(self) -> np.ndarray:
        return np.concatenate([self.Ap.data, self.Ares.data], axis=0)

    def params(self) -> list[Tensor]:
        return [self.Bres, self.Ares] if self.Ares.shape[0] else []

    def frozen(self) -> list[np.ndarray]:
        return [self.Bp.data, self.Ap.data, self.sigma_p]

    def weight(self) -> np.ndarray:
        return self.Bp.data @ self.Ap.data + self.Bres.data @ self.Ares.data

    def apply_rows(self, h: Tensor) -> Tensor:
        out = None
        if self.p:
            out = (h @ self.Ap.T) @ self.Bp.T
        if self.Ares.shape[0]:
            res = (h @ self.Ares.T) @ self.Bres.T
            out = res if out is None else out + res
        if out is None:
            return h @ nc.constant(np.zeros((self.shape[1], self.shape[0])))
        return out

    def state(self) -> dict:
        return {
            "kind": "partitioned",
            "level": self.level,
            "Bp": nc.matrix_to_json(self.Bp),
            "Ap": nc.matrix_to_json(self.Ap),
            "Bres": nc.matrix_to_json(self.Bres),
            "Ares": nc.matrix_to_json(self.Ares),
            "sigma_p": self.sigma_p.tolist(),
        }


def choose_p(singular_values, r: int, policy: str = "half") -> int:
    """Retained rank for a partition.

    ``"half"`` keeps ``ceil(r/2)``; ``"fixed:N"`` keeps N; ``"energy:tau"``
    keeps the smallest p whose leading singular values hold a ``tau`` share
    of the total squared spectrum.
    """
    if policy == "half":
        return math.ceil(r / 2)
    kind, _, arg = policy.partition(":")
    if kind == "fixed":
        p = int(arg)
        if not 0 <= p <= r:
            raise ContractError(f"fixed p={p} outside 0..{r}")
        return p
    if kind == "energy":
        tau = float(arg)
        s2 = np.asarray(singular_values, dtype=np.float64)[:r] ** 2
        total = s2.sum()
        if total == 0.0:
            return 0
        return int(np.searchsorted(np.cumsum(s2) / total, tau - 1e-12) + 1)
    raise ContractError(f"unknown p policy {policy!r}")


def partition_adapter(adapter, p: int) -> PartitionedAdapter:
    """SVD-split ``W = B A`` into principal (top ``p``) and residual
    (components ``p+1..r``) factor pairs, each balanced as
    ``U sqrt(S)`` / ``sqrt(S) V^T``."""
    r = adapter.rank
    if not 0 <= p <= r:
        raise ContractError(f"p={p} outside 0..{r}")
    U, S, V = factored_svd(_arr(adapter.B), _arr(adapter.A))
    root = np.sqrt(S)
    Bp = U[:, :p] * root[:p]
    Ap = root[:p, None] * V[:, :p].T
    Bres = U[:, p:] * root[p:]
    Ares = root[p:, None] * V[:, p:].T
    dead = S[p:] <= _DEAD_REL * max(S[0] if len(S) else 0.0, np.finfo(float).tiny)
    if dead.any():
        # unbalanced split keeps B A exact while leaving A trainable
        Bres[:, dead] = U[:, p:][:, dead] * S[p:][dead]
        Ares[dead] = V[:, p:][:, dead].T
    return PartitionedAdapter(Bp, Ap, Bres, Ares, S[:p], adapter.level)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def factored_svd(B: np.ndarray, A: np.ndarray):
    """Thin SVD of ``B @ A`` (``d x r`` times ``r x k``) through QR of both
    factors and a Jacobi SVD of the ``r x r`` core. Returns ``(U, S, V)``
    with ``r`` columns, singular values descending."""
    qb, rb = np.linalg.qr(B)
    qa, ra = np.linalg.qr(A.T)
    u, s, v = nc.svd_batched(rb @ ra.T)
    return qb @ u, s, qa @ v


def merged(pa: PartitionedAdapter) -> Tensor:
    """``W_p + W_res``; gradients reach the residual factors only."""
    out = nc.constant(pa.Bp.data @ pa.Ap.data)
    if pa.Ares.shape[0]:
        out = out + pa.Bres @ pa.Ares
    return out


def merged_svd(pa: PartitionedAdapter):
    """Leading ``r`` singular triplets of the merged weight.

    The merged weight has rank at most ``r``, so QR of both factor stacks
    reduces it to an ``r x r`` core whose Jacobi SVD gives the same values.
    """
    U, s, V = _merged_svd_stack([pa])
    return U[0], s[0], V[0]


def _merged_svd_stack(pas):
    B = np.stack([pa.B for pa in pas])
    A = np.stack([pa.A for pa in pas])
    qb, rb = np.linalg.qr(B)
    qa, ra = np.linalg.qr(np.swapaxes(A, -1, -2))
    u, s, v = nc.svd_batched(rb @ np.swapaxes(ra, -1, -2))
    return qb @ u, s, qa @ v


def _sv_loss(pa: PartitionedAdapter, U, s, V) -> Tensor:
    p = pa.p
    cur = math.sqrt(float((s[:p] ** 2).sum()))
    ref = math.sqrt(float((pa.sigma_p ** 2).sum()))
    diff = cur - ref
    value = abs(diff)
    trainable = pa.Ares.shape[0] > 0
    degenerate = p < len(s) and s[p - 1] - s[p] < DEGENERATE_GAP
    if not trainable or degenerate or cur == 0.0:
        return nc.constant(value)
    # dL/dW = sign(diff) / cur * U_p diag(s_p) V_p^T, kept factored
    left = U[:, :p] * (np.sign(diff) * s[:p] / cur)
    right = V[:, :p]
    Bres, Ares = pa.Bres, pa.Ares

    def grad(g):
        gs = float(g)
        gB = gs * left @ (right.T @ Ares.data.T)
        gA = gs * (Bres.data.T @ left) @ right.T
        return gB, gA

    return nc.custom_op(value, (Bres, Ares), grad)


def singular_value_loss(pa: PartitionedAdapter) -> Tensor:
    """``| ||top-p sigma(merged)|| - ||stored sigma_p|| |``.

    The gradient uses ``d sigma_i / dW = u_i v_i^T``. When the p-th and
    (p+1)-th singular values are closer than ``DEGENERATE_GAP`` the top-p
    subspace is ill-defined; the value is still returned but carries no
    gradient for this step.
    """
    return singular_value_losses([pa])[0]


def singular_value_losses(pas) -> list[Tensor]:
    """:func:`singular_value_loss` for many adapters, sharing one batched
    SVD per group of equally shaped adapters."""
    out: list[Tensor | None] = [None] * len(pas)
    groups: dict[tuple, list[int]] = {}
    for i, pa in enumerate(pas):
        if pa.p == 0:
            out[i] = nc.constant(0.0)
        else:
            groups.setdefault((pa.shape, pa.rank), []).append(i)
    for idx in groups.values():
        U, s, V = _merged_svd_stack([pas[i] for i in idx])
        for j, i in enumerate(idx):
            out[i] = _sv_loss(pas[i], U[j], s[j], V[j])
    return out


def orthogonal_loss(pa: PartitionedAdapter) -> Tensor:
    """Squared Frobenius norm of the overlap ``A_res @ A_p^T``."""
    if pa.p == 0 or pa.Ares.shape[0] == 0:
        return nc.constant(0.0)
    overlap = pa.Ares @ pa.Ap.T
    return nc.tsum(nc.square(overlap))


@dataclass
class LossBundle:
    L: float
    Ls: float
    Lo: float
    lambda1: float
    lambda2: float

    @property
    def total(self) -> float:
        return self.L + self.lambda1 * self.Ls + self.lambda2 * self.Lo


def total_loss(L: Tensor, ls_terms, lo_terms, lambda1: float, lambda2: float) -> tuple[Tensor, LossBundle]:
    """``L + lambda1 * sum(Ls) + lambda2 * sum(Lo)`` plus a float summary."""
    out = L
    ls_sum = lo_sum = 0.0
    for t in ls_terms:
        ls_sum += t.item()
        if lambda1:
            out = out + t * lambda1
    for t in lo_terms:
        lo_sum += t.item()
        if lambda2:
            out = out + t * lambda2
    return out, LossBundle(L.item(), ls_sum, lo_sum, lambda1, lambda2)
