"""LoRA experts, token/task routers and the mixture layer
``f(x) = W0 x + sum_i G1(x)_i E_i(x) + sum_i G2(e)_i E^h_i(x)``.

Public functions use the column convention (``x`` is ``k x n``, one column
per token). The model calls :meth:`MoileLayer.forward_rows`, which is the
same computation on ``n x k`` row batches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import ContractError, Tensor

TOKEN = "token"
TASK = "task"


class ExpertAdapter:
    """One LoRA pair: ``B`` (d x r) and ``A`` (r x k)."""

    partitioned = False

    def __init__(self, B, A, level: str = TOKEN):
        B, A = nc.as_tensor(B), nc.as_tensor(A)
        d, r = B.shape
        r2, k = A.shape
        if r != r2:
            raise ContractError(f"adapter rank mismatch: B has {r} columns, A has {r2} rows")
        if 4 * r > min(d, k):
            raise ContractError(f"adapter rank {r} too large for a {d}x{k} weight (need r <= min(d,k)/4)")
        if level not in (TOKEN, TASK):
            raise ContractError(f"unknown adapter level {level!r}")
        self.B, self.A, self.level = B, A, level

    @classmethod
    def init(cls, d: int, k: int, r: int, rng: np.random.Generator, level: str = TOKEN) -> "ExpertAdapter":
        # usual LoRA start: random down-projection, zero up-projection
        A = rng.standard_normal((r, k)) / np.sqrt(k)
        return cls(nc.parameter(np.zeros((d, r))), nc.parameter(A), level)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def params(self) -> list[Tensor]:
        return [t for t in (self.B, self.A) if t.requires_grad]

    def weight(self) -> np.ndarray:
        return self.B.data @ self.A.data

    def apply_rows(self, h: Tensor) -> Tensor:
        return (h @ self.A.T) @ self.B.T

    def state(self) -> dict:
        return {"kind": "lora", "level": self.level, "B": nc.matrix_to_json(self.B), "A": nc.matrix_to_json(self.A)}


def expert_forward(adapter, x) -> Tensor:
    """``B (A x)`` for a ``k x n`` batch, low-rank product first."""
    x = nc.as_tensor(x)
    k = adapter.shape[1]
    if x.shape[0] != k:
        raise ContractError(f"expert expects {k} input rows, got {x.shape[0]}")
    return adapter.apply_rows(x.T).T


class Router:
    def __init__(self, weight, level: str = TOKEN):
        self.weight = nc.as_tensor(weight)
        self.level = level

    @classmethod
    def init(cls, n_experts: int, in_dim: int, rng: np.random.Generator, level: str = TOKEN, scale: float = 0.1):
        w = rng.standard_normal((n_experts, in_dim)) * (scale / np.sqrt(in_dim))
        return cls(nc.parameter(w), level)

    @property
    def n_experts(self) -> int:
        return self.weight.shape[0]

    def probs_rows(self, h: Tensor) -> Tensor:
        return nc.softmax(h @ self.weight.T, axis=-1)


def top_k_mask(p: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries per row; ties go to the
    lowest index."""
    order = np.argsort(-p, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(p.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def route_tokens(router: Router, x, K: int) -> tuple[list[int], np.ndarray]:
    """Top-K token routing for one hidden vector.

    Returns the selected expert indices (most probable first) and the gate
    vector: softmax probabilities on the selected experts, zero elsewhere.
    """
    if K > router.n_experts or K < 1:
        raise ContractError(f"K={K} must lie in 1..{router.n_experts}")
    p = nc.softmax(router.weight.data @ np.asarray(x, dtype=np.float64)).data
    order = np.argsort(-p, kind="stable")[:K]
    gates = np.zeros_like(p)
    gates[order] = p[order]
    return [int(i) for i in order], gates


def route_task(router: Router, e) -> tuple[int, float]:
    p = nc.softmax(router.weight.data @ np.asarray(e, dtype=np.float64)).data
    j = int(np.argmax(p))
    return j, float(p[j])


@dataclass
class RoutingTrace:
    """Per-token routing decisions from the last forward pass."""

    token_selected: np.ndarray  # (n, K)
    token_gates: np.ndarray  # (n, N1) dense gate values
    task_selected: np.ndarray | None = None  # (n,)
    task_gates: np.ndarray | None = None  # (n, N2)


@dataclass
class MoileLayer:
    W0: Tensor
    token_experts: list
    task_experts: list
    token_router: Router | None
    task_router: Router | None
    K: int
    use_task_router: bool = True
    last_trace: RoutingTrace | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.W0.requires_grad:
            raise ContractError("base weight W0 must be frozen")
        if self.token_router is None and len(self.token_experts) != 1:
            raise ContractError("an unrouted layer holds exactly one token expert")
        if self.token_router is not None and not 1 <= self.K <= len(self.token_experts):
            raise ContractError(f"K={self.K} must lie in 1..{len(self.token_experts)}")
        if self.task_experts and self.task_router is None:
            raise ContractError("task experts need a task router")

    @classmethod
    def init(
        cls,
        W0: np.ndarray,
        n_token: int,
        n_task: int,
        K: int,
        r: int,
        task_dim: int,
        rng: np.random.Generator,
    ) -> "MoileLayer":
        d, k = W0.shape
        token = [ExpertAdapter.init(d, k, r, rng, TOKEN) for _ in range(n_token)]
        task = [ExpertAdapter.init(d, k, r, rng, TASK) for _ in range(n_task)]
        token_router = Router.init(n_token, k, rng, TOKEN) if n_token > 1 else None
        task_router = Router.init(n_task, task_dim, rng, TASK) if n_task > 0 else None
        return cls(nc.constant(W0), token, task, token_router, task_router, K if n_token > 1 else 1)

    @property
    def n_experts(self) -> int:
        return len(self.token_experts) + len(self.task_experts)

    def experts(self) -> list:
        return self.token_experts + self.task_experts

    def params(self) -> list[Tensor]:
        out = []
        for ad in self.experts():
            out.extend(ad.params())
        for router in (self.token_router, self.task_router):
            if router is not None and router.weight.requires_grad:
                out.append(router.weight)
        return out

    def _mix(self, h: Tensor, experts: list, gates: Tensor | None, active: np.ndarray, out: Tensor) -> Tensor:
        for i, ad in enumerate(experts):
            if not active[i]:
                # unselected for every token: output and gradients are exactly zero
                continue
            y = ad.apply_rows(h)
            out = out + (y if gates is None else y * nc.take(gates, [i], axis=1))
        return out

    def forward_rows(self, h: Tensor, e: np.ndarray | None = None) -> Tensor:
        """Row-batch forward: ``h`` is ``n x k``, ``e`` is ``n x d_e``."""
        n = h.shape[0]
        out = h @ self.W0.T
        if self.token_router is None:
            trace = RoutingTrace(np.zeros((n, 1), dtype=np.int64), np.ones((n, 1)))
            out = self._mix(h, self.token_experts, None, np.ones(1, dtype=bool), out)
        else:
            p = self.token_router.probs_rows(h)
            mask = top_k_mask(p.data, self.K)
            gates = p * mask
            sel = np.argsort(-p.data, axis=-1, kind="stable")[:, : self.K]
            trace = RoutingTrace(sel, gates.data.copy())
            out = self._mix(h, self.token_experts, gates, mask.any(axis=0), out)
        if self.task_experts and self.use_task_router:
            if e is None:
                raise ContractError("task embedding required for the task-level router")
            e = np.broadcast_to(np.asarray(e, dtype=np.float64), (n, self.task_router.weight.shape[1]))
            q = nc.softmax(nc.constant(e) @ self.task_router.weight.T, axis=-1)
            tmask = top_k_mask(q.data, 1)
            tgates = q * tmask
            trace.task_selected = np.argmax(tmask, axis=-1)
            trace.task_gates = tgates.data.copy()
            out = self._mix(h, self.task_experts, tgates, tmask.any(axis=0), out)
        self.last_trace = trace
        return out

    def delta_weight(self) -> np.ndarray:
        """Sum of materialized expert weights (diagnostics only)."""
        return sum(ad.weight() for ad in self.experts())


def layer_forward(layer: MoileLayer, x, e=None) -> Tensor:
    """Column-convention layer forward: ``x`` is ``k x n``, ``e`` a task
    embedding vector shared by all columns or a ``d_e x n`` matrix."""
    x = nc.as_tensor(x)
    if x.shape[0] != layer.W0.shape[1]:
        raise ContractError(f"layer expects {layer.W0.shape[1]} input rows, got {x.shape[0]}")
    if e is not None:
        e = np.asarray(e, dtype=np.float64)
        e = e if e.ndim == 1 else e.T
    return layer.forward_rows(x.T, e).T
