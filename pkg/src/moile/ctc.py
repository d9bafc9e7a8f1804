"""Cross-modal task clustering.

Online cluster centers over fused visual-text embeddings. The nearest
center doubles as the task embedding fed to the task-level router.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ContractError


@dataclass
class ClusterState:
    n_clusters: int
    alpha: float = 0.1
    centers: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.centers is not None

    @property
    def dim(self) -> int:
        if self.centers is None:
            raise ContractError("cluster state is not initialized")
        return self.centers.shape[1]

    def copy(self) -> "ClusterState":
        return ClusterState(
            self.n_clusters,
            self.alpha,
            None if self.centers is None else self.centers.copy(),
        )

    def to_json(self) -> dict:
        return {
            "M": self.n_clusters,
            "alpha": self.alpha,
            "centers": None if self.centers is None else self.centers.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterState":
        centers = obj.get("centers")
        return cls(
            int(obj["M"]),
            float(obj["alpha"]),
            None if centers is None else np.asarray(centers, dtype=np.float64),
        )


def init_centers(first_batch, n_clusters: int, seed: int = 0, alpha: float = 0.1) -> ClusterState:
    """Farthest-point seeding from the first batch.

    The first center is a seeded random pick; every following one is the
    batch point with the largest distance to its nearest chosen center
    (lowest index on ties).
    """
    x = np.asarray(first_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < n_clusters:
        raise ContractError(f"need at least {n_clusters} embeddings to seed {n_clusters} clusters")
    if n_clusters < 1:
        raise ContractError("n_clusters must be positive")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(x.shape[0]))]
    nearest = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(n_clusters - 1):
        j = int(np.argmax(nearest))
        if nearest[j] == 0.0:
            raise ContractError("first batch has fewer distinct points than clusters")
        chosen.append(j)
        nearest = np.minimum(nearest, ((x - x[j]) ** 2).sum(axis=1))
    return ClusterState(n_clusters, alpha, x[chosen].copy())


def _sq_dists(state: ClusterState, x: np.ndarray) -> np.ndarray:
    if state.centers is None:
        raise ContractError("cluster state is not initialized")
    diff = x[..., None, :] - state.centers
    return (diff * diff).sum(axis=-1)


def assign(state: ClusterState, x) -> int:
    """Index of the nearest center by squared Euclidean distance."""
    # np.argmin returns the first minimum, which is the tie-break we want
    return int(np.argmin(_sq_dists(state, np.asarray(x, dtype=np.float64))))


def assign_batch(state: ClusterState, xs) -> np.ndarray:
    return np.argmin(_sq_dists(state, np.asarray(xs, dtype=np.float64)), axis=-1)


def update_centers(state: ClusterState, xs, assigned) -> ClusterState:
    """Move each center toward the mean of its assigned batch points.

    ``c_new = c_old + alpha / |S_j| * sum(x - c_old)``; clusters with no
    points keep their center. Updates ``state`` in place and returns it.
    """
    xs = np.asarray(xs, dtype=np.float64)
    assigned = np.asarray(assigned)
    if state.centers is None:
        raise ContractError("cluster state is not initialized")
    new = state.centers.copy()
    for j in range(state.n_clusters):
        members = xs[assigned == j]
        if len(members):
            new[j] = state.centers[j] + state.alpha / len(members) * (members - state.centers[j]).sum(axis=0)
    state.centers = new
    return state


def observe_batch(state: ClusterState, xs) -> np.ndarray:
    """Assign a training batch, then update the centers with it."""
    labels = assign_batch(state, xs)
    update_centers(state, xs, labels)
    return labels


def task_embedding(state: ClusterState, x) -> np.ndarray:
    return state.centers[assign(state, x)].copy()


def task_embeddings(state: ClusterState, xs) -> tuple[np.ndarray, np.ndarray]:
    """Centers (and their indices) for each row of ``xs``."""
    labels = assign_batch(state, xs)
    return state.centers[labels].copy(), labels
