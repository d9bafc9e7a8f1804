import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moile.ctc import (
    ClusterState,
    assign,
    assign_batch,
    init_centers,
    observe_batch,
    task_embedding,
    task_embeddings,
    update_centers,
)
from moile.numcore import ContractError


def oracle_assign(centers, x):
    # plain loop over clusters, first strict minimum wins
    best, best_d = 0, None
    for j, c in enumerate(centers):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(x, c))
        if best_d is None or d < best_d:
            best, best_d = j, d
    return best


def oracle_update(centers, alpha, xs, labels):
    out = [list(c) for c in centers]
    for j, c in enumerate(centers):
        members = [x for x, l in zip(xs, labels) if l == j]
        if not members:
            continue
        for m in range(len(c)):
            out[j][m] = c[m] + alpha / len(members) * sum(x[m] - c[m] for x in members)
    return np.array(out)


def test_assign_and_update_match_oracle_on_random_batches():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        M = int(rng.integers(1, 6))
        dim = int(rng.integers(1, 6))
        n = int(rng.integers(1, 12))
        alpha = float(rng.uniform(0.01, 1.0))
        centers = rng.standard_normal((M, dim))
        xs = rng.standard_normal((n, dim))
        state = ClusterState(M, alpha, centers.copy())
        labels = assign_batch(state, xs)
        assert [assign(state, x) for x in xs] == list(labels)
        assert list(labels) == [oracle_assign(centers, x) for x in xs]
        update_centers(state, xs, labels)
        np.testing.assert_allclose(state.centers, oracle_update(centers, alpha, xs, labels), rtol=0, atol=1e-12)


def test_alpha_one_single_cluster_is_batch_mean(rng):
    xs = rng.standard_normal((9, 4))
    state = ClusterState(1, 1.0, rng.standard_normal((1, 4)))
    observe_batch(state, xs)
    np.testing.assert_allclose(state.centers[0], xs.mean(axis=0), rtol=0, atol=1e-12)


def test_empty_cluster_keeps_center():
    state = ClusterState(2, 0.5, np.array([[0.0, 0.0], [100.0, 100.0]]))
    update_centers(state, np.array([[1.0, 1.0]]), np.array([0]))
    np.testing.assert_array_equal(state.centers[1], [100.0, 100.0])
    np.testing.assert_allclose(state.centers[0], [0.5, 0.5])


def test_tie_goes_to_lowest_index():
    state = ClusterState(2, 0.1, np.array([[1.0, 0.0], [-1.0, 0.0]]))
    assert assign(state, [0.0, 5.0]) == 0


def test_init_centers_farthest_point():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [5.0, 0.0]])
    st_ = init_centers(x, 2, seed=0)
    first = int(np.random.default_rng(0).integers(4))
    far = int(np.argmax(((x - x[first]) ** 2).sum(1)))
    np.testing.assert_array_equal(st_.centers, x[[first, far]])


def test_init_centers_errors():
    with pytest.raises(ContractError):
        init_centers(np.zeros((2, 3)), 3)
    with pytest.raises(ContractError):
        init_centers(np.zeros((5, 3)), 2)


def test_uninitialized_state_errors():
    with pytest.raises(ContractError):
        assign(ClusterState(2), [0.0])


def test_task_embeddings_are_centers(rng):
    state = ClusterState(3, 0.1, rng.standard_normal((3, 5)))
    xs = rng.standard_normal((6, 5))
    e, labels = task_embeddings(state, xs)
    np.testing.assert_array_equal(e, state.centers[labels])
    np.testing.assert_array_equal(task_embedding(state, xs[0]), state.centers[labels[0]])


def test_json_roundtrip(rng):
    state = ClusterState(3, 0.2, rng.standard_normal((3, 4)))
    back = ClusterState.from_json(state.to_json())
    assert back.n_clusters == 3 and back.alpha == 0.2
    np.testing.assert_array_equal(back.centers, state.centers)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 20), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_update_stays_in_hull(M, n, alpha, seed):
    # with alpha in [0, 1] every new center is a convex mix of the old one
    # and its members' mean, so it cannot leave their bounding box
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((M, 3))
    xs = rng.standard_normal((n, 3))
    state = ClusterState(M, alpha, centers.copy())
    labels = observe_batch(state, xs)
    for j in range(M):
        pts = np.vstack([centers[j:j + 1], xs[labels == j]])
        assert np.all(state.centers[j] >= pts.min(0) - 1e-12)
        assert np.all(state.centers[j] <= pts.max(0) + 1e-12)
