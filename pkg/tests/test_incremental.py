import math

import numpy as np
import pytest

from moile import numcore as nc
from moile.experts import ExpertAdapter
from moile.incremental import (
    DEGENERATE_GAP,
    PartitionedAdapter,
    choose_p,
    factored_svd,
    merged,
    merged_svd,
    orthogonal_loss,
    partition_adapter,
    singular_value_loss,
    singular_value_losses,
    total_loss,
)
from moile.numcore import ContractError

from conftest import finite_difference, rel_err


def _adapter(rng, d=32, k=24, r=6):
    return ExpertAdapter(rng.standard_normal((d, r)), rng.standard_normal((r, k)))


def test_choose_p_policies():
    s = np.array([4.0, 2.0, 1.0, 1.0])
    assert choose_p(s, 8) == 4 and choose_p(s, 7) == 4
    assert choose_p(s, 4, "fixed:3") == 3
    # squared energy 16, 4, 1, 1 of 22
    assert choose_p(s, 4, "energy:0.7") == 1
    assert choose_p(s, 4, "energy:0.9") == 2
    assert choose_p(s, 4, "energy:1.0") == 4
    with pytest.raises(ContractError):
        choose_p(s, 4, "fixed:5")
    with pytest.raises(ContractError):
        choose_p(s, 4, "bogus")


def test_factored_svd_matches_numpy(rng):
    B, A = rng.standard_normal((20, 5)), rng.standard_normal((5, 12))
    U, S, V = factored_svd(B, A)
    np.testing.assert_allclose(S, np.linalg.svd(B @ A, compute_uv=False)[:5], atol=1e-10)
    np.testing.assert_allclose((U * S) @ V.T, B @ A, atol=1e-10)


@pytest.mark.parametrize("p", range(7))
def test_partition_reconstructs_and_truncates(p, rng):
    ad = _adapter(rng)
    pa = partition_adapter(ad, p)
    W = ad.weight()
    np.testing.assert_allclose(pa.weight(), W, atol=1e-9 * np.abs(W).max())
    U, S, Vt = np.linalg.svd(W)
    np.testing.assert_allclose(pa.Bp.data @ pa.Ap.data, (U[:, :p] * S[:p]) @ Vt[:p], atol=1e-9 * S[0])
    assert pa.p == p and pa.rank == 6
    assert pa.Bp.requires_grad is False and pa.Ares.requires_grad is True


def test_partition_of_zero_adapter_keeps_residual_trainable(rng):
    ad = ExpertAdapter.init(32, 24, 6, rng)
    pa = partition_adapter(ad, 3)
    assert np.all(pa.weight() == 0)
    # dead directions get unit A rows so B still receives gradient
    np.testing.assert_allclose(np.linalg.norm(pa.Ares.data, axis=1), 1.0)


def test_losses_vanish_at_partition(rng):
    pa = partition_adapter(_adapter(rng), 3)
    assert singular_value_loss(pa).item() <= 1e-12
    assert orthogonal_loss(pa).item() <= 1e-20


def test_ls_gradient_finite_difference(rng):
    pa = partition_adapter(_adapter(rng), 3)
    pa.Bres.data += 0.3 * rng.standard_normal(pa.Bres.shape)
    pa.Ares.data += 0.3 * rng.standard_normal(pa.Ares.shape)
    _, s, _ = merged_svd(pa)
    assert s[2] - s[3] > DEGENERATE_GAP
    with nc.Tape() as tape:
        loss = singular_value_loss(pa)
    grads = nc.backward(tape, loss)

    def f():
        return singular_value_loss(pa).item()

    fd = finite_difference(f, [pa.Bres.data, pa.Ares.data])
    assert rel_err(grads[pa.Bres], fd[0]) < 1e-3
    assert rel_err(grads[pa.Ares], fd[1]) < 1e-3


def test_ls_value_matches_numpy(rng):
    pa = partition_adapter(_adapter(rng), 2)
    pa.Ares.data += rng.standard_normal(pa.Ares.shape)
    s = np.linalg.svd(pa.weight(), compute_uv=False)
    expected = abs(math.sqrt((s[:2] ** 2).sum()) - math.sqrt((pa.sigma_p ** 2).sum()))
    assert singular_value_loss(pa).item() == pytest.approx(expected, rel=1e-9)


def test_ls_degenerate_gap_has_no_gradient():
    # principal and residual share a singular value: top-p subspace undefined
    Bp = np.zeros((16, 1))
    Bp[0, 0] = 1.0
    Ap = np.zeros((1, 16))
    Ap[0, 0] = 1.0
    Bres = np.zeros((16, 1))
    Bres[1, 0] = 1.0
    Ares = np.zeros((1, 16))
    Ares[0, 1] = 1.0
    pa = PartitionedAdapter(Bp, Ap, Bres, Ares, [1.0])
    assert not singular_value_loss(pa).requires_grad


def test_batched_ls_matches_single(rng):
    pas = [partition_adapter(_adapter(rng), p) for p in (0, 2, 3, 3)]
    for pa in pas:
        pa.Ares.data += 0.2 * rng.standard_normal(pa.Ares.shape)
    many = singular_value_losses(pas)
    for pa, ls in zip(pas, many):
        assert ls.item() == pytest.approx(singular_value_loss(pa).item(), abs=1e-12)


def test_lo_gradient_finite_difference(rng):
    pa = partition_adapter(_adapter(rng), 3)
    pa.Ares.data += rng.standard_normal(pa.Ares.shape)
    with nc.Tape() as tape:
        loss = orthogonal_loss(pa)
    g = nc.backward(tape, loss)[pa.Ares]
    fd = finite_difference(lambda: orthogonal_loss(pa).item(), [pa.Ares.data])[0]
    assert rel_err(g, fd) < 1e-3
    np.testing.assert_allclose(g, 2 * pa.Ares.data @ pa.Ap.data.T @ pa.Ap.data, rtol=1e-10)


def test_merged_gradient_only_reaches_residual(rng):
    pa = partition_adapter(_adapter(rng), 3)
    with nc.Tape() as tape:
        loss = nc.tsum(nc.square(merged(pa)))
    grads = nc.backward(tape, loss)
    assert set(grads) == {pa.Bres, pa.Ares}


def test_full_rank_principal_has_nothing_to_train(rng):
    pa = partition_adapter(_adapter(rng), 6)
    assert pa.params() == []
    assert not singular_value_loss(pa).requires_grad
    assert orthogonal_loss(pa).item() == 0.0


def test_total_loss_weights():
    L = nc.constant(1.0)
    out, b = total_loss(L, [nc.constant(2.0)], [nc.constant(4.0)], 1.0, 0.5)
    assert out.item() == 5.0 and b.total == 5.0
    out, b = total_loss(L, [nc.constant(2.0)], [nc.constant(4.0)], 0.0, 0.0)
    assert out.item() == 1.0 and (b.Ls, b.Lo) == (2.0, 4.0)
