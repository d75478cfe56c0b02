import numpy as np
import pytest

from armor.loss import (block_losses, core_grad_blocks, gradients, group_grad_l1, group_grad_l2,
                        group_norms, proxy_loss)
from armor.oracle import oracle_fd_gradient
from armor.selfcheck import random_problem, random_state
from armor.tensor import BlockDiagonal, ContractError, FactorizationState, reconstruct


def _exact_state(rng):
    st = random_state(rng, 8, 8, 4)
    return st, reconstruct(st)


def test_zero_residual_loss_and_gradients(rng):
    st, w_bar = _exact_state(rng)
    d = rng.uniform(0.1, 2.0, 8)
    assert proxy_loss(st, w_bar, d) == pytest.approx(0.0, abs=1e-24)
    assert np.allclose(block_losses(st, w_bar, d), 0.0, atol=1e-24)
    g = gradients(st, w_bar, d)
    for arr in (g.grad_a.blocks, g.grad_b.blocks, g.grad_w):
        assert np.max(np.abs(arr)) < 1e-12


def test_zero_core_gives_row_count(rng):
    w_bar, _ = random_problem(rng, 8, 8)
    st = FactorizationState.identity(np.zeros((8, 8)), np.tile([True, True, False, False], (8, 2)), 4)
    assert proxy_loss(st, w_bar, np.ones(8)) == pytest.approx(8.0, rel=1e-12)


def test_hand_instance():
    w_bar = np.eye(4)
    vals = np.zeros((4, 4))
    vals[1, 1] = 1.0
    mask = np.tile([True, True, False, False], (4, 1))
    mask[2:] = [False, False, True, True]
    vals[2, 2] = vals[3, 3] = 1.0
    st = FactorizationState.identity(vals, mask, 4)
    # only entry (0, 0) differs, weighted by d_0
    assert proxy_loss(st, w_bar, [2.0, 3.0, 1.0, 1.0]) == 2.0


def test_block_losses(instance, rng):
    st, w_bar, d = instance
    bl = block_losses(st, w_bar, d)
    assert bl.shape == (2, 2)
    assert bl.sum() == pytest.approx(proxy_loss(st, w_bar, d), rel=1e-12)
    single = random_state(rng, 8, 8, 8)
    assert block_losses(single, w_bar, d).shape == (1, 1)
    assert block_losses(single, w_bar, d)[0, 0] == pytest.approx(proxy_loss(single, w_bar, d), rel=1e-14)


def test_identity_full_mask_grad_w(rng):
    # a 2:4 mask cannot be full, so check the kept coordinates of two complementary masks
    w_bar, d = random_problem(rng, 4, 8)
    vals = rng.standard_normal((4, 8))
    for pattern in ([True, True, False, False], [False, False, True, True]):
        mask = np.tile(pattern, (4, 2))
        st = FactorizationState.identity(vals, mask, 4)
        g = gradients(st, w_bar, d).grad_w
        expected = np.where(mask, 2 * d[None, :] * (vals - w_bar), 0.0)
        np.testing.assert_allclose(g, expected, rtol=1e-12, atol=1e-14)


def test_gradients_match_fd(instance):
    st, w_bar, d = instance
    g = gradients(st, w_bar, d)
    o = oracle_fd_gradient(st, w_bar, d)
    np.testing.assert_allclose(g.grad_a.blocks, o.grad_a.blocks, rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(g.grad_b.blocks, o.grad_b.blocks, rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(g.grad_w, o.grad_w, rtol=1e-5, atol=1e-9)
    assert np.all(g.grad_w[~st.core.mask] == 0.0)
    assert np.all(o.grad_w[~st.core.mask] == 0.0)


def test_unmasked_core_grad_matches_fd(instance):
    st, w_bar, d = instance
    cg = core_grad_blocks(st, w_bar, d).transpose(0, 2, 1, 3).reshape(8, 8)
    # Moving the kept part of the core into the target leaves a state whose
    # free coordinates are exactly the masked-out ones.
    shifted_target = w_bar - reconstruct(st)
    probe = st.replace(mask=~st.core.mask, values=np.zeros((8, 8)))
    o = oracle_fd_gradient(probe, shifted_target, d)
    np.testing.assert_allclose(np.where(~st.core.mask, cg, 0.0), o.grad_w, rtol=1e-5, atol=1e-9)


def test_group_grad_identity_block():
    w_bar = np.arange(16, dtype=float).reshape(4, 4) / 10
    st = FactorizationState.identity(np.zeros((4, 4)), np.tile([True, True, False, False], (4, 1)), 4)
    res = -w_bar
    l1 = group_grad_l1(st, w_bar, np.ones(4), 0, 0)
    np.testing.assert_allclose(l1, 2 * np.abs(res).sum(axis=1, keepdims=True))
    l2 = group_grad_l2(st, w_bar, np.ones(4), 0, 0)
    np.testing.assert_allclose(l2, 2 * np.linalg.norm(res, axis=1, keepdims=True))


def test_group_norms_shape(rng):
    g = rng.standard_normal((2, 3, 8, 8))
    assert group_norms(g, 1).shape == (2, 3, 8, 2)
    np.testing.assert_allclose(group_norms(g, 2)[0, 0, 0, 1], np.linalg.norm(g[0, 0, 0, 4:]))


def test_shape_mismatch(instance):
    st, w_bar, d = instance
    with pytest.raises(ContractError):
        proxy_loss(st, w_bar[:4], d)
    with pytest.raises(ContractError):
        proxy_loss(st, w_bar, d[:4])
