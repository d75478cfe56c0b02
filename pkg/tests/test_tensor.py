import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from armor.tensor import (LLAMA2_7B, BlockDiagonal, ContractError, FactorizationState,
                          OverheadWarning, SparseCore24, aggregate_overhead, apply, from_blocks,
                          overhead_ratio, reconstruct, to_blocks, weighted_frobenius_sq)
from armor.selfcheck import random_state


def test_weighted_frobenius_hand_value():
    assert weighted_frobenius_sq([[1.0, 2.0]], [4.0, 9.0]) == 40.0


def test_weighted_frobenius_zero_and_unit_weights(rng):
    assert weighted_frobenius_sq(np.zeros((3, 4)), rng.random(4)) == 0.0
    r = rng.standard_normal((5, 4))
    assert np.isclose(weighted_frobenius_sq(r, np.ones(4)), np.sum(r * r), rtol=1e-14)


def test_weighted_frobenius_rejects_bad_calib():
    with pytest.raises(ContractError):
        weighted_frobenius_sq([[1.0, 2.0]], [1.0, -1.0])
    with pytest.raises(ContractError):
        weighted_frobenius_sq([[1.0, 2.0]], [1.0, 2.0, 3.0])


def test_block_round_trip(rng):
    x = rng.standard_normal((8, 12))
    blocks = to_blocks(x, 4)
    assert blocks.shape == (2, 3, 4, 4)
    np.testing.assert_array_equal(from_blocks(blocks), x)


def test_block_diagonal_identity_and_dense():
    bd = BlockDiagonal.identity(8, 4)
    assert bd.n_blocks == 2 and bd.block_size == 4 and bd.dim == 8
    np.testing.assert_array_equal(bd.to_dense(), np.eye(8))


def test_mask_validation():
    with pytest.raises(ContractError):
        SparseCore24(np.ones((1, 4)), np.array([[True, True, True, False]]))
    with pytest.raises(ContractError):
        SparseCore24(np.ones((1, 3)), np.array([[True, True, False]]))


def test_reconstruct_identity_wrappers(rng):
    mask = np.tile([True, False, True, False], (4, 2))
    vals = rng.standard_normal((4, 8))
    state = FactorizationState.identity(vals, mask, 4)
    np.testing.assert_array_equal(reconstruct(state), vals * mask)


def test_reconstruct_zero_core(rng):
    st = random_state(rng, 8, 8, 4)
    st = st.replace(values=np.zeros((8, 8)))
    np.testing.assert_array_equal(reconstruct(st), np.zeros((8, 8)))


def test_reconstruct_matches_dense_product(rng):
    st = random_state(rng, 8, 8, 4)
    dense = st.a.to_dense() @ st.core.masked() @ st.b.to_dense()
    np.testing.assert_allclose(reconstruct(st), dense, rtol=1e-12, atol=1e-13)


def test_apply_matches_reconstruct(rng):
    st = random_state(rng, 8, 16, 4)
    x = rng.standard_normal((16, 16))
    np.testing.assert_allclose(apply(st, x), x @ reconstruct(st).T, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(apply(st, x[0]), reconstruct(st) @ x[0], rtol=1e-10, atol=1e-12)
    assert np.all(apply(st, np.zeros(16)) == 0.0)


def test_apply_identity_keeps_kept_coordinates(rng):
    mask = np.tile([True, True, False, False], (4, 1))
    state = FactorizationState.identity(np.eye(4), mask, 4)
    x = rng.standard_normal(4)
    y = apply(state, x)
    np.testing.assert_array_equal(y[:2], x[:2])


def test_apply_rejects_wrong_width(rng):
    st = random_state(rng, 8, 8, 4)
    with pytest.raises(ContractError):
        apply(st, np.zeros(7))


def test_overhead_values():
    assert overhead_ratio(4096, 4096, 128) == 0.0625
    assert round(aggregate_overhead(LLAMA2_7B, 128), 4) == 0.0494


def test_overhead_warns_when_wrappers_dominate():
    with pytest.warns(OverheadWarning):
        assert overhead_ratio(4, 4, 4) == 2.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        overhead_ratio(128, 128, 4)


def test_overhead_rejects_non_dividing_block():
    with pytest.raises(ContractError):
        overhead_ratio(100, 128, 128)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([4, 8]), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_reconstruct_property(block, nbo, nbi, seed):
    st_ = random_state(np.random.default_rng(seed), block * nbo, block * nbi, block)
    dense = st_.a.to_dense() @ st_.core.masked() @ st_.b.to_dense()
    np.testing.assert_allclose(reconstruct(st_), dense, rtol=1e-12, atol=1e-12)
