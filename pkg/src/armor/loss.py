"""Proxy loss, its per-block decomposition and analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (BlockDiagonal, ContractError, FactorizationState, as_matrix, check_calib,
                     from_blocks, reconstruct, reconstruct_blocks, to_blocks,
                     weighted_frobenius_sq)


def _check(state: FactorizationState, w_bar, d) -> tuple[np.ndarray, np.ndarray]:
    w_bar = as_matrix(w_bar, "w_bar")
    if w_bar.shape != state.shape:
        raise ContractError(f"target shape {w_bar.shape} != state shape {state.shape}")
    return w_bar, check_calib(d, w_bar.shape[1])


def proxy_loss(state: FactorizationState, w_bar, d) -> float:
    """``||w_bar - A (W' * M) B||^2`` with column weights ``d``."""
    w_bar, d = _check(state, w_bar, d)
    return weighted_frobenius_sq(w_bar - reconstruct(state), d)


def block_losses(state: FactorizationState, w_bar, d) -> np.ndarray:
    """Loss of every ``(i, j)`` block; sums to :func:`proxy_loss`."""
    w_bar, d = _check(state, w_bar, d)
    b = state.block_size
    res = to_blocks(w_bar, b) - reconstruct_blocks(state)
    db = d.reshape(1, -1, 1, b)
    return np.sum(res * res * db, axis=(2, 3))


def residual_blocks(state: FactorizationState, w_bar, d) -> tuple[np.ndarray, np.ndarray]:
    """Blocked ``W_hat - w_bar`` and the blocked weights ``(n_in_blocks, b)``."""
    w_bar, d = _check(state, w_bar, d)
    b = state.block_size
    return reconstruct_blocks(state) - to_blocks(w_bar, b), d.reshape(-1, b)


@dataclass(frozen=True)
class GradientBundle:
    grad_a: BlockDiagonal
    grad_b: BlockDiagonal
    grad_w: np.ndarray  # zero off the mask


def _core_blocks(state: FactorizationState) -> np.ndarray:
    return to_blocks(state.core.masked(), state.block_size)


def grad_a_blocks(state: FactorizationState, w_bar, d) -> np.ndarray:
    res, db = residual_blocks(state, w_bar, d)
    s = _core_blocks(state) @ state.b.blocks[None, :]
    g = 2.0 * res * db[None, :, None, :]
    return np.sum(g @ s.transpose(0, 1, 3, 2), axis=1)


def grad_b_blocks(state: FactorizationState, w_bar, d) -> np.ndarray:
    res, db = residual_blocks(state, w_bar, d)
    sp = state.a.blocks[:, None] @ _core_blocks(state)
    g = 2.0 * res * db[None, :, None, :]
    return np.sum(sp.transpose(0, 1, 3, 2) @ g, axis=0)


def core_grad_blocks(state: FactorizationState, w_bar, d, res=None, db=None) -> np.ndarray:
    """Gradient of each block loss with respect to the unmasked core block."""
    if res is None:
        res, db = residual_blocks(state, w_bar, d)
    g = 2.0 * res * db[None, :, None, :]
    return state.a.blocks.transpose(0, 2, 1)[:, None] @ g @ state.b.blocks.transpose(0, 2, 1)[None, :]


def grad_w(state: FactorizationState, w_bar, d) -> np.ndarray:
    full = from_blocks(core_grad_blocks(state, w_bar, d))
    return np.where(state.core.mask, full, 0.0)


def gradients(state: FactorizationState, w_bar, d) -> GradientBundle:
    return GradientBundle(BlockDiagonal(grad_a_blocks(state, w_bar, d)),
                          BlockDiagonal(grad_b_blocks(state, w_bar, d)),
                          grad_w(state, w_bar, d))


def group_norms(core_grad: np.ndarray, ord: int = 1) -> np.ndarray:
    """Per-group gradient norms; trailing ``(b, b)`` becomes ``(b, b/4)``."""
    g = core_grad.reshape(*core_grad.shape[:-1], core_grad.shape[-1] // 4, 4)
    if ord == 1:
        return np.sum(np.abs(g), axis=-1)
    if ord == 2:
        return np.sqrt(np.sum(g * g, axis=-1))
    raise ContractError(f"unsupported norm order {ord}")


def group_grad_l1(state: FactorizationState, w_bar, d, block_i: int, block_j: int,
                  ord: int = 1) -> np.ndarray:
    nbo, nbi = state.a.n_blocks, state.b.n_blocks
    if not (0 <= block_i < nbo and 0 <= block_j < nbi):
        raise ContractError(f"block ({block_i}, {block_j}) outside grid {nbo}x{nbi}")
    return group_norms(core_grad_blocks(state, w_bar, d)[block_i, block_j], ord)


def group_grad_l2(state: FactorizationState, w_bar, d, block_i: int, block_j: int) -> np.ndarray:
    return group_grad_l1(state, w_bar, d, block_i, block_j, ord=2)
