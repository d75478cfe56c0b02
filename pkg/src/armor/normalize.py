"""Column-then-row L2 normalization of a weight matrix and its inverse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import BlockDiagonal, ContractError, FactorizationState, as_matrix

# Norms below this are treated as exactly zero.
NORM_FLOOR = 1e-300


class DegenerateWeightError(ValueError):
    def __init__(self, kind: str, index: int):
        super().__init__(f"{kind} {index} has zero norm; cannot normalize")
        self.kind = kind
        self.index = index


@dataclass(frozen=True)
class NormalizedWeights:
    """``W_ij = r2_i * w_bar_ij * r1_j``; every row of ``w_bar`` has unit norm."""

    w_bar: np.ndarray
    r1: np.ndarray  # column scales, length d_in
    r2: np.ndarray  # row scales, length d_out

    def restore(self) -> np.ndarray:
        return self.r2[:, None] * self.w_bar * self.r1[None, :]


def normalize(w) -> NormalizedWeights:
    w = as_matrix(w, "weights")
    r1 = np.sqrt(np.sum(w * w, axis=0))
    bad = np.flatnonzero(r1 < NORM_FLOOR)
    if bad.size:
        raise DegenerateWeightError("column", int(bad[0]))
    v = w / r1[None, :]
    r2 = np.sqrt(np.sum(v * v, axis=1))
    bad = np.flatnonzero(r2 < NORM_FLOOR)
    if bad.size:
        raise DegenerateWeightError("row", int(bad[0]))
    return NormalizedWeights(v / r2[:, None], r1, r2)


def denormalize(state: FactorizationState, norm: NormalizedWeights) -> FactorizationState:
    """Undo the normalization by folding the scales into the wrappers."""
    return scale_wrappers(state, norm.r1, norm.r2)


def scale_wrappers(state: FactorizationState, r1, r2) -> FactorizationState:
    """``A <- diag(r2) A`` and ``B <- B diag(r1)``, block by block."""
    r1 = np.asarray(r1, dtype=np.float64)
    r2 = np.asarray(r2, dtype=np.float64)
    d_out, d_in = state.shape
    if r1.shape != (d_in,) or r2.shape != (d_out,):
        raise ContractError(f"scale lengths {r1.shape}, {r2.shape} do not match state {state.shape}")
    b = state.block_size
    a = state.a.blocks * r2.reshape(-1, b, 1)
    bb = state.b.blocks * r1.reshape(-1, 1, b)
    return FactorizationState(BlockDiagonal(a), BlockDiagonal(bb), state.core)
