"""Dense, block-diagonal and 2:4 sparse-core containers.

Everything is float64. Block-diagonal matrices keep only their blocks as an
``(n_blocks, block, block)`` array; dense views exist for tests and oracles.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an argument violates a documented shape/value contract."""


class OverheadWarning(UserWarning):
    """Wrapper parameters exceed the dense layer they wrap."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ContractError(f"{name} must be a non-empty 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains NaN or Inf")
    return arr


def check_calib(d, n: int | None = None) -> np.ndarray:
    """Validate calibration statistics ``d = diag(X X^T)``."""
    arr = np.asarray(d, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError(f"calibration stats must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise ContractError("calibration stats must be finite and non-negative")
    if n is not None and arr.size != n:
        raise ContractError(f"calibration stats have length {arr.size}, expected {n}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


def to_blocks(x: np.ndarray, block: int) -> np.ndarray:
    """``(rows, cols)`` -> ``(rows/block, cols/block, block, block)`` (copy)."""
    r, c = x.shape
    return x.reshape(r // block, block, c // block, block).transpose(0, 2, 1, 3).copy()


def from_blocks(xb: np.ndarray) -> np.ndarray:
    nbo, nbi, b, _ = xb.shape
    return xb.transpose(0, 2, 1, 3).reshape(nbo * b, nbi * b)


@dataclass(frozen=True)
class BlockDiagonal:
    blocks: np.ndarray

    def __post_init__(self):
        blocks = np.asarray(self.blocks, dtype=np.float64)
        if blocks.ndim != 3 or blocks.shape[1] != blocks.shape[2] or blocks.shape[0] == 0:
            raise ContractError(f"blocks must have shape (n, b, b), got {blocks.shape}")
        if not np.all(np.isfinite(blocks)):
            raise ContractError("block-diagonal matrix contains NaN or Inf")
        object.__setattr__(self, "blocks", _frozen(blocks))

    @classmethod
    def identity(cls, dim: int, block_size: int) -> "BlockDiagonal":
        if block_size <= 0 or dim % block_size:
            raise ContractError(f"block size {block_size} does not divide {dim}")
        eye = np.broadcast_to(np.eye(block_size), (dim // block_size, block_size, block_size))
        return cls(eye)

    @property
    def block_size(self) -> int:
        return self.blocks.shape[1]

    @property
    def n_blocks(self) -> int:
        return self.blocks.shape[0]

    @property
    def dim(self) -> int:
        return self.n_blocks * self.block_size

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.dim, self.dim))
        b = self.block_size
        for k, blk in enumerate(self.blocks):
            out[k * b:(k + 1) * b, k * b:(k + 1) * b] = blk
        return out


@dataclass(frozen=True)
class SparseCore24:
    """Dense values ``W'`` with a 2-in-4 mask ``M`` (one byte per entry)."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        values = as_matrix(self.values, "core values")
        mask = np.asarray(self.mask)
        if mask.shape != values.shape:
            raise ContractError(f"mask shape {mask.shape} != values shape {values.shape}")
        if mask.dtype != bool:
            if not np.all((mask == 0) | (mask == 1)):
                raise ContractError("mask entries must be 0 or 1")
            mask = mask.astype(bool)
        check_mask24(mask)
        object.__setattr__(self, "values", _frozen(values))
        mask = mask.copy()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def masked(self) -> np.ndarray:
        return np.where(self.mask, self.values, 0.0)


def check_mask24(mask: np.ndarray) -> None:
    rows, cols = mask.shape
    if cols % 4:
        raise ContractError(f"2:4 core needs a column count divisible by 4, got {cols}")
    counts = mask.reshape(rows, cols // 4, 4).sum(axis=-1)
    bad = np.argwhere(counts != 2)
    if bad.size:
        i, k = bad[0]
        raise ContractError(f"group (row {i}, group {k}) keeps {counts[i, k]} entries, expected 2")


@dataclass(frozen=True)
class FactorizationState:
    """The tuple ``(A, B, W', M)``; reconstructs to ``A (W' * M) B``."""

    a: BlockDiagonal
    b: BlockDiagonal
    core: SparseCore24

    def __post_init__(self):
        d_out, d_in = self.core.shape
        if self.a.dim != d_out or self.b.dim != d_in:
            raise ContractError(
                f"wrapper dims ({self.a.dim}, {self.b.dim}) do not match core {self.core.shape}")
        if self.a.block_size != self.b.block_size:
            raise ContractError("A and B must share a block size")

    @property
    def block_size(self) -> int:
        return self.a.block_size

    @property
    def shape(self) -> tuple[int, int]:
        return self.core.shape

    @classmethod
    def identity(cls, values, mask, block_size: int) -> "FactorizationState":
        core = SparseCore24(values, mask)
        d_out, d_in = core.shape
        return cls(BlockDiagonal.identity(d_out, block_size),
                   BlockDiagonal.identity(d_in, block_size), core)

    def replace(self, a=None, b=None, values=None, mask=None) -> "FactorizationState":
        a = self.a if a is None else (a if isinstance(a, BlockDiagonal) else BlockDiagonal(a))
        b = self.b if b is None else (b if isinstance(b, BlockDiagonal) else BlockDiagonal(b))
        if values is None and mask is None:
            core = self.core
        else:
            core = SparseCore24(self.core.values if values is None else values,
                                self.core.mask if mask is None else mask)
        return FactorizationState(a, b, core)


def weighted_frobenius_sq(residual, d) -> float:
    """``sum_ij residual_ij**2 * d_j``."""
    residual = np.asarray(residual, dtype=np.float64)
    d = check_calib(d)
    if residual.ndim != 2 or residual.shape[1] != d.size:
        raise ContractError(f"residual shape {residual.shape} incompatible with {d.size} weights")
    return float(np.sum(residual * residual * d))


def reconstruct_blocks(state: FactorizationState) -> np.ndarray:
    b = state.block_size
    core = to_blocks(state.core.masked(), b)
    return state.a.blocks[:, None] @ core @ state.b.blocks[None, :]


def reconstruct(state: FactorizationState) -> np.ndarray:
    """``A (W' * M) B`` computed block by block, O(d_out d_in block)."""
    return from_blocks(reconstruct_blocks(state))


def apply(state: FactorizationState, x) -> np.ndarray:
    """Evaluate ``A((W' * M)(B x))`` for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = x[None] if single else x
    d_out, d_in = state.shape
    if xs.ndim != 2 or xs.shape[1] != d_in:
        raise ContractError(f"input length {xs.shape[-1]} != d_in {d_in}")
    b = state.block_size
    n = xs.shape[0]
    z = np.einsum("jcd,njd->njc", state.b.blocks, xs.reshape(n, d_in // b, b)).reshape(n, d_in)
    y = z @ state.core.masked().T
    out = np.einsum("iab,nib->nia", state.a.blocks, y.reshape(n, d_out // b, b)).reshape(n, d_out)
    return out[0] if single else out


def overhead_ratio(d_out: int, d_in: int, d_block: int) -> float:
    """Wrapper parameters over dense parameters for a single layer."""
    if d_block <= 0 or d_out % d_block or d_in % d_block:
        raise ContractError(f"block size {d_block} must divide both {d_out} and {d_in}")
    ratio = (d_out + d_in) * d_block / (d_out * d_in)
    if ratio > 1.0:
        warnings.warn(f"wrappers ({ratio:.3f}x) exceed the layer size", OverheadWarning, stacklevel=2)
    return ratio


def aggregate_overhead(shapes: Iterable[Sequence[int]], d_block: int) -> float:
    """Total wrapper parameters over total dense parameters for a list of layers."""
    wrap = dense = 0
    for d_out, d_in in shapes:
        if d_block <= 0 or d_out % d_block or d_in % d_block:
            raise ContractError(f"block size {d_block} must divide both {d_out} and {d_in}")
        wrap += (d_out + d_in) * d_block
        dense += d_out * d_in
    if dense == 0:
        raise ContractError("no layers given")
    return wrap / dense


# Per-transformer-layer linear shapes as (d_out, d_in).
LLAMA2_7B = [(4096, 4096)] * 4 + [(11008, 4096)] * 2 + [(4096, 11008)]
LLAMA2_13B = [(5120, 5120)] * 4 + [(13824, 5120)] * 2 + [(5120, 13824)]
LLAMA2_70B = ([(8192, 8192)] * 2 + [(1024, 8192)] * 2
              + [(28672, 8192)] * 2 + [(8192, 28672)])
