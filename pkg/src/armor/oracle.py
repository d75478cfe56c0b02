"""Slow, definition-level reference computations.

Nothing here reuses the fast paths in ``loss``, ``continuous`` or
``sparse``; only the container types from ``tensor`` are shared. Dense
wrappers are materialized and every quantity is evaluated from the loss
definition.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .loss import GradientBundle
from .tensor import BlockDiagonal, ContractError, FactorizationState


@dataclass(frozen=True)
class OracleReport:
    name: str
    reference: float
    fast: float
    abs_err: float
    rel_err: float
    tol: float
    passed: bool

    @classmethod
    def compare(cls, name: str, reference, fast, tol: float, scale: float | None = None):
        reference = np.asarray(reference, dtype=np.float64)
        fast = np.asarray(fast, dtype=np.float64)
        abs_err = float(np.max(np.abs(reference - fast))) if reference.size else 0.0
        denom = float(np.max(np.abs(reference))) if scale is None else scale
        rel = abs_err / denom if denom > 0 else abs_err
        return cls(name, float(np.max(np.abs(reference), initial=0.0)),
                   float(np.max(np.abs(fast), initial=0.0)), abs_err, rel, tol, rel <= tol)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.name}: abs={self.abs_err:.3e} rel={self.rel_err:.3e} "
                f"tol={self.tol:.1e}")


def dense_loss(a: np.ndarray, b: np.ndarray, values: np.ndarray, mask: np.ndarray,
               w_bar: np.ndarray, d: np.ndarray) -> float:
    """Loss straight from its definition with dense wrappers."""
    w_hat = a @ (values * mask) @ b
    total = 0.0
    for i in range(w_bar.shape[0]):
        for j in range(w_bar.shape[1]):
            total += (w_bar[i, j] - w_hat[i, j]) ** 2 * d[j]
    return float(total)


def oracle_group_solve(problem) -> list[tuple[np.ndarray, float]]:
    """``(w, full block loss)`` for each mask, via a generic least-squares solve.

    Masks come in ``itertools.combinations(range(4), 2)`` order.
    """
    delta = np.asarray(problem.delta_w, dtype=np.float64)
    a = np.asarray(problem.a, dtype=np.float64)
    rows = np.asarray(problem.group_rows, dtype=np.float64)
    sd = np.sqrt(np.asarray(problem.weights, dtype=np.float64))
    target = (delta * sd[None, :]).ravel()
    out = []
    for i1, i2 in itertools.combinations(range(4), 2):
        design = np.stack([(np.outer(a, rows[i1]) * sd[None, :]).ravel(),
                           (np.outer(a, rows[i2]) * sd[None, :]).ravel()], axis=1)
        w, *_ = np.linalg.lstsq(design, target, rcond=None)
        resid = target - design @ w
        out.append((w, float(resid @ resid)))
    return out


def oracle_exhaustive_mask(w_bar, d, d_block: int | None = None, max_groups: int = 6):
    """Global best 2:4 mask for identity wrappers by trying every combination.

    With identity wrappers the best kept values are the targets themselves,
    so each combination costs the weighted energy of the pruned entries.
    Returns ``(mask, values, loss)``.
    """
    w_bar = np.asarray(w_bar, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    rows, cols = w_bar.shape
    if cols % 4:
        raise ContractError("column count must be divisible by 4")
    groups = [(r, k) for r in range(rows) for k in range(cols // 4)]
    if len(groups) > max_groups:
        raise ContractError(f"{len(groups)} groups exceed the exhaustive limit of {max_groups}")
    pairs = list(itertools.combinations(range(4), 2))
    best_loss, best_combo = np.inf, None
    for combo in itertools.product(range(len(pairs)), repeat=len(groups)):
        loss = 0.0
        for (r, k), m in zip(groups, combo):
            for c in range(4):
                if c not in pairs[m]:
                    loss += w_bar[r, 4 * k + c] ** 2 * d[4 * k + c]
        if loss < best_loss:
            best_loss, best_combo = loss, combo
    mask = np.zeros((rows, cols), dtype=bool)
    for (r, k), m in zip(groups, best_combo):
        for c in pairs[m]:
            mask[r, 4 * k + c] = True
    return mask, np.where(mask, w_bar, 0.0), float(best_loss)


def _ld_loss_diff(a, b, c, w_bar, d, a2, b2, c2) -> np.longdouble:
    """Loss at the second point minus loss at the first, in extended precision."""
    # (t - y)^2 - (t - x)^2 == (x - y)(2t - x - y)
    x = a @ c @ b
    y = a2 @ c2 @ b2
    return np.sum(d[None, :] * (x - y) * (2 * w_bar - x - y))


def oracle_fd_gradient(state: FactorizationState, w_bar, d, step: float = 1e-6):
    """Central differences of the loss over A blocks, B blocks and W'.

    The loss difference is formed in extended precision so the estimate is
    limited by ``step`` rather than float64 cancellation.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    ld = np.longdouble
    a = state.a.to_dense().astype(ld)
    b = state.b.to_dense().astype(ld)
    mask = np.asarray(state.core.mask).astype(ld)
    vals = np.asarray(state.core.values).astype(ld)
    w_bar = np.asarray(w_bar, dtype=np.float64).astype(ld)
    d = np.asarray(d, dtype=np.float64).astype(ld)
    h = ld(step)
    bs = state.block_size

    def fd(which: str, idx) -> float:
        arrs = {"a": a, "b": b, "w": vals}
        plus = dict(arrs)
        minus = dict(arrs)
        plus[which] = arrs[which].copy()
        minus[which] = arrs[which].copy()
        plus[which][idx] += h
        minus[which][idx] -= h
        diff = _ld_loss_diff(minus["a"], minus["b"], minus["w"] * mask, w_bar, d,
                             plus["a"], plus["b"], plus["w"] * mask)
        return float(diff / (2 * h))

    ga = np.zeros(state.a.blocks.shape)
    for k in range(state.a.n_blocks):
        for p in range(bs):
            for q in range(bs):
                ga[k, p, q] = fd("a", (k * bs + p, k * bs + q))
    gb = np.zeros(state.b.blocks.shape)
    for k in range(state.b.n_blocks):
        for p in range(bs):
            for q in range(bs):
                gb[k, p, q] = fd("b", (k * bs + p, k * bs + q))
    gw = np.zeros(state.shape)
    for i in range(state.shape[0]):
        for j in range(state.shape[1]):
            gw[i, j] = fd("w", (i, j))
    return GradientBundle(BlockDiagonal(ga), BlockDiagonal(gb), gw)
