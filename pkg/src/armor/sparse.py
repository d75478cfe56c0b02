"""Greedy update of the 2:4 sparse core.

Each ``(i, j)`` block of the core is an independent subproblem. Per block one
group of four entries is drawn (weighted by the block-loss gradient), the
other entries are frozen, and all six 2-of-4 masks are tried with their
closed-form weighted least-squares weights. The best mask and weights are
written back, so no block loss can go up.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .loss import core_grad_blocks, group_norms, residual_blocks, _check
from .tensor import ContractError, FactorizationState, to_blocks

# Fixed enumeration of the six 2-of-4 masks; ties go to the lowest index.
MASKS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
_MASK_IDX = np.array(MASKS)
_MASK_BITS = np.zeros((6, 4), dtype=bool)
for _m, (_i1, _i2) in enumerate(MASKS):
    _MASK_BITS[_m, [_i1, _i2]] = True
_CODE_TO_MASK = np.full(16, -1, dtype=np.int64)
_CODE_TO_MASK[_MASK_BITS @ (1 << np.arange(4))] = np.arange(6)

PINV_RTOL = 1e-12

HEURISTICS = ("uniform", "l1-greedy", "l2-random", "l1-random")
_ALIASES = {"uniform-random": "uniform", "random": "uniform"}


class NoOpGroup(Exception):
    """The group's column of ``A`` is zero, so no mask choice changes the loss."""


@dataclass(frozen=True)
class SelectionConfig:
    heuristic: str = "l1-random"
    seed: int = 0
    groups_per_block: int = 1

    def __post_init__(self):
        h = _ALIASES.get(self.heuristic, self.heuristic)
        if h not in HEURISTICS:
            raise ContractError(f"unknown selection heuristic {self.heuristic!r}")
        if self.groups_per_block < 1:
            raise ContractError("groups_per_block must be >= 1")
        object.__setattr__(self, "heuristic", h)


@dataclass(frozen=True)
class MaskCandidate:
    mask: int  # index into MASKS
    w_star: np.ndarray
    loss_star: float  # loss reduction relative to the all-zero group

    @property
    def kept_indices(self) -> tuple[int, int]:
        return MASKS[self.mask]

    @property
    def bits(self) -> np.ndarray:
        return _MASK_BITS[self.mask].copy()


@dataclass(frozen=True)
class GroupSolveProblem:
    """One group of one block with every other core entry frozen.

    ``delta_w`` is the block target minus the frozen part of the block,
    ``a`` the column of ``A^(i)`` for the group's row, ``group_rows`` the four
    rows of ``B^(j)`` that the group's columns touch and ``weights`` the
    block's calibration weights.
    """

    delta_w: np.ndarray
    a: np.ndarray
    group_rows: np.ndarray
    weights: np.ndarray


def mask_index(bits) -> int:
    bits = np.asarray(bits, dtype=bool)
    code = int(bits @ (1 << np.arange(4)))
    m = int(_CODE_TO_MASK[code])
    if m < 0:
        raise ContractError(f"{bits.astype(int).tolist()} is not a 2-of-4 mask")
    return m


def selection_probs(grad_norms, heuristic: str):
    """Group selection distribution, or the chosen ``(row, group)`` for greedy."""
    norms = np.asarray(grad_norms, dtype=np.float64)
    if not np.all(np.isfinite(norms)) or np.any(norms < 0):
        raise ContractError("gradient norms must be finite and non-negative")
    heuristic = SelectionConfig(heuristic).heuristic
    if heuristic == "l1-greedy":
        return np.unravel_index(int(np.argmax(norms)), norms.shape)
    total = norms.sum()
    if heuristic == "uniform" or total == 0.0:
        return np.full(norms.shape, 1.0 / norms.size)
    return norms / total


def _select(norms: np.ndarray, heuristic: str, u: np.ndarray) -> np.ndarray:
    """Flat group index per block from ``(n_blocks, n_groups)`` norms and uniforms."""
    n, g = norms.shape
    if heuristic == "l1-greedy":
        return np.argmax(norms, axis=1)
    if heuristic == "uniform":
        weights = np.ones_like(norms)
    else:
        weights = norms.copy()
        weights[weights.sum(axis=1) == 0.0] = 1.0
    c = np.cumsum(weights, axis=1)
    idx = np.sum(c <= (u * c[:, -1])[:, None], axis=1)
    return np.minimum(idx, g - 1)


def block_uniforms(seed: int, iteration: int, n: int, round: int = 0) -> np.ndarray:
    """Uniforms keyed by ``(seed, iteration, round)``; entry ``k`` belongs to block ``k``.

    Philox is counter based, so each block's draw is fixed by its position in
    row-major block order and never depends on how blocks are scheduled.
    """
    mask64 = (1 << 64) - 1
    key = (seed & mask64) | ((iteration & mask64) << 64)
    bitgen = np.random.Philox(key=key, counter=(round & mask64) << 192)
    return np.random.Generator(bitgen).random(n)


def pinv_solve2(h11, h12, h22, g1, g2):
    """``pinv(H) g`` for symmetric PSD 2x2 ``H``, elementwise over arrays.

    Eigenvalues at or below ``PINV_RTOL * lambda_max`` count as zero; a rank-1
    ``H = lam v v^T`` has pseudo-inverse ``H / lam**2``.
    """
    # work on H / scale so squares of tiny entries do not underflow
    scale = np.maximum(np.maximum(np.abs(h11), np.abs(h22)), np.abs(h12))
    scale = np.where(scale > 0.0, scale, 1.0)
    h11, h12, h22 = h11 / scale, h12 / scale, h22 / scale
    tr = h11 + h22
    disc = np.sqrt((h11 - h22) ** 2 + 4.0 * h12 * h12)
    lmax = 0.5 * (tr + disc)
    det = h11 * h22 - h12 * h12
    pos = lmax > 0.0
    safe = np.where(pos, lmax, 1.0)
    lmin = det / safe
    full = pos & (lmin > PINV_RTOL * lmax)
    inv_det = 1.0 / np.where(full, det, 1.0)
    x1_full = (h22 * g1 - h12 * g2) * inv_det
    x2_full = (h11 * g2 - h12 * g1) * inv_det
    s2 = 1.0 / (safe * safe)
    x1_rank1 = (h11 * g1 + h12 * g2) * s2
    x2_rank1 = (h12 * g1 + h22 * g2) * s2
    x1 = np.where(full, x1_full, np.where(pos, x1_rank1, 0.0)) / scale
    x2 = np.where(full, x2_full, np.where(pos, x2_rank1, 0.0)) / scale
    return x1, x2


def _mask_systems(v, h4):
    """Per-mask right-hand sides ``g`` (..., 6, 2) and solutions ``pinv(H) g``."""
    i1, i2 = _MASK_IDX[:, 0], _MASK_IDX[:, 1]
    g = v[..., _MASK_IDX]
    x1, x2 = pinv_solve2(h4[..., i1, i1], h4[..., i1, i2], h4[..., i2, i2], g[..., 0], g[..., 1])
    return g, np.stack([x1, x2], axis=-1)


def _solve(v: np.ndarray, h4: np.ndarray, a_sq: np.ndarray, incumbent: np.ndarray):
    """Vectorised six-way sweep.

    ``v`` (n, 4) holds ``B_rows D delta_w^T a`` and ``h4`` (n, 4, 4) holds
    ``B_rows D B_rows^T``; the per-mask 2-vectors/2x2 systems are slices.
    Returns chosen mask index, kept weights and the reduction of every mask.
    """
    g, x = _mask_systems(v, h4)
    live = a_sq > 0.0
    inv = np.where(live, 1.0 / np.where(live, a_sq, 1.0), 0.0)
    red = np.sum(g * x, axis=-1) * inv[:, None]
    w = x * inv[:, None, None]
    rows = np.arange(len(v))
    best = np.argmax(red, axis=1)
    keep = red[rows, incumbent] == red[rows, best]
    best = np.where(keep | ~live, incumbent, best)
    w_best = np.where(live[:, None], w[rows, best], 0.0)
    return best, w_best, red


def sweep_candidates(problem: GroupSolveProblem) -> list[MaskCandidate]:
    """Closed-form optimum of every mask for one group."""
    a = np.asarray(problem.a, dtype=np.float64)
    a_sq = float(a @ a)
    if a_sq == 0.0:
        raise NoOpGroup()
    rows = np.asarray(problem.group_rows, dtype=np.float64)
    dw = np.asarray(problem.weights, dtype=np.float64)
    u = np.asarray(problem.delta_w, dtype=np.float64).T @ a
    v = rows @ (dw * u)
    h4 = (rows * dw) @ rows.T
    g, x = _mask_systems(v, h4)
    red = np.sum(g * x, axis=-1) / a_sq
    return [MaskCandidate(m, x[m] / a_sq, float(red[m])) for m in range(6)]


def sweep_group(problem: GroupSolveProblem, incumbent: int | None = None) -> MaskCandidate:
    """Best of the six masks; the incumbent wins exact ties, then the lowest index."""
    cands = sweep_candidates(problem)
    red = np.array([c.loss_star for c in cands])
    best = int(np.argmax(red))
    if incumbent is not None and red[incumbent] == red[best]:
        best = incumbent
    return cands[best]


def group_problem(state: FactorizationState, w_bar, d, block_i: int, block_j: int,
                  row: int, group: int) -> GroupSolveProblem:
    """Build the frozen-remainder problem for one group straight from its definition."""
    w_bar, d = _check(state, w_bar, d)
    b = state.block_size
    rs = slice(block_i * b, (block_i + 1) * b)
    cs = slice(block_j * b, (block_j + 1) * b)
    frozen = state.core.masked()[rs, cs].copy()
    frozen[row, 4 * group:4 * group + 4] = 0.0
    a_blk = state.a.blocks[block_i]
    b_blk = state.b.blocks[block_j]
    delta = w_bar[rs, cs] - a_blk @ frozen @ b_blk
    return GroupSolveProblem(delta, a_blk[:, row].copy(), b_blk[4 * group:4 * group + 4].copy(), d[cs].copy())


def _sweep_chunk(res, a_blocks, b_blocks, core_b, db, bi, bj, r, k, incumbent):
    a = a_blocks[bi, :, r]
    a_sq = np.sum(a * a, axis=1)
    cols = 4 * k[:, None] + np.arange(4)
    rows_b = b_blocks[bj[:, None], cols]  # (n, 4, b)
    cg = core_b[bi[:, None], bj[:, None], r[:, None], cols]  # (n, 4)
    rblk = res[bi, bj]  # (n, b, b)
    u = -(rblk.transpose(0, 2, 1) @ a[..., None])[..., 0]
    u += (rows_b.transpose(0, 2, 1) @ cg[..., None])[..., 0] * a_sq[:, None]
    dw = db[bj]
    v = (rows_b @ (dw * u)[..., None])[..., 0]
    h4 = (rows_b * dw[:, None, :]) @ rows_b.transpose(0, 2, 1)
    return _solve(v, h4, a_sq, incumbent)


def _sparse_round(state, w_bar, d, cfg: SelectionConfig, iteration: int, rnd: int, workers: int):
    b = state.block_size
    nbo, nbi = state.a.n_blocks, state.b.n_blocks
    n = nbo * nbi
    res, db = residual_blocks(state, w_bar, d)
    cgrad = core_grad_blocks(state, w_bar, d, res, db)
    norms = group_norms(cgrad, 2 if cfg.heuristic == "l2-random" else 1).reshape(n, -1)
    u = block_uniforms(cfg.seed, iteration, n, rnd)
    sel = _select(norms, cfg.heuristic, u)
    gpr = b // 4
    r, k = sel // gpr, sel % gpr
    bi, bj = np.divmod(np.arange(n), nbi)

    core_b = to_blocks(state.core.masked(), b)
    mask_b = to_blocks(state.core.mask, b)
    cols = 4 * k[:, None] + np.arange(4)
    incumbent = _CODE_TO_MASK[mask_b[bi[:, None], bj[:, None], r[:, None], cols] @ (1 << np.arange(4))]

    args = (res, state.a.blocks, state.b.blocks, core_b, db)
    bounds = np.linspace(0, n, max(1, min(workers, n)) + 1).astype(int)
    chunks = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def run(sl):
        return _sweep_chunk(*args, bi[sl], bj[sl], r[sl], k[sl], incumbent[sl])

    if len(chunks) == 1:
        outs = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            outs = list(pool.map(run, chunks))
    best = np.concatenate([o[0] for o in outs])
    w = np.concatenate([o[1] for o in outs])

    values = state.core.values.copy()
    mask = state.core.mask.copy()
    grow = bi * b + r
    gcol = bj[:, None] * b + cols
    mask[grow[:, None], gcol] = _MASK_BITS[best]
    new_vals = np.zeros((n, 4))
    new_vals[np.arange(n)[:, None], _MASK_IDX[best]] = w
    values[grow[:, None], gcol] = new_vals
    return state.replace(values=values, mask=mask)


def sparse_core_update(state: FactorizationState, w_bar, d, cfg: SelectionConfig | None = None,
                       iteration: int = 0, workers: int = 1) -> FactorizationState:
    """Update one selected group in every block (``cfg.groups_per_block`` rounds).

    Rounds run one after another, each against the core left by the previous
    round, so every round individually cannot raise the loss.
    """
    cfg = cfg or SelectionConfig()
    w_bar, d = _check(state, w_bar, d)
    for rnd in range(cfg.groups_per_block):
        state = _sparse_round(state, w_bar, d, cfg, iteration, rnd, workers)
    return state
