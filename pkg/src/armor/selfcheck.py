"""Oracle battery: every fast path against its slow reference."""

from __future__ import annotations

import numpy as np

from . import continuous, oracle
from .driver import OptimizerConfig, init_scores, optimize_normalized, top2_mask
from .loss import block_losses, gradients, proxy_loss
from .normalize import normalize
from .sparse import (HEURISTICS, GroupSolveProblem, SelectionConfig, sweep_candidates,
                     sweep_group)
from .tensor import BlockDiagonal, FactorizationState, SparseCore24, apply, reconstruct


def random_state(rng: np.random.Generator, d_out: int, d_in: int, block: int,
                 spread: float = 0.3) -> FactorizationState:
    """Wrappers near identity, random core values and a random 2:4 mask."""
    a = np.eye(block) + spread * rng.standard_normal((d_out // block, block, block))
    b = np.eye(block) + spread * rng.standard_normal((d_in // block, block, block))
    mask = top2_mask(rng.random((d_out, d_in)))
    core = SparseCore24(rng.standard_normal((d_out, d_in)) / np.sqrt(d_in), mask)
    return FactorizationState(BlockDiagonal(a), BlockDiagonal(b), core)


def random_problem(rng: np.random.Generator, d_out: int, d_in: int):
    w = rng.standard_normal((d_out, d_in))
    d = rng.uniform(0.05, 3.0, d_in)
    return normalize(w).w_bar, d


def random_group_problem(rng: np.random.Generator, block: int):
    return GroupSolveProblem(rng.standard_normal((block, block)), rng.standard_normal(block),
                             rng.standard_normal((4, block)), rng.uniform(0.05, 3.0, block))


def check_mask_sweep(rng, n: int = 200, tol: float = 1e-8):
    worst_rel, argmin_ok = 0.0, True
    for t in range(n):
        p = random_group_problem(rng, (4, 8, 16)[t % 3])
        fast = sweep_candidates(p)
        ref = oracle.oracle_group_solve(p)
        base = float(np.sum(p.delta_w ** 2 * p.weights[None, :]))
        for c, (_, loss) in zip(fast, ref):
            red_ref = base - loss
            worst_rel = max(worst_rel, abs(c.loss_star - red_ref) / (1.0 + abs(red_ref)))
        losses = np.array([l for _, l in ref])
        best = sweep_group(p)
        if losses[best.mask] > losses.min() + tol * (1.0 + abs(losses.min())):
            argmin_ok = False
    return oracle.OracleReport("mask sweep vs least squares", 0.0, worst_rel, worst_rel,
                               worst_rel, tol, worst_rel <= tol and argmin_ok)


def check_gradients(rng, n: int = 5, tol: float = 1e-5):
    worst = 0.0
    for t in range(n):
        block = (4, 8)[t % 2]
        size = block * (1 + t % 2)
        st = random_state(rng, size, size, block)
        w_bar, d = random_problem(rng, size, size)
        g = gradients(st, w_bar, d)
        o = oracle.oracle_fd_gradient(st, w_bar, d, 1e-6)
        for x, y in ((g.grad_a.blocks, o.grad_a.blocks), (g.grad_b.blocks, o.grad_b.blocks),
                     (g.grad_w, o.grad_w)):
            big = np.abs(y) > 1e-8
            if big.any():
                worst = max(worst, float(np.max(np.abs(x - y)[big] / np.abs(y)[big])))
    return oracle.OracleReport("gradients vs finite differences", 0.0, worst, worst, worst, tol,
                               worst <= tol)


def check_descent(rng, n: int = 20, tol: float = 1e-9):
    worst = 0.0
    for t in range(n):
        st = random_state(rng, 16, 16, (4, 8)[t % 2])
        w_bar, d = random_problem(rng, 16, 16)
        base = proxy_loss(st, w_bar, d)
        for step in (continuous.gd_step_a, continuous.gd_step_b, continuous.gd_step_w):
            new = proxy_loss(step(st, w_bar, d), w_bar, d)
            worst = max(worst, (new - base) / (1.0 + abs(base)))
    return oracle.OracleReport("single-parameter descent at 1/beta", 0.0, worst, max(worst, 0.0),
                               max(worst, 0.0), tol, worst <= tol)


def check_init_exhaustive(rng, n: int = 20):
    """Data-weighted init mask against brute force over all masks (<= 6 groups)."""
    worst = 0.0
    for t in range(n):
        rows, cols = ((1, 4), (2, 4), (3, 4), (1, 8), (2, 8), (1, 12), (6, 4), (3, 8))[t % 8]
        w_bar = rng.standard_normal((rows, cols))
        d = rng.uniform(0.05, 3.0, cols)
        mask, _, loss = oracle.oracle_exhaustive_mask(w_bar, d)
        m = top2_mask(init_scores(w_bar, d, "data-weighted"))
        got = float(np.sum(np.where(m, 0.0, w_bar) ** 2 * d))
        worst = max(worst, abs(got - loss), 0.0 if np.array_equal(m, mask) else np.inf)
    return oracle.OracleReport("init mask vs exhaustive optimum", 0.0, worst, worst, worst, 1e-9,
                               worst <= 1e-9)


def check_structure(rng, n: int = 10):
    worst_rec = worst_app = worst_blk = 0.0
    for t in range(n):
        block = (4, 8)[t % 2]
        st = random_state(rng, 16, 32, block)
        w_bar, d = random_problem(rng, 16, 32)
        dense = st.a.to_dense() @ st.core.masked() @ st.b.to_dense()
        rec = reconstruct(st)
        worst_rec = max(worst_rec, np.max(np.abs(rec - dense)) / np.max(np.abs(dense)))
        x = rng.standard_normal((16, 32))
        y = apply(st, x)
        ref = x @ rec.T
        worst_app = max(worst_app, np.max(np.abs(y - ref)) / np.max(np.abs(ref)))
        total = oracle.dense_loss(st.a.to_dense(), st.b.to_dense(), st.core.values,
                                  st.core.mask, w_bar, d)
        worst_blk = max(worst_blk, abs(block_losses(st, w_bar, d).sum() - total) / total)
    return [oracle.OracleReport("reconstruct vs dense product", 0, worst_rec, worst_rec, worst_rec,
                                1e-12, worst_rec <= 1e-12),
            oracle.OracleReport("apply vs reconstruct", 0, worst_app, worst_app, worst_app,
                                1e-10, worst_app <= 1e-10),
            oracle.OracleReport("block losses vs dense loss", 0, worst_blk, worst_blk, worst_blk,
                                1e-12, worst_blk <= 1e-12)]


def heuristic_report(seeds: int = 10, instances: int = 5, iters: int = 40, size: int = 16,
                     block: int = 8) -> dict[str, float]:
    """Median final loss per selection heuristic (informational only)."""
    out = {}
    problems = [random_problem(np.random.default_rng(1000 + k), size, size) for k in range(instances)]
    for h in HEURISTICS:
        finals = []
        for w_bar, d in problems:
            for s in range(seeds):
                cfg = OptimizerConfig(block_size=block, n_iters=iters,
                                      selection=SelectionConfig(h, seed=s))
                _, trace = optimize_normalized(w_bar, d, cfg)
                finals.append(trace.final / trace.initial)
        out[h] = float(np.median(finals))
    return out


def run(seed: int = 0, quick: bool = False) -> list[oracle.OracleReport]:
    rng = np.random.default_rng(seed)
    reports = [check_mask_sweep(rng, 60 if quick else 200),
               check_gradients(rng, 2 if quick else 5),
               check_descent(rng, 10 if quick else 100),
               check_init_exhaustive(rng),
               *check_structure(rng)]
    return reports

