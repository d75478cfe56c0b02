"""Continuous update of ``A``, ``B`` and ``W'``.

Two flavours: sequential gradient descent with step sizes ``1/beta`` taken
from per-parameter smoothness bounds (monotone), and a joint Adam step
(no descent guarantee).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .loss import core_grad_blocks, grad_a_blocks, grad_b_blocks, _check
from .tensor import FactorizationState, from_blocks, to_blocks

UNBOUNDED = math.inf


def _eta(beta: float) -> float:
    return UNBOUNDED if beta == 0.0 else 1.0 / beta


@dataclass(frozen=True)
class SmoothnessReport:
    beta_a: float
    beta_b: float
    beta_w: float

    @property
    def eta_a(self) -> float:
        return _eta(self.beta_a)

    @property
    def eta_b(self) -> float:
        return _eta(self.beta_b)

    @property
    def eta_w(self) -> float:
        return _eta(self.beta_w)


def _core(state: FactorizationState) -> np.ndarray:
    return to_blocks(state.core.masked(), state.block_size)


def beta_a(state: FactorizationState, d) -> float:
    b = state.block_size
    s = _core(state) @ state.b.blocks[None, :]
    db = np.asarray(d, dtype=np.float64).reshape(1, -1, 1, b)
    sds = (s * db) @ s.transpose(0, 1, 3, 2)
    return 2.0 * float(np.sum(np.sqrt(np.sum(sds * sds, axis=(2, 3)))))


def beta_b(state: FactorizationState, d) -> float:
    b = state.block_size
    sp = state.a.blocks[:, None] @ _core(state)
    sts = sp.transpose(0, 1, 3, 2) @ sp
    d_norm = np.sqrt(np.sum(np.asarray(d, dtype=np.float64).reshape(-1, b) ** 2, axis=1))
    return 2.0 * float(np.sum(np.sqrt(np.sum(sts * sts, axis=(2, 3))) * d_norm[None, :]))


def beta_w(state: FactorizationState, d) -> float:
    b = state.block_size
    a = state.a.blocks
    ata = a.transpose(0, 2, 1) @ a
    bb = state.b.blocks
    bdb = (bb * np.asarray(d, dtype=np.float64).reshape(-1, 1, b)) @ bb.transpose(0, 2, 1)
    return 2.0 * math.sqrt(float(np.sum(ata * ata))) * math.sqrt(float(np.sum(bdb * bdb)))


def smoothness(state: FactorizationState, w_bar, d) -> SmoothnessReport:
    _, d = _check(state, w_bar, d)
    return SmoothnessReport(beta_a(state, d), beta_b(state, d), beta_w(state, d))


def masked_core_grad(state: FactorizationState, w_bar, d) -> np.ndarray:
    return np.where(state.core.mask, from_blocks(core_grad_blocks(state, w_bar, d)), 0.0)


def gd_step_a(state, w_bar, d, eta=None):
    eta = _eta(beta_a(state, d)) if eta is None else eta
    if eta == UNBOUNDED:
        return state
    return state.replace(a=state.a.blocks - eta * grad_a_blocks(state, w_bar, d))


def gd_step_b(state, w_bar, d, eta=None):
    eta = _eta(beta_b(state, d)) if eta is None else eta
    if eta == UNBOUNDED:
        return state
    return state.replace(b=state.b.blocks - eta * grad_b_blocks(state, w_bar, d))


def gd_step_w(state, w_bar, d, eta=None):
    eta = _eta(beta_w(state, d)) if eta is None else eta
    if eta == UNBOUNDED:
        return state
    return state.replace(values=state.core.values - eta * masked_core_grad(state, w_bar, d))


def step_sequential(state: FactorizationState, w_bar, d) -> tuple[FactorizationState, SmoothnessReport]:
    """One sweep A -> B -> W', each with ``1/beta`` evaluated where it steps from."""
    w_bar, d = _check(state, w_bar, d)
    ba = beta_a(state, d)
    state = gd_step_a(state, w_bar, d, _eta(ba))
    bb = beta_b(state, d)
    state = gd_step_b(state, w_bar, d, _eta(bb))
    bw = beta_w(state, d)
    state = gd_step_w(state, w_bar, d, _eta(bw))
    return state, SmoothnessReport(ba, bb, bw)


@dataclass(frozen=True)
class AdamState:
    m_a: np.ndarray
    v_a: np.ndarray
    m_b: np.ndarray
    v_b: np.ndarray
    m_w: np.ndarray
    v_w: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, state: FactorizationState, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        za = np.zeros_like(state.a.blocks)
        zb = np.zeros_like(state.b.blocks)
        zw = np.zeros(state.shape)
        return cls(za, za.copy(), zb, zb.copy(), zw, zw.copy(), 0, lr, beta1, beta2, eps)


def step_adam(state: FactorizationState, adam: AdamState, w_bar, d) -> tuple[FactorizationState, AdamState]:
    """Joint bias-corrected Adam update of A, B and the kept entries of W'."""
    w_bar, d = _check(state, w_bar, d)
    mask = state.core.mask
    grads = (grad_a_blocks(state, w_bar, d), grad_b_blocks(state, w_bar, d),
             masked_core_grad(state, w_bar, d))
    t = adam.step + 1
    b1, b2 = adam.beta1, adam.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    moments = ((adam.m_a, adam.v_a), (adam.m_b, adam.v_b), (adam.m_w, adam.v_w))
    new_moments = []
    updates = []
    for g, (m, v) in zip(grads, moments):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_moments.append((m, v))
        updates.append(adam.lr * (m / bc1) / (np.sqrt(v / bc2) + adam.eps))
    new_state = state.replace(a=state.a.blocks - updates[0],
                              b=state.b.blocks - updates[1],
                              values=np.where(mask, state.core.values - updates[2], state.core.values))
    (ma, va), (mb, vb), (mw, vw) = new_moments
    return new_state, replace(adam, m_a=ma, v_a=va, m_b=mb, v_b=vb, m_w=mw, v_w=vw, step=t)
