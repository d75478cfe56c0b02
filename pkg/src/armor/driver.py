"""End-to-end layer optimization, baselines and calibration statistics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .continuous import AdamState, step_adam, step_sequential
from .loss import proxy_loss, _check
from .normalize import NormalizedWeights, denormalize, normalize
from .sparse import SelectionConfig, sparse_core_update
from .tensor import ContractError, FactorizationState, as_matrix, check_calib, reconstruct

log = logging.getLogger(__name__)

CONTINUOUS_MODES = ("sequential-beta", "adam")
INIT_SCORINGS = ("data-weighted", "literal-eq3", "signed")
BASELINES = ("nowag-p", "magnitude", "wanda")


class EmptyCalibrationError(ValueError):
    pass


class CalibrationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    block_size: int = 128
    n_iters: int = 500
    continuous_mode: str = "sequential-beta"
    adam_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    init_scoring: str = "data-weighted"

    def __post_init__(self):
        if self.continuous_mode not in CONTINUOUS_MODES:
            raise ContractError(f"unknown continuous mode {self.continuous_mode!r}")
        if self.init_scoring not in INIT_SCORINGS:
            raise ContractError(f"unknown init scoring {self.init_scoring!r}")
        if self.block_size <= 0 or self.block_size % 4:
            raise ContractError(f"block size must be a positive multiple of 4, got {self.block_size}")
        if self.n_iters < 0:
            raise ContractError("n_iters must be >= 0")
        if self.adam_lr <= 0:
            raise ContractError("adam_lr must be positive")

    def check_shape(self, shape: tuple[int, int]) -> None:
        d_out, d_in = shape
        if d_out % self.block_size or d_in % self.block_size:
            raise ContractError(f"block size {self.block_size} does not divide {shape}")


class TraceEntry(NamedTuple):
    iteration: int
    phase: str  # "init", "post-continuous" or "post-sparse"
    loss: float


class LossTrace(list):
    """List of :class:`TraceEntry` in the order they were recorded."""

    def record(self, iteration: int, phase: str, loss: float) -> None:
        self.append(TraceEntry(iteration, phase, float(loss)))

    @property
    def losses(self) -> np.ndarray:
        return np.array([e.loss for e in self])

    @property
    def initial(self) -> float:
        return self[0].loss

    @property
    def final(self) -> float:
        return self[-1].loss


def top2_mask(scores: np.ndarray) -> np.ndarray:
    """Keep the two highest scores of every group of four; ties keep lower columns."""
    rows, cols = scores.shape
    g = scores.reshape(rows, cols // 4, 4)
    order = np.argsort(-g, axis=-1, kind="stable")[..., :2]
    mask = np.zeros_like(g, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask.reshape(rows, cols)


def init_scores(w_bar: np.ndarray, d: np.ndarray, scoring: str, w=None) -> np.ndarray:
    if scoring == "data-weighted":
        return np.abs(w_bar) * np.sqrt(d)[None, :]
    src = w_bar if w is None else as_matrix(w, "weights")
    if scoring == "literal-eq3":
        return np.abs(src)
    if scoring == "signed":
        return src.copy()
    raise ContractError(f"unknown init scoring {scoring!r}")


def init(w_bar, d, cfg: OptimizerConfig | None = None, w=None) -> FactorizationState:
    """Identity wrappers, ``W' = w_bar`` and a per-group top-2 mask.

    In data-weighted mode the mask keeps the two entries with the largest
    ``|w_bar_ij| * sqrt(d_j)``, which is the loss-minimizing 2:4 mask when
    the wrappers are identities and ``W' = w_bar``. ``w`` (the raw weights)
    is only consulted by the literal scorings.
    """
    cfg = cfg or OptimizerConfig()
    w_bar = as_matrix(w_bar, "w_bar")
    d = check_calib(d, w_bar.shape[1])
    cfg.check_shape(w_bar.shape)
    mask = top2_mask(init_scores(w_bar, d, cfg.init_scoring, w))
    return FactorizationState.identity(w_bar, mask, cfg.block_size)


def optimize_normalized(w_bar, d, cfg: OptimizerConfig | None = None, workers: int = 1,
                        w=None, state: FactorizationState | None = None):
    """Run the alternating optimization on an already-normalized target.

    Returns ``(state, trace)`` with the state still in normalized space.
    """
    cfg = cfg or OptimizerConfig()
    w_bar = as_matrix(w_bar, "w_bar")
    d = check_calib(d, w_bar.shape[1])
    if state is None:
        state = init(w_bar, d, cfg, w)
    trace = LossTrace()
    trace.record(0, "init", proxy_loss(state, w_bar, d))
    adam = None
    if cfg.continuous_mode == "adam":
        adam = AdamState.zeros(state, cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for t in range(1, cfg.n_iters + 1):
        if adam is None:
            state, _ = step_sequential(state, w_bar, d)
        else:
            state, adam = step_adam(state, adam, w_bar, d)
        trace.record(t, "post-continuous", proxy_loss(state, w_bar, d))
        state = sparse_core_update(state, w_bar, d, cfg.selection, t, workers)
        trace.record(t, "post-sparse", proxy_loss(state, w_bar, d))
        if t % 100 == 0:
            log.debug("iter %d loss %.6e", t, trace.final)
    return state, trace


def optimize(w, d, cfg: OptimizerConfig | None = None, workers: int = 1):
    """Normalize ``w``, optimize, and fold the scales back into the wrappers."""
    cfg = cfg or OptimizerConfig()
    norm = normalize(w)
    cfg.check_shape(norm.w_bar.shape)
    state, trace = optimize_normalized(norm.w_bar, d, cfg, workers, w=w)
    return denormalize(state, norm), trace


def normalized_loss(norm: NormalizedWeights, w_hat, d) -> float:
    """Proxy loss of a raw-space reconstruction, measured in normalized space."""
    w_hat = np.asarray(w_hat, dtype=np.float64)
    res = norm.w_bar - w_hat / norm.r2[:, None] / norm.r1[None, :]
    d = check_calib(d, res.shape[1])
    return float(np.sum(res * res * d))


def baseline_prune(w, d, method: str = "nowag-p", block_size: int = 4):
    """Wrapper-free pruning baselines.

    Returns ``(state, loss)`` where the state has identity-like wrappers (the
    NoWag-P state carries the normalization scales in them) and ``loss`` is
    the normalized proxy loss.
    """
    w = as_matrix(w, "weights")
    d = check_calib(d, w.shape[1])
    if w.shape[1] % 4:
        raise ContractError("column count must be divisible by 4")
    norm = normalize(w)
    if method == "nowag-p":
        cfg = OptimizerConfig(block_size=block_size, n_iters=0)
        cfg.check_shape(w.shape)
        state = init(norm.w_bar, d, cfg)
        return denormalize(state, norm), proxy_loss(state, norm.w_bar, d)
    if method == "magnitude":
        mask = top2_mask(np.abs(w))
    elif method == "wanda":
        mask = top2_mask(np.abs(w) * np.sqrt(d)[None, :])
    else:
        raise ContractError(f"unknown baseline {method!r}")
    state = FactorizationState.identity(w, mask, block_size)
    return state, normalized_loss(norm, reconstruct(state), d)


class CalibAccumulator:
    """Streaming ``d_j = sum_t x_tj**2`` over chunks of activations."""

    def __init__(self, d_in: int | None = None):
        self.d = None if d_in is None else np.zeros(d_in)
        self.n = 0

    def update(self, samples) -> "CalibAccumulator":
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        if x.ndim != 2:
            raise ContractError("activations must be an (n, d_in) matrix")
        if self.d is None:
            self.d = np.zeros(x.shape[1])
        if x.shape[1] != self.d.size:
            raise ContractError(f"activation width {x.shape[1]} != {self.d.size}")
        self.d += np.sum(x * x, axis=0)
        self.n += x.shape[0]
        return self

    def result(self) -> np.ndarray:
        if self.n == 0:
            raise EmptyCalibrationError("no calibration samples")
        if not np.any(self.d):
            warnings.warn("all calibration statistics are zero; the loss ignores every column",
                          CalibrationWarning, stacklevel=2)
        return self.d.copy()


def compute_calib_stats(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyCalibrationError("need at least one activation sample")
    return CalibAccumulator().update(x).result()
