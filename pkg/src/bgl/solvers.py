"""Outer/inner training loops: warm start, TBGL, IBGL and the naive joint baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .bilevel import (
    BilevelProblem,
    EstimatorConfig,
    EvalCounts,
    HypergradientReport,
    NonFiniteError,
    ibgl_hypergradient,
    tbgl_hypergradient,
)

ESTIMATORS = ("tbgl", "ibgl", "naive")
DEFAULT_K = {"tbgl": 1, "ibgl": 80, "naive": 1}
K_ENHANCEMENT = 80
K_DETECTION = 30


def lr_schedule(step: int, total: int, init: float, final: float, kind: str = "cosine") -> float:
    """Learning rate at ``step`` of ``total``, decaying from ``init`` to ``final``."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if not init >= final > 0:
        raise ValueError(f"need init >= final > 0, got {init}, {final}")
    if total == 0:
        return init
    frac = step / total
    if kind == "cosine":
        return final + 0.5 * (init - final) * (1.0 + math.cos(math.pi * frac))
    if kind == "linear":
        return init + (final - init) * frac
    if kind == "constant":
        return init
    raise ValueError(f"unknown schedule {kind!r}")


class Optimizer:
    """Stateful first-order update rule over a flat vector."""

    def __init__(self, kind: str = "sgd", momentum: float = 0.9, betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.momentum = momentum
        self.betas = betas
        self.eps = eps
        self._m = None
        self._v = None
        self._t = 0

    def step(self, x: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self.kind == "sgd":
            return x - lr * grad
        if self._m is None:
            self._m = np.zeros_like(x)
            self._v = np.zeros_like(x)
        if self.kind == "momentum":
            self._m = self.momentum * self._m + grad
            return x - lr * self._m
        b1, b2 = self.betas
        self._t += 1
        self._m = b1 * self._m + (1 - b1) * grad
        self._v = b2 * self._v + (1 - b2) * grad * grad
        mhat = self._m / (1 - b1 ** self._t)
        vhat = self._v / (1 - b2 ** self._t)
        return x - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class SolverConfig:
    estimator: str = "ibgl"
    k: int | None = None
    outer_steps: int = 300
    warm_steps: int = 0
    warm_lr: float = 1e-4
    upper_lr_init: float = 3e-3
    upper_lr_final: float = 5e-6
    lower_lr_init: float = 3e-3
    lower_lr_final: float = 3e-5
    schedule: str = "cosine"
    upper_optimizer: str = "sgd"
    lower_optimizer: str = "sgd"
    batch_size: int = 2
    seed: int = 0
    upper_clip: float | None = 10.0
    estimator_cfg: EstimatorConfig = field(default_factory=EstimatorConfig)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.k is None:
            self.k = DEFAULT_K[self.estimator]
        if self.estimator == "tbgl" and self.k != 1:
            raise ValueError("tbgl is truncated to a single lower step (k == 1)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.outer_steps < 0 or self.warm_steps < 0:
            raise ValueError("step counts must be nonnegative")
        for lo, hi in (("upper_lr_final", "upper_lr_init"), ("lower_lr_final", "lower_lr_init")):
            if not getattr(self, hi) >= getattr(self, lo) > 0:
                raise ValueError(f"need {hi} >= {lo} > 0")
        if not self.warm_lr > 0:
            raise ValueError("warm_lr must be positive")
        if self.upper_clip is not None and not self.upper_clip > 0:
            raise ValueError("upper_clip must be positive or None")


@dataclass
class EvalCounter:
    lf_grad_evals: int = 0
    lg_grad_evals: int = 0
    lower_updates: int = 0
    outer_updates: int = 0

    def add(self, counts: EvalCounts) -> None:
        self.lf_grad_evals += counts.lf_grad_evals
        self.lg_grad_evals += counts.lg_grad_evals
        self.lower_updates += counts.lower_updates

    def as_dict(self) -> dict[str, int]:
        return {
            "lf_grad_evals": self.lf_grad_evals,
            "lg_grad_evals": self.lg_grad_evals,
            "lower_updates": self.lower_updates,
            "outer_updates": self.outer_updates,
        }


@dataclass
class TrainState:
    """Flat parameter vectors plus bookkeeping for one solve.

    ``counter`` covers the bilevel phase only; warm-start work is tallied in
    ``warm_counter``.
    """

    omega: np.ndarray
    theta: np.ndarray
    rng: np.random.Generator
    warm_steps_done: int = 0
    outer_steps_done: int = 0
    history: list[dict] = field(default_factory=list)
    counter: EvalCounter = field(default_factory=EvalCounter)
    warm_counter: EvalCounter = field(default_factory=EvalCounter)

    def params(self, problem: BilevelProblem):
        return problem.omega.unflatten(self.omega), problem.theta.unflatten(self.theta)


StepCallback = Callable[[TrainState, int], "dict | None"]


def _check_finite(step: int, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite parameters after step {step}")


def init_state(problem: BilevelProblem, cfg: SolverConfig) -> TrainState:
    return TrainState(problem.omega0.copy(), problem.theta0.copy(), np.random.default_rng(cfg.seed))


def warm_start(problem: BilevelProblem, cfg: SolverConfig, state: TrainState | None = None) -> TrainState:
    """Joint gradient descent of (omega, theta) on ``L_G`` at ``warm_lr``."""
    state = init_state(problem, cfg) if state is None else state
    for i in range(cfg.warm_steps):
        problem.draw_batches(state.rng)
        counts = EvalCounts()
        value, g = problem.lower_grads(state.omega, state.theta, ("omega", "theta"), counts)
        state.omega = state.omega - cfg.warm_lr * g["omega"]
        state.theta = state.theta - cfg.warm_lr * g["theta"]
        _check_finite(i, state.omega, state.theta)
        state.warm_counter.add(counts)
        state.warm_counter.outer_updates += 1
        state.warm_steps_done += 1
        state.history.append({"phase": "warm", "step": i, "lower_loss": value})
    return state


def _clip(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.linalg.norm(grad))
    return grad * (max_norm / norm) if norm > max_norm else grad


def _rates(cfg: SolverConfig, step: int) -> tuple[float, float]:
    total = max(cfg.outer_steps, 1)
    up = lr_schedule(step, total, cfg.upper_lr_init, cfg.upper_lr_final, cfg.schedule)
    low = lr_schedule(step, total, cfg.lower_lr_init, cfg.lower_lr_final, cfg.schedule)
    return up, low


def _row(step: int, lr_up: float, lr_low: float, report: HypergradientReport | None = None, **extra) -> dict:
    row = {"phase": "outer", "step": step, "lr_upper": lr_up, "lr_lower": lr_low}
    if report is not None:
        row.update(
            upper_loss=report.upper_loss,
            hypergrad_norm=float(np.linalg.norm(report.total)),
            coupling_norm=float(np.linalg.norm(report.coupling_term)),
            lower_grad_norm=report.lower_grad_norm,
        )
    row.update(extra)
    return row


def _finish_step(state: TrainState, step: int, row: dict, callback: StepCallback | None) -> None:
    state.counter.outer_updates += 1
    state.outer_steps_done += 1
    row.update(state.counter.as_dict())
    if callback is not None:
        more = callback(state, step)
        if more:
            row.update(more)
    state.history.append(row)


def tbgl_solve(problem: BilevelProblem, state: TrainState, cfg: SolverConfig,
               callback: StepCallback | None = None) -> TrainState:
    """Truncated bilevel loop: one lower step, then an upper step along the TBGL estimate."""
    if cfg.estimator != "tbgl" or cfg.k != 1:
        raise ValueError("tbgl_solve needs estimator='tbgl' and k == 1")
    upper = Optimizer(cfg.upper_optimizer)
    for step in range(cfg.outer_steps):
        lr_up, lr_low = _rates(cfg, step)
        problem.draw_batches(state.rng)
        report = tbgl_hypergradient(problem, state.omega, state.theta, replace(cfg.estimator_cfg, eta=lr_low))
        state.theta = report.theta_next
        state.omega = upper.step(state.omega, _clip(report.total, cfg.upper_clip), lr_up)
        _check_finite(step, state.omega, state.theta)
        state.counter.add(report.eval_counts)
        _finish_step(state, step, _row(step, lr_up, lr_low, report), callback)
    return state


def ibgl_solve(problem: BilevelProblem, state: TrainState, cfg: SolverConfig,
               callback: StepCallback | None = None) -> TrainState:
    """Implicit bilevel loop: ``k`` lower steps, then an upper step along the IBGL estimate.

    One batch pair is drawn per outer step and shared by the ``k`` lower
    steps and the hypergradient.
    """
    if cfg.estimator != "ibgl":
        raise ValueError("ibgl_solve needs estimator='ibgl'")
    upper = Optimizer(cfg.upper_optimizer)
    lower = Optimizer(cfg.lower_optimizer)
    for step in range(cfg.outer_steps):
        lr_up, lr_low = _rates(cfg, step)
        counts = EvalCounts()
        problem.draw_batches(state.rng)
        for _ in range(cfg.k):
            _, g = problem.lower_grads(state.omega, state.theta, ("theta",), counts)
            state.theta = lower.step(state.theta, g["theta"], lr_low)
            counts.lower_updates += 1
        _check_finite(step, state.theta)
        report = ibgl_hypergradient(problem, state.omega, state.theta, cfg.estimator_cfg)
        counts += report.eval_counts
        state.omega = upper.step(state.omega, _clip(report.total, cfg.upper_clip), lr_up)
        _check_finite(step, state.omega)
        state.counter.add(counts)
        _finish_step(state, step, _row(step, lr_up, lr_low, report, lower_loss=report.lower_loss), callback)
    return state


def naive_joint_solve(problem: BilevelProblem, state: TrainState, cfg: SolverConfig,
                      callback: StepCallback | None = None) -> TrainState:
    """End-to-end baseline: simultaneous descent of (omega, theta) on ``L_G`` only."""
    upper = Optimizer(cfg.upper_optimizer)
    lower = Optimizer(cfg.lower_optimizer)
    for step in range(cfg.outer_steps):
        lr_up, lr_low = _rates(cfg, step)
        problem.draw_batches(state.rng)
        counts = EvalCounts()
        value, g = problem.lower_grads(state.omega, state.theta, ("omega", "theta"), counts)
        state.omega = upper.step(state.omega, _clip(g["omega"], cfg.upper_clip), lr_up)
        state.theta = lower.step(state.theta, g["theta"], lr_low)
        counts.lower_updates += 1
        _check_finite(step, state.omega, state.theta)
        state.counter.add(counts)
        _finish_step(state, step, _row(step, lr_up, lr_low, lower_loss=value), callback)
    return state


SOLVERS = {"tbgl": tbgl_solve, "ibgl": ibgl_solve, "naive": naive_joint_solve}


def solve(problem: BilevelProblem, cfg: SolverConfig, callback: StepCallback | None = None) -> TrainState:
    """Warm start followed by the configured bilevel (or naive) loop."""
    state = warm_start(problem, cfg)
    return SOLVERS[cfg.estimator](problem, state, cfg, callback)
