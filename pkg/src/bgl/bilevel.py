"""Bilevel problem contract and hypergradient estimators.

Notation: ``omega`` are the upper (generator) parameters, ``theta`` the lower
(task) parameters.  ``L_F`` is the upper loss and ``L_G`` the lower loss.  All
estimators work on flat float64 vectors; the problem object converts them to
:class:`~bgl.tensor.ParameterVector` layouts when evaluating a loss.

Two estimators approximate the response term of the hypergradient:

* :func:`tbgl_hypergradient` takes one lower step and replaces the mixed
  second-order product by a central difference of ``grad_omega L_G``.
* :func:`ibgl_hypergradient` uses rank-one outer-product surrogates for both
  Hessians, which collapses the implicit coupling to a scalar multiple of
  ``grad_omega L_G``.

:func:`unrolled_hypergradient` and :func:`cg_implicit_hypergradient` are
independent oracles used to validate them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .tensor import ParameterVector, Tensor, backward

LossFn = Callable[[ParameterVector, ParameterVector, Any], Tensor]

_NORM_FLOOR = 1e-12


class NonFiniteError(FloatingPointError):
    """A loss or gradient evaluated to NaN or Inf."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


@dataclass
class EvalCounts:
    """Gradient evaluations, counted per requested parameter segment."""

    lf_grad_evals: int = 0
    lg_grad_evals: int = 0
    lower_updates: int = 0

    def __iadd__(self, other: "EvalCounts") -> "EvalCounts":
        self.lf_grad_evals += other.lf_grad_evals
        self.lg_grad_evals += other.lg_grad_evals
        self.lower_updates += other.lower_updates
        return self

    def as_dict(self) -> dict[str, int]:
        return {
            "lf_grad_evals": self.lf_grad_evals,
            "lg_grad_evals": self.lg_grad_evals,
            "lower_updates": self.lower_updates,
        }


@dataclass
class BilevelProblem:
    """Upper/lower losses over two parameter layouts.

    ``upper_loss(omega, theta, batch)`` and ``lower_loss(omega, theta, batch)``
    must return scalar tensors and must not mutate their arguments.  The
    batches passed are ``upper_data`` and ``lower_data``; a solver may replace
    them between steps through ``sample_batches(rng) -> (upper, lower)``.
    """

    upper_loss: LossFn
    lower_loss: LossFn
    omega: ParameterVector
    theta: ParameterVector
    upper_data: Any = None
    lower_data: Any = None
    sample_batches: Callable[[np.random.Generator], tuple[Any, Any]] | None = None
    name: str = "problem"
    context: Any = None

    @property
    def omega0(self) -> np.ndarray:
        return self.omega.flatten()

    @property
    def theta0(self) -> np.ndarray:
        return self.theta.flatten()

    def draw_batches(self, rng: np.random.Generator) -> None:
        if self.sample_batches is not None:
            self.upper_data, self.lower_data = self.sample_batches(rng)

    def _evaluate(self, which: str, w, t, wrt: tuple[str, ...], batch: Any = None):
        fn, own = (self.upper_loss, self.upper_data) if which == "upper" else (self.lower_loss, self.lower_data)
        batch = own if batch is None else batch
        wp = self.omega.unflatten(w, requires_grad="omega" in wrt)
        tp = self.theta.unflatten(t, requires_grad="theta" in wrt)
        loss = fn(wp, tp, batch)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"{which} loss is non-finite ({value})")
        if not wrt:
            return value, {}
        backward(loss)
        grads = {}
        for seg, params in (("omega", wp), ("theta", tp)):
            if seg in wrt:
                g = params.grad_vector()
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"non-finite gradient of {which} loss w.r.t. {seg}")
                grads[seg] = g
        return value, grads

    def upper_value(self, w, t) -> float:
        return self._evaluate("upper", w, t, ())[0]

    def lower_value(self, w, t) -> float:
        return self._evaluate("lower", w, t, ())[0]

    def upper_grads(self, w, t, wrt=("omega", "theta"), counts: EvalCounts | None = None, batch: Any = None):
        """``L_F`` and its gradients; ``batch`` overrides ``upper_data`` for this call."""
        value, grads = self._evaluate("upper", w, t, tuple(wrt), batch)
        if counts is not None:
            counts.lf_grad_evals += len(grads)
        return value, grads

    def lower_grads(self, w, t, wrt=("omega", "theta"), counts: EvalCounts | None = None):
        value, grads = self._evaluate("lower", w, t, tuple(wrt))
        if counts is not None:
            counts.lg_grad_evals += len(grads)
        return value, grads

    def scaled_lower(self, c: float) -> "BilevelProblem":
        """Same problem with ``L_G`` multiplied by ``c``."""
        base = self.lower_loss

        def lower(w, t, batch):
            return base(w, t, batch) * c

        return BilevelProblem(self.upper_loss, lower, self.omega, self.theta, self.upper_data,
                              self.lower_data, self.sample_batches, f"{self.name}*{c:g}", self.context)


@dataclass
class EstimatorConfig:
    eta: float = 3e-3
    fd_scale: float = 0.01
    guard_eps: float = 1e-12
    cg_tol: float = 1e-10
    cg_max_iter: int = 200
    hvp_eps: float = 1e-5
    # batch for f = grad_theta L_F inside the IBGL coupling: "upper" (validation) or "lower" (training)
    ibgl_f_batch: str = "upper"

    def __post_init__(self):
        if self.ibgl_f_batch not in ("upper", "lower"):
            raise ValueError(f"ibgl_f_batch must be 'upper' or 'lower', got {self.ibgl_f_batch!r}")
        for name in ("eta", "fd_scale", "guard_eps", "cg_tol", "cg_max_iter", "hvp_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"EstimatorConfig.{name} must be positive, got {getattr(self, name)}")


@dataclass
class HypergradientReport:
    total: np.ndarray
    direct_term: np.ndarray
    coupling_term: np.ndarray
    lower_grad_norm: float
    eval_counts: EvalCounts
    flags: list[str] = field(default_factory=list)
    theta_next: np.ndarray | None = None
    upper_loss: float = float("nan")
    lower_loss: float = float("nan")

    def to_json(self) -> dict:
        return {
            "total_norm": float(np.linalg.norm(self.total)),
            "direct_norm": float(np.linalg.norm(self.direct_term)),
            "coupling_norm": float(np.linalg.norm(self.coupling_term)),
            "lower_grad_norm": float(self.lower_grad_norm),
            "flags": list(self.flags),
            "eval_counts": self.eval_counts.as_dict(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _as_flat(x) -> np.ndarray:
    return x.flatten() if isinstance(x, ParameterVector) else np.asarray(x, dtype=np.float64)


def _report(direct, coupling, gnorm, counts, flags, **extra) -> HypergradientReport:
    total = direct + coupling
    if not np.all(np.isfinite(total)):
        raise NonFiniteError("non-finite hypergradient")
    return HypergradientReport(total, direct, coupling, gnorm, counts, flags, **extra)


def lower_step(problem: BilevelProblem, omega, theta, eta: float, counts: EvalCounts | None = None) -> np.ndarray:
    """One plain gradient step on the lower loss: ``theta - eta * grad_theta L_G``."""
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    w, t = _as_flat(omega), _as_flat(theta)
    _, g = problem.lower_grads(w, t, ("theta",), counts)
    if counts is not None:
        counts.lower_updates += 1
    return t - eta * g["theta"]


def tbgl_hypergradient(problem: BilevelProblem, omega, theta, cfg: EstimatorConfig) -> HypergradientReport:
    """Truncated estimator: one lower step, central difference for the mixed term.

    With ``theta' = theta - eta * g`` and ``v = grad_theta' L_F(omega, theta')``,
    the mixed product ``d2 L_G / d omega d theta @ v`` is approximated by
    ``(grad_omega L_G(theta + delta v) - grad_omega L_G(theta - delta v)) / (2 delta)``
    where ``delta = fd_scale / |v|``.  ``report.theta_next`` holds ``theta'``.
    """
    w, t = _as_flat(omega), _as_flat(theta)
    counts = EvalCounts()
    _, lg = problem.lower_grads(w, t, ("theta",), counts)
    gnorm = float(np.linalg.norm(lg["theta"]))
    t_next = t - cfg.eta * lg["theta"]
    counts.lower_updates += 1

    lf_value, lf = problem.upper_grads(w, t_next, ("omega", "theta"), counts)
    direct, v = lf["omega"], lf["theta"]
    vnorm = float(np.linalg.norm(v))
    flags = []
    if vnorm < _NORM_FLOOR:
        coupling = np.zeros_like(direct)
        flags.append("zero_direction")
    else:
        delta = cfg.fd_scale / max(vnorm, _NORM_FLOOR)
        _, gp = problem.lower_grads(w, t + delta * v, ("omega",), counts)
        _, gm = problem.lower_grads(w, t - delta * v, ("omega",), counts)
        mixed_v = (gp["omega"] - gm["omega"]) / (2.0 * delta)
        coupling = -cfg.eta * mixed_v
    return _report(direct, coupling, gnorm, counts, flags, theta_next=t_next, upper_loss=lf_value)


def outer_product_coupling(f: np.ndarray, g: np.ndarray, g_omega: np.ndarray, guard_eps: float):
    """``-(f.g / g.g) * g_omega`` with the 0/0 case zeroed; returns (coupling, degenerate)."""
    gg = float(g @ g)
    if gg < guard_eps:
        return np.zeros_like(g_omega), True
    return -(float(f @ g) / gg) * g_omega, False


def _f_batch(problem: BilevelProblem, cfg: EstimatorConfig):
    return problem.lower_data if cfg.ibgl_f_batch == "lower" else None


def ibgl_coupling(problem: BilevelProblem, omega, theta, cfg: EstimatorConfig,
                  counts: EvalCounts | None = None) -> tuple[np.ndarray, bool]:
    """Gauss-Newton coupling gradient and whether it degenerated to zero."""
    w, t = _as_flat(omega), _as_flat(theta)
    _, lf = problem.upper_grads(w, t, ("theta",), counts, batch=_f_batch(problem, cfg))
    _, lg = problem.lower_grads(w, t, ("omega", "theta"), counts)
    return outer_product_coupling(lf["theta"], lg["theta"], lg["omega"], cfg.guard_eps)


def ibgl_hypergradient(problem: BilevelProblem, omega, theta, cfg: EstimatorConfig) -> HypergradientReport:
    """Implicit estimator evaluated at the current (approximately lower-optimal) theta.

    One upper backward supplies ``grad_omega L_F`` and ``f = grad_theta L_F``;
    one lower backward supplies ``g = grad_theta L_G`` and ``grad_omega L_G``.
    """
    w, t = _as_flat(omega), _as_flat(theta)
    counts = EvalCounts()
    if cfg.ibgl_f_batch == "lower":
        lf_value, lf = problem.upper_grads(w, t, ("omega",), counts)
        _, lf_t = problem.upper_grads(w, t, ("theta",), counts, batch=problem.lower_data)
        lf["theta"] = lf_t["theta"]
    else:
        lf_value, lf = problem.upper_grads(w, t, ("omega", "theta"), counts)
    lg_value, lg = problem.lower_grads(w, t, ("omega", "theta"), counts)
    coupling, degenerate = outer_product_coupling(lf["theta"], lg["theta"], lg["omega"], cfg.guard_eps)
    flags = ["degenerate_lower_gradient"] if degenerate else []
    return _report(lf["omega"], coupling, float(np.linalg.norm(lg["theta"])), counts, flags,
                   upper_loss=lf_value, lower_loss=lg_value)


def _run_inner(problem: BilevelProblem, w, t0, eta: float, k: int) -> np.ndarray:
    t = t0
    for _ in range(k):
        t = lower_step(problem, w, t, eta)
    return t


def unrolled_hypergradient(problem: BilevelProblem, omega, theta0, eta: float, k: int,
                           h: float = 1e-5, max_dim: int = 50, max_k: int = 10_000) -> np.ndarray:
    """Total derivative of ``L_F(omega, theta_k(omega))`` by central differences.

    ``theta_k`` is ``k`` plain lower steps from ``theta0``; every coordinate of
    omega is perturbed by ``+-h`` and the inner loop rerun from scratch.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    w, t0 = _as_flat(omega), _as_flat(theta0)
    if w.size > max_dim or k > max_k:
        raise ValueError(f"unrolled oracle budget exceeded: dim={w.size} (max {max_dim}), k={k} (max {max_k})")
    grad = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        fp = problem.upper_value(w + e, _run_inner(problem, w + e, t0, eta, k))
        fm = problem.upper_value(w - e, _run_inner(problem, w - e, t0, eta, k))
        grad[i] = (fp - fm) / (2 * h)
    return grad


def _directional_fd(grad_at: Callable[[np.ndarray], np.ndarray], t: np.ndarray, p: np.ndarray, eps: float):
    pnorm = float(np.linalg.norm(p))
    if pnorm == 0.0:
        return np.zeros_like(grad_at(t))
    u = p / pnorm
    return (grad_at(t + eps * u) - grad_at(t - eps * u)) * (pnorm / (2 * eps))


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray, tol: float, max_iter: int):
    """Solve ``A x = b`` for SPD ``A``; stops when ``|r| <= tol * max(|b|, 1)``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    target = tol * max(float(np.linalg.norm(b)), 1.0)
    for it in range(max_iter):
        if np.sqrt(rr) <= target:
            return x, it
        ap = matvec(p)
        pap = float(p @ ap)
        if pap <= 0:
            raise ConvergenceError("non-positive curvature in conjugate gradient", float(np.sqrt(rr)))
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    if np.sqrt(rr) <= target:
        return x, max_iter
    raise ConvergenceError(f"conjugate gradient did not reach tol {tol} in {max_iter} iterations",
                           float(np.sqrt(rr)))


def cg_implicit_hypergradient(problem: BilevelProblem, omega, theta_star, cfg: EstimatorConfig,
                              counts: EvalCounts | None = None) -> np.ndarray:
    """Exact implicit hypergradient at a lower stationary point.

    Solves ``H x = grad_theta L_F`` with ``H = d2 L_G / d theta2`` by conjugate
    gradient, Hessian-vector products taken as central differences of
    ``grad_theta L_G``; the coupling is ``-(d2 L_G / d omega d theta) x``,
    again by a central difference of ``grad_omega L_G`` along ``x``.
    """
    w, t = _as_flat(omega), _as_flat(theta_star)
    _, lf = problem.upper_grads(w, t, ("omega", "theta"), counts)

    def g_theta(tt):
        return problem.lower_grads(w, tt, ("theta",), counts)[1]["theta"]

    def g_omega(tt):
        return problem.lower_grads(w, tt, ("omega",), counts)[1]["omega"]

    x, _ = conjugate_gradient(lambda p: _directional_fd(g_theta, t, p, cfg.hvp_eps), lf["theta"],
                              cfg.cg_tol, cfg.cg_max_iter)
    coupling = -_directional_fd(g_omega, t, x, cfg.hvp_eps)
    return lf["omega"] + coupling
