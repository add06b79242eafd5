"""Invariant suite for the autodiff engine and the hypergradient estimators.

Each check returns a :class:`Check` with the worst observed value and the
tolerance it was held to.  Estimators are injectable so that a deliberately
broken double can demonstrate that the suite catches it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .benchmarks import QuadraticBilevel, make_cubic, make_quadratic
from .bilevel import (
    EstimatorConfig,
    cg_implicit_hypergradient,
    ibgl_hypergradient,
    tbgl_hypergradient,
    unrolled_hypergradient,
)
from .config import VerifySection
from .solvers import SolverConfig, ibgl_solve, init_state, tbgl_solve
from .tensor import ParameterVector, Tensor

MACHINE_EPS = np.finfo(np.float64).eps


@dataclass
class Check:
    id: str
    passed: bool
    value: float
    tol: float
    detail: str = ""
    failing_cases: list[str] = field(default_factory=list)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.id}: {self.value:.3e} (tol {self.tol:.1e}) {self.detail}".rstrip()


@dataclass
class VerifyReport:
    checks: list[Check]
    delta_rows: list[dict]
    k_rows: list[dict]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failing(self) -> list[str]:
        return [c.id for c in self.checks if not c.passed]

    def to_json(self) -> dict:
        return {"passed": self.passed, "failing": self.failing(),
                "checks": [_json_check(c) for c in self.checks]}


def _json_check(c: Check) -> dict:
    d = asdict(c)
    d["value"] = c.value if math.isfinite(c.value) else repr(c.value)
    return d


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# ---------------------------------------------------------------------------
# autodiff


def toy_network(seed: int) -> tuple[Callable[[ParameterVector], Tensor], ParameterVector]:
    """Two convolutions and a dense layer on a fixed random input; smooth activations."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    params = ParameterVector([
        ("c1.w", Tensor(rng.normal(0, 0.5, size=(3, 2, 3, 3)))),
        ("c1.b", Tensor(rng.normal(0, 0.1, size=3))),
        ("c2.w", Tensor(rng.normal(0, 0.5, size=(2, 3, 3, 3)))),
        ("d.w", Tensor(rng.normal(0, 0.5, size=(18, 4)))),
    ])

    def f(p: ParameterVector) -> Tensor:
        h = T.sigmoid(T.conv2d(x, p["c1.w"], p["c1.b"], stride=1, padding=1))
        h = T.sigmoid(T.conv2d(h, p["c2.w"], stride=2, padding=1))
        out = T.matmul(h.reshape(2, 18), p["d.w"])
        return T.reduce_mean(T.square(out - 0.5))

    return f, params


def check_autodiff(seeds, tol: float = 1e-5) -> Check:
    worst, bad = 0.0, []
    for s in seeds:
        f, p = toy_network(s)
        err = T.grad_check(f, p, h=1e-5)
        worst = max(worst, err)
        if not err < tol:
            bad.append(f"seed={s}")
    return Check("autodiff_grad_check", not bad, worst, tol, f"{len(seeds)} seeds, 2-conv + dense", bad)


# ---------------------------------------------------------------------------
# oracles


def _state(q: QuadraticBilevel, seed: int):
    rng = np.random.default_rng(10_000 + seed)
    return rng.normal(size=q.m), rng.normal(size=q.n)


def stable_eta(q: QuadraticBilevel) -> float:
    return 1.0 / q.eigen_bounds()[1]


def check_oracle_triangle(vc: VerifySection, ecfg: EstimatorConfig) -> Check:
    worst, bad = 0.0, []
    for s in vc.seeds:
        q = make_quadratic(vc.m, vc.n, seed=s)
        p = q.problem()
        w, _ = _state(q, s)
        analytic = q.analytic_hypergradient(w)
        cg = cg_implicit_hypergradient(p, w, q.lower_minimizer(w), ecfg)
        unrolled = unrolled_hypergradient(p, w, np.zeros(q.n), stable_eta(q), vc.unroll_k)
        errs = [_rel(cg, analytic), _rel(unrolled, analytic), _rel(cg, unrolled)]
        worst = max(worst, *errs)
        if max(errs) >= vc.oracle_tol:
            bad.append(f"seed={s}")
    return Check("oracle_triangle", not bad, worst, vc.oracle_tol,
                 f"analytic/cg/unrolled(k={vc.unroll_k}), {len(vc.seeds)} seeds", bad)


def k_sweep(vc: VerifySection) -> list[dict]:
    rows = []
    for s in vc.seeds:
        q = make_quadratic(vc.m, vc.n, seed=s)
        p = q.problem()
        w, _ = _state(q, s)
        analytic = q.analytic_hypergradient(w)
        for k in vc.k_sweep:
            got = unrolled_hypergradient(p, w, np.zeros(q.n), stable_eta(q), k)
            rows.append({"seed": s, "k": k, "rel_error": _rel(got, analytic)})
    return rows


# ---------------------------------------------------------------------------
# TBGL


Estimator = Callable[..., object]


def check_tbgl_exact(vc: VerifySection, ecfg: EstimatorConfig, tbgl: Estimator = tbgl_hypergradient,
                     scales=(1e-1, 1e-2, 1e-3)) -> Check:
    worst, bad = 0.0, []
    for s in vc.seeds:
        q = make_quadratic(vc.m, vc.n, seed=s)
        p = q.problem()
        w, t = _state(q, s)
        want = q.one_step_hypergradient(w, t, ecfg.eta)
        for eps in scales:
            got = tbgl(p, w, t, replace(ecfg, fd_scale=eps)).total
            err = _rel(got, want)
            worst = max(worst, err)
            if not err < vc.exact_tol:
                bad.append(f"seed={s},fd_scale={eps:g}")
    return Check("tbgl_exact_on_quadratic", not bad, worst, vc.exact_tol,
                 f"fd_scale in {tuple(scales)}", bad)


def fd_term_error(problem, q, w, t, ecfg: EstimatorConfig, tbgl: Estimator = tbgl_hypergradient) -> tuple[float, float]:
    """(error of the FD mixed product, rounding-noise estimate) at one state."""
    rep = tbgl(problem, w, t, ecfg)
    t_next = t - ecfg.eta * q.lower_grad_theta(w, t)
    v = q.upper_grad_theta(w, t_next)
    exact = q.mixed_product(w, t, v)
    fd = -rep.coupling_term / ecfg.eta
    delta = ecfg.fd_scale / np.linalg.norm(v)
    noise = MACHINE_EPS * np.linalg.norm(q.lower_grad_omega(w, t)) / delta
    return float(np.linalg.norm(fd - exact)), float(noise)


def delta_sweep(vc: VerifySection, ecfg: EstimatorConfig, tbgl: Estimator = tbgl_hypergradient) -> list[dict]:
    rows = []
    for s in vc.seeds:
        q = make_cubic(vc.m, vc.n, seed=s, gamma=vc.gamma)
        p = q.problem()
        w, t = _state(q, s)
        prev = None
        for d in vc.deltas:
            err, noise = fd_term_error(p, q, w, t, replace(ecfg, fd_scale=d), tbgl)
            ratio = prev / err if prev is not None and err > 0 else float("nan")
            rows.append({"seed": s, "delta": d, "fd_error": err, "roundoff": noise, "ratio": ratio})
            prev = err
    return rows


def check_fd_order(vc: VerifySection, rows: list[dict]) -> Check:
    """Ratios of successive errors, kept where the error dwarfs rounding noise."""
    lo, hi = vc.order_band
    used, bad, worst = 0, [], 0.0
    for r in rows:
        if math.isnan(r["ratio"]) or r["fd_error"] < 1e3 * r["roundoff"]:
            continue
        used += 1
        worst = max(worst, abs(r["ratio"] - 4.0))
        if not lo <= r["ratio"] <= hi:
            bad.append(f"seed={r['seed']},delta={r['delta']:g}")
    ok = used > 0 and not bad
    return Check("tbgl_fd_order", ok, worst, max(4.0 - lo, hi - 4.0),
                 f"|ratio-4| over {used} halvings, band {vc.order_band}", bad)


# ---------------------------------------------------------------------------
# IBGL


def _coupling(ibgl: Estimator, p, w, t, ecfg):
    rep = ibgl(p, w, t, ecfg)
    return rep.coupling_term, rep


def check_ibgl_parallel(vc: VerifySection, ecfg: EstimatorConfig, ibgl: Estimator = ibgl_hypergradient) -> Check:
    worst, bad = 0.0, []
    for s in vc.seeds:
        for q in (make_quadratic(vc.m, vc.n, seed=s), make_cubic(vc.m, vc.n, seed=s, gamma=vc.gamma)):
            p = q.problem()
            w, t = _state(q, s)
            c, _ = _coupling(ibgl, p, w, t, ecfg)
            g = q.lower_grad_omega(w, t)
            cos = abs(float(c @ g)) / (np.linalg.norm(c) * np.linalg.norm(g))
            worst = max(worst, 1.0 - cos)
            if not cos >= 1.0 - vc.cosine_tol:
                bad.append(f"{type(q).__name__},seed={s}")
    return Check("ibgl_coupling_parallel", not bad, worst, vc.cosine_tol, "1 - |cos(coupling, grad_w L_G)|", bad)


def check_ibgl_scale(vc: VerifySection, ecfg: EstimatorConfig, ibgl: Estimator = ibgl_hypergradient) -> Check:
    worst, bad = 0.0, []
    for s in vc.seeds:
        q = make_quadratic(vc.m, vc.n, seed=s)
        p = q.problem()
        w, t = _state(q, s)
        base, _ = _coupling(ibgl, p, w, t, ecfg)
        for c in vc.scales:
            got, _ = _coupling(ibgl, p.scaled_lower(c), w, t, ecfg)
            err = _rel(got, base)
            worst = max(worst, err)
            if not err <= vc.invariance_tol:
                bad.append(f"seed={s},c={c:g}")
    return Check("ibgl_scale_invariance", not bad, worst, vc.invariance_tol, f"c in {vc.scales}", bad)


def orthogonal_instance(q: QuadraticBilevel, w, t) -> QuadraticBilevel:
    """Same A, B with the target moved so that grad_t L_F is orthogonal to grad_t L_G at (w, t)."""
    g = q.lower_grad_theta(w, t)
    f = q.upper_grad_theta(w, t)
    f_perp = f - (f @ g) / (g @ g) * g
    return QuadraticBilevel(q.A, q.B, t - f_perp, q.lam)


def check_ibgl_orthogonal(vc: VerifySection, ecfg: EstimatorConfig, ibgl: Estimator = ibgl_hypergradient) -> Check:
    worst, bad = 0.0, []
    for s in vc.seeds:
        q0 = make_quadratic(vc.m, vc.n, seed=s)
        w, t = _state(q0, s)
        q = orthogonal_instance(q0, w, t)
        c, _ = _coupling(ibgl, q.problem(), w, t, ecfg)
        err = float(np.max(np.abs(c)))
        worst = max(worst, err)
        if not err <= vc.invariance_tol:
            bad.append(f"seed={s}")
    return Check("ibgl_zero_when_orthogonal", not bad, worst, vc.invariance_tol, "max |coupling|", bad)


# ---------------------------------------------------------------------------
# cost accounting


def check_eval_counts(vc: VerifySection, ecfg: EstimatorConfig, outer_steps: int = 5, k: int = 80) -> Check:
    q = make_quadratic(vc.m, vc.n, seed=0)
    w, t = _state(q, 0)
    p = q.problem(w, t)
    rep_t = tbgl_hypergradient(p, w, t, ecfg).eval_counts.as_dict()
    rep_i = ibgl_hypergradient(p, w, t, ecfg).eval_counts.as_dict()
    problems = []
    if rep_t != {"lf_grad_evals": 2, "lg_grad_evals": 3, "lower_updates": 1}:
        problems.append(f"tbgl_call={rep_t}")
    if rep_i != {"lf_grad_evals": 2, "lg_grad_evals": 2, "lower_updates": 0}:
        problems.append(f"ibgl_call={rep_i}")

    eta = stable_eta(q)
    base = dict(outer_steps=outer_steps, upper_lr_init=eta, upper_lr_final=eta, lower_lr_init=eta,
                lower_lr_final=eta, estimator_cfg=ecfg)
    ct = SolverConfig(estimator="tbgl", **base)
    ci = SolverConfig(estimator="ibgl", k=k, **base)
    st = tbgl_solve(p, init_state(p, ct), ct).counter
    si = ibgl_solve(p, init_state(p, ci), ci).counter
    if st.lower_updates != st.outer_updates or st.lg_grad_evals != 3 * st.outer_updates:
        problems.append(f"tbgl_solve={st.as_dict()}")
    if si.lower_updates != k * si.outer_updates:
        problems.append(f"ibgl_solve={si.as_dict()}")
    ratio = si.lg_grad_evals / st.lg_grad_evals
    if ratio < 20:
        problems.append(f"lg_ratio={ratio:g}")
    return Check("eval_counts", not problems, ratio, 20.0,
                 f"ibgl/tbgl L_G evals over {outer_steps} outer steps, k={k}", problems)


# ---------------------------------------------------------------------------


def run_suite(vc: VerifySection | None = None, ecfg: EstimatorConfig | None = None,
              tbgl: Estimator = tbgl_hypergradient, ibgl: Estimator = ibgl_hypergradient) -> VerifyReport:
    vc = vc or VerifySection()
    ecfg = ecfg or EstimatorConfig()
    delta_rows = delta_sweep(vc, ecfg, tbgl)
    checks = [
        check_autodiff(list(range(20))),
        check_oracle_triangle(vc, ecfg),
        check_tbgl_exact(vc, ecfg, tbgl),
        check_fd_order(vc, delta_rows),
        check_ibgl_parallel(vc, ecfg, ibgl),
        check_ibgl_scale(vc, ecfg, ibgl),
        check_ibgl_orthogonal(vc, ecfg, ibgl),
        check_eval_counts(vc, ecfg),
    ]
    return VerifyReport(checks, delta_rows, k_sweep(vc))
