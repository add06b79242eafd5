import json

import numpy as np
import pytest

from bgl import tensor as T
from bgl.benchmarks import QuadraticBilevel, make_quadratic
from bgl.bilevel import (
    BilevelProblem,
    ConvergenceError,
    EstimatorConfig,
    EvalCounts,
    NonFiniteError,
    cg_implicit_hypergradient,
    conjugate_gradient,
    ibgl_coupling,
    ibgl_hypergradient,
    lower_step,
    outer_product_coupling,
    tbgl_hypergradient,
    unrolled_hypergradient,
)
from bgl.tensor import ParameterVector, Tensor


def toy_bilevel(seed=0):
    """Conv feature extractor (omega) feeding a ridge-regularized linear head (theta)."""
    rng = np.random.default_rng(seed)
    x_tr, x_val = Tensor(rng.normal(size=(3, 1, 5, 5))), Tensor(rng.normal(size=(3, 1, 5, 5)))
    y_tr, y_val = Tensor(rng.normal(size=(3, 1))), Tensor(rng.normal(size=(3, 1)))
    omega = ParameterVector([("k", Tensor(rng.normal(0, 0.5, size=(2, 1, 3, 3))))])
    theta = ParameterVector([("w", Tensor(rng.normal(0, 0.5, size=(18, 1))))])

    def head(w, t, x):
        h = T.sigmoid(T.conv2d(x, w["k"], stride=2, padding=1))
        return T.matmul(h.reshape(3, 18), t["w"])

    def lower(w, t, batch):
        r = head(w, t, x_tr) - y_tr
        return T.reduce_mean(r * r) + T.reduce_sum(t["w"] * t["w"]) * 0.05

    def upper(w, t, batch):
        r = head(w, t, x_val) - y_val
        return T.reduce_mean(r * r)

    return BilevelProblem(upper, lower, omega, theta, name="toy")


# -- lower_step -------------------------------------------------------------------


def test_lower_step_examples():
    q = make_quadratic(3, 4, seed=1)
    p = q.problem()
    w = np.array([0.3, -0.2, 0.5])
    ts = q.lower_minimizer(w)
    np.testing.assert_allclose(lower_step(p, w, ts, 0.1), ts, atol=1e-14)
    t = np.random.default_rng(0).normal(size=4)
    np.testing.assert_allclose(lower_step(p, w, t, 0.1), t - 0.1 * (q.A @ t - q.B.T @ w), atol=1e-14)
    np.testing.assert_array_equal(lower_step(p, w, t, 0.0), t)
    c = EvalCounts()
    lower_step(p, w, t, 0.1, c)
    assert c.as_dict() == {"lf_grad_evals": 0, "lg_grad_evals": 1, "lower_updates": 1}
    with pytest.raises(ValueError):
        lower_step(p, w, t, -1.0)


# -- TBGL -------------------------------------------------------------------------


def _fixed_v_problem():
    """A = I, B = [[1,2],[3,4]], theta = 0 stationary at omega = 0, so v = theta' - target = (1, 0)."""
    q = QuadraticBilevel(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([-1.0, 0.0]))
    return q, q.problem()


@pytest.mark.parametrize("fd_scale", [1e-1, 1e-3, 1.0])
def test_tbgl_constant_mixed_partial(fd_scale):
    q, p = _fixed_v_problem()
    eta = 0.2
    rep = tbgl_hypergradient(p, np.zeros(2), np.zeros(2), EstimatorConfig(eta=eta, fd_scale=fd_scale))
    # FD of grad_w L_G along v is exactly -B v = (-1, -3); coupling = -eta * that
    np.testing.assert_allclose(rep.coupling_term, eta * np.array([1.0, 3.0]), rtol=0, atol=1e-14)
    np.testing.assert_array_equal(rep.direct_term, np.zeros(2))
    np.testing.assert_allclose(rep.total, q.one_step_hypergradient(np.zeros(2), np.zeros(2), eta), atol=1e-14)


def test_tbgl_zero_direction():
    q = QuadraticBilevel(np.eye(2), np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2), lam=0.5)
    # omega = 0 keeps theta = 0 stationary and theta' equals the target, so v = 0
    p, w0, t = q.problem(), np.zeros(2), np.zeros(2)
    rep = tbgl_hypergradient(p, w0, t, EstimatorConfig())
    assert "zero_direction" in rep.flags
    np.testing.assert_array_equal(rep.coupling_term, np.zeros(2))
    np.testing.assert_array_equal(rep.total, rep.direct_term)
    assert rep.eval_counts.as_dict() == {"lf_grad_evals": 2, "lg_grad_evals": 1, "lower_updates": 1}


def test_tbgl_counts_and_report():
    q = make_quadratic(3, 3, seed=0)
    rep = tbgl_hypergradient(q.problem(), np.ones(3), np.zeros(3), EstimatorConfig())
    assert rep.eval_counts.as_dict() == {"lf_grad_evals": 2, "lg_grad_evals": 3, "lower_updates": 1}
    body = json.loads(rep.dumps())
    assert body["flags"] == [] and body["eval_counts"]["lg_grad_evals"] == 3
    assert rep.theta_next is not None


@pytest.mark.parametrize("seed", range(3))
def test_tbgl_matches_brute_force_fd(seed):
    p = toy_bilevel(seed)
    w, t = p.omega0, p.theta0
    eta = 0.1

    def composite(ww):
        _, g = p.lower_grads(ww, t, ("theta",))
        return p.upper_value(ww, t - eta * g["theta"])

    h = 1e-5
    fd = np.array([(composite(w + h * e) - composite(w - h * e)) / (2 * h) for e in np.eye(w.size)])
    rep = tbgl_hypergradient(p, w, t, EstimatorConfig(eta=eta, fd_scale=1e-4))
    err = np.linalg.norm(rep.total - fd) / np.linalg.norm(fd)
    assert err < 1e-4


# -- IBGL -------------------------------------------------------------------------


def test_outer_product_scalar_example():
    c, degenerate = outer_product_coupling(np.array([2.0]), np.array([4.0]), np.array([6.0]), 1e-12)
    assert not degenerate
    assert c[0] == -3.0


def test_outer_product_orthogonal_and_degenerate():
    c, _ = outer_product_coupling(np.array([1.0, 0.0]), np.array([0.0, 2.0]), np.array([5.0, 1.0, 2.0]), 1e-12)
    np.testing.assert_array_equal(c, np.zeros(3))
    c, degenerate = outer_product_coupling(np.array([1.0]), np.array([1e-9]), np.array([3.0]), 1e-12)
    assert degenerate and c[0] == 0.0


def test_ibgl_degenerate_at_lower_optimum():
    q = make_quadratic(3, 3, seed=2)
    w = np.array([0.5, 0.1, -0.3])
    rep = ibgl_hypergradient(q.problem(), w, q.lower_minimizer(w), EstimatorConfig())
    assert rep.flags == ["degenerate_lower_gradient"]
    np.testing.assert_array_equal(rep.total, rep.direct_term)


def test_ibgl_coupling_parallel_to_lower_omega_grad():
    p = toy_bilevel(1)
    w, t = p.omega0, p.theta0
    rep = ibgl_hypergradient(p, w, t, EstimatorConfig())
    _, lg = p.lower_grads(w, t, ("omega",))
    d, g = rep.total - rep.direct_term, lg["omega"]
    cos = d @ g / (np.linalg.norm(d) * np.linalg.norm(g))
    assert abs(cos) >= 1 - 1e-10
    assert rep.eval_counts.as_dict() == {"lf_grad_evals": 2, "lg_grad_evals": 2, "lower_updates": 0}


def test_ibgl_scale_invariance():
    p = toy_bilevel(2)
    w, t = p.omega0, p.theta0
    base, _ = ibgl_coupling(p, w, t, EstimatorConfig())
    scaled, _ = ibgl_coupling(p.scaled_lower(7.0), w, t, EstimatorConfig())
    assert np.max(np.abs(scaled - base)) <= 1e-12 * max(1.0, np.max(np.abs(base)))


def test_ibgl_f_batch_option():
    q = make_quadratic(2, 2, seed=0)
    w, t = np.ones(2), np.zeros(2)
    a = ibgl_hypergradient(q.problem(), w, t, EstimatorConfig(ibgl_f_batch="upper"))
    b = ibgl_hypergradient(q.problem(), w, t, EstimatorConfig(ibgl_f_batch="lower"))
    # the benchmark ignores batches, so both readings agree
    np.testing.assert_array_equal(a.total, b.total)
    assert b.eval_counts.lf_grad_evals == 2
    with pytest.raises(ValueError):
        EstimatorConfig(ibgl_f_batch="test")


def test_estimator_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(eta=0.0)
    with pytest.raises(ValueError):
        EstimatorConfig(fd_scale=-1.0)


# -- oracles ----------------------------------------------------------------------


def test_unrolled_k0_is_direct_gradient():
    q = make_quadratic(3, 3, seed=0, lam=0.7)
    w, t0 = np.array([1.0, 2.0, -1.0]), np.ones(3)
    g = unrolled_hypergradient(q.problem(), w, t0, 0.1, 0)
    np.testing.assert_allclose(g, 0.7 * w, atol=1e-9)


def test_unrolled_k1_matches_one_step_formula():
    q = make_quadratic(4, 4, seed=3, lam=0.2)
    p = q.problem()
    w, t = np.random.default_rng(0).normal(size=(2, 4))
    eta = 0.1
    exact = q.one_step_hypergradient(w, t, eta)
    np.testing.assert_allclose(unrolled_hypergradient(p, w, t, eta, 1), exact, atol=1e-8)
    np.testing.assert_allclose(tbgl_hypergradient(p, w, t, EstimatorConfig(eta=eta)).total, exact, atol=1e-8)


def test_unrolled_k200_matches_analytic():
    q = make_quadratic(5, 5, seed=1, lam=0.1)
    w = np.random.default_rng(1).normal(size=5)
    eta = 1.0 / q.eigen_bounds()[1]
    g = unrolled_hypergradient(q.problem(), w, np.zeros(5), eta, 200)
    exact = q.analytic_hypergradient(w)
    assert np.linalg.norm(g - exact) / np.linalg.norm(exact) < 1e-6


def test_unrolled_budget():
    q = make_quadratic(2, 2)
    with pytest.raises(ValueError):
        unrolled_hypergradient(q.problem(), np.zeros(2), np.zeros(2), 0.1, -1)
    with pytest.raises(ValueError):
        unrolled_hypergradient(q.problem(), np.zeros(2), np.zeros(2), 0.1, 20_000)


def test_cg_matches_analytic():
    q = make_quadratic(5, 5, seed=4, lam=0.3)
    w = np.random.default_rng(4).normal(size=5)
    g = cg_implicit_hypergradient(q.problem(), w, q.lower_minimizer(w), EstimatorConfig())
    exact = q.analytic_hypergradient(w)
    assert np.linalg.norm(g - exact) / np.linalg.norm(exact) < 1e-6


def test_cg_zero_upper_theta_gradient():
    q = make_quadratic(3, 3, seed=0, lam=0.4)
    w = np.array([0.2, 0.1, 0.0])
    ts = q.lower_minimizer(w)
    q2 = QuadraticBilevel(q.A, q.B, ts, q.lam)
    g = cg_implicit_hypergradient(q2.problem(), w, ts, EstimatorConfig())
    np.testing.assert_allclose(g, 0.4 * w, atol=1e-12)


def test_cg_identity_hessian():
    B = np.array([[1.0, 2.0], [0.5, -1.0]])
    q = QuadraticBilevel(np.eye(2), B, np.array([0.3, -0.4]))
    w = np.array([0.2, 0.7])
    ts = q.lower_minimizer(w)
    g = cg_implicit_hypergradient(q.problem(), w, ts, EstimatorConfig())
    np.testing.assert_allclose(g, B @ (ts - q.target), atol=1e-9)


def test_conjugate_gradient_convergence_error():
    A = np.diag(np.linspace(1, 1e4, 50))
    with pytest.raises(ConvergenceError) as err:
        conjugate_gradient(lambda p: A @ p, np.ones(50), 1e-14, 3)
    assert err.value.residual > 0
    with pytest.raises(ConvergenceError):
        conjugate_gradient(lambda p: -p, np.ones(3), 1e-10, 10)
    x, _ = conjugate_gradient(lambda p: A @ p, np.ones(50), 1e-12, 200)
    np.testing.assert_allclose(A @ x, np.ones(50), atol=1e-9)


def test_non_finite_loss_raises():
    p = toy_bilevel(0)
    with pytest.raises(NonFiniteError):
        p.upper_value(np.full_like(p.omega0, np.nan), p.theta0)
