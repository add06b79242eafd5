"""Analytic bilevel test problems with closed-form answers.

``QuadraticBilevel``::

    L_G(w, t) = 1/2 t'At - w'Bt            (A SPD, n x n;  B m x n)
    L_F(w, t) = 1/2 |t - target|^2 + lam/2 |w|^2

so ``theta*(w) = A^-1 B'w`` and the hypergradient is
``lam w + B A^-1 (theta*(w) - target)``.

``CubicLowerBilevel`` adds ``gamma * sum_i (B'w)_i t_i^3`` to ``L_G``.  The
term couples the two levels, so ``grad_w L_G`` is cubic in ``t`` and a
central difference of it carries an ``O(delta^2)`` error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .bilevel import BilevelProblem
from .tensorio import read_tensor, write_tensor
from .tensor import ParameterVector, Tensor


@dataclass(frozen=True)
class QuadraticBilevel:
    A: np.ndarray
    B: np.ndarray
    target: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B.shape[1] != n or self.target.shape != (n,):
            raise ValueError("inconsistent benchmark dimensions")
        if not np.allclose(self.A, self.A.T, atol=0, rtol=0):
            raise ValueError("A must be symmetric")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[0]

    # -- losses as tensor programs -------------------------------------------------

    def _lower(self, w: ParameterVector, t: ParameterVector, batch=None) -> Tensor:
        th = t["theta"].reshape(self.n, 1)
        om = w["omega"].reshape(1, self.m)
        quad = T.matmul(th.reshape(1, self.n), T.matmul(Tensor(self.A), th))
        cross = T.matmul(om, T.matmul(Tensor(self.B), th))
        return (quad * 0.5 - cross).reshape(())

    def _upper(self, w: ParameterVector, t: ParameterVector, batch=None) -> Tensor:
        diff = t["theta"] - Tensor(self.target)
        loss = T.reduce_sum(diff * diff) * 0.5
        if self.lam:
            loss = loss + T.reduce_sum(w["omega"] * w["omega"]) * (0.5 * self.lam)
        return loss

    def problem(self, omega0=None, theta0=None) -> BilevelProblem:
        omega0 = np.zeros(self.m) if omega0 is None else np.asarray(omega0, dtype=float)
        theta0 = np.zeros(self.n) if theta0 is None else np.asarray(theta0, dtype=float)
        return BilevelProblem(
            upper_loss=self._upper,
            lower_loss=self._lower,
            omega=ParameterVector({"omega": Tensor(omega0)}),
            theta=ParameterVector({"theta": Tensor(theta0)}),
            name=type(self).__name__,
        )

    # -- closed forms ----------------------------------------------------------------

    def lower_grad_theta(self, w, t) -> np.ndarray:
        return self.A @ t - self.B.T @ w

    def lower_grad_omega(self, w, t) -> np.ndarray:
        return -self.B @ t

    def upper_grad_theta(self, w, t) -> np.ndarray:
        return t - self.target

    def upper_grad_omega(self, w, t) -> np.ndarray:
        return self.lam * w

    def mixed_product(self, w, t, v) -> np.ndarray:
        """``(d2 L_G / dw dt) @ v``."""
        return -self.B @ v

    def one_step_hypergradient(self, w, t, eta: float) -> np.ndarray:
        """Exact derivative of ``L_F(w, t - eta grad_t L_G(w, t))`` w.r.t. w."""
        t1 = t - eta * self.lower_grad_theta(w, t)
        return self.upper_grad_omega(w, t1) - eta * self.mixed_product(w, t, self.upper_grad_theta(w, t1))

    def lower_minimizer(self, w) -> np.ndarray:
        return np.linalg.solve(self.A, self.B.T @ np.asarray(w, dtype=float))

    def analytic_hypergradient(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        return self.lam * w + self.B @ np.linalg.solve(self.A, self.lower_minimizer(w) - self.target)

    def upper_minimizer(self) -> np.ndarray:
        """Minimizer of ``L_F(w, theta*(w))``; the objective is a convex quadratic in w."""
        J = np.linalg.solve(self.A, self.B.T)  # d theta* / d w, n x m
        H = J.T @ J + self.lam * np.eye(self.m)
        return np.linalg.solve(H, J.T @ self.target)

    def eigen_bounds(self) -> tuple[float, float]:
        ev = np.linalg.eigvalsh(self.A)
        return float(ev[0]), float(ev[-1])

    # -- persistence -------------------------------------------------------------------

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("A", "B", "target"):
            write_tensor(directory / f"{name}.bglt", getattr(self, name))
        manifest = {"kind": type(self).__name__, "lam": self.lam, "m": self.m, "n": self.n}
        manifest.update(self._extra_manifest())
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return directory

    def _extra_manifest(self) -> dict:
        return {}

    @staticmethod
    def load(directory) -> "QuadraticBilevel":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        A = read_tensor(directory / "A.bglt")
        A = 0.5 * (A + A.T)
        B = read_tensor(directory / "B.bglt")
        target = read_tensor(directory / "target.bglt")
        if manifest["kind"] == "CubicLowerBilevel":
            return CubicLowerBilevel(A, B, target, manifest["lam"], manifest["gamma"])
        return QuadraticBilevel(A, B, target, manifest["lam"])


@dataclass(frozen=True)
class CubicLowerBilevel(QuadraticBilevel):
    gamma: float = 0.5

    def _lower(self, w, t, batch=None) -> Tensor:
        base = super()._lower(w, t, batch)
        s = T.matmul(w["omega"].reshape(1, self.m), Tensor(self.B)).reshape(self.n)
        th = t["theta"]
        return base + T.reduce_sum(s * th * th * th) * self.gamma

    def lower_grad_theta(self, w, t) -> np.ndarray:
        return super().lower_grad_theta(w, t) + 3 * self.gamma * (self.B.T @ w) * t ** 2

    def lower_grad_omega(self, w, t) -> np.ndarray:
        return super().lower_grad_omega(w, t) + self.gamma * self.B @ (t ** 3)

    def mixed_product(self, w, t, v) -> np.ndarray:
        return -self.B @ v + 3 * self.gamma * self.B @ (t ** 2 * v)

    def _extra_manifest(self) -> dict:
        return {"gamma": self.gamma}


def make_quadratic(m: int = 5, n: int = 5, seed: int = 0, lam: float = 0.0,
                   factor: np.ndarray | None = None) -> QuadraticBilevel:
    """Random instance with ``A = M'M + I`` (always SPD).

    ``factor`` overrides the random ``M``; ``B`` and the target stay random.
    """
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    rng = np.random.default_rng(seed)
    M = rng.uniform(-1, 1, size=(n, n))
    B = rng.uniform(-1, 1, size=(m, n))
    target = rng.uniform(-1, 1, size=n)
    if factor is not None:
        M = np.asarray(factor, dtype=float).reshape(n, n)
    A = M.T @ M + np.eye(n)
    A = 0.5 * (A + A.T)
    return QuadraticBilevel(A, B, target, lam)


def make_cubic(m: int = 5, n: int = 5, seed: int = 0, lam: float = 0.0, gamma: float = 0.5) -> CubicLowerBilevel:
    q = make_quadratic(m, n, seed, lam)
    return CubicLowerBilevel(q.A, q.B, q.target, q.lam, gamma)
