"""Shared test oracles."""

import numpy as np

from bgl import tensor as T


def resolvable_grad_check(f, point, h=1e-5, tol=1e-5):
    """Per-coordinate relative error where central differences can resolve ``tol``, plus the norm-wise error.

    The FD roundoff is about ``eps * |f| / h``; coordinates whose gradient is
    below ``roundoff / tol`` cannot be checked to ``tol`` by the oracle itself.
    """
    base = point.flatten()
    leaves = point.unflatten(base, requires_grad=True)
    value = f(leaves)
    T.backward(value)
    ad = leaves.grad_vector()
    fd = np.empty_like(base)
    for i in range(base.size):
        e = np.zeros_like(base)
        e[i] = h
        fd[i] = (f(point.unflatten(base + e)).item() - f(point.unflatten(base - e)).item()) / (2 * h)
    roundoff = 4 * np.finfo(float).eps * abs(value.item()) / h
    rel = np.abs(ad - fd) / (np.abs(ad) + np.abs(fd) + 1e-12)
    keep = np.abs(fd) > roundoff / tol
    return float(rel[keep].max()), float(np.linalg.norm(ad - fd) / np.linalg.norm(fd)), keep.mean()
