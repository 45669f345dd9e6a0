"""Independent numerical oracles shared by the test suite: finite
differences, Gauss-Hermite expectation rules, and small brute-force
integrators.  These deliberately avoid the library's tape machinery."""

from __future__ import annotations

import numpy as np

from arcta.diffengine import ParamStore, forward


def fd_grad(loss_fn, store: ParamStore, *inputs, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar loss over every parameter."""
    flat = store.flat_values()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        fp = flat.copy()
        fp[i] += h
        store.load_flat(fp)
        vp, _ = forward(loss_fn, store, *inputs)
        fm = flat.copy()
        fm[i] -= h
        store.load_flat(fm)
        vm, _ = forward(loss_fn, store, *inputs)
        g[i] = (vp - vm) / (2.0 * h)
    store.load_flat(flat)
    return g


def ad_grad(loss_fn, store: ParamStore, *inputs) -> np.ndarray:
    from arcta.diffengine import backward

    store.zero_grads()
    _, tape = forward(loss_fn, store, *inputs)
    backward(tape)
    return store.flat_grads()


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / (np.maximum(np.abs(a), np.abs(b)) + floor)))


def gauss_hermite_points(n: int):
    """Nodes/weights for E[f(Z)], Z ~ N(0,1)."""
    x, w = np.polynomial.hermite.hermgauss(n)
    return np.sqrt(2.0) * x, w / np.sqrt(np.pi)


def expect_gh(fn, n: int = 64):
    """E[fn(z)] under z ~ N(0,1) by Gauss-Hermite quadrature."""
    z, w = gauss_hermite_points(n)
    return float(np.sum(w * np.asarray([fn(zi) for zi in z])))
