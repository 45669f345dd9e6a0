"""Markov Gaussian process machinery: posterior moments, the feedback
matrix implied by a covariance trajectory, the residual entering the
training objective, and the linear-SDE oracle used to validate the fast
diagonal path against the general Kronecker-sum solve."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Var
from .rng import stream
from .sdesolve import Rk45Config, euler_maruyama, rk45_solve


@dataclass
class PosteriorMoments:
    """Mean, diagonal covariance, and their time derivatives at query times.
    Fields hold arrays during analysis and tape Vars during training."""

    m: object
    S: object
    dm: object | None = None
    dS: object | None = None


def _square(x):
    return de.square(x) if isinstance(x, Var) else np.square(x)


def _sqrt(x):
    return de.sqrt(x) if isinstance(x, Var) else np.sqrt(x)


def _sum_last(x):
    return de.sum_(x, axis=-1) if isinstance(x, Var) else np.sum(x, axis=-1)


def b_matrix_diag(S, dS, c_inv):
    """Diagonal feedback matrix 0.5 * (c_inv - dS) / S."""
    return (c_inv - dS) / S * 0.5


def b_matrix_full(S: np.ndarray, dS: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve B S + S B^T = q - dS through the Kronecker-sum linear system.

    vec stacks columns; the solve returns the symmetric solution whenever
    q - dS is symmetric, matching the diagonal fast path on diagonal input.
    """
    S = np.asarray(S, dtype=float)
    d = S.shape[0]
    ks = np.kron(np.eye(d), S) + np.kron(S, np.eye(d))
    rhs = (q - dS).ravel(order="F")
    try:
        x = np.linalg.solve(ks, rhs)
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"singular Kronecker sum S (+) S: {e}") from e
    return x.reshape(d, d, order="F")


def residual(f_val, moments: PosteriorMoments, z, c_inv):
    """r = B(t)(m - z) + dm - f(z, t) and its squared norm weighted by
    C = diag(1/c_inv), i.e. sum_j r_j^2 / c_inv_j over the last axis."""
    b = b_matrix_diag(moments.S, moments.dS, c_inv)
    r = b * (moments.m - z) + moments.dm - f_val
    wsq = _sum_last(_square(r) / c_inv)
    return r, wsq


def reparam_T(moments: PosteriorMoments, eps):
    """z = m + sqrt(S) * eps with eps ~ N(0, I)."""
    return moments.m + _sqrt(moments.S) * eps


def ou_moments_analytic(a: float, sig2: float, m0: float, s0: float, t):
    """Closed-form moments of dz = -a z dt + sig dbeta."""
    if a <= 0:
        raise ValueError("ou_moments_analytic: a must be positive")
    t = np.asarray(t, dtype=float)
    s_inf = sig2 / (2.0 * a)
    return m0 * np.exp(-a * t), s_inf + (s0 - s_inf) * np.exp(-2.0 * a * t)


# ---------------------------------------------------------------------------
# linear-SDE oracle


@dataclass
class LinearSdeOracle:
    """dz = (-A z + b) dt + L dbeta with Brownian diffusion matrix Sigma."""

    A: np.ndarray
    b: np.ndarray
    L: np.ndarray
    Sigma: np.ndarray
    m0: np.ndarray
    S0: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.A, dtype=float)
        if not np.allclose(a, a.T):
            raise ValueError("LinearSdeOracle: A must be symmetric")
        s0 = np.asarray(self.S0, dtype=float)
        if not np.allclose(s0, s0.T) or np.any(np.linalg.eigvalsh(s0) <= 0):
            raise ValueError("LinearSdeOracle: S0 must be symmetric positive definite")

    @property
    def dim(self) -> int:
        return len(self.b)

    @property
    def lsl(self) -> np.ndarray:
        return self.L @ self.Sigma @ self.L.T

    def moment_rhs(self, m: np.ndarray, S: np.ndarray):
        dm = -self.A @ m + self.b
        dS = -self.A @ S - S @ self.A.T + self.lsl
        return dm, dS

    def moments(self, t: float, rtol: float = 1e-10, atol: float = 1e-12):
        """Integrate the moment ODEs to time t."""
        d = self.dim

        def field(_t, u):
            m, S = u[:d], u[d:].reshape(d, d)
            dm, dS = self.moment_rhs(m, S)
            return np.concatenate([dm, dS.ravel()])

        u0 = np.concatenate([self.m0, self.S0.ravel()])
        if t == 0.0:
            return self.m0.copy(), self.S0.copy()
        res = rk45_solve(field, u0, (0.0, t), Rk45Config(rtol=rtol, atol=atol, h_init=min(0.01, t)))
        u = res.ys[-1]
        return u[:d], u[d:].reshape(d, d)

    def sample_marginal(self, t: float, n: int, rng: np.random.Generator, dt: float = 1e-3) -> np.ndarray:
        """Euler-Maruyama simulation of the SDE marginal at time t."""
        n_steps = max(1, int(round(t / dt)))
        grid = np.linspace(0.0, t, n_steps + 1)
        z0 = rng.multivariate_normal(self.m0, self.S0, size=n)
        g = self.L @ np.linalg.cholesky(self.Sigma)
        paths = euler_maruyama(lambda z, _t: -z @ self.A.T + self.b, g, z0, grid, rng)
        return paths[:, -1, :]


def expectation_identity_check(oracle: LinearSdeOracle, functional, t: float, n_samples: int = 100_000, seed: int = 0, dt: float = 1e-3):
    """Monte Carlo check of the bounded-functional expectation identity.

    lhs averages functional(A, b, z) under the simulated SDE marginal at t;
    rhs averages functional(B(t), dm + B m, z) under N(m(t), S(t)) with B
    from the Kronecker-sum solve.  The functional receives z as an (n, d)
    batch and returns (n,) or (n, k).  Returns (lhs, rhs, combined_se),
    componentwise for vector-valued functionals.
    """
    rng_l = stream(seed, "oracle", index=0)
    z_sde = oracle.sample_marginal(t, n_samples, rng_l, dt=dt)
    vals_l = np.asarray(functional(oracle.A, oracle.b, z_sde), dtype=float)

    m, S = oracle.moments(t)
    dm, dS = oracle.moment_rhs(m, S)
    bmat = b_matrix_full(S, dS, oracle.lsl)
    bvec = dm + bmat @ m
    rng_r = stream(seed, "oracle", index=1)
    z_gauss = rng_r.multivariate_normal(m, S, size=n_samples)
    vals_r = np.asarray(functional(bmat, bvec, z_gauss), dtype=float)

    lhs = vals_l.mean(axis=0)
    rhs = vals_r.mean(axis=0)
    se = np.sqrt(vals_l.var(axis=0, ddof=1) / n_samples + vals_r.var(axis=0, ddof=1) / n_samples)
    return lhs, rhs, se
