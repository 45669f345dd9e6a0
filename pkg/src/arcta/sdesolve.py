"""Solver-based machinery: Euler-Maruyama sampling, adaptive Dormand-Prince
4(5) with NFE accounting, continuous adjoint gradients, and the
backprop-through-solver training step used by the neural-ODE baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from .diffengine import Bound, ParamStore, Tape, Var


class StiffnessError(RuntimeError):
    """Step size underflow or step budget exhausted."""


@dataclass
class NfeCounter:
    count: int = 0

    def add(self, n: int = 1) -> None:
        self.count += n


@dataclass(frozen=True)
class Rk45Config:
    rtol: float = 1e-6
    atol: float = 1e-9
    h_init: float = 0.1
    h_min: float = 1e-12
    max_steps: int = 1_000_000
    max_step: float = np.inf

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")


# Dormand-Prince 4(5) with FSAL; last stage row equals the 5th-order weights.
_A = (
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

_SAFETY = 0.9
_FAC_MIN = 0.2
_FAC_MAX = 10.0


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


def _lincomb(terms):
    """sum of coeff*vec over (coeff, vec) pairs, skipping zero coefficients;
    works for Vars and plain arrays alike."""
    acc = None
    for c, v in terms:
        if c == 0.0:
            continue
        t = v * c
        acc = t if acc is None else acc + t
    return acc


def hermite_eval(t, t0, y0, f0, t1, y1, f1):
    """Cubic Hermite interpolant on [t0, t1]; Var-friendly arithmetic."""
    h = t1 - t0
    s = (t - t0) / h
    h00 = 2 * s**3 - 3 * s**2 + 1
    h10 = s**3 - 2 * s**2 + s
    h01 = -2 * s**3 + 3 * s**2
    h11 = s**3 - s**2
    return _lincomb([(h00, y0), (h10 * h, f0), (h01, y1), (h11 * h, f1)])


@dataclass
class Rk45Result:
    ts: np.ndarray
    ys: list
    fs: list
    t_eval: np.ndarray | None = None
    y_eval: list = field(default_factory=list)
    n_accepted: int = 0
    n_rejected: int = 0

    def interp(self, t: float):
        """Dense evaluation anywhere inside the solved span."""
        ts = self.ts
        lo, hi = (ts[0], ts[-1]) if ts[-1] >= ts[0] else (ts[-1], ts[0])
        if not (lo - 1e-12 <= t <= hi + 1e-12):
            raise ValueError(f"interp: t={t} outside solved span [{lo}, {hi}]")
        if ts[-1] >= ts[0]:
            k = int(np.clip(np.searchsorted(ts, t) - 1, 0, len(ts) - 2))
        else:
            k = int(np.clip(np.searchsorted(-ts, -t) - 1, 0, len(ts) - 2))
        return hermite_eval(t, ts[k], self.ys[k], self.fs[k], ts[k + 1], self.ys[k + 1], self.fs[k + 1])


def rk45_solve(field, y0, t_span, cfg: Rk45Config, counter: NfeCounter | None = None, t_eval=None) -> Rk45Result:
    """Adaptive Dormand-Prince integration of dy/dt = field(t, y).

    The local error per step is controlled to atol + rtol*|y| with a PI
    step-size controller (safety 0.9, factor clamp [0.2, 10]).  `field` may
    operate on Vars (taped) or plain arrays; step-size decisions always use
    detached values.  The counter increments once per vector-field call:
    one initial evaluation plus six per attempted step (FSAL credited).
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t0 == t1:
        raise ValueError("rk45_solve: empty time span")
    direction = 1.0 if t1 > t0 else -1.0
    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        if np.any(direction * np.diff(t_eval) < 0):
            raise ValueError("t_eval must be ordered in the integration direction")

    counter = counter if counter is not None else NfeCounter()
    t = t0
    y = y0
    f = field(t, y)
    counter.add(1)

    ts = [t]
    ys = [y]
    fs = [f]
    y_eval: list = []
    eval_ptr = 0

    h = direction * min(abs(cfg.h_init), abs(t1 - t0), cfg.max_step)
    err_prev = 1.0
    n_acc = n_rej = 0

    for _ in range(cfg.max_steps):
        if direction * (t - t1) >= 0:
            break
        if abs(h) < cfg.h_min:
            raise StiffnessError(f"step size underflow at t={t} (|h|={abs(h)})")
        if direction * (t + h - t1) > 0:
            h = t1 - t

        ks = [f]
        for i in range(6):
            yi = y + _lincomb([(a * h, ks[j]) for j, a in enumerate(_A[i])])
            ks.append(field(t + _C[i + 1] * h, yi))
            counter.add(1)
        y_new = yi  # stage 7 input is the 5th-order solution (FSAL)
        f_new = ks[6]

        err_vec = _val(_lincomb([(e * h, k) for e, k in zip(_E, ks)]))
        sc = cfg.atol + cfg.rtol * np.maximum(np.abs(_val(y)), np.abs(_val(y_new)))
        err = float(np.sqrt(np.mean((err_vec / sc) ** 2)))

        if err <= 1.0 or not np.isfinite(err):
            if not np.isfinite(err):
                raise StiffnessError(f"non-finite state at t={t}, step {n_acc + n_rej}")
            n_acc += 1
            t_new = t + h
            if t_eval is not None:
                while eval_ptr < len(t_eval) and direction * (t_eval[eval_ptr] - t_new) <= 1e-12:
                    te = t_eval[eval_ptr]
                    if te == t:
                        y_eval.append(y)
                    elif te == t_new or abs(te - t_new) < 1e-12 * max(1.0, abs(t_new)):
                        y_eval.append(y_new)
                    else:
                        y_eval.append(hermite_eval(te, t, y, f, t_new, y_new, f_new))
                    eval_ptr += 1
            t, y, f = t_new, y_new, f_new
            ts.append(t)
            ys.append(y)
            fs.append(f)
            fac = _SAFETY * err ** (-0.7 / 5.0) * err_prev ** (0.4 / 5.0) if err > 0 else _FAC_MAX
            err_prev = max(err, 1e-10)
        else:
            n_rej += 1
            fac = max(_FAC_MIN, _SAFETY * err ** (-0.2))
        h = direction * min(abs(h) * min(max(fac, _FAC_MIN), _FAC_MAX), cfg.max_step)
    else:
        raise StiffnessError(f"step budget exceeded ({cfg.max_steps} steps) at t={t}")

    if t_eval is not None and eval_ptr < len(t_eval):
        raise StiffnessError("integration ended before all evaluation points were reached")
    return Rk45Result(np.asarray(ts), ys, fs, t_eval, y_eval, n_acc, n_rej)


# ---------------------------------------------------------------------------
# Euler-Maruyama


def euler_maruyama(drift, diffusion, z0: np.ndarray, t_grid: np.ndarray, rng: np.random.Generator, substeps: int = 1) -> np.ndarray:
    """Sample paths of dz = drift(z, t) dt + noise.

    diffusion is either a length-d array of per-dimension variance rates
    (diagonal L Sigma L^T) or a (d, d) matrix G with covariance rate G G^T.
    Returns an array of shape (n_paths, len(t_grid), d) on the given grid,
    stepping `substeps` times between grid points.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=float))
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("euler_maruyama: t_grid must be strictly increasing")
    n_paths, d = z0.shape
    diffusion = np.asarray(diffusion, dtype=float)
    diag = diffusion.ndim <= 1
    sd = np.sqrt(diffusion) if diag else None

    out = np.empty((n_paths, len(t_grid), d))
    out[:, 0] = z = z0.copy()
    for n in range(len(t_grid) - 1):
        dt = (t_grid[n + 1] - t_grid[n]) / substeps
        t = t_grid[n]
        for _ in range(substeps):
            xi = rng.standard_normal((n_paths, d))
            noise = np.sqrt(dt) * (xi * sd if diag else xi @ diffusion.T)
            z = z + drift(z, t) * dt + noise
            t += dt
        if not np.all(np.isfinite(z)):
            raise FloatingPointError(f"euler_maruyama: non-finite state at grid step {n + 1}")
        out[:, n + 1] = z
    return out


# ---------------------------------------------------------------------------
# continuous adjoint gradient


def adjoint_grad(field, jac_y, jac_theta, theta: np.ndarray, t0: float, y0: np.ndarray, t_obs: np.ndarray, dldy, cfg: Rk45Config, counter: NfeCounter | None = None):
    """Gradient of sum_i loss_i(y(t_i)) w.r.t. theta via the adjoint ODE.

    The forward trajectory from (t0, y0) is stored densely and interpolated
    during the backward sweep; adjoint jumps dldy(i, y_i) are injected at
    observation times and the sweep runs all the way back to t0.
    Returns (grad, forward_result).
    """
    t_obs = np.asarray(t_obs, dtype=float)
    counter = counter if counter is not None else NfeCounter()
    fwd = rk45_solve(lambda t, y: field(t, y, theta), y0, (float(t0), float(t_obs[-1])), cfg, counter, t_eval=t_obs)

    n_th = len(np.atleast_1d(theta))
    d = len(y0)
    lam = np.zeros(d)
    grad = np.zeros(n_th)

    def aug_field(t, u):
        y = fwd.interp(t)
        la = u[:d]
        dlam = -jac_y(t, y, theta).T @ la
        dg = -la @ jac_theta(t, y, theta)
        return np.concatenate([dlam, dg])

    def integrate(u, t_hi, t_lo):
        seg_cfg = Rk45Config(cfg.rtol, cfg.atol, h_init=min(cfg.h_init, t_hi - t_lo), h_min=cfg.h_min, max_steps=cfg.max_steps, max_step=cfg.max_step)
        return rk45_solve(aug_field, u, (t_hi, t_lo), seg_cfg, counter).ys[-1]

    for i in range(len(t_obs) - 1, -1, -1):
        lam = lam + dldy(i, fwd.y_eval[i])
        t_next = float(t_obs[i - 1]) if i > 0 else float(t0)
        if t_next == float(t_obs[i]):
            continue
        u = integrate(np.concatenate([lam, grad]), float(t_obs[i]), t_next)
        lam, grad = u[:d], u[d:]
    return grad, fwd


# ---------------------------------------------------------------------------
# neural-ODE baseline: backprop through the solver


def node_train_step(store: ParamStore, drift, t_offsets: np.ndarray, xwin: np.ndarray, cfg: Rk45Config, counter: NfeCounter) -> float:
    """One training step of the NODE baseline on a batch of windows.

    Solves forward on the tape from each window's first observation and
    backpropagates the window MSE through the solver internals.  Gradients
    accumulate into the store; returns the loss value.
    """
    t_offsets = np.asarray(t_offsets, dtype=float)
    if np.any(np.diff(t_offsets) <= 0):
        raise ValueError("node_train_step: window times must be sorted")
    xwin = np.asarray(xwin, dtype=float)
    b_sz, m_len, dim = xwin.shape

    tape = Tape()
    bound = Bound(tape, store)
    y0 = tape.const(xwin[:, 0, :])

    def field(t, y):
        return drift.apply(bound, y, t)

    res = rk45_solve(field, y0, (float(t_offsets[0]), float(t_offsets[-1])), cfg, counter, t_eval=t_offsets)
    rows = de.concat([de.reshape(v, (b_sz, 1, dim)) for v in res.y_eval], axis=1)
    err = de.sub(rows, tape.const(xwin))
    loss = de.scale(de.sum_(de.square(err)), 1.0 / (b_sz * m_len * dim))
    tape.output = loss
    de.backward(tape)
    return float(loss.value)
