"""Synthetic benchmark datasets, observation-noise injection, and CSV
serialization.  Ground-truth latent paths are kept separate from the noisy
observations so validation RMSE can be computed against noiseless truth."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .models import lorenz_field
from .rng import stream
from .sdesolve import Rk45Config, euler_maruyama, rk45_solve


@dataclass
class TimeSeriesDataset:
    times: np.ndarray
    obs: np.ndarray
    noise_sd: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.obs = np.asarray(self.obs, dtype=float)
        self.noise_sd = np.atleast_1d(np.asarray(self.noise_sd, dtype=float))
        if self.times.ndim != 1 or self.obs.ndim != 2 or len(self.times) != len(self.obs):
            raise ValueError("TimeSeriesDataset: times (N,) and obs (N, D) required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("TimeSeriesDataset: times must be strictly increasing")
        if np.any(~np.isfinite(self.obs)):
            raise ValueError("TimeSeriesDataset: observations contain non-finite values")

    @property
    def dim(self) -> int:
        return self.obs.shape[1]

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class GeneratedData:
    train: TimeSeriesDataset
    val: TimeSeriesDataset
    train_truth: np.ndarray
    val_truth: np.ndarray
    meta: dict = field(default_factory=dict)


def _split(times, truth, obs, noise_sd, t_split, meta):
    tr = times <= t_split
    va = ~tr
    train = TimeSeriesDataset(times[tr], obs[tr], noise_sd)
    val = TimeSeriesDataset(times[va], obs[va], noise_sd)
    return GeneratedData(train, val, truth[tr], truth[va], meta)


def lv_field(z: np.ndarray, alpha: float, beta: float, delta: float, gamma: float) -> np.ndarray:
    x, y = z[..., 0], z[..., 1]
    return np.stack([alpha * x - beta * x * y, delta * x * y - gamma * y], axis=-1)


def lv_invariant(z: np.ndarray, alpha: float, beta: float, delta: float, gamma: float) -> np.ndarray:
    """delta*x - gamma*ln x + beta*y - alpha*ln y, conserved by the noiseless flow."""
    x, y = z[..., 0], z[..., 1]
    return delta * x - gamma * np.log(x) + beta * y - alpha * np.log(y)


def gen_lotka_volterra(
    seed: int,
    rate: float = 50.0,
    t_train: float = 50.0,
    t_end: float = 65.0,
    noise_sd: float = 0.01,
    diffusion: tuple[float, float] = (1e-3, 1e-3),
    dt: float = 1e-4,
    params: tuple[float, float, float, float] = (2 / 3, 4 / 3, 1.0, 1.0),
    x0: tuple[float, float] = (0.9, 0.2),
) -> GeneratedData:
    """Predator-prey SDE path sampled on a uniform grid plus iid Gaussian
    observation noise; the SDE is integrated by Euler-Maruyama at step dt."""
    alpha, beta, delta, gamma = params
    n = int(round(t_end * rate))
    grid = np.arange(n + 1) / rate
    substeps = max(1, int(round((1.0 / rate) / dt)))
    rng = stream(seed, "datagen", index=0)
    path = euler_maruyama(
        lambda z, t: lv_field(z, alpha, beta, delta, gamma),
        np.asarray(diffusion, dtype=float),
        np.asarray(x0, dtype=float),
        grid,
        rng,
        substeps=substeps,
    )[0]
    obs = path + noise_sd * stream(seed, "datagen", index=1).standard_normal(path.shape)
    meta = {
        "system": "lotka_volterra",
        "seed": seed,
        "rate_hz": rate,
        "noise_sd": noise_sd,
        "diffusion": list(diffusion),
        "params": {"alpha": alpha, "beta": beta, "delta": delta, "gamma": gamma},
        "x0": list(x0),
        "dt": dt,
    }
    return _split(grid, path, obs, np.full(2, noise_sd), t_train, meta)


def gen_lorenz(
    t_horizon: float,
    seed: int,
    rate: float = 200.0,
    noise_sd: float = 1.0,
    theta: tuple[float, float, float] = (10.0, 28.0, 8 / 3),
    x0: tuple[float, float, float] = (8.0, -2.0, 36.05),
    rtol: float = 1e-6,
    atol: float = 1e-8,
) -> GeneratedData:
    """Chaotic benchmark trajectory at 200 Hz with unit-variance noise;
    theta is ordered (sigma, rho, beta).  The full window is returned as the
    training split and the validation split is empty."""
    sig, rho, beta = theta
    n = int(round(t_horizon * rate))
    grid = np.arange(1, n + 1) / rate
    res = rk45_solve(
        lambda t, y: lorenz_field(y, sig, rho, beta),
        np.asarray(x0, dtype=float),
        (0.0, float(grid[-1])),
        Rk45Config(rtol=rtol, atol=atol, h_init=1e-3),
        t_eval=grid,
    )
    truth = np.asarray(res.y_eval)
    obs = truth + noise_sd * stream(seed, "datagen", index=2).standard_normal(truth.shape)
    meta = {
        "system": "lorenz",
        "seed": seed,
        "rate_hz": rate,
        "noise_sd": noise_sd,
        "theta": list(theta),
        "x0": list(x0),
        "t_horizon": t_horizon,
        "rtol": rtol,
        "atol": atol,
    }
    train = TimeSeriesDataset(grid, obs, np.full(3, noise_sd))
    val = TimeSeriesDataset(np.zeros(0), np.zeros((0, 3)), np.full(3, noise_sd))
    return GeneratedData(train, val, truth, truth[:0], meta)


# Bounded-oscillation defaults for the two-predator/two-prey system; these
# numeric values are artifact defaults, not published ones.
PREDPREY4_PARAMS = {
    "alpha": (0.9, 1.1),
    "beta": (1.2, 0.1),
    "gamma": (0.1, 1.3),
    "k": (10.0, 12.0),
    "delta": (0.7, 0.8),
    "eps": (0.6, 0.05),
    "xi": (0.05, 0.65),
    "nu": (0.03, 0.02),
}
PREDPREY4_X0 = (1.5, 1.2, 0.5, 0.7)


def predprey4_field(z: np.ndarray, p: dict = PREDPREY4_PARAMS) -> np.ndarray:
    x1, x2, y1, y2 = z[..., 0], z[..., 1], z[..., 2], z[..., 3]
    a, b, g, k = p["alpha"], p["beta"], p["gamma"], p["k"]
    d, e, xi, nu = p["delta"], p["eps"], p["xi"], p["nu"]
    return np.stack(
        [
            x1 * (a[0] - b[0] * y1 - g[0] * y2) * (1.0 - x1 / k[0]),
            x2 * (a[1] - b[1] * y1 - g[1] * y2) * (1.0 - x2 / k[1]),
            y1 * (-d[0] + e[0] * x1 + xi[0] * x2 - nu[0] * y2),
            y2 * (-d[1] + e[1] * x1 + xi[1] * x2 + nu[1] * y1),
        ],
        axis=-1,
    )


def gen_predprey4(
    seed: int,
    t_end: float = 300.0,
    rate: float = 10.0,
    noise_sd: float = 1e-2,
    t_train: float | None = None,
    x0=PREDPREY4_X0,
    params: dict = PREDPREY4_PARAMS,
) -> GeneratedData:
    """Four-dimensional predator-prey trajectory at 10 Hz plus noise."""
    n = int(round(t_end * rate))
    grid = np.arange(1, n + 1) / rate
    res = rk45_solve(
        lambda t, y: predprey4_field(y, params),
        np.asarray(x0, dtype=float),
        (0.0, float(grid[-1])),
        Rk45Config(rtol=1e-8, atol=1e-10, h_init=1e-2),
        t_eval=grid,
    )
    truth = np.asarray(res.y_eval)
    obs = truth + noise_sd * stream(seed, "datagen", index=3).standard_normal(truth.shape)
    t_train = 0.9 * t_end if t_train is None else t_train
    meta = {
        "system": "predprey4",
        "seed": seed,
        "rate_hz": rate,
        "noise_sd": noise_sd,
        "params": {k: list(v) for k, v in params.items()},
        "x0": list(x0),
        "t_end": t_end,
        "note": "parameter values are artifact defaults, not published ones",
    }
    return _split(grid, truth, obs, np.full(4, noise_sd), t_train, meta)


GENERATORS = {
    "lv": gen_lotka_volterra,
    "lorenz": gen_lorenz,
    "predprey4": gen_predprey4,
}


# ---------------------------------------------------------------------------
# CSV serialization: header t,x1..xD; 17 significant digits round-trips
# float64 exactly.


class CsvFormatError(ValueError):
    pass


def write_csv(path: str, times: np.ndarray, values: np.ndarray) -> None:
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    d = values.shape[1]
    with open(path, "w", newline="") as f:
        f.write("t," + ",".join(f"x{j + 1}" for j in range(d)) + "\n")
        for t, row in zip(times, values):
            f.write(f"{t:.17g}," + ",".join(f"{v:.17g}" for v in row) + "\n")


def read_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise CsvFormatError(f"{path}: empty file")
    header = lines[0].split(",")
    if header[0] != "t" or header[1:] != [f"x{j + 1}" for j in range(len(header) - 1)]:
        raise CsvFormatError(f"{path}: bad header {lines[0]!r}")
    d = len(header) - 1
    if d < 1:
        raise CsvFormatError(f"{path}: header declares no data columns")
    times, values = [], []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != d + 1:
            raise CsvFormatError(f"{path}:{ln}: expected {d + 1} fields, got {len(parts)}")
        try:
            nums = [float(p) for p in parts]
        except ValueError as e:
            raise CsvFormatError(f"{path}:{ln}: {e}") from e
        times.append(nums[0])
        values.append(nums[1:])
    return np.asarray(times), np.asarray(values)


def save_generated(data: GeneratedData, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_csv(os.path.join(out_dir, "train.csv"), data.train.times, data.train.obs)
    write_csv(os.path.join(out_dir, "train_truth.csv"), data.train.times, data.train_truth)
    if len(data.val):
        write_csv(os.path.join(out_dir, "val.csv"), data.val.times, data.val.obs)
        write_csv(os.path.join(out_dir, "val_truth.csv"), data.val.times, data.val_truth)
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(data.meta | {"noise_sd_per_dim": list(data.train.noise_sd)}, f, indent=1, sort_keys=True)
        f.write("\n")


def load_generated(out_dir: str) -> GeneratedData:
    with open(os.path.join(out_dir, "meta.json")) as f:
        meta = json.load(f)
    noise_sd = np.asarray(meta["noise_sd_per_dim"], dtype=float)
    t_tr, x_tr = read_csv(os.path.join(out_dir, "train.csv"))
    _, tr_truth = read_csv(os.path.join(out_dir, "train_truth.csv"))
    val_path = os.path.join(out_dir, "val.csv")
    if os.path.exists(val_path):
        t_va, x_va = read_csv(val_path)
        _, va_truth = read_csv(os.path.join(out_dir, "val_truth.csv"))
    else:
        d = x_tr.shape[1]
        t_va, x_va, va_truth = np.zeros(0), np.zeros((0, d)), np.zeros((0, d))
    train = TimeSeriesDataset(t_tr, x_tr, noise_sd)
    val = TimeSeriesDataset(t_va, x_va, noise_sd)
    return GeneratedData(train, val, tr_truth, va_truth, meta)
