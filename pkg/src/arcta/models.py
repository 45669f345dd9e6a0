"""Parametric pieces of the experiments: MLPs, drift models, decoders,
and the Gaussian observation likelihood."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Bound, ParamStore, Tape, Var
from .rng import stream

ACTIVATIONS = {"tanh": de.tanh, "relu": de.relu}
ACTIVATIONS_NP = {"tanh": np.tanh, "relu": lambda x: np.maximum(x, 0.0)}


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected net; layer_widths includes input and output widths."""

    layer_widths: tuple[int, ...]
    activation: str = "tanh"
    residual_input_to_mean: bool = False

    def __post_init__(self):
        if len(self.layer_widths) < 3:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError("MlpSpec widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_params(self) -> int:
        ws = self.layer_widths
        return sum(ws[i] * ws[i + 1] + ws[i + 1] for i in range(len(ws) - 1))


def mlp_init(store: ParamStore, prefix: str, spec: MlpSpec, seed: int, index: int = 0) -> None:
    """Glorot-uniform weights, zero biases."""
    rng = stream(seed, "init", index=index)
    ws = spec.layer_widths
    for i in range(len(ws) - 1):
        fan_in, fan_out = ws[i], ws[i + 1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        store.add(f"{prefix}.w{i}", rng.uniform(-a, a, size=(fan_in, fan_out)))
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def mlp_apply(bound: Bound, prefix: str, spec: MlpSpec, x: Var) -> Var:
    act = ACTIVATIONS[spec.activation]
    h = x
    n_layers = len(spec.layer_widths) - 1
    for i in range(n_layers):
        h = de.add(de.matmul(h, bound[f"{prefix}.w{i}"]), bound[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def mlp_apply_np(store: ParamStore, prefix: str, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Plain-numpy evaluation (forecasting, data generation)."""
    act = ACTIVATIONS_NP[spec.activation]
    h = x
    n_layers = len(spec.layer_widths) - 1
    for i in range(n_layers):
        h = h @ store.value(f"{prefix}.w{i}") + store.value(f"{prefix}.b{i}")
        if i < n_layers - 1:
            h = act(h)
    return h


# ---------------------------------------------------------------------------
# drift models


@dataclass(frozen=True)
class MlpDrift:
    """Neural drift f(z); a time feature can be appended but is off by
    default (state-only input)."""

    spec: MlpSpec
    prefix: str = "drift"
    time_feature: bool = False

    @property
    def latent_dim(self) -> int:
        return self.spec.layer_widths[-1]

    def init(self, store: ParamStore, seed: int) -> None:
        mlp_init(store, self.prefix, self.spec, seed, index=1)

    def apply(self, bound: Bound, z: Var, t: np.ndarray | None = None) -> Var:
        if not np.all(np.isfinite(z.value)):
            raise ValueError("drift input is not finite")
        if self.time_feature:
            if t is None:
                raise ValueError("time_feature drift needs t")
            tcol = bound.tape.const(np.broadcast_to(np.asarray(t)[..., None], z.shape[:-1] + (1,)).copy())
            z = de.concat([z, tcol], axis=-1)
        return mlp_apply(bound, self.prefix, self.spec, z)

    def apply_np(self, store: ParamStore, z: np.ndarray, t=None) -> np.ndarray:
        if self.time_feature:
            tcol = np.broadcast_to(np.asarray(t)[..., None], z.shape[:-1] + (1,))
            z = np.concatenate([z, tcol], axis=-1)
        return mlp_apply_np(store, self.prefix, self.spec, z)


@dataclass(frozen=True)
class LorenzDrift:
    """Three-parameter chaotic benchmark field with trainable (sigma, rho, beta)."""

    prefix: str = "lorenz"

    latent_dim: int = 3

    def init(self, store: ParamStore, theta0: np.ndarray) -> None:
        store.add(f"{self.prefix}.theta", np.asarray(theta0, dtype=float))

    def apply(self, bound: Bound, z: Var, t=None) -> Var:
        th = bound[f"{self.prefix}.theta"]
        sig, rho, beta = th[0:1], th[1:2], th[2:3]
        x, y, zz = z[..., 0:1], z[..., 1:2], z[..., 2:3]
        fx = de.mul(sig, de.sub(y, x))
        fy = de.sub(de.mul(x, de.sub(rho, zz)), y)
        fz = de.sub(de.mul(x, y), de.mul(beta, zz))
        return de.concat([fx, fy, fz], axis=-1)

    def apply_np(self, store: ParamStore, z: np.ndarray, t=None) -> np.ndarray:
        sig, rho, beta = store.value(f"{self.prefix}.theta")
        return lorenz_field(z, sig, rho, beta)


def lorenz_field(z: np.ndarray, sig: float, rho: float, beta: float) -> np.ndarray:
    x, y, zz = z[..., 0], z[..., 1], z[..., 2]
    return np.stack([sig * (y - x), x * (rho - zz) - y, x * y - beta * zz], axis=-1)


# ---------------------------------------------------------------------------
# decoders and likelihood


@dataclass(frozen=True)
class IdentityDecoder:
    def init(self, store: ParamStore, seed: int) -> None:
        pass

    def apply(self, bound: Bound, z: Var) -> Var:
        return z

    def apply_np(self, store: ParamStore, z: np.ndarray) -> np.ndarray:
        return z


@dataclass(frozen=True)
class MlpDecoder:
    spec: MlpSpec
    prefix: str = "dec"

    def init(self, store: ParamStore, seed: int) -> None:
        mlp_init(store, self.prefix, self.spec, seed, index=2)

    def apply(self, bound: Bound, z: Var) -> Var:
        return mlp_apply(bound, self.prefix, self.spec, z)

    def apply_np(self, store: ParamStore, z: np.ndarray) -> np.ndarray:
        return mlp_apply_np(store, self.prefix, self.spec, z)


@dataclass(frozen=True)
class GaussianLikelihood:
    """log p(x | z) = sum_j [-1/2 log(2 pi s_j^2) - (x_j - mu_j(z))^2 / (2 s_j^2)]."""

    decoder: IdentityDecoder | MlpDecoder
    noise_sd: np.ndarray  # per-dimension observation noise standard deviation

    def __post_init__(self):
        sd = np.asarray(self.noise_sd, dtype=float)
        if np.any(sd <= 0):
            raise ValueError("noise_sd must be positive")
        object.__setattr__(self, "noise_sd", sd)


def gauss_loglik(lik: GaussianLikelihood, x: np.ndarray, mean: Var) -> Var:
    """Total log-likelihood of observations x under row means mean (a Var)."""
    var = lik.noise_sd**2
    if x.shape != mean.shape:
        raise de.ShapeMismatch(f"gauss_loglik: x {x.shape} vs mean {mean.shape}")
    n_rows = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
    const_term = -0.5 * float(np.sum(np.log(2.0 * np.pi * var))) * n_rows
    d = mean.tape.const(x)
    sq = de.square(de.sub(d, mean))
    weighted = de.cmul(sq, 1.0 / (2.0 * var))
    return de.shift(de.neg(de.sum_(weighted)), const_term)


def gauss_loglik_np(lik: GaussianLikelihood, x: np.ndarray, mean: np.ndarray) -> float:
    var = lik.noise_sd**2
    n_rows = int(np.prod(x.shape[:-1])) if x.ndim > 1 else 1
    const_term = -0.5 * float(np.sum(np.log(2.0 * np.pi * var))) * n_rows
    return const_term - float(np.sum((x - mean) ** 2 / (2.0 * var)))
