"""Amortized posterior: dataset partitioning and the deep-kernel
interpolation encoder mapping a window of observations plus a query time
to posterior moments (with time derivatives)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Bound, ParamStore, Var, jvp
from .data import TimeSeriesDataset
from .models import MlpSpec, mlp_apply, mlp_init
from .mgp import PosteriorMoments

S_FLOOR = 1e-8


@dataclass(frozen=True)
class PartitionPlan:
    M: int
    K: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("PartitionPlan: M must be >= 1")
        if self.K < 0:
            raise ValueError("PartitionPlan: K must be >= 0")


@dataclass
class Partition:
    index: int
    times: np.ndarray
    obs: np.ndarray
    t_start: float
    t_end: float

    def __len__(self):
        return len(self.times)


def partition(dataset: TimeSeriesDataset, plan: PartitionPlan) -> list[Partition]:
    """Non-overlapping windows of M consecutive observations (the last may
    be shorter).  Window j integrates over [t_1^(j), t_1^(j+1)], the final
    window over [t_1^(last), t_last]."""
    times, obs = dataset.times, dataset.obs
    if np.any(np.diff(times) <= 0):
        raise ValueError("partition: timestamps must be strictly increasing")
    n = len(times)
    m = plan.M
    starts = list(range(0, n, m))
    parts = []
    for j, s in enumerate(starts):
        e = min(s + m, n)
        t_end = times[starts[j + 1]] if j + 1 < len(starts) else times[e - 1]
        parts.append(Partition(j, times[s:e], obs[s:e], float(times[s]), float(t_end)))
    return parts


def encoder_inputs(obs: np.ndarray, k_neighbors: int) -> np.ndarray:
    """Stack each observation with its K forward neighbours; indices past
    the window end repeat the last frame.  obs is (..., M, D)."""
    if k_neighbors == 0:
        return obs
    m = obs.shape[-2]
    blocks = []
    for k in range(k_neighbors + 1):
        idx = np.minimum(np.arange(m) + k, m - 1)
        blocks.append(obs[..., idx, :])
    return np.concatenate(blocks, axis=-1)


@dataclass
class EncodedPartition:
    node_times: np.ndarray
    H: Var


@dataclass(frozen=True)
class DeepKernel:
    """Squared-exponential kernel on neural features of time; dk_spec=None
    uses the raw time stamp as the feature."""

    dk_spec: MlpSpec | None
    prefix: str = "dk"

    def init(self, store: ParamStore, seed: int, ell: float = 1e-2, sigma_f: float = 1.0, sigma_n: float = 1e-5) -> None:
        if self.dk_spec is not None:
            mlp_init(store, f"{self.prefix}.net", self.dk_spec, seed, index=3)
        store.add(f"{self.prefix}.log_ell", np.log(ell))
        store.add(f"{self.prefix}.log_sigma_f", np.log(sigma_f))
        store.add(f"{self.prefix}.log_sigma_n", np.log(sigma_n))

    def features(self, bound: Bound, t_col: Var) -> Var:
        if self.dk_spec is None:
            return t_col
        return mlp_apply(bound, f"{self.prefix}.net", self.dk_spec, t_col)

    def cross(self, bound: Bound, fq: Var, fn: Var) -> Var:
        """k(t, t*) = sigma_f * exp(-|f(t) - f(t*)|^2 / (2 ell^2)) rowwise."""
        rq = de.sum_(de.square(fq), axis=-1)
        rn = de.sum_(de.square(fn), axis=-1)
        sqd = de.sub(de.addouter(rq, rn), de.scale(de.matmul(fq, de.mT(fn)), 2.0))
        ell = de.exp(bound[f"{self.prefix}.log_ell"])
        sf = de.exp(bound[f"{self.prefix}.log_sigma_f"])
        return de.mul(sf, de.exp(de.neg(de.div(sqd, de.scale(de.square(ell), 2.0)))))


def encode_nodes(bound: Bound, enc_spec: MlpSpec, prefix: str, part: Partition, k_neighbors: int) -> EncodedPartition:
    """One latent code per observation in the partition."""
    x_in = encoder_inputs(part.obs, k_neighbors)
    if x_in.shape[-1] != enc_spec.layer_widths[0]:
        raise de.ShapeMismatch(
            f"encode_nodes: encoder expects input width {enc_spec.layer_widths[0]}, got {x_in.shape[-1]}"
        )
    h = mlp_apply(bound, prefix, enc_spec, bound.tape.const(x_in))
    if enc_spec.residual_input_to_mean:
        d = enc_spec.layer_widths[-1] // 2
        if part.obs.shape[-1] != d:
            raise de.ShapeMismatch("residual connection requires latent dim == data dim")
        h_m = de.add(h[..., 0:d], bound.tape.const(part.obs))
        h = de.concat([h_m, h[..., d : 2 * d]], axis=-1)
    return EncodedPartition(part.times, h)


class Interpolant:
    """Kernel interpolation state for one window (or a stacked batch of
    equally sized windows); reuses the node factorization across queries."""

    def __init__(
        self,
        bound: Bound,
        kernel: DeepKernel,
        node_times: np.ndarray,
        h: Var,
        literal_inverse_form: bool = False,
        floor: float = S_FLOOR,
    ):
        self.bound = bound
        self.kernel = kernel
        self.floor = floor
        self.d = h.shape[-1] // 2
        tape = bound.tape
        node_times = np.asarray(node_times, dtype=float)
        self.node_times = node_times
        m = node_times.shape[-1]
        self.fn = kernel.features(bound, tape.const(node_times[..., None]))
        self.kn = kernel.cross(bound, self.fn, self.fn)
        sn2 = de.square(de.exp(bound[f"{kernel.prefix}.log_sigma_n"]))
        eye = tape.const(np.eye(m))
        if literal_inverse_form:
            kinv = de.psolve(self.kn, tape.const(np.broadcast_to(np.eye(m), self.kn.shape).copy()))
            self.w = de.psolve(de.add(kinv, de.mul(sn2, eye)), h)
        else:
            self.w = de.psolve(de.add(self.kn, de.mul(sn2, eye)), h)

    def node_moments(self) -> tuple[Var, Var]:
        """Moments at the window's own observation times."""
        out = de.matmul(self.kn, self.w)
        m = out[..., 0 : self.d]
        s = de.clamp_min(de.exp(out[..., self.d : 2 * self.d]), self.floor)
        return m, s

    def moments(self, tq: np.ndarray, derivatives: bool = True) -> PosteriorMoments:
        """Posterior moments at query times tq (leading dims must match the
        node batch); dm and dS come from a forward-mode sweep on the tape."""
        tape = self.bound.tape
        tq = np.asarray(tq, dtype=float)
        t_var = tape.const(tq[..., None])
        fq = self.kernel.features(self.bound, t_var)
        kq = self.kernel.cross(self.bound, fq, self.fn)
        out = de.matmul(kq, self.w)
        m = out[..., 0 : self.d]
        s = de.clamp_min(de.exp(out[..., self.d : 2 * self.d]), self.floor)
        if not derivatives:
            return PosteriorMoments(m, s)
        dout, ds = jvp(tape, [out, s], t_var, np.ones_like(t_var.value))
        dm = dout[..., 0 : self.d]
        return PosteriorMoments(m, s, dm, ds)


def interpolate(
    bound: Bound,
    kernel: DeepKernel,
    enc: EncodedPartition,
    t,
    literal_inverse_form: bool = False,
    floor: float = S_FLOOR,
) -> PosteriorMoments:
    """Deep-kernel interpolation of the window codes at query time(s) t."""
    interp = Interpolant(bound, kernel, enc.node_times, enc.H, literal_inverse_form, floor)
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    return interp.moments(t_arr)
