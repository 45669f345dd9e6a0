"""Training objective: per-window evidence-lower-bound estimates with
nested Monte Carlo over (noise draws) x (stratified time samples), the
log-normal diffusion posterior with closed-form KL, and the batched
loss/gradient entry point."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from .diffengine import Bound, ParamStore, Tape, Var
from .encoder import DeepKernel, Interpolant, Partition, PartitionPlan, encoder_inputs
from .models import GaussianLikelihood, MlpSpec, gauss_loglik, mlp_apply
from .mgp import PosteriorMoments, residual, reparam_T
from .rng import stream
from .sdesolve import NfeCounter


@dataclass(frozen=True)
class LogNormalPosterior:
    """Independent log-normal posterior over the positive diffusion scales,
    with a log-normal prior; the KL between them is closed form."""

    prior_mu_tilde: np.ndarray
    prior_sigma_tilde: np.ndarray
    prefix: str = "diffpost"

    def __post_init__(self):
        mt = np.atleast_1d(np.asarray(self.prior_mu_tilde, dtype=float))
        st = np.atleast_1d(np.asarray(self.prior_sigma_tilde, dtype=float))
        if np.any(st <= 0):
            raise ValueError("prior_sigma_tilde must be positive")
        object.__setattr__(self, "prior_mu_tilde", mt)
        object.__setattr__(self, "prior_sigma_tilde", st)

    @property
    def dim(self) -> int:
        return len(self.prior_mu_tilde)

    def init(self, store: ParamStore, mu0, sigma0) -> None:
        mu0 = np.broadcast_to(np.asarray(mu0, dtype=float), (self.dim,))
        sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=float), (self.dim,))
        if np.any(sigma0 <= 0):
            raise ValueError("sigma0 must be positive")
        store.add(f"{self.prefix}.mu", mu0)
        store.add(f"{self.prefix}.log_sigma", np.log(sigma0))


def sample_theta(bound: Bound, post: LogNormalPosterior, nu: np.ndarray) -> Var:
    """theta = exp(mu + sigma * nu), differentiable in (mu, log sigma)."""
    mu = bound[f"{post.prefix}.mu"]
    sig = de.exp(bound[f"{post.prefix}.log_sigma"])
    return de.exp(de.add(mu, de.cmul(sig, np.asarray(nu, dtype=float))))


def kl_lognormal(bound: Bound, post: LogNormalPosterior) -> Var:
    """KL(q || p) = sum_i [log(st_i/s_i) + (s_i^2 + (mu_i - mt_i)^2) / (2 st_i^2) - 1/2]."""
    mu = bound[f"{post.prefix}.mu"]
    ls = bound[f"{post.prefix}.log_sigma"]
    mt, st = post.prior_mu_tilde, post.prior_sigma_tilde
    sig2 = de.exp(de.scale(ls, 2.0))
    quad = de.cmul(de.add(sig2, de.square(de.sub(mu, bound.tape.const(mt)))), 1.0 / (2.0 * st**2))
    const = float(np.sum(np.log(st)) - 0.5 * post.dim)
    return de.shift(de.add(de.neg(de.sum_(ls)), de.sum_(quad)), const)


def kl_lognormal_np(mu, sigma, mu_tilde, sigma_tilde) -> float:
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    mt, st = np.asarray(mu_tilde, dtype=float), np.asarray(sigma_tilde, dtype=float)
    return float(np.sum(np.log(st / sigma) + (sigma**2 + (mu - mt) ** 2) / (2.0 * st**2) - 0.5))


@dataclass(frozen=True)
class McConfig:
    R: int
    S: int
    stratified: bool = True
    kl_warmup_iters: int = 1000

    def __post_init__(self):
        if self.R < 1 or self.S < 1:
            raise ValueError("McConfig: R and S must be >= 1")
        if self.kl_warmup_iters < 0:
            raise ValueError("McConfig: kl_warmup_iters must be >= 0")


def kl_weight(iteration: int, warmup_iters: int) -> float:
    """Linear 0 -> 1 warmup, exactly 1 at iteration == warmup_iters."""
    if warmup_iters <= 0:
        return 1.0
    return min(iteration / warmup_iters, 1.0)


def sample_times(rng: np.random.Generator, intervals: np.ndarray, r: int, s: int, stratified: bool = True) -> np.ndarray:
    """(B, R, S) time draws over each partition interval; with stratification,
    stratum l of each (partition, k) row receives exactly one sample."""
    intervals = np.atleast_2d(np.asarray(intervals, dtype=float))
    b = intervals.shape[0]
    u = rng.random((b, r, s))
    a = intervals[:, 0][:, None, None]
    width = (intervals[:, 1] - intervals[:, 0])[:, None, None]
    if stratified:
        return a + (np.arange(s)[None, None, :] + u) / s * width
    return a + u * width


@dataclass
class LatentSdeModel:
    """Everything the objective needs: drift, decoder+likelihood, encoder
    net, deep kernel, diffusion posterior, and the partition plan."""

    latent_dim: int
    obs_dim: int
    drift: object
    likelihood: GaussianLikelihood
    enc_spec: MlpSpec
    kernel: DeepKernel
    diff_post: LogNormalPosterior
    plan: PartitionPlan
    enc_prefix: str = "enc"
    literal_inverse_form: bool = False

    def encode(self, bound: Bound, times: np.ndarray, obs: np.ndarray) -> Var:
        """Window codes H for stacked windows (..., M, D) -> (..., M, 2d)."""
        x_in = encoder_inputs(obs, self.plan.K)
        h = mlp_apply(bound, self.enc_prefix, self.enc_spec, bound.tape.const(x_in))
        if self.enc_spec.residual_input_to_mean:
            d = self.latent_dim
            h = de.concat([de.add(h[..., 0:d], bound.tape.const(obs)), h[..., d : 2 * d]], axis=-1)
        return h

    def interpolant(self, bound: Bound, times: np.ndarray, obs: np.ndarray) -> Interpolant:
        h = self.encode(bound, times, obs)
        return Interpolant(bound, self.kernel, times, h, self.literal_inverse_form)


@dataclass
class ElboEstimate:
    loss: float
    elbo: float
    ll_term: float
    res_term: float
    kl_theta: float
    kl_weight: float
    n_drift_evals: int


def _group_estimate(
    bound: Bound,
    model: LatentSdeModel,
    times: np.ndarray,
    obs: np.ndarray,
    intervals: np.ndarray,
    eps: np.ndarray,
    tsamp: np.ndarray,
    theta: Var,
    counter: NfeCounter | None = None,
) -> tuple[Var, Var]:
    """Unscaled (log-likelihood, residual-integral) totals for a stacked
    group of equal-length windows.

    times (B, M), obs (B, M, D), intervals (B, 2), eps (B, R, d),
    tsamp (B, R, S).  One eps draw per k is shared by the window's
    observation times and its S inner time samples.
    """
    b_sz, m_len = times.shape
    _, r, s = tsamp.shape
    d = model.latent_dim
    interp = model.interpolant(bound, times, obs)

    # likelihood term at the observation times, averaged over the R draws
    m_nodes, s_nodes = interp.node_moments()
    m_t = de.concat([m_nodes] * r, axis=-2)
    s_t = de.concat([s_nodes] * r, axis=-2)
    eps_ll = np.repeat(eps, m_len, axis=-2)
    z_ll = reparam_T(PosteriorMoments(m_t, s_t), bound.tape.const(eps_ll))
    mean_ll = model.likelihood.decoder.apply(bound, z_ll)
    x_rep = np.tile(obs, (1, r, 1))
    ll = de.scale(gauss_loglik(model.likelihood, x_rep, mean_ll), 1.0 / r)

    # residual term over the window interval via nested Monte Carlo
    tq = tsamp.reshape(b_sz, r * s)
    mom = interp.moments(tq)
    eps_r = np.repeat(eps, s, axis=-2)
    z = reparam_T(mom, bound.tape.const(eps_r))
    f_val = model.drift.apply(bound, z, tq)
    _, wsq = residual(f_val, mom, z, theta)
    widths = (intervals[:, 1] - intervals[:, 0])[:, None]
    weights = np.broadcast_to(widths / (2.0 * r * s), (b_sz, r * s)).copy()
    res = de.sum_(de.cmul(wsq, weights))
    if counter is not None:
        counter.add(b_sz * r * s)
    return ll, res


def elbo_partition_estimate(
    bound: Bound,
    model: LatentSdeModel,
    part: Partition,
    mc: McConfig,
    eps: np.ndarray,
    tsamp: np.ndarray,
    theta: Var,
    counter: NfeCounter | None = None,
) -> tuple[Var, Var, Var]:
    """Stochastic estimate of one window's objective contribution; returns
    (estimate, ll_term, res_term) as tape Vars, unscaled."""
    if len(part) == 0:
        raise ValueError("elbo_partition_estimate: empty partition")
    ll, res = _group_estimate(
        bound,
        model,
        part.times[None, :],
        part.obs[None, :, :],
        np.array([[part.t_start, part.t_end]]),
        eps[None, ...],
        tsamp[None, ...],
        theta,
        counter,
    )
    return de.sub(ll, res), ll, res


def draw_step_randomness(seed: int, iteration: int, n_batch: int, mc: McConfig, latent_dim: int, intervals: np.ndarray):
    """All stochastic inputs for one optimization step, keyed by iteration."""
    eps = stream(seed, "eps", iteration).standard_normal((n_batch, mc.R, latent_dim))
    tsamp = sample_times(stream(seed, "tsamp", iteration), intervals, mc.R, mc.S, mc.stratified)
    nu = stream(seed, "nu", iteration).standard_normal(latent_dim)
    return eps, tsamp, nu


def sample_batch(seed: int, iteration: int, n_parts: int, batch_size: int) -> np.ndarray:
    k = min(batch_size, n_parts)
    idx = stream(seed, "batch", iteration).choice(n_parts, size=k, replace=False)
    return np.sort(idx)


def loss_and_grad(
    store: ParamStore,
    model: LatentSdeModel,
    parts: list[Partition],
    mc: McConfig,
    iteration: int,
    seed: int,
    batch_size: int = 1,
    anneal_residual: bool = False,
    paper_literal_scale: bool = False,
    n_obs_total: int | None = None,
    counter: NfeCounter | None = None,
    batch_indices: np.ndarray | None = None,
) -> ElboEstimate:
    """One stochastic evaluation of loss = -(scale * sum_j Lhat_j - beta*KL)
    with gradients accumulated into the store.

    The per-partition scale is (number of partitions) / (batch size); with
    paper_literal_scale the dataset size N is used instead.  With
    anneal_residual the warmup weight multiplies the residual integral as
    well as the KL term.
    """
    if not parts:
        raise ValueError("loss_and_grad: empty partition list")
    if batch_indices is None:
        batch_indices = sample_batch(seed, iteration, len(parts), batch_size)
    batch = [parts[i] for i in batch_indices]
    intervals = np.array([[p.t_start, p.t_end] for p in batch])
    eps, tsamp, nu = draw_step_randomness(seed, iteration, len(batch), mc, model.latent_dim, intervals)
    beta = kl_weight(iteration, mc.kl_warmup_iters)

    tape = Tape()
    bound = Bound(tape, store)
    theta = sample_theta(bound, model.diff_post, nu)
    kl = kl_lognormal(bound, model.diff_post)

    # group equal-length windows so each group evaluates as one stacked pass
    groups: dict[int, list[int]] = {}
    for pos, p in enumerate(batch):
        groups.setdefault(len(p), []).append(pos)

    ll_total: Var | None = None
    res_total: Var | None = None
    for m_len in sorted(groups, reverse=True):
        pos = groups[m_len]
        times = np.stack([batch[i].times for i in pos])
        obs = np.stack([batch[i].obs for i in pos])
        ll_g, res_g = _group_estimate(
            bound, model, times, obs, intervals[pos], eps[pos], tsamp[pos], theta, counter
        )
        ll_total = ll_g if ll_total is None else de.add(ll_total, ll_g)
        res_total = res_g if res_total is None else de.add(res_total, res_g)

    if paper_literal_scale:
        if n_obs_total is None:
            raise ValueError("paper_literal_scale requires n_obs_total")
        scale = n_obs_total / len(batch)
    else:
        scale = len(parts) / len(batch)
    res_w = beta if anneal_residual else 1.0
    obj = de.sub(de.scale(de.sub(ll_total, de.scale(res_total, res_w)), scale), de.scale(kl, beta))
    loss = de.neg(obj)
    tape.output = loss
    de.backward(tape)

    ll_v, res_v, kl_v = float(ll_total.value), float(res_total.value), float(kl.value)
    return ElboEstimate(
        loss=float(loss.value),
        elbo=scale * (ll_v - res_v) - kl_v,
        ll_term=scale * ll_v,
        res_term=scale * res_v,
        kl_theta=kl_v,
        kl_weight=beta,
        n_drift_evals=len(batch) * mc.R * mc.S,
    )
