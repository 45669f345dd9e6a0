"""Training loop: Adam with per-iteration learning-rate decay, flat
key=value experiment configs, the metrics ledger, checkpointing, and
forecast-based validation."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import diffengine as de
from .data import GeneratedData
from .diffengine import Bound, ParamStore, Tape, save_checkpoint
from .elbo import (
    LatentSdeModel,
    LogNormalPosterior,
    McConfig,
    loss_and_grad,
)
from .encoder import DeepKernel, PartitionPlan, partition
from .models import GaussianLikelihood, IdentityDecoder, LorenzDrift, MlpDrift, MlpSpec, mlp_init
from .rng import state_dict, stream
from .sdesolve import NfeCounter, euler_maruyama

log = logging.getLogger("arcta")

METRIC_COLUMNS = ("iter", "cum_nfe", "elbo", "ll_term", "res_term", "kl_theta", "lr", "kl_weight", "val_rmse")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float
    decay_gamma: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(state: AdamState, store: ParamStore) -> bool:
    """Standard Adam update with bias correction, then lr <- gamma * lr.
    A non-finite gradient skips the parameter update (the decay still
    happens); returns whether the update was applied."""
    grads = {n: store.grad(n) for n in store.names()}
    applied = all(np.all(np.isfinite(g)) for g in grads.values())
    if applied:
        state.step += 1
        b1, b2 = state.beta1, state.beta2
        c1 = 1.0 - b1**state.step
        c2 = 1.0 - b2**state.step
        for n, g in grads.items():
            m = state.m.get(n)
            if m is None:
                m = np.zeros_like(g)
                state.v[n] = np.zeros_like(g)
            v = state.v[n]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            state.m[n] = m
            state.v[n] = v
            update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            store.set_value(n, store.value(n) - update)
    else:
        log.warning("adam_step: non-finite gradient, skipping update at step %d", state.step)
    state.lr *= state.decay_gamma
    return applied


# ---------------------------------------------------------------------------
# experiment configuration (flat key = value text files)


DEFAULT_GAMMA = math.exp(math.log(0.9) / 1000.0)


@dataclass
class TrainConfig:
    experiment: str = "lv"
    data_dir: str = ""
    latent_dim: int = 2
    obs_dim: int = 2
    M: int = 256
    K: int = 0
    R: int = 1
    S: int = 10
    stratified: bool = True
    batch_partitions: int = 1
    lr_init: float = 1e-3
    lr_decay_gamma: float = DEFAULT_GAMMA
    kl_warmup_iters: int = 1000
    total_iters: int = 8000
    seed: int = 0
    ell_init: float = 1e-2
    sigma_f_init: float = 1.0
    sigma_n_init: float = 1e-5
    prior_mu_tilde: float = 1.0
    prior_sigma_tilde: float = 1.0
    diff_mu_init: float = 1e-5
    diff_sigma_init: float = 1e-5
    precision: str = "float64"
    drift_kind: str = "mlp"
    drift_hidden: tuple[int, ...] = (64, 64, 64)
    drift_activation: str = "relu"
    enc_hidden: tuple[int, ...] = (32, 32)
    enc_activation: str = "relu"
    enc_residual: bool = True
    dk_hidden: tuple[int, ...] = (32, 32)
    dk_activation: str = "relu"
    noise_sd_model: float = 0.01
    lorenz_theta0: tuple[float, ...] = (10.0, 28.0, 8 / 3)
    anneal_residual: bool = True
    paper_literal_scale: bool = False
    literal_inverse_form: bool = False
    val_every: int = 100
    val_paths: int = 8
    val_substeps: int = 4

    def __post_init__(self):
        if self.total_iters < 1 or self.M < 1 or self.R < 1 or self.S < 1 or self.batch_partitions < 1:
            raise ValueError("TrainConfig: counts must be positive")
        if not (0.0 < self.lr_decay_gamma <= 1.0):
            raise ValueError("TrainConfig: lr_decay_gamma must be in (0, 1]")
        if self.precision not in ("float64", "float32"):
            raise ValueError("TrainConfig: precision must be float64 or float32")


def default_config(experiment: str) -> TrainConfig:
    if experiment == "lv":
        return TrainConfig()
    if experiment == "lorenz":
        return TrainConfig(
            experiment="lorenz",
            latent_dim=3,
            obs_dim=3,
            M=128,
            R=10,
            S=100,
            lr_init=0.1,
            kl_warmup_iters=100,
            total_iters=2000,
            drift_kind="lorenz",
            enc_hidden=(32, 32),
            dk_hidden=(32,),
            dk_activation="tanh",
            noise_sd_model=1.0,
            prior_mu_tilde=1e-5,
            prior_sigma_tilde=1e-5,
            val_every=500,
        )
    if experiment == "predprey4":
        return TrainConfig(
            experiment="predprey4",
            latent_dim=4,
            obs_dim=4,
            M=10,
            R=1,
            S=10,
            batch_partitions=16,
            lr_init=1e-3,
            kl_warmup_iters=1000,
            total_iters=3000,
            drift_hidden=(64, 64),
            noise_sd_model=1e-2,
        )
    raise ValueError(f"unknown experiment {experiment!r}")


def _fmt_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_fmt_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_config(cfg: TrainConfig, path: str) -> None:
    with open(path, "w") as f:
        for fld in fields(cfg):
            f.write(f"{fld.name} = {_fmt_value(getattr(cfg, fld.name))}\n")


def _parse_value(name: str, text: str, py_type):
    text = text.strip()
    if py_type is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {name}: bad boolean {text!r}")
    if py_type is int:
        return int(text)
    if py_type is float:
        return float(text)
    if py_type is str:
        return text
    # tuples of numbers
    items = [t for t in text.split(",") if t.strip()]
    if "float" in str(py_type):
        return tuple(float(t) for t in items)
    return tuple(int(t) for t in items)


def parse_config(path: str) -> TrainConfig:
    """Flat key=value file; '#' starts a comment; unknown keys are rejected."""
    by_name = {f.name: f for f in fields(TrainConfig)}
    overrides = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in by_name:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            fld = by_name[key]
            base = fld.type if isinstance(fld.type, type) else None
            if base is None:
                tname = str(fld.type)
                base = bool if "bool" in tname else int if tname.startswith("int") else float if tname.startswith("float") else str if tname.startswith("str") else tuple
                if "tuple" in tname:
                    base = fld.type
            overrides[key] = _parse_value(key, val, base)
    return replace(TrainConfig(), **overrides)


# ---------------------------------------------------------------------------
# model construction


def build_model(cfg: TrainConfig) -> LatentSdeModel:
    d, obs_d = cfg.latent_dim, cfg.obs_dim
    if cfg.drift_kind == "mlp":
        drift = MlpDrift(MlpSpec((d, *cfg.drift_hidden, d), cfg.drift_activation))
    elif cfg.drift_kind == "lorenz":
        drift = LorenzDrift()
    else:
        raise ValueError(f"unknown drift_kind {cfg.drift_kind!r}")
    enc_in = (cfg.K + 1) * obs_d
    enc_spec = MlpSpec((enc_in, *cfg.enc_hidden, 2 * d), cfg.enc_activation, residual_input_to_mean=cfg.enc_residual and d == obs_d)
    kernel = DeepKernel(MlpSpec((1, *cfg.dk_hidden, 1), cfg.dk_activation) if cfg.dk_hidden else None)
    post = LogNormalPosterior(np.full(d, cfg.prior_mu_tilde), np.full(d, cfg.prior_sigma_tilde))
    lik = GaussianLikelihood(IdentityDecoder(), np.full(obs_d, cfg.noise_sd_model))
    return LatentSdeModel(
        latent_dim=d,
        obs_dim=obs_d,
        drift=drift,
        likelihood=lik,
        enc_spec=enc_spec,
        kernel=kernel,
        diff_post=post,
        plan=PartitionPlan(cfg.M, cfg.K),
        literal_inverse_form=cfg.literal_inverse_form,
    )


def init_store(cfg: TrainConfig, model: LatentSdeModel) -> ParamStore:
    store = ParamStore()
    mlp_init(store, model.enc_prefix, model.enc_spec, cfg.seed, index=0)
    if isinstance(model.drift, LorenzDrift):
        model.drift.init(store, np.asarray(cfg.lorenz_theta0, dtype=float))
    else:
        model.drift.init(store, cfg.seed)
    model.likelihood.decoder.init(store, cfg.seed)
    model.kernel.init(store, cfg.seed, ell=cfg.ell_init, sigma_f=cfg.sigma_f_init, sigma_n=cfg.sigma_n_init)
    model.diff_post.init(store, mu0=cfg.diff_mu_init, sigma0=cfg.diff_sigma_init)
    return store


# ---------------------------------------------------------------------------
# forecasting and validation


def posterior_at(store: ParamStore, model: LatentSdeModel, part, t: float):
    """Encoder moments (m, S) at time t as plain arrays."""
    tape = Tape()
    bound = Bound(tape, store)
    interp = model.interpolant(bound, part.times[None, :], part.obs[None, :, :])
    mom = interp.moments(np.array([[t]]), derivatives=False)
    return mom.m.value[0, 0], mom.S.value[0, 0]


def diffusion_posterior_mean(store: ParamStore, model: LatentSdeModel) -> np.ndarray:
    mu = store.value(f"{model.diff_post.prefix}.mu")
    sig = np.exp(store.value(f"{model.diff_post.prefix}.log_sigma"))
    return np.exp(mu + 0.5 * sig**2)


def forecast(store: ParamStore, model: LatentSdeModel, parts, val_times: np.ndarray, seed: int, n_paths: int, substeps: int = 4, iteration: int = 0):
    """Sample n_paths forecasts from the learned SDE started at the last
    window's end-time posterior; returns (times, decoded paths (P, T, D))."""
    last = parts[-1]
    t0 = last.t_end
    val_times = np.asarray(val_times, dtype=float)
    if len(val_times) == 0 or val_times[0] <= t0:
        raise ValueError("forecast horizon must start after the training window")
    m, s = posterior_at(store, model, last, t0)
    rng = stream(seed, "valpaths", iteration)
    z0 = m + np.sqrt(s) * rng.standard_normal((n_paths, len(m)))
    theta = diffusion_posterior_mean(store, model)
    grid = np.concatenate([[t0], val_times])
    paths = euler_maruyama(lambda z, t: model.drift.apply_np(store, z, t), theta, z0, grid, rng, substeps=substeps)
    latent = paths[:, 1:, :]
    decoded = model.likelihood.decoder.apply_np(store, latent.reshape(-1, model.latent_dim)).reshape(n_paths, len(val_times), model.obs_dim)
    return val_times, decoded


def forecast_rmse(store, model, parts, val_times, val_truth, seed, n_paths, substeps=4, iteration=0) -> float:
    """RMSE of the predictive mean against noiseless truth."""
    try:
        _, decoded = forecast(store, model, parts, val_times, seed, n_paths, substeps, iteration)
    except FloatingPointError:
        return float("inf")
    mean = decoded.mean(axis=0)
    return float(np.sqrt(np.mean((mean - val_truth) ** 2)))


# ---------------------------------------------------------------------------
# metrics ledger


def format_metrics_rows(rows: list[dict]) -> str:
    out = [",".join(METRIC_COLUMNS)]
    for row in rows:
        out.append(",".join(_fmt_value(float(row[c])) if c != "iter" and c != "cum_nfe" else str(int(row[c])) for c in METRIC_COLUMNS))
    return "\n".join(out) + "\n"


def read_metrics(path: str) -> dict[str, np.ndarray]:
    with open(path) as f:
        header = f.readline().strip().split(",")
        data = np.loadtxt(f, delimiter=",", ndmin=2)
    if data.size == 0:
        data = np.zeros((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}


@dataclass
class TrainResult:
    out_dir: str
    metrics_path: str
    ckpt_base: str
    final_val_rmse: float
    best_val_rmse: float
    cum_nfe: int
    grad_norms: np.ndarray | None = None


def train(cfg: TrainConfig, data: GeneratedData, out_dir: str, grad_norm_param: str | None = None) -> TrainResult:
    """Run the amortized-objective training loop and emit metrics.csv,
    config.txt, and a final checkpoint into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    de.set_default_dtype(cfg.precision)
    try:
        model = build_model(cfg)
        store = init_store(cfg, model)
        parts = partition(data.train, model.plan)
        mc = McConfig(cfg.R, cfg.S, cfg.stratified, cfg.kl_warmup_iters)
        adam = AdamState(lr=cfg.lr_init, decay_gamma=cfg.lr_decay_gamma)
        counter = NfeCounter()
        has_val = len(data.val) > 0

        rows: list[dict] = []
        norms = [] if grad_norm_param else None
        best = float("inf")
        val_rmse = float("nan")
        for it in range(cfg.total_iters):
            store.zero_grads()
            est = loss_and_grad(
                store,
                model,
                parts,
                mc,
                iteration=it,
                seed=cfg.seed,
                batch_size=cfg.batch_partitions,
                anneal_residual=cfg.anneal_residual,
                paper_literal_scale=cfg.paper_literal_scale,
                n_obs_total=len(data.train),
                counter=counter,
            )
            if norms is not None:
                norms.append(float(np.linalg.norm(store.grad(grad_norm_param))))
            lr_now = adam.lr
            adam_step(adam, store)
            if has_val and (it % cfg.val_every == 0 or it == cfg.total_iters - 1):
                val_rmse = forecast_rmse(
                    store, model, parts, data.val.times, data.val_truth, cfg.seed, cfg.val_paths, cfg.val_substeps, iteration=it
                )
                best = min(best, val_rmse)
            else:
                val_rmse = float("nan")
            rows.append(
                dict(
                    iter=it,
                    cum_nfe=counter.count,
                    elbo=est.elbo,
                    ll_term=est.ll_term,
                    res_term=est.res_term,
                    kl_theta=est.kl_theta,
                    lr=lr_now,
                    kl_weight=est.kl_weight,
                    val_rmse=val_rmse,
                )
            )

        metrics_path = os.path.join(out_dir, "metrics.csv")
        with open(metrics_path, "w") as f:
            f.write(format_metrics_rows(rows))
        write_config(cfg, os.path.join(out_dir, "config.txt"))
        ckpt_base = os.path.join(out_dir, "ckpt")
        save_checkpoint(store, ckpt_base, step=cfg.total_iters, rng=state_dict(cfg.seed, cfg.total_iters))
        if norms is not None:
            arr = np.asarray(norms)
            with open(os.path.join(out_dir, "grad_norms.csv"), "w") as f:
                f.write("iter,grad_norm\n")
                for i, v in enumerate(arr):
                    f.write(f"{i},{v:.17g}\n")
        final = rows[-1]["val_rmse"]
        if not has_val:
            final = float("nan")
        return TrainResult(out_dir, metrics_path, ckpt_base, float(final), float(best), counter.count, None if norms is None else np.asarray(norms))
    finally:
        de.set_default_dtype("float64")
