"""Deep state-space model with shrinkage: generative/inference passes and the ELBO.

Per time step the deterministic GRU state ``h_t`` is driven by
``(u_t, y_{t-1})``. The latent is written in non-centered form
``z_t = z*_t * tau*_t * lambda_t`` with ``z*_t`` Normal and the scales coming
from the shrinkage posteriors. Because both the generative and inference
conditionals of ``z_t`` carry the same scale, the shrinkage factors cancel in
their KL, which is therefore evaluated on the unscaled ``z*`` heads.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .distributions import NormalParams, kl_normal_normal, sample_normal_reparam
from .errors import ConfigError, NonFiniteError, ShapeError
from .neuralnet import (
    GRUConfig,
    MLPConfig,
    ParameterStore,
    gru_step,
    init_params,
    merge_stores,
    mlp_forward,
    zero_state,
)
from .shrinkage import (
    GLOBAL_HEADS,
    GlobalShrinkageSample,
    ShrinkageHyper,
    global_head_config,
    prior_global_kl,
    prior_local_kl,
    regularized_tau_star_sq,
    sample_global_posterior,
    sample_local_posterior,
)

LOG_2PI = math.log(2.0 * math.pi)
DECODERS = ("linear", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and hyperparameters of a DSSM-SH instance.

    ``decoder='mlp'`` swaps the linear response mean for a feed-forward
    network; it exists for the decoder ablation.
    """

    obs_dim: int
    covariate_dim: int
    latent_dim: int = 8
    rnn_hidden_dim: int = 32
    rnn_layers: int = 1
    head_hidden_dims: tuple = (32, 32)
    shrinkage: ShrinkageHyper = field(default_factory=ShrinkageHyper)
    sigma_floor: float = 1e-4
    decoder: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "head_hidden_dims", tuple(int(d) for d in self.head_hidden_dims))
        if isinstance(self.shrinkage, dict):
            object.__setattr__(self, "shrinkage", ShrinkageHyper(**self.shrinkage))
        dims = (self.obs_dim, self.latent_dim, self.rnn_hidden_dim, self.rnn_layers)
        if any(int(d) < 1 for d in dims) or any(d < 1 for d in self.head_hidden_dims):
            raise ConfigError(f"model dimensions must be >= 1: {self}")
        if self.covariate_dim < 0:
            raise ConfigError("covariate_dim must be >= 0")
        if not self.sigma_floor > 0:
            raise ConfigError("sigma_floor must be positive")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_hidden_dims"] = list(self.head_hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "shrinkage" in d:
            d["shrinkage"] = ShrinkageHyper(**d["shrinkage"])
        return cls(**d)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    # component configs
    @property
    def gru(self) -> GRUConfig:
        return GRUConfig(self.covariate_dim + self.obs_dim, self.rnn_hidden_dim, self.rnn_layers)

    def heads(self) -> dict[str, MLPConfig]:
        return _build_heads(self)

    @property
    def global_head(self) -> MLPConfig:
        return global_head_config(self.obs_dim, self.head_hidden_dims)


@functools.lru_cache(maxsize=128)
def _build_heads(cfg: ModelConfig) -> dict[str, MLPConfig]:
    q, m, h, hid = cfg.latent_dim, cfg.obs_dim, cfg.rnn_hidden_dim, cfg.head_hidden_dims
    heads = {
        "gen.mu": MLPConfig(h + q, hid, q, output_head="linear"),
        "gen.sigma": MLPConfig(h + q, hid, q, output_head="softplus"),
        "inf.mu": MLPConfig(q + m + h, hid, q, output_head="linear"),
        "inf.sigma": MLPConfig(q + m + h, hid, q, output_head="softplus"),
        "inf.local": MLPConfig(q + h, hid, 4 * q, output_head="linear"),
        "dec.sigma": MLPConfig(q, hid, m, output_head="softplus"),
    }
    for name in GLOBAL_HEADS:
        heads[f"inf.global.{name}"] = global_head_config(m, hid)
    if cfg.decoder == "mlp":
        heads["dec.mean"] = MLPConfig(q, hid, m, output_head="linear")
    return heads


def init_model_params(cfg: ModelConfig, seed: int) -> ParameterStore:
    """Fresh parameters for every network in the model, deterministic per seed."""
    heads = cfg.heads()
    names = ["gru", "dec.A", *sorted(heads)]
    seeds = np.random.SeedSequence(seed).spawn(len(names))
    stores = [init_params(cfg.gru, seeds[0], prefix="gru")]
    rng = np.random.default_rng(seeds[1])
    bound = math.sqrt(1.0 / cfg.latent_dim)
    stores.append(ParameterStore({
        "dec.A.weight": rng.uniform(-bound, bound, size=(cfg.latent_dim, cfg.obs_dim)),
    }))
    for name, ss in zip(sorted(heads), seeds[2:]):
        stores.append(init_params(heads[name], ss, prefix=name))
    return merge_stores(stores)


class StepState(NamedTuple):
    """Carried recurrence: per-layer GRU states, previous latent, previous response."""

    h: list
    z: Tensor
    y_prev: Tensor

    @property
    def top(self) -> Tensor:
        return self.h[-1]


class StepLoss(NamedTuple):
    """Per-series terms of one time step, each of shape [batch]."""

    recon: Tensor
    kl_z: Tensor
    kl_shrinkage: Tensor


class StepNoise(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray
    z: np.ndarray


class SequenceNoise(NamedTuple):
    """Standard-normal noise for a whole batch: globals [B x 3], locals/latents [B x T x Q]."""

    glob: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    z: np.ndarray

    def step(self, t: int) -> StepNoise:
        return StepNoise(self.alpha[:, t], self.beta[:, t], self.z[:, t])


def draw_sequence_noise(rng: np.random.Generator, batch: int, length: int, latent_dim: int) -> SequenceNoise:
    return SequenceNoise(
        rng.standard_normal((batch, 3)),
        rng.standard_normal((batch, length, latent_dim)),
        rng.standard_normal((batch, length, latent_dim)),
        rng.standard_normal((batch, length, latent_dim)),
    )


def initial_state(cfg: ModelConfig, batch: int) -> StepState:
    return StepState(
        zero_state(cfg.gru, batch),
        Tensor._wrap(np.zeros((batch, cfg.latent_dim))),
        Tensor._wrap(np.zeros((batch, cfg.obs_dim))),
    )


def generative_z_params(cfg: ModelConfig, params: ParameterStore, h_t: Tensor, z_prev: Tensor,
                        _heads=None) -> NormalParams:
    heads = _heads or cfg.heads()
    x = dc.concat([h_t, z_prev], axis=1)
    mu = mlp_forward(heads["gen.mu"], params, x, prefix="gen.mu")
    sigma = mlp_forward(heads["gen.sigma"], params, x, prefix="gen.sigma") + cfg.sigma_floor
    return NormalParams(mu, sigma)


def inference_z_params(cfg: ModelConfig, params: ParameterStore, z_prev: Tensor, y_t: Tensor,
                       h_t: Tensor, _heads=None) -> NormalParams:
    heads = _heads or cfg.heads()
    x = dc.concat([z_prev, y_t, h_t], axis=1)
    mu = mlp_forward(heads["inf.mu"], params, x, prefix="inf.mu")
    sigma = mlp_forward(heads["inf.sigma"], params, x, prefix="inf.sigma") + cfg.sigma_floor
    return NormalParams(mu, sigma)


def local_head(cfg: ModelConfig, params: ParameterStore, z_prev: Tensor, h_t: Tensor, _heads=None) -> Tensor:
    heads = _heads or cfg.heads()
    return mlp_forward(heads["inf.local"], params, dc.concat([z_prev, h_t], axis=1), prefix="inf.local")


def shrinkage_scale(tau_star_sq, lambda_sq) -> Tensor:
    """The latent scale tau* lambda."""
    return dc.sqrt(dc.as_tensor(tau_star_sq) * lambda_sq)


def assemble_z(z_star, tau_star_sq=None, lambda_sq=None, scale=None) -> Tensor:
    """z = z* * sqrt(tau*^2) * sqrt(lambda^2); pass ``scale`` to reuse tau* lambda."""
    if scale is None:
        scale = shrinkage_scale(tau_star_sq, lambda_sq)
    return dc.as_tensor(z_star) * scale


def decoder(cfg: ModelConfig, params: ParameterStore, z: Tensor, _heads=None) -> NormalParams:
    """Response distribution given the latent: mean A z (or an MLP for decoder='mlp')."""
    heads = _heads or cfg.heads()
    if cfg.decoder == "linear":
        mean = dc.matmul(z, params["dec.A.weight"])
    else:
        mean = mlp_forward(heads["dec.mean"], params, z, prefix="dec.mean")
    sigma = mlp_forward(heads["dec.sigma"], params, z, prefix="dec.sigma") + cfg.sigma_floor
    return NormalParams(mean, sigma)


def gaussian_loglik(y: Tensor, p: NormalParams) -> Tensor:
    """log N(y; mu, sigma) summed over the last axis."""
    r = (dc.as_tensor(y) - p.mu) / p.sigma
    return dc.sum(-0.5 * LOG_2PI - dc.log(p.sigma) - 0.5 * dc.square(r), axis=-1)


def advance_rnn(cfg: ModelConfig, params: ParameterStore, state: StepState, u_t: Tensor) -> list:
    return gru_step(cfg.gru, params, state.h, dc.concat([dc.as_tensor(u_t), state.y_prev], axis=1), prefix="gru")


def step_elbo(cfg: ModelConfig, params: ParameterStore, y_t, u_t, state: StepState,
              glob: GlobalShrinkageSample, noise, t: int | None = None):
    """One time step of the factorized ELBO.

    Parameters
    ----------
    y_t, u_t : Tensor or ndarray
        Response [batch x M] and covariates [batch x N] at this step.
    state : StepState
        Carried recurrence from the previous step.
    glob : GlobalShrinkageSample
        Global shrinkage draw, held fixed over the sequence.
    noise : StepNoise or numpy Generator
        Standard-normal noise for (alpha, beta, z*).

    Returns
    -------
    StepLoss, StepState
        The per-series loss terms and the advanced state, whose latent is the
        sampled, scaled posterior draw.
    """
    y_t, u_t = dc.as_tensor(y_t), dc.as_tensor(u_t)
    batch, q = y_t.shape[0], cfg.latent_dim
    if y_t.shape != (batch, cfg.obs_dim) or u_t.shape != (batch, cfg.covariate_dim):
        raise ShapeError(f"step inputs y {y_t.shape}, u {u_t.shape} do not match config")
    if isinstance(noise, np.random.Generator):
        noise = StepNoise(*(noise.standard_normal((batch, q)) for _ in range(3)))
    heads = cfg.heads()

    h_layers = advance_rnn(cfg, params, state, u_t)
    h_t = h_layers[-1]
    local = sample_local_posterior(local_head(cfg, params, state.z, h_t, heads), noise.alpha, noise.beta)
    tau_star_sq = regularized_tau_star_sq(glob.tau_sq, glob.c_sq, local.lambda_sq)
    scale = shrinkage_scale(tau_star_sq, local.lambda_sq)

    p_z = generative_z_params(cfg, params, h_t, state.z, heads)
    q_z = inference_z_params(cfg, params, state.z, y_t, h_t, heads)
    kl_z = kl_normal_normal(q_z, p_z)

    z_star = sample_normal_reparam(q_z, noise.z)
    z = assemble_z(z_star, scale=scale)
    recon = gaussian_loglik(y_t, decoder(cfg, params, z, heads))
    kl_shrink = prior_local_kl(local.q_alpha, local.q_beta)

    loss = StepLoss(recon, kl_z, kl_shrink)
    for part in loss:
        if not np.all(np.isfinite(part.data)):
            where = "" if t is None else f" at time index {t}"
            raise NonFiniteError(f"non-finite step loss{where}")
    return loss, StepState(h_layers, z, y_t)


@dataclass
class ELBOParts:
    """Batch-mean decomposition of the negative ELBO (floats)."""

    loss: float
    recon: float
    kl_z: float
    kl_shrinkage: float
    kl_global: float


def pooled_response(y: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Per-series time-mean of y over observed steps, shape [batch x M]."""
    mask = np.arange(y.shape[1])[None, :] < np.asarray(lengths)[:, None]
    return (y * mask[:, :, None]).sum(axis=1) / np.maximum(mask.sum(axis=1), 1)[:, None]


def sequence_elbo(cfg: ModelConfig, params: ParameterStore, y, u, lengths=None, noise=None,
                  return_parts: bool = False):
    """Negative ELBO averaged over the batch.

    Per series: sum over observed steps of (-recon + kl_z + kl_shrinkage),
    plus the global shrinkage KL. The global posterior is sampled once per
    series before the time loop.

    Parameters
    ----------
    y : ndarray [batch x T x M]
    u : ndarray [batch x T x N]
    lengths : ndarray [batch], optional
        Observed prefix length of each series; defaults to T.
    noise : SequenceNoise or numpy Generator
    """
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if y.ndim != 3 or u.ndim != 3 or y.shape[:2] != u.shape[:2]:
        raise ShapeError(f"y {y.shape} and u {u.shape} must be [batch x T x dim] with matching batch/time")
    batch, length = y.shape[:2]
    if batch == 0 or length == 0:
        raise ShapeError("sequence_elbo needs a non-empty batch")
    if y.shape[2] != cfg.obs_dim or u.shape[2] != cfg.covariate_dim:
        raise ShapeError(f"y/u trailing dims {y.shape[2]}/{u.shape[2]} != config {cfg.obs_dim}/{cfg.covariate_dim}")
    lengths = np.full(batch, length) if lengths is None else np.asarray(lengths)
    if np.any(lengths < 1) or np.any(lengths > length):
        raise ShapeError("every series needs 1 <= length <= T")
    if noise is None or isinstance(noise, np.random.Generator):
        noise = draw_sequence_noise(noise or np.random.default_rng(), batch, length, cfg.latent_dim)

    pooled = Tensor._wrap(pooled_response(y, lengths))
    glob = sample_global_posterior(pooled, params, cfg.global_head, noise.glob)
    kl_global = dc.sum(prior_global_kl(glob.q_alpha_tau, glob.q_beta_tau, glob.q_c, cfg.shrinkage), axis=1)

    state = initial_state(cfg, batch)
    mask = (np.arange(length)[None, :] < lengths[:, None]).astype(np.float64)
    full = bool(mask.all())
    recon_tot = kl_z_tot = kl_s_tot = None
    for t in range(length):
        step, state = step_elbo(cfg, params, y[:, t], u[:, t], state, glob, noise.step(t), t=t)
        r, kz, ks = step
        if not full:
            m = Tensor._wrap(mask[:, t])
            r, kz, ks = r * m, kz * m, ks * m
        if recon_tot is None:
            recon_tot, kl_z_tot, kl_s_tot = r, kz, ks
        else:
            recon_tot, kl_z_tot, kl_s_tot = recon_tot + r, kl_z_tot + kz, kl_s_tot + ks
    per_series = kl_z_tot + kl_s_tot + kl_global - recon_tot
    loss = dc.mean(per_series)
    if not return_parts:
        return loss
    parts = ELBOParts(
        loss=loss.item(),
        recon=float(recon_tot.data.mean()),
        kl_z=float(kl_z_tot.data.mean()),
        kl_shrinkage=float(kl_s_tot.data.mean()),
        kl_global=float(kl_global.data.mean()),
    )
    return loss, parts
