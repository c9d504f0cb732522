"""Finite-difference gradient checks over every op, network head and the ELBO."""

from __future__ import annotations

import time
from typing import Callable, NamedTuple

import numpy as np

from . import diffcore as dc
from .distributions import LogNormalParams, NormalParams, kl_lognormal_gamma, kl_lognormal_invgamma, kl_normal_normal
from .model import (
    ModelConfig,
    draw_sequence_noise,
    init_model_params,
    initial_state,
    pooled_response,
    sequence_elbo,
    step_elbo,
)
from .neuralnet import GRUConfig, ParameterStore, gru_step, mlp_forward
from .shrinkage import ShrinkageHyper, prior_global_kl, sample_global_posterior

TOLERANCE = 1e-5
EPS = 1e-5


class GradCheckResult(NamedTuple):
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def suite_model_config() -> ModelConfig:
    """A small model that keeps the full suite to a few seconds."""
    return ModelConfig(obs_dim=2, covariate_dim=2, latent_dim=2, rnn_hidden_dim=3, rnn_layers=2,
                       head_hidden_dims=(3,), decoder="mlp")


def _op_cases(rng) -> dict[str, tuple[Callable, object]]:
    a = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    pair = {"a": a, "b": rng.standard_normal((3, 4))}
    bcast = {"a": a, "b": rng.standard_normal((1, 4))}
    mm = {"a": a, "b": rng.standard_normal((4, 2))}
    aff = {"x": a, "w": rng.standard_normal((4, 2)), "b": rng.standard_normal(2)}
    weights = rng.standard_normal((3, 4))

    def wsum(t, w=weights):
        return dc.sum(t * w)

    return {
        "add": (lambda d: wsum(d["a"] + d["b"]), pair),
        "add_broadcast": (lambda d: wsum(d["a"] + d["b"]), bcast),
        "sub": (lambda d: wsum(d["a"] - d["b"]), pair),
        "mul": (lambda d: wsum(d["a"] * d["b"]), pair),
        "mul_broadcast": (lambda d: wsum(d["a"] * d["b"]), bcast),
        "div": (lambda d: wsum(d["a"] / (dc.square(d["b"]) + 0.5)), pair),
        "neg": (lambda x: wsum(-x), a),
        "exp": (lambda x: wsum(dc.exp(x)), a),
        "log": (lambda x: wsum(dc.log(x)), pos),
        "square": (lambda x: wsum(dc.square(x)), a),
        "sqrt": (lambda x: wsum(dc.sqrt(x)), pos),
        "softplus": (lambda x: wsum(dc.softplus(3.0 * x)), a),
        "sigmoid": (lambda x: wsum(dc.sigmoid(x)), a),
        "tanh": (lambda x: wsum(dc.tanh(x)), a),
        "clamp_max": (lambda x: wsum(dc.clamp_max(x, 0.05)), np.where(np.abs(a - 0.05) < 0.01, a + 0.1, a)),
        "matmul": (lambda d: dc.sum(dc.square(dc.matmul(d["a"], d["b"]))), mm),
        "affine": (lambda d: dc.sum(dc.square(dc.affine(d["x"], d["w"], d["b"]))), aff),
        "transpose": (lambda x: dc.sum(dc.transpose(x) * weights.T), a),
        "reshape": (lambda x: dc.sum(dc.reshape(x, (4, 3)) * weights.reshape(4, 3) ** 2), a),
        "getitem": (lambda x: dc.sum(dc.square(x[1:, ::2])), a),
        "concat": (lambda d: dc.sum(dc.concat([d["a"], d["b"]], axis=1) * np.hstack([weights, weights ** 2])), pair),
        "sum_axis": (lambda x: dc.sum(dc.square(dc.sum(x, axis=0))), a),
        "mean_axis": (lambda x: dc.sum(dc.square(dc.mean(x, axis=1))), a),
        "mean_all": (lambda x: dc.square(dc.mean(x * weights)), a),
    }


def _kl_cases(rng) -> dict[str, tuple[Callable, object]]:
    pt = {"mq": rng.standard_normal(4), "lq": 0.3 * rng.standard_normal(4),
          "mp": rng.standard_normal(4), "lp": 0.3 * rng.standard_normal(4)}
    ln = {"m": 0.5 * rng.standard_normal(4), "l": 0.3 * rng.standard_normal(4)}

    def lnq(d):
        return LogNormalParams.from_log_sigma(d["m"], d["l"])

    return {
        "kl_normal_normal": (lambda d: dc.sum(kl_normal_normal(NormalParams(d["mq"], dc.exp(d["lq"])),
                                                               NormalParams(d["mp"], dc.exp(d["lp"])))), pt),
        "kl_lognormal_gamma": (lambda d: dc.sum(kl_lognormal_gamma(lnq(d), 0.5, 1.0)), ln),
        "kl_lognormal_invgamma": (lambda d: dc.sum(kl_lognormal_invgamma(lnq(d), 2.0, 1.0)), ln),
        "kl_global": (lambda d: dc.sum(prior_global_kl(lnq(d), lnq(d), lnq(d), ShrinkageHyper())), ln),
    }


def _store_fn(fn: Callable[[ParameterStore], dc.Tensor]) -> Callable:
    def wrapped(tensors):
        return fn(ParameterStore(tensors))
    return wrapped


def _head_cases(cfg: ModelConfig, params: ParameterStore, rng) -> dict[str, tuple[Callable, object]]:
    out = {}
    batch = 3
    for name, hcfg in cfg.heads().items():
        x = rng.standard_normal((batch, hcfg.input_dim))
        w = rng.standard_normal((batch, hcfg.output_dim))
        sub = {k: v for k, v in params.arrays().items() if k.startswith(name + ".")}
        sub["input"] = x

        def f(store, hcfg=hcfg, name=name, w=w):
            return dc.sum(mlp_forward(hcfg, store, store["input"], prefix=name) * w)

        out[f"head:{name}"] = (_store_fn(f), sub)
    gcfg: GRUConfig = cfg.gru
    sub = {k: v for k, v in params.arrays().items() if k.startswith("gru.")}
    sub["input"] = rng.standard_normal((batch, gcfg.input_dim))
    sub["h0"] = 0.5 * rng.standard_normal((batch, gcfg.hidden_dim))
    w = rng.standard_normal((batch, gcfg.hidden_dim))

    def gru_fn(store):
        h = [store["h0"]] + [dc.Tensor(np.zeros((batch, gcfg.hidden_dim)))] * (gcfg.num_layers - 1)
        return dc.sum(gru_step(gcfg, store, h, store["input"], prefix="gru")[-1] * w)

    out["head:gru"] = (_store_fn(gru_fn), sub)
    return out


def _elbo_cases(cfg: ModelConfig, params: ParameterStore, rng) -> dict[str, tuple[Callable, object]]:
    batch, T = 2, 5
    y = rng.standard_normal((batch, T, cfg.obs_dim))
    u = rng.standard_normal((batch, T, cfg.covariate_dim))
    noise = draw_sequence_noise(rng, batch, T, cfg.latent_dim)

    def step(store):
        glob = sample_global_posterior(dc.Tensor(pooled_response(y, np.full(batch, T))), store,
                                       cfg.global_head, noise.glob)
        loss, _ = step_elbo(cfg, store, y[:, 0], u[:, 0], initial_state(cfg, batch), glob, noise.step(0), 0)
        return dc.sum(-loss.recon + loss.kl_z + loss.kl_shrinkage)

    def seq(store):
        return sequence_elbo(cfg, store, y, u, np.array([T, T - 2]), noise)

    arrays = params.arrays()
    return {"step_elbo": (_store_fn(step), dict(arrays)), "sequence_elbo_T5": (_store_fn(seq), dict(arrays))}


def run_gradient_suite(seed: int = 0, eps: float = EPS, include=None) -> list[GradCheckResult]:
    """Check analytic gradients of every op, head, KL and the ELBO against central differences.

    ``include`` optionally restricts the run to case names containing one of
    the given substrings.
    """
    rng = np.random.default_rng(seed)
    cfg = suite_model_config()
    params = init_model_params(cfg, seed)
    # move every parameter off its structured initial value
    for k in params:
        params[k] = params[k].data + 0.1 * rng.standard_normal(params[k].shape)
    cases = {}
    cases.update(_op_cases(rng))
    cases.update(_kl_cases(rng))
    cases.update(_head_cases(cfg, params, rng))
    cases.update(_elbo_cases(cfg, params, rng))
    results = []
    for name, (fn, x) in cases.items():
        if include and not any(s in name for s in include):
            continue
        t0 = time.perf_counter()
        err = dc.grad_check(fn, x, eps)
        results.append(GradCheckResult(name, err, time.perf_counter() - t0))
    return results
