"""SGVB training: scale standardization, weighted minibatches, Adam, validation, checkpoints."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import SeriesBatch
from .errors import ConfigError, NonFiniteError
from .model import ModelConfig, draw_sequence_noise, init_model_params, sequence_elbo
from .neuralnet import AdamState, ParameterStore, adam_step, clip_grad_norm, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "loss", "recon", "kl_z", "kl_shrink", "kl_global", "wall_ms")
MAX_CONSECUTIVE_FAILURES = 10
VALIDATION_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    num_steps: int = 1000
    learning_rate: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 100
    grad_clip_norm: float | None = 10.0
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.num_steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("num_steps and checkpoint_every must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in [0, 1)")


@dataclass
class TrainRecord:
    step: int
    loss: float
    recon: float
    kl_z: float
    kl_shrink: float
    kl_global: float
    wall_ms: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def append_csv(self, path) -> None:
        path = Path(path)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(LOG_FIELDS)
            for r in self.records:
                w.writerow([r.step, repr(r.loss), repr(r.recon), repr(r.kl_z), repr(r.kl_shrink),
                            repr(r.kl_global), f"{r.wall_ms:.3f}"])


def series_scale(y: np.ndarray, lengths: np.ndarray, upto: int | None = None) -> np.ndarray:
    """1 + mean |y| over each series' observed steps (optionally only the first ``upto``)."""
    n = np.asarray(lengths) if upto is None else np.minimum(lengths, upto)
    mask = np.arange(y.shape[1])[None, :] < n[:, None]
    total = (np.abs(y) * mask[:, :, None]).sum(axis=(1, 2))
    count = np.maximum(n, 1) * y.shape[2]
    return 1.0 + total / count


def standardize(batch: SeriesBatch, upto: int | None = None) -> tuple[SeriesBatch, np.ndarray]:
    """Divide each series by 1 + mean|y| over its observed (or first ``upto``) steps.

    Returns the standardized batch (whose ``scale`` records the factor) and
    the per-series scales.
    """
    scale = series_scale(batch.y, batch.lengths, upto)
    out = SeriesBatch(batch.y / scale[:, None, None], batch.u, batch.lengths, scale * batch.scale,
                      batch.ids, batch.latents, batch.timestamps)
    return out, scale


def destandardize(values, scale) -> np.ndarray:
    """Undo standardization; ``scale`` broadcasts against the leading axis of ``values``."""
    values = np.asarray(values, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    return values * scale.reshape(scale.shape + (1,) * (values.ndim - scale.ndim))


def sampling_weights(batch: SeriesBatch) -> np.ndarray:
    """Normalized weights proportional to 1 + mean|y| of each raw series."""
    w = series_scale(batch.y * batch.scale[:, None, None], batch.lengths)
    return w / w.sum()


def weighted_sampler(dataset: SeriesBatch, batch_size: int, seed) -> Iterator[np.ndarray]:
    """Endless stream of index batches drawn with probability proportional to 1 + mean|y|."""
    rng = np.random.default_rng(seed)
    p = sampling_weights(dataset)
    n = len(dataset)
    while True:
        yield rng.choice(n, size=batch_size, replace=True, p=p)


def split_validation(dataset: SeriesBatch, fraction: float, seed) -> tuple[SeriesBatch, SeriesBatch | None]:
    n = len(dataset)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val >= n:
        return dataset, None
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def validate(model_cfg: ModelConfig, params: ParameterStore, val_set: SeriesBatch, seed=0) -> float:
    """Mean negative ELBO over ``val_set`` with noise fixed by ``seed``; parameters are untouched."""
    if len(val_set) == 0:
        raise ConfigError("empty validation set")
    from .diffcore import no_grad

    rng = np.random.default_rng(seed)
    total = 0.0
    with no_grad():
        for start in range(0, len(val_set), VALIDATION_CHUNK):
            part = val_set.subset(np.arange(start, min(start + VALIDATION_CHUNK, len(val_set))))
            noise = draw_sequence_noise(rng, len(part), part.length, model_cfg.latent_dim)
            loss = sequence_elbo(model_cfg, params, part.y, part.u, part.lengths, noise)
            total += loss.item() * len(part)
    return total / len(val_set)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset: SeriesBatch,
          params: ParameterStore | None = None, out_dir=None,
          val_set: SeriesBatch | None = None) -> tuple[ParameterStore, TrainLog]:
    """Fit the model by Adam on the minibatch negative ELBO.

    ``dataset`` must already be standardized. If ``val_set`` is None a
    ``validation_fraction`` share of ``dataset`` is held out. The parameters
    with the best validation loss (checked every ``checkpoint_every`` steps
    and at the end) are returned.
    """
    if len(dataset) == 0:
        raise ConfigError("empty training set")
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(4)
    if val_set is None:
        dataset, val_set = split_validation(dataset, train_cfg.validation_fraction, seeds[0])
    params = init_model_params(model_cfg, train_cfg.seed) if params is None else params.copy()
    tlog = TrainLog()
    if train_cfg.num_steps == 0:
        return params, tlog
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    sampler = weighted_sampler(dataset, train_cfg.batch_size, seeds[1])
    noise_rng = np.random.default_rng(seeds[2])
    val_seed = int(seeds[3].generate_state(1)[0])
    opt = AdamState()
    best_loss, best_params = np.inf, params.copy()
    failures = 0

    def checkpoint(step):
        nonlocal best_loss, best_params
        if val_set is None:
            best_params = params.copy()
            return
        vloss = validate(model_cfg, params, val_set, val_seed)
        tlog.validation.append((step, vloss))
        log.info("step %d validation loss %.5f", step, vloss)
        if vloss < best_loss:
            best_loss, best_params = vloss, params.copy()
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint_latest.dssh", params, opt)

    for step in range(1, train_cfg.num_steps + 1):
        t0 = time.perf_counter()
        idx = next(sampler)
        batch = dataset.subset(idx)
        noise = draw_sequence_noise(noise_rng, len(batch), batch.length, model_cfg.latent_dim)
        try:
            loss, parts = sequence_elbo(model_cfg, params, batch.y, batch.u, batch.lengths, noise,
                                        return_parts=True)
            loss.backward()
            if train_cfg.grad_clip_norm:
                clip_grad_norm(params, train_cfg.grad_clip_norm)
            adam_step(params, opt, train_cfg.learning_rate)
        except NonFiniteError as exc:
            params.zero_grad()
            failures += 1
            tlog.skipped.append((step, str(exc)))
            log.warning("step %d skipped: %s", step, exc)
            if failures >= MAX_CONSECUTIVE_FAILURES:
                raise NonFiniteError(f"aborting after {failures} consecutive non-finite steps: {exc}") from exc
            continue
        failures = 0
        tlog.records.append(TrainRecord(step, parts.loss, parts.recon, parts.kl_z, parts.kl_shrinkage,
                                        parts.kl_global, 1000.0 * (time.perf_counter() - t0)))
        if train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            checkpoint(step)
    if not tlog.validation or tlog.validation[-1][0] != train_cfg.num_steps:
        checkpoint(train_cfg.num_steps)
    return best_params, tlog
