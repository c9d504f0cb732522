"""Command-line pipelines: simulate, train, forecast, evaluate, ablate, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .data import (
    LinearSSMSpec,
    load_csv_panel,
    read_latents_csv,
    simulate_linear_ssm,
    simulate_seasonal_panel,
    write_csv_panel,
    write_latents_csv,
)
from .errors import ConfigError, NonFiniteError
from .evaluation import (
    DEFAULT_LEVELS,
    SHRINKAGE_MODES,
    ablate_decoder,
    ablate_shrinkage,
    evaluate_forecast,
    evaluate_point,
    fit_alignment,
    persistence_baseline,
    recovery_rate,
    write_band_csv,
)
from .forecasting import ForecastConfig, forecast_with_latents, rolling_forecast, write_forecast_csv, write_samples
from .model import ModelConfig
from .neuralnet import load_checkpoint, save_checkpoint
from .shrinkage import ShrinkageHyper
from .training import TrainConfig, standardize, train

log = logging.getLogger("dssmsh")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
CHECKPOINT = "checkpoint.dssh"
MODEL_JSON = "model.json"
RESOLVED = "run_config.json"

DEFAULTS = {
    "seed": 0,
    "model": {
        "latent_dim": 8,
        "rnn_hidden_dim": 32,
        "rnn_layers": 1,
        "head_hidden_dims": [32, 32],
        "sigma_floor": 1e-4,
        "decoder": "linear",
        "shrinkage": {"tau0": 1.0, "c0": 2.0, "c1": 1.0},
    },
    "train": {
        "batch_size": 32,
        "num_steps": 1000,
        "learning_rate": 1e-3,
        "checkpoint_every": 100,
        "grad_clip_norm": 10.0,
        "validation_fraction": 0.1,
    },
    "forecast": {
        "horizon": 20,
        "num_samples": 50,
        "quantiles": [0.05, 0.5, 0.95],
        "lambda_source": "inference",
        "history_len": None,
        "window": None,
    },
    "data": {
        "value_cols": ["value"],
        "calendar": False,
        "covariate_columns": ["u"],
        "gap_flag": False,
        "period": None,
    },
}

_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "latent_dim": _pos_int,
                "rnn_hidden_dim": _pos_int,
                "rnn_layers": _pos_int,
                "head_hidden_dims": {"type": "array", "items": _pos_int},
                "sigma_floor": _pos_num,
                "decoder": {"enum": ["linear", "mlp"]},
                "shrinkage": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"tau0": _pos_num, "c0": _pos_num, "c1": _pos_num},
                },
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": _pos_int,
                "num_steps": {"type": "integer", "minimum": 0},
                "learning_rate": _pos_num,
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "grad_clip_norm": {"oneOf": [_pos_num, {"type": "null"}]},
                "validation_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "forecast": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": _pos_int,
                "num_samples": _pos_int,
                "quantiles": {"type": "array", "minItems": 1,
                              "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
                "lambda_source": {"enum": ["inference", "prior"]},
                "history_len": {"oneOf": [_pos_int, {"type": "null"}]},
                "window": {"oneOf": [_pos_int, {"type": "null"}]},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "value_cols": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                "calendar": {"type": "boolean"},
                "covariate_columns": {"type": "array", "items": {"type": "string"}},
                "gap_flag": {"type": "boolean"},
                "period": {"oneOf": [{"type": "integer", "minimum": 2}, {"type": "null"}]},
            },
        },
    },
}

SEARCH_GRID = {
    "rnn_hidden_dim": (60, 80, 100, 120),
    "latent_dim": (10, 20, 30, 40),
    "rnn_layers": (1, 2, 3),
    "learning_rate": (1e-3, 1e-4),
}


class MissingArtifact(FileNotFoundError):
    pass


# configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: list[tuple[str, str]]) -> dict:
    """Set dotted paths such as ``train.learning_rate`` to JSON-parsed values."""
    cfg = copy.deepcopy(cfg)
    for path, text in overrides:
        keys = path.split(".")
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {path!r}: {k!r} is not a section")
        node[keys[-1]] = _parse_value(text)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None


def resolve_config(path=None, overrides=(), env=None) -> dict:
    """Load a JSON config, apply dotted overrides and DSSH_SEED, validate, fill defaults."""
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise MissingArtifact(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    user = apply_overrides(user, list(overrides))
    env = os.environ if env is None else env
    if env.get("DSSH_SEED"):
        try:
            user["seed"] = int(env["DSSH_SEED"])
        except ValueError:
            raise ConfigError(f"DSSH_SEED must be an integer, got {env['DSSH_SEED']!r}") from None
    validate_config(user)
    return _merge(DEFAULTS, user)


def model_config(cfg: dict, obs_dim: int, covariate_dim: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(obs_dim=obs_dim, covariate_dim=covariate_dim, latent_dim=m["latent_dim"],
                       rnn_hidden_dim=m["rnn_hidden_dim"], rnn_layers=m["rnn_layers"],
                       head_hidden_dims=tuple(m["head_hidden_dims"]), sigma_floor=m["sigma_floor"],
                       decoder=m["decoder"], shrinkage=ShrinkageHyper(**m["shrinkage"]))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


def forecast_config(cfg: dict, threads: int, horizon: int | None = None) -> ForecastConfig:
    f = cfg["forecast"]
    return ForecastConfig(horizon=horizon or f["horizon"], num_samples=f["num_samples"],
                          quantiles=tuple(f["quantiles"]), seed=cfg["seed"],
                          lambda_source=f["lambda_source"], threads=threads)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# artifacts


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def load_panel(cfg: dict, data_dir, name: str):
    d = cfg["data"]
    path = _require(Path(data_dir) / name, f"data file {name}")
    return load_csv_panel(path, d["value_cols"], {"calendar": d["calendar"], "columns": d["covariate_columns"],
                                                  "gap_flag": d["gap_flag"]})


def load_model(checkpoint) -> tuple[ModelConfig, object]:
    ckpt = _require(Path(checkpoint), "checkpoint")
    mpath = _require(ckpt.parent / MODEL_JSON, "model config")
    params, _ = load_checkpoint(ckpt)
    return ModelConfig.from_json(mpath), params


def _history_len(cfg: dict, series_len: int, horizon: int) -> int:
    h = cfg["forecast"]["history_len"]
    h = series_len - horizon if h is None else h
    if h < 1 or h + horizon > series_len:
        raise ConfigError(f"history_len {h} + horizon {horizon} does not fit series of length {series_len}")
    return h


# commands


def cmd_simulate(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"] if args.seed is None else args.seed
    if args.spec == "linear_ssm":
        train_b, test_b = simulate_linear_ssm(LinearSSMSpec(), args.n_train, args.n_test, args.length, seed)
        write_csv_panel(train_b, out / "train.csv", ["u"])
        write_csv_panel(test_b, out / "test.csv", ["u"])
        write_latents_csv(test_b, out / "true_latents.csv")
    else:
        panel = simulate_seasonal_panel(args.n_series, args.length, args.period, seed)
        cut = panel.length - args.holdout
        if cut < 1:
            raise ConfigError(f"holdout {args.holdout} leaves no training data for length {args.length}")
        # hour-of-period covariates are regenerated from timestamps (calendar=true) when period is 24
        write_csv_panel(panel.slice_time(0, cut), out / "train.csv")
        write_csv_panel(panel, out / "test.csv")
    log.info("wrote simulated %s data to %s", args.spec, out)
    return EXIT_OK


def _train_once(cfg, data_dir, out: Path, threads: int):
    panel = load_panel(cfg, data_dir, "train.csv")
    mcfg = model_config(cfg, panel.obs_dim, panel.covariate_dim)
    std, _ = standardize(panel)
    params, tlog = train(mcfg, train_config(cfg), std, out_dir=out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT, params)
    mcfg.to_json(out / MODEL_JSON)
    log_path = out / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    tlog.append_csv(log_path)
    write_json(cfg, out / RESOLVED)
    vloss = tlog.validation[-1][1] if tlog.validation else None
    best = min((v for _, v in tlog.validation), default=None)
    write_json({"final_validation_loss": vloss, "best_validation_loss": best,
                "skipped_steps": len(tlog.skipped)}, out / "train_summary.json")
    return best


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    if args.steps is not None:
        cfg = _merge(cfg, {"train": {"num_steps": args.steps}})
    if not args.search:
        _train_once(cfg, args.data, out, args.threads)
        return EXIT_OK
    rng = np.random.default_rng([cfg["seed"], 7])
    rows = []
    for i in range(args.search):
        draw = {k: v[rng.integers(len(v))] for k, v in SEARCH_GRID.items()}
        trial = _merge(cfg, {
            "model": {"rnn_hidden_dim": max(1, int(round(draw["rnn_hidden_dim"] * args.search_scale))),
                      "latent_dim": max(1, int(round(draw["latent_dim"] * args.search_scale))),
                      "rnn_layers": int(draw["rnn_layers"])},
            "train": {"learning_rate": float(draw["learning_rate"])},
        })
        best = _train_once(trial, args.data, out / f"trial_{i:03d}", args.threads)
        rows.append((i, trial, best))
        log.info("trial %d: %s -> %s", i, draw, best)
    with open(out / "search.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "rnn_hidden_dim", "latent_dim", "rnn_layers", "learning_rate", "validation_loss"])
        for i, trial, best in rows:
            w.writerow([i, trial["model"]["rnn_hidden_dim"], trial["model"]["latent_dim"],
                        trial["model"]["rnn_layers"], repr(trial["train"]["learning_rate"]), repr(best)])
    scored = [r for r in rows if r[2] is not None]
    if scored:
        i, trial, best = min(scored, key=lambda r: r[2])
        write_json({"best_trial": i, "validation_loss": best, "config": trial}, out / "search_best.json")
    return EXIT_OK


def _forecast(args, cfg):
    mcfg, params = load_model(args.checkpoint)
    test = load_panel(cfg, args.data, "test.csv")
    horizon = cfg["forecast"]["horizon"]
    hist_len = _history_len(cfg, test.length, horizon)
    fcfg = forecast_config(cfg, args.threads)
    window = cfg["forecast"]["window"]
    latents = None
    if window is not None and window < horizon:
        res = rolling_forecast(mcfg, params, test, hist_len, window, horizon, fcfg)
    else:
        hist = test.slice_time(0, hist_len)
        res, latents = forecast_with_latents(mcfg, params, hist, test.u[:, hist_len:hist_len + horizon], fcfg)
    truth = test.y[:, hist_len:hist_len + horizon]
    return mcfg, params, test, hist_len, res, latents, truth


def cmd_forecast(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, _, _, _, res, _, truth = _forecast(args, cfg)
    write_forecast_csv(res, out / "forecast.csv")
    write_band_csv(res, truth, out / "bands.csv")
    write_samples(res, out / "samples.dssh")
    write_json(cfg, out / RESOLVED)
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mcfg, params, test, hist_len, res, latents, truth = _forecast(args, cfg)
    report = evaluate_forecast(truth, res)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    write_band_csv(res, truth, out / "bands.csv")
    summary = {"nd": report.nd, "rmse": report.rmse, "num_samples": report.num_samples}
    base = persistence_baseline(test.y[:, :hist_len], res.horizon, cfg["data"]["period"])
    base_report = evaluate_point(truth, base, test.ids)
    summary["baseline_nd"], summary["baseline_rmse"] = base_report.nd, base_report.rmse
    summary["response_recovery"] = float(np.mean([recovery_rate(truth[s], res.samples[s]).mean
                                                  for s in range(len(test))]))
    lat_path = Path(args.data) / "true_latents.csv"
    if latents is not None and lat_path.exists():
        beta = read_latents_csv(lat_path, test.ids, test.length)
        rates = []
        for s in range(len(test)):
            amap = fit_alignment(beta[s, :hist_len], latents[s].mean(axis=0))
            rates.append(recovery_rate(beta[s, hist_len:hist_len + res.horizon], amap.apply(res.latents[s])).mean)
        summary["latent_recovery"] = float(np.mean(rates))
    write_json(summary, out / "summary.json")
    write_json(cfg, out / RESOLVED)
    return EXIT_OK


def _levels(text: str | None) -> list:
    if text is None:
        return [0.0, *DEFAULT_LEVELS]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--levels must be comma-separated numbers, got {text!r}") from None


def cmd_ablate(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    levels = _levels(args.levels)
    mcfg, params = load_model(args.checkpoint)
    test = load_panel(cfg, args.data, "test.csv")
    horizon = cfg["forecast"]["horizon"]
    hist_len = _history_len(cfg, test.length, horizon)
    fcfg = forecast_config(cfg, args.threads)
    report = ablate_shrinkage(mcfg, params, test, hist_len, fcfg, SHRINKAGE_MODES, levels)
    report.to_json(out / "ablation_shrinkage.json")
    report.to_csv(out / "ablation_shrinkage.csv")
    if args.nonlinear_checkpoint:
        nl_cfg, nl_params = load_model(args.nonlinear_checkpoint)
        dec = ablate_decoder((mcfg, params), (nl_cfg, nl_params), test, hist_len, fcfg, levels)
        dec.to_json(out / "ablation_decoder.json")
        dec.to_csv(out / "ablation_decoder.csv")
    write_json(cfg, out / RESOLVED)
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from .gradsuite import run_gradient_suite

    seed = cfg["seed"] if args.seed is None else args.seed
    results = run_gradient_suite(seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_rel_err={r.error:.3e}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "max_rel_err", "passed"])
            for r in results:
                w.writerow([r.name, repr(r.error), int(r.passed)])
    return EXIT_NUMERIC if failed else EXIT_OK


# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dssmsh", description="Deep state-space forecasting with shrinkage priors.",
                                epilog="Config fields can be overridden as --section.key VALUE, e.g. --train.learning_rate 1e-4.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write simulated train/test CSVs")
    s.add_argument("--spec", choices=("linear_ssm", "seasonal"), default="linear_ssm")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--n-train", type=int, default=2560)
    s.add_argument("--n-test", type=int, default=128)
    s.add_argument("--n-series", type=int, default=100)
    s.add_argument("--length", type=int, default=None, help="series length (100 linear_ssm, 1000 seasonal)")
    s.add_argument("--period", type=int, default=24)
    s.add_argument("--holdout", type=int, default=48, help="seasonal: steps withheld from train.csv")

    t = sub.add_parser("train", parents=[common], help="fit a model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None, help="shorthand for --train.num_steps")
    t.add_argument("--search", type=int, default=0, help="random hyperparameter search trials")
    t.add_argument("--search-scale", type=float, default=0.25, help="multiplier on searched widths")

    for name, helptext in (("forecast", "write forecast bands and samples"),
                           ("evaluate", "write metrics against held-out data"),
                           ("ablate", "run shrinkage and decoder ablations")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("--data", required=True)
        c.add_argument("--checkpoint", required=True)
        c.add_argument("--out", required=True)
        if name == "ablate":
            c.add_argument("--levels", default=None, help="comma-separated sparsity levels")
            c.add_argument("--nonlinear-checkpoint", default=None, help="mlp-decoder model for the decoder ablation")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", default=None)
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def _split_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out = []
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg:
            raise ConfigError(f"unrecognized argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            val = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"override {arg!r} needs a value")
        out.append((key, val))
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, _split_overrides(extra))
        args.threads = args.threads or os.cpu_count() or 1
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "simulate" and args.length is None:
            args.length = 100 if args.spec == "linear_ssm" else 1000
        return COMMANDS[args.command](args, cfg)
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # config, domain, shape and malformed-input errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
