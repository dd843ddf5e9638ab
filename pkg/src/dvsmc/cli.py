"""Experiment command line: simulate / train / evaluate / plot.

Workflows are driven by a TOML config file; command-line flags override
file values.  Exit codes: 0 success, 2 config error, 3 missing artifact,
4 numerical failure.  Every run logs the resolved config next to its
outputs, and re-running any command with the same config and seed
reproduces the numeric outputs bit-exactly (wall-clock columns aside).

Layout under the output directory:

    config.resolved.toml       resolved settings echo (per command)
    data/                      dataset containers
    checkpoints/               trained parameters + optimizer state
    reports/                   per-epoch training CSVs
    eval/                      per-seed and aggregate metric CSVs + summary.json
    plots/                     SVG figures and their CSV twins
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import autodiff as ad
from . import ssm
from .baselines import ConstantVelocityBpf, ImageEkf, run_bpf
from .evaluation import (
    aggregate,
    build_attractor_prior,
    elbo_decompose,
    fit_step_gaussians,
    gaussians_from_beliefs,
    gaussians_from_points,
    tracking_error,
)
from .models import DpfModel, SupervisedEncoder
from .smc import FilterConfig, ParticleDeathError, run_filter
from .training import (
    SupervisedConfig,
    TrainConfig,
    TrainingDiverged,
    save_train_checkpoint,
    train,
    train_supervised,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4

METHODS = ("dpf", "bpf", "bpf10x", "ekf", "supervised")
REGIMES = ("noise", "partial")


class ConfigError(RuntimeError):
    pass


class MissingArtifactError(RuntimeError):
    pass


DEFAULT_CONFIG = {
    "experiment": {"seed": 0, "out_dir": "runs/exp"},
    "simulate": {
        "train_count": 1024, "train_steps": 8,
        "val_count": 32, "val_steps": 128, "sigma_e": 0.5,
    },
    "regimes": {
        "noise": {"sigma_v": [0.1, 0.6], "observe_p": 1.0},
        "partial": {"sigma_v": 0.1, "observe_p": [0.2, 1.0]},
    },
    "train": {
        "epochs": 24, "batch_size": 32, "learning_rate": 1e-3,
        "weight_decay": 0.01, "n_particles": 28,
        "supervised_epochs": 30, "supervised_batch": 256,
    },
    "filter": {
        "n_particles": 28, "sinkhorn_eps": 0.5,
        "sinkhorn_max_iters": 100, "sinkhorn_tol": 1e-6,
    },
    "prior": {"n_steps": 100_000, "burn_in": 1_000, "max_points": 4_096},
    "evaluate": {
        "methods": list(METHODS), "seeds": 10,
        "noise_grid": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        "partial_grid": [0.2, 0.4, 0.6, 0.8, 1.0],
        "mc_samples": 128, "elbo": True,
        "val_count": 0, "val_steps": 0,  # 0 = use the full validation set
    },
}


def _deep_update(base: dict, new: dict) -> dict:
    out = dict(base)
    for key, val in new.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    config = DEFAULT_CONFIG
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p, "rb") as fh:
                config = _deep_update(config, tomllib.load(fh))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML in {p}: {exc}") from exc
    config = _deep_update(config, overrides)
    for m in config["evaluate"]["methods"]:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; valid: {', '.join(METHODS)}")
    for grid_key in ("noise_grid", "partial_grid"):
        if not config["evaluate"][grid_key]:
            raise ConfigError(f"evaluate.{grid_key} must be non-empty")
    if not config["evaluate"]["methods"]:
        raise ConfigError("evaluate.methods must be non-empty")
    return config


def _echo_config(config: dict, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# resolved config for `{command}`", ""]

    def emit(table: str, d: dict):
        lines.append(f"[{table}]")
        for k, v in sorted(d.items()):
            if isinstance(v, dict):
                continue
            if isinstance(v, str):
                lines.append(f'{k} = "{v}"')
            elif isinstance(v, bool):
                lines.append(f"{k} = {str(v).lower()}")
            else:
                lines.append(f"{k} = {v}")
        lines.append("")
        for k, v in sorted(d.items()):
            if isinstance(v, dict):
                emit(f"{table}.{k}", v)

    for table, d in config.items():
        emit(table, d)
    (out_dir / f"config.resolved.{command}.toml").write_text("\n".join(lines))


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get("DVSMC_THREADS", "1")))
    except ValueError:
        return 1


def _paths(config: dict) -> dict:
    out = Path(config["experiment"]["out_dir"])
    return {
        "out": out,
        "data": out / "data",
        "ckpt": out / "checkpoints",
        "reports": out / "reports",
        "eval": out / "eval",
        "plots": out / "plots",
    }


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path} (run the producing command first)")
    return path


def _regime_settings(config: dict, regime: str):
    r = config["regimes"][regime]
    sigma_v = r["sigma_v"]
    observe_p = r["observe_p"]
    if isinstance(sigma_v, list):
        sigma_v = tuple(sigma_v)
    if isinstance(observe_p, list):
        observe_p = tuple(observe_p)
    return sigma_v, observe_p


# ---------------------------------------------------------------------------
# simulate

def cmd_simulate(config: dict) -> int:
    paths = _paths(config)
    _echo_config(config, paths["out"], "simulate")
    seed = config["experiment"]["seed"]
    sim = config["simulate"]
    for regime in REGIMES:
        sigma_v, observe_p = _regime_settings(config, regime)
        ds = ssm.generate_dataset(
            sim["train_count"], sim["train_steps"], sigma_v, observe_p,
            seed=seed + {"noise": 0, "partial": 1}[regime], sigma_e=sim["sigma_e"],
        )
        ds.save(paths["data"] / f"train_{regime}.ds")
        print(f"wrote {paths['data'] / f'train_{regime}.ds'} "
              f"({ds.count}x{ds.n_steps} steps)")
    val = ssm.generate_dataset(
        sim["val_count"], sim["val_steps"], 0.1, 1.0,
        seed=seed + 2, sigma_e=sim["sigma_e"],
    )
    val.save(paths["data"] / "val.ds")
    print(f"wrote {paths['data'] / 'val.ds'} ({val.count}x{val.n_steps} steps)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _build_prior(config: dict):
    p = config["prior"]
    return build_attractor_prior(p["n_steps"], p["burn_in"], max_points=p["max_points"])


def cmd_train(config: dict, regimes=None) -> int:
    paths = _paths(config)
    _echo_config(config, paths["out"], "train")
    seed = config["experiment"]["seed"]
    tcfg = config["train"]
    prior = _build_prior(config)
    val_path = paths["data"] / "val.ds"
    val_ds = ssm.Dataset.load(val_path) if val_path.exists() else None

    for regime in regimes or REGIMES:
        ds_path = _require(paths["data"] / f"train_{regime}.ds", f"{regime} training dataset")
        dataset = ssm.Dataset.load(ds_path)

        model = DpfModel(np.random.default_rng([seed, 11]), prior=prior)
        cfg = TrainConfig(
            epochs=tcfg["epochs"], batch_size=tcfg["batch_size"],
            learning_rate=tcfg["learning_rate"], weight_decay=tcfg["weight_decay"],
            n_particles=tcfg["n_particles"], seed=seed,
            sinkhorn_eps=config["filter"]["sinkhorn_eps"],
            sinkhorn_max_iters=config["filter"]["sinkhorn_max_iters"],
            sinkhorn_tol=config["filter"]["sinkhorn_tol"],
        )
        print(f"training DPF ({regime} regime): {dataset.count} sequences, "
              f"{cfg.epochs} epochs")
        report = train(dataset, model, cfg, val_dataset=val_ds, progress=True)
        paths["reports"].mkdir(parents=True, exist_ok=True)
        report.to_csv(paths["reports"] / f"train_dpf_{regime}.csv")
        paths["ckpt"].mkdir(parents=True, exist_ok=True)
        save_train_checkpoint(
            paths["ckpt"] / f"dpf_{regime}.ckpt", model, None,
            meta={"regime": regime, "seed": seed, "epochs": len(report.epochs),
                  "aborted": report.aborted},
        )
        if report.aborted:
            raise TrainingDiverged(f"DPF training diverged in regime {regime!r}")

        sup = SupervisedEncoder(np.random.default_rng([seed, 13]))
        scfg = SupervisedConfig(epochs=tcfg["supervised_epochs"],
                                batch_size=tcfg["supervised_batch"], seed=seed)
        print(f"training supervised encoder ({regime} regime): {scfg.epochs} epochs")
        sreport = train_supervised(dataset, sup, scfg, progress=True)
        sreport.to_csv(paths["reports"] / f"train_supervised_{regime}.csv")
        ad.save_checkpoint(
            paths["ckpt"] / f"supervised_{regime}.ckpt", sup.named_parameters(),
            meta={"regime": regime, "seed": seed},
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def _load_dpf(config: dict, regime: str, prior) -> DpfModel:
    paths = _paths(config)
    ckpt = _require(paths["ckpt"] / f"dpf_{regime}.ckpt", f"DPF checkpoint ({regime})")
    arrays, _ = ad.load_checkpoint(ckpt)
    model = DpfModel(np.random.default_rng(0), prior=prior)
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model


def _load_supervised(config: dict, regime: str) -> SupervisedEncoder:
    paths = _paths(config)
    ckpt = _require(paths["ckpt"] / f"supervised_{regime}.ckpt",
                    f"supervised checkpoint ({regime})")
    arrays, _ = ad.load_checkpoint(ckpt)
    net = SupervisedEncoder(np.random.default_rng(0))
    params = net.named_parameters()
    for name, p in params.items():
        if name not in arrays:
            raise MissingArtifactError(f"checkpoint missing parameter {name!r}")
        p.data = arrays[name].astype(np.float64).copy()
    return net


def evaluate_sequence(method: str, model, dataset, i: int, rng: np.random.Generator,
                      filter_config: FilterConfig, want_elbo=False, prior=None,
                      mc_samples=128):
    """Tracking error (and optional ELBO terms) for one validation sequence."""
    obs = dataset.observations(i)
    truth = dataset.states[i, 1:]
    init_pos = dataset.states[i, 0]
    q_dists = None
    if method == "dpf":
        init = model.initial_particles(filter_config.n_particles, rng)
        trace = run_filter(obs, model, filter_config, rng, init)
        if want_elbo:
            q_dists = fit_step_gaussians(trace)
    elif method in ("bpf", "bpf10x"):
        n = filter_config.n_particles * (10 if method == "bpf10x" else 1)
        trace = run_bpf(obs, init_pos, n, rng)
        if want_elbo:
            q_dists = fit_step_gaussians(trace)
    elif method == "ekf":
        beliefs, trace = ImageEkf().run(obs, init_pos)
        if want_elbo:
            q_dists = gaussians_from_beliefs(beliefs)
    elif method == "supervised":
        preds = ad.values(model.predict_batch(dataset.frames[i], dataset.masks[i]))
        trace = (preds[:, None, :], np.ones((len(obs), 1)))
        if want_elbo:
            q_dists = gaussians_from_points(preds)
    else:
        raise ConfigError(f"unknown method {method!r}")
    err = float(tracking_error(trace, truth).mean())
    if not want_elbo:
        return err, None
    decomp = elbo_decompose(q_dists, obs, prior, mc_samples=mc_samples,
                            rng=np.random.default_rng([rng.integers(2**31), 3]))
    return err, decomp


def _eval_one_seed(method, model, dataset, filter_config, data_seed, method_seed,
                   want_elbo, prior, mc_samples, sigma_v=None, observe_p=None):
    ds = dataset.regenerate_observations(seed=data_seed, sigma_v=sigma_v,
                                         observe_p=observe_p)
    errs, liks, lffs, kls = [], [], [], []
    for i in range(ds.count):
        rng = np.random.default_rng([method_seed, i])
        err, decomp = evaluate_sequence(method, model, ds, i, rng, filter_config,
                                        want_elbo, prior, mc_samples)
        errs.append(err)
        if decomp is not None:
            liks.append(decomp.lik_mean)
            lffs.append(decomp.lik_full_frame_mean)
            kls.append(decomp.kl_mean)
    out = {"error": float(np.mean(errs))}
    if want_elbo:
        out.update(
            lik=float(np.mean(liks)), lik_full_frame=float(np.mean(lffs)),
            kl=float(np.mean(kls)),
            elbo_full_frame=float(np.mean(lffs) - np.mean(kls)),
        )
    return out


def run_sweep(config: dict, regime: str, methods, conditions, seeds: int,
              val_dataset, prior, want_elbo=False, progress=True):
    """Per-seed metric rows for every (method, condition); deterministic."""
    fcfg = config["filter"]
    filter_config = FilterConfig(
        n_particles=fcfg["n_particles"], resampler="systematic",
        sinkhorn_eps=fcfg["sinkhorn_eps"], sinkhorn_max_iters=fcfg["sinkhorn_max_iters"],
        sinkhorn_tol=fcfg["sinkhorn_tol"],
    )
    exp_seed = config["experiment"]["seed"]
    mc_samples = config["evaluate"]["mc_samples"]
    models = {}
    for m in methods:
        if m == "dpf":
            models[m] = _load_dpf(config, regime, prior)
        elif m == "supervised":
            models[m] = _load_supervised(config, regime)
        else:
            models[m] = None

    rows = []
    jobs = []
    for ci, cond in enumerate(conditions):
        sigma_v = cond if regime == "noise" else config["regimes"]["partial"]["sigma_v"]
        observe_p = 1.0 if regime == "noise" else cond
        for s in range(seeds):
            data_seed_key = [exp_seed, 500 + ci, s]
            data_seed = int(np.random.default_rng(data_seed_key).integers(2**31))
            for mi, method in enumerate(methods):
                method_seed_key = [exp_seed, 600 + ci, mi, s]
                method_seed = int(np.random.default_rng(method_seed_key).integers(2**31))
                jobs.append((method, cond, s, data_seed, method_seed, sigma_v, observe_p))

    def run_job(job):
        method, cond, s, data_seed, method_seed, sigma_v, observe_p = job
        metrics = _eval_one_seed(
            method, models[method], val_dataset, filter_config, data_seed,
            method_seed, want_elbo, prior, mc_samples,
            sigma_v=sigma_v, observe_p=observe_p,
        )
        return {"method": method, "condition": cond, "seed": s, **metrics}

    workers = _n_workers()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_job, jobs))
    else:
        for job in jobs:
            rows.append(run_job(job))
            if progress:
                r = rows[-1]
                print(f"  {regime}: {r['method']} cond={r['condition']} "
                      f"seed={r['seed']} error={r['error']:.3f}")
    return rows


def _write_rows_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([
                repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns
            ])


def read_rows_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for raw in reader:
            row = {}
            for k, v in raw.items():
                try:
                    row[k] = float(v)
                except ValueError:
                    row[k] = v
            out.append(row)
    return out


def aggregate_rows(rows: list[dict], value_key: str = "error") -> list[dict]:
    """Aggregate per-seed rows into (method, condition, mean, ci-low, ci-high)."""
    keys = sorted({(r["method"], r["condition"]) for r in rows})
    out = []
    for method, cond in keys:
        vals = [r[value_key] for r in rows
                if r["method"] == method and r["condition"] == cond]
        mean, lo, hi = aggregate(vals)
        out.append({"method": method, "condition": cond, "mean": mean,
                    "ci-low": lo, "ci-high": hi})
    return out


def cmd_evaluate(config: dict, regimes=None) -> int:
    paths = _paths(config)
    _echo_config(config, paths["out"], "evaluate")
    ecfg = config["evaluate"]
    if not ecfg["methods"]:
        raise ConfigError("no methods selected")
    val_path = _require(paths["data"] / "val.ds", "validation dataset")
    val = ssm.Dataset.load(val_path)
    if ecfg["val_count"]:
        import dataclasses

        k = min(ecfg["val_count"], val.count)
        t = min(ecfg["val_steps"] or val.n_steps, val.n_steps)
        val = dataclasses.replace(
            val, states=val.states[:k, : t + 1], frames=val.frames[:k, :t],
            masks=val.masks[:k, :t], sigma_v=val.sigma_v[:k], observe_p=val.observe_p[:k],
        )
    prior = _build_prior(config)
    summary = {}
    for regime in regimes or REGIMES:
        conditions = ecfg["noise_grid"] if regime == "noise" else ecfg["partial_grid"]
        want_elbo = bool(ecfg["elbo"]) and regime == "partial"
        rows = run_sweep(config, regime, ecfg["methods"], conditions, ecfg["seeds"],
                         val, prior, want_elbo=want_elbo)
        cols = ["method", "condition", "seed", "error"]
        if want_elbo:
            cols += ["lik", "lik_full_frame", "kl", "elbo_full_frame"]
        _write_rows_csv(paths["eval"] / f"tracking_{regime}.csv", rows, cols)
        agg = aggregate_rows(rows, "error")
        _write_rows_csv(paths["eval"] / f"aggregate_{regime}.csv", agg,
                        ["method", "condition", "mean", "ci-low", "ci-high"])
        summary[regime] = {
            f"{r['method']}@{r['condition']}": r["mean"] for r in agg
        }
        if want_elbo:
            for key in ("lik_full_frame", "kl", "elbo_full_frame"):
                agg_e = aggregate_rows(rows, key)
                _write_rows_csv(paths["eval"] / f"aggregate_elbo_{key}.csv", agg_e,
                                ["method", "condition", "mean", "ci-low", "ci-high"])
    (paths["eval"] / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote evaluation results under {paths['eval']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plot

def _series_from_agg(rows: list[dict]):
    methods = sorted({r["method"] for r in rows})
    series = []
    for m in methods:
        sub = sorted([r for r in rows if r["method"] == m], key=lambda r: r["condition"])
        series.append({
            "name": m,
            "x": [r["condition"] for r in sub],
            "y": [r["mean"] for r in sub],
            "lo": [r["ci-low"] for r in sub],
            "hi": [r["ci-high"] for r in sub],
        })
    return series


def cmd_plot(config: dict) -> int:
    from .svgplot import line_plot_svg

    paths = _paths(config)
    _echo_config(config, paths["out"], "plot")
    plots = paths["plots"]
    made = []

    noise_agg = paths["eval"] / "aggregate_noise.csv"
    if noise_agg.exists():
        rows = read_rows_csv(noise_agg)
        line_plot_svg(plots / "tracking_noise.svg", _series_from_agg(rows),
                      "Tracking error vs observation noise",
                      "observation noise std", "tracking error")
        _write_rows_csv(plots / "tracking_noise.csv", rows,
                        ["method", "condition", "mean", "ci-low", "ci-high"])
        made.append("tracking_noise")

    partial_agg = paths["eval"] / "aggregate_partial.csv"
    if partial_agg.exists():
        rows = read_rows_csv(partial_agg)
        line_plot_svg(plots / "tracking_partial.svg", _series_from_agg(rows),
                      "Tracking error vs observed proportion",
                      "observed proportion", "tracking error")
        _write_rows_csv(plots / "tracking_partial.csv", rows,
                        ["method", "condition", "mean", "ci-low", "ci-high"])
        made.append("tracking_partial")

    elbo_files = {
        "likelihood": paths["eval"] / "aggregate_elbo_lik_full_frame.csv",
        "kl": paths["eval"] / "aggregate_elbo_kl.csv",
    }
    if all(p.exists() for p in elbo_files.values()):
        series = []
        rows_out = []
        for label, p in elbo_files.items():
            rows = read_rows_csv(p)
            for s in _series_from_agg(rows):
                s["name"] = f"{s['name']} {label}"
                series.append(s)
            for r in rows:
                rows_out.append({**r, "method": f"{r['method']} {label}"})
        line_plot_svg(plots / "elbo_partial.svg", series,
                      "ELBO decomposition vs observed proportion",
                      "observed proportion", "nats (likelihood full-frame, KL)")
        _write_rows_csv(plots / "elbo_partial.csv", rows_out,
                        ["method", "condition", "mean", "ci-low", "ci-high"])
        made.append("elbo_partial")

    if not made:
        raise MissingArtifactError(
            f"no aggregate CSVs found under {paths['eval']} (run `evaluate` first)"
        )
    print(f"wrote plots: {', '.join(made)} under {plots}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvsmc",
        description="Differentiable particle filtering experiments on Lorenz images",
    )
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, help="override experiment.seed")
    parser.add_argument("--out", help="override experiment.out_dir")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="generate training and validation datasets")

    p_train = sub.add_parser("train", help="train DPF and supervised models")
    p_train.add_argument("--regime", choices=REGIMES, help="train one regime only")

    p_eval = sub.add_parser("evaluate", help="run method sweeps on the validation set")
    p_eval.add_argument("--regime", choices=REGIMES, help="evaluate one regime only")
    p_eval.add_argument("--methods", help="comma-separated subset of: " + ",".join(METHODS))

    sub.add_parser("plot", help="emit SVG figures and CSV twins from eval results")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides: dict = {"experiment": {}}
    if args.seed is not None:
        overrides["experiment"]["seed"] = args.seed
    if args.out is not None:
        overrides["experiment"]["out_dir"] = args.out
    if getattr(args, "methods", None):
        overrides["evaluate"] = {"methods": args.methods.split(",")}

    try:
        config = load_config(args.config, overrides)
        regimes = [args.regime] if getattr(args, "regime", None) else None
        if args.command == "simulate":
            return cmd_simulate(config)
        if args.command == "train":
            return cmd_train(config, regimes)
        if args.command == "evaluate":
            return cmd_evaluate(config, regimes)
        if args.command == "plot":
            return cmd_plot(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, ParticleDeathError, ad.AutodiffError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
