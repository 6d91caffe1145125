"""Command-line front end: train | oracle | evaluate | forecast | benchmark.

All outputs are CSV plus JSON/float64-binary artifacts; every run directory
carries a manifest (resolved config, its hash, seeds, package version) so
runs can be reproduced exactly.  Exit codes: 0 success, 2 config/IO error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, regression, systems, trainer
from .config import ConfigError, ExperimentConfig
from .data import GeneratorData, PairedData
from .features import FeatureMap, load_feature_map, save_feature_map
from .trainer import LOG_HEADER

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class NumericalFailure(RuntimeError):
    pass


def _threads() -> int:
    raw = os.environ.get("DPNET_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def _parse_seeds(text: str) -> tuple[int, ...]:
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if hi < lo:
            raise ConfigError(f"empty seed range {text!r}")
        return tuple(range(lo, hi + 1))
    return tuple(int(s) for s in text.split(",") if s)


def _prepare_out(path: str, overwrite: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not overwrite:
        raise ConfigError(f"output directory {out} is not empty (use --overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# -- training ------------------------------------------------------------------


def _sample_training_data(cfg: ExperimentConfig):
    system = cfg.system.build()
    n, seed = cfg.data.n, cfg.data.seed
    if cfg.system.kind == "logistic":
        kwargs = {} if cfg.data.burn_in is None else {"burn_in": cfg.data.burn_in}
        return system, system.sample_trajectory(n, seed=seed, **kwargs), 1.0
    if cfg.system.kind == "linear":
        return system, system.sample_trajectory(n, seed=seed), 1.0
    # langevin
    if cfg.train.score == "generator":
        states = system.sample_states(n, seed=seed)
        return system, GeneratorData(states, system.drift, system.diffusion), None
    pairs = system.sample_trajectory(n, seed=seed, lag_steps=cfg.system.lag_steps)
    return system, pairs, cfg.system.lag_steps * system.dt


def _seed_specs(cfg: ExperimentConfig, seed: int):
    fspec = dataclasses.replace(cfg.features, seed=seed)
    if cfg.train.tied or cfg.train.score == "generator":
        return fspec, None
    base = cfg.features_prime if cfg.features_prime is not None else cfg.features
    return fspec, dataclasses.replace(base, seed=seed + 10_000)


def _train_one(payload) -> dict:
    """Worker: train a single seed; BLAS pinned to one thread so multi-seed
    sweeps are reproducible regardless of DPNET_THREADS."""
    cfg_text, seed, data_blob = payload
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        cfg = ExperimentConfig.from_json(cfg_text)
        tcfg = dataclasses.replace(cfg.train, seed=seed)
        if cfg.train.score == "generator":
            system = cfg.system.build()
            data = GeneratorData(data_blob["x"], system.drift, system.diffusion)
        else:
            data = PairedData(data_blob["x"], data_blob["x_next"])
        fspec, fspec_p = _seed_specs(cfg, seed)
        fmap = FeatureMap.init(fspec)
        fmap_p = None if fspec_p is None else FeatureMap.init(fspec_p)
        report = trainer.train(data, fmap, tcfg, fmap_prime=fmap_p)
        return {
            "seed": seed,
            "aborted": report.aborted,
            "abort_message": report.abort_message,
            "abort_step": report.abort_step,
            "log_rows": report.log_rows(),
            "params": report.params,
            "params_prime": report.params_prime,
            "epoch_wall_s": report.epoch_wall_s,
        }


def _run_training(cfg: ExperimentConfig, out: Path) -> tuple[list[dict], object, object, float | None]:
    system, data, lag_time = _sample_training_data(cfg)
    blob = (
        {"x": data.x}
        if cfg.train.score == "generator"
        else {"x": data.x, "x_next": data.x_next}
    )
    payloads = [(json.dumps(cfg.resolved_dict()), s, blob) for s in cfg.seeds]
    workers = min(_threads(), len(payloads))
    if workers > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(workers) as pool:
            results = pool.map(_train_one, payloads)
    else:
        results = [_train_one(p) for p in payloads]
    return results, system, data, lag_time


def _finalize_seed(cfg, system, data, lag_time, result, seed_dir: Path, oracle):
    """Write checkpoints, final model and per-seed metrics for one run."""
    seed = result["seed"]
    seed_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(seed_dir / "train_log.csv", LOG_HEADER, result["log_rows"])
    fspec, fspec_p = _seed_specs(cfg, seed)
    fmap = FeatureMap(fspec, result["params"])
    save_feature_map(fmap, seed_dir / "feature_map.json", seed_dir / "feature_map.bin")
    fmap_p = None
    if result["params_prime"] is not None:
        fmap_p = FeatureMap(fspec_p, result["params_prime"])
        save_feature_map(
            fmap_p, seed_dir / "feature_map_prime.json", seed_dir / "feature_map_prime.bin"
        )
    if result["aborted"]:
        (seed_dir / "abort_report.json").write_text(
            json.dumps(
                {
                    "seed": seed,
                    "step": result["abort_step"],
                    "message": result["abort_message"],
                },
                indent=2,
            )
            + "\n"
        )
        return None

    metrics = {}
    if cfg.train.score == "generator":
        model = regression.fit_generator(
            fmap, data.x, system.drift, system.diffusion, rtol=cfg.train.rtol
        )
        regression.save_model(model, seed_dir / "model")
        regression.export_eigenvalues_csv(
            model.eigenvalues, seed_dir / "eigenvalues.csv", continuous=True
        )
        if cfg.evaluation is not None and oracle is not None:
            errs = systems.generator_eigenvalue_errors(
                model.eigenvalues, oracle, n_modes=cfg.evaluation.topk
            )
            metrics["max_rel_eigenvalue_error"] = float(np.max(errs))
            for i, e in enumerate(errs):
                metrics[f"rel_eigenvalue_error_{i + 2}"] = float(e)
    else:
        model = regression.fit(
            fmap, data.x, data.x_next, rtol=cfg.train.rtol, lag_time=lag_time or 1.0
        )
        model.register_observable("state", data.x_next)
        regression.save_model(model, seed_dir / "model")
        smodel = regression.spectral(model)
        regression.export_eigenvalues_csv(
            smodel.eigenvalues, seed_dir / "eigenvalues.csv", lag_time=lag_time or 1.0
        )
        if cfg.evaluation is not None and oracle is not None:
            psi_grid, _ = fmap.forward(oracle.grid)
            psi_p_grid = None
            if fmap_p is not None:
                psi_p_grid, _ = fmap_p.forward(oracle.grid)
            rep = systems.representation_metrics(
                oracle,
                psi_grid,
                psi_p_grid,
                topk=cfg.evaluation.topk,
                truncate_r=cfg.evaluation.truncate_r,
                rtol=cfg.train.rtol,
            )
            if "spectral_error" in cfg.evaluation.metrics:
                metrics["spectral_error"] = rep["spectral_error"]
            if "optimality_gap" in cfg.evaluation.metrics:
                metrics["optimality_gap"] = rep["optimality_gap"]
            if "timescales" in cfg.evaluation.metrics:
                tau = regression.implied_timescales(
                    rep["eigenvalues"][: cfg.evaluation.topk], lag_time=lag_time or 1.0
                )
                for i, t in enumerate(tau):
                    metrics[f"implied_timescale_{i + 1}"] = float(t)
    if metrics:
        _write_csv(
            seed_dir / "metrics.csv", ("metric", "value"), sorted(metrics.items())
        )
    return metrics


def _oracle_for(cfg: ExperimentConfig, system):
    if cfg.evaluation is None:
        return None
    if cfg.system.kind == "logistic":
        return system.oracle()
    if cfg.system.kind == "langevin" and cfg.train.score == "generator":
        return system.generator_oracle()
    return None


def run_experiment(cfg: ExperimentConfig, out: Path) -> tuple[int, dict]:
    """Full multi-seed training run; returns (exit_code, aggregate metrics)."""
    manifest = {
        "config": cfg.resolved_dict(),
        "config_sha256": cfg.sha256(),
        "seeds": list(cfg.seeds),
        "version": __version__,
        "threads": _threads(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    results, system, data, lag_time = _run_training(cfg, out)
    oracle = _oracle_for(cfg, system)
    per_seed = {}
    any_abort = False
    for result in results:
        seed_dir = out / f"seed_{result['seed']:04d}"
        metrics = _finalize_seed(cfg, system, data, lag_time, result, seed_dir, oracle)
        if metrics is None:
            any_abort = True
            print(
                f"seed {result['seed']}: aborted ({result['abort_message']})",
                file=sys.stderr,
            )
        elif metrics:
            per_seed[result["seed"]] = metrics
    aggregate = {}
    if per_seed:
        names = sorted({k for m in per_seed.values() for k in m})
        rows = []
        for name in names:
            vals = np.array([m[name] for m in per_seed.values() if name in m])
            rows.append((name, float(vals.mean()), float(vals.std())))
            aggregate[name] = (float(vals.mean()), float(vals.std()))
        _write_csv(out / "aggregate_metrics.csv", ("metric", "mean", "std"), rows)
    return (EXIT_NUMERIC if any_abort else EXIT_OK), aggregate


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    if args.seeds:
        cfg = dataclasses.replace(cfg, seeds=_parse_seeds(args.seeds))
    out_path = args.out or cfg.out
    if not out_path:
        raise ConfigError("an output directory is required (--out or config.out)")
    out = _prepare_out(out_path, args.overwrite)
    code, _ = run_experiment(cfg, out)
    return code


# -- oracle ----------------------------------------------------------------------


def _refinement_rows(o1, o2, kind):
    rows = []
    if kind == "transfer":
        for i in range(min(7, o1.singular_values.size)):
            a, b = float(o1.singular_values[i]), float(o2.singular_values[i])
            rows.append((f"sigma_{i + 1}", a, b, abs(a - b)))
        k = min(5, o1.eigenvalues.size)
        d = systems.spectral_error(o1.eigenvalues[:k], o2.eigenvalues, k)
        rows.append((f"eig_top{k}_matching", float("nan"), float("nan"), d))
    else:
        for i in range(min(7, o1.eigenvalues.size)):
            a, b = float(np.real(o1.eigenvalues[i])), float(np.real(o2.eigenvalues[i]))
            rows.append((f"lambda_{i + 1}", a, b, abs(a - b)))
    return rows


def cmd_oracle(args) -> int:
    cfg = ExperimentConfig.from_json(Path(args.config).read_text())
    grid = args.grid or cfg.system.grid_size
    out = _prepare_out(args.out, args.overwrite)
    system = cfg.system.build()
    if cfg.system.kind == "logistic":
        oracle = system.oracle(grid)
        refined = system.oracle(2 * grid)
    elif cfg.system.kind == "langevin":
        oracle = system.generator_oracle(grid)
        refined = system.generator_oracle(2 * grid)
    else:
        raise ConfigError("the linear system has closed forms; no oracle to build")
    systems.save_oracle(oracle, out / "oracle")
    rows = [
        (i + 1, float(s), float(np.real(e)), float(np.imag(e)))
        for i, (s, e) in enumerate(
            zip(oracle.singular_values, np.asarray(oracle.eigenvalues, dtype=complex))
        )
    ]
    _write_csv(out / "spectrum.csv", ("index", "sigma", "eig_real", "eig_imag"), rows)
    _write_csv(
        out / "refinement.csv",
        ("quantity", f"grid_{grid}", f"grid_{2 * grid}", "abs_diff"),
        _refinement_rows(oracle, refined, oracle.kind),
    )
    return EXIT_OK


# -- evaluate ---------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    model = regression.load_model(args.model)
    oracle = systems.load_oracle(args.oracle)
    rows = []
    if isinstance(model, regression.GeneratorModel):
        if oracle.kind != "generator":
            raise ConfigError("generator model needs a generator oracle")
        errs = systems.generator_eigenvalue_errors(model.eigenvalues, oracle, args.topk)
        rows.append(("max_rel_eigenvalue_error", float(np.max(errs))))
        for i, t in enumerate(model.implied_timescales()[: args.topk + 1]):
            rows.append((f"implied_timescale_{i + 1}", float(t)))
    else:
        if oracle.kind != "transfer":
            raise ConfigError("transfer model needs a transfer oracle")
        psi_grid, _ = model.fmap.forward(oracle.grid)
        psi_p_grid = None
        if args.features_prime:
            fmap_p = load_feature_map(
                args.features_prime + ".json", args.features_prime + ".bin"
            )
            psi_p_grid, _ = fmap_p.forward(oracle.grid)
        rep = systems.representation_metrics(
            oracle,
            psi_grid,
            psi_p_grid,
            topk=args.topk,
            truncate_r=args.truncate_r,
            rtol=model.rtol,
        )
        rows.append(("spectral_error", rep["spectral_error"]))
        rows.append(("optimality_gap", rep["optimality_gap"]))
        tau = regression.implied_timescales(
            rep["eigenvalues"][: args.topk], lag_time=model.lag_time
        )
        for i, t in enumerate(tau):
            rows.append((f"implied_timescale_{i + 1}", float(t)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ("metric", "value"), rows)
    return EXIT_OK


# -- forecast ----------------------------------------------------------------------


def cmd_forecast(args) -> int:
    model = regression.load_model(args.model)
    if isinstance(model, regression.GeneratorModel):
        raise ConfigError("forecasting needs a transfer model")
    queries = np.loadtxt(args.queries, delimiter=",", ndmin=2)
    smodel = regression.spectral(model)
    observable = args.observable
    if observable not in model.observables:
        raise ConfigError(f"observable {observable!r} not stored in the model")
    rows = []
    d = queries.shape[1]
    for t in range(1, args.horizon + 1):
        vals = regression.forecast(smodel, observable, t, queries)
        for q in range(queries.shape[0]):
            rows.append(
                tuple(float(v) for v in queries[q])
                + (t,)
                + tuple(float(v) for v in np.atleast_1d(vals[q]))
            )
    header = tuple(f"query_{i}" for i in range(d)) + ("t",) + tuple(
        f"value_{i}" for i in range(np.atleast_2d(vals).shape[1])
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, header, rows)
    return EXIT_OK


# -- benchmark ---------------------------------------------------------------------


def logistic_benchmark_config(score: str, seeds=tuple(range(20))) -> ExperimentConfig:
    """The standard noisy-logistic-map reproduction protocol: 2^14-point
    trajectory, batch 2^13, 500 epochs, 64-128-64 hidden layers, 7 features,
    distortion coefficient 1."""
    return ExperimentConfig.from_dict(
        {
            "system": {"kind": "logistic", "noise_order": 20, "grid_size": 1024},
            "data": {"n": 2**14, "seed": 0},
            "features": {
                "input_dim": 1,
                "widths": [64, 128, 64, 7],
                "activations": ["leaky_relu", "leaky_relu", "leaky_relu", "identity"],
            },
            "train": {
                "score": score,
                "gamma": 1.0,
                "batch_size": 2**13,
                "epochs": 500,
                "learning_rate": 1e-3,
            },
            "evaluation": {"topk": 3, "truncate_r": 3},
            "seeds": list(seeds),
        }
    )


def cmd_benchmark(args) -> int:
    seeds = _parse_seeds(args.seeds) if args.seeds else tuple(range(20))
    out = _prepare_out(args.out, args.overwrite)
    summary = []
    code = EXIT_OK
    for score in ("S", "P"):
        cfg = logistic_benchmark_config(score, seeds)
        sub = out / f"score_{score}"
        sub.mkdir(exist_ok=True)
        rc, aggregate = run_experiment(cfg, sub)
        code = max(code, rc)
        for name, (mean, std) in aggregate.items():
            summary.append((score, name, mean, std))
    _write_csv(out / "summary.csv", ("score", "metric", "mean", "std"), summary)
    return code


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpnet", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train feature maps and fit a model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None)
    t.add_argument("--seeds", default=None, help="A..B or comma list")
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train)

    o = sub.add_parser("oracle", help="build and export an exact oracle")
    o.add_argument("--config", required=True)
    o.add_argument("--grid", type=int, default=None)
    o.add_argument("--out", required=True)
    o.add_argument("--overwrite", action="store_true")
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("evaluate", help="metrics of a fitted model vs an oracle")
    e.add_argument("--model", required=True, help="model path prefix")
    e.add_argument("--oracle", required=True, help="oracle path prefix")
    e.add_argument("--features-prime", default=None, help="second map path prefix")
    e.add_argument("--topk", type=int, default=3)
    e.add_argument("--truncate-r", type=int, default=3)
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.set_defaults(func=cmd_evaluate)

    f = sub.add_parser("forecast", help="multi-step forecasts at query states")
    f.add_argument("--model", required=True)
    f.add_argument("--horizon", type=int, required=True)
    f.add_argument("--queries", required=True, help="CSV, one state per row")
    f.add_argument("--observable", default="state")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forecast)

    b = sub.add_parser("benchmark", help="standard logistic-map reproduction")
    b.add_argument("--out", required=True)
    b.add_argument("--seeds", default=None)
    b.add_argument("--overwrite", action="store_true")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
