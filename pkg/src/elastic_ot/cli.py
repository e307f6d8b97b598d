"""Command-line drivers: ``generate``, ``estimate``, ``learn`` and ``benchmark``.

Every subcommand reads a JSON config (``--config``); flags named after the
config keys override it, and defaults fill whatever is left. The resolved
config is validated before any computation starts.

File formats
------------
* point clouds: CSV with header ``x0,...,x{d-1}`` and an optional trailing
  ``weight`` column; numbers are written with 17 significant digits.
* matrices (learned ``A``): CSV with header ``a0,...,a{d-1}``.
* a dataset directory holds ``train_X.csv``, ``train_Y.csv``, ``test_X.csv``,
  ``test_Y.csv`` and ``metadata.json``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 some grid
cells failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .costlearn import StepSchedule, learn_subspace, recovery_error
from .costs import ElasticCost, Regularizer
from .htransform import PGDSettings
from .sinkhorn import (DiscreteProblem, SinkhornSettings, mbo_map, sinkhorn_divergence,
                       solve_duals)
from .synth import GenerationSpec, generate_benchmark

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4

FLOAT_FMT = "%.17g"
METRIC_HEADER = ["experiment", "seed", "gamma", "metric", "value", "converged"]
LEARN_LOG_HEADER = ["iteration", "loss", "recovery_error", "eta"]
BENCH_HEADER = ["config_hash", "experiment", "mode", "task", "d", "p_star", "sv_target", "p_hat",
                "gamma", "seed", "metric", "value", "converged", "status", "mean", "std"]


class ConfigError(ValueError):
    """Invalid configuration or input files."""


# ---------------------------------------------------------------- file formats

def write_cloud(path, X, weights=None) -> None:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    header = [f"x{k}" for k in range(X.shape[1])]
    data = X
    if weights is not None:
        header.append("weight")
        data = np.column_stack([X, np.asarray(weights, dtype=float)])
    _write_matrix(path, header, data)


def read_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(X, weights)``; ``weights`` is None when the file has no weight column."""
    header, data = _read_matrix(path)
    weights = None
    if header and header[-1] == "weight":
        weights, data, header = data[:, -1].copy(), data[:, :-1], header[:-1]
    expected = [f"x{k}" for k in range(len(header))]
    if header != expected:
        raise ConfigError(f"{path}: expected header {','.join(expected)}, got {','.join(header)}")
    return data, weights


def write_matrix(path, A) -> None:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    _write_matrix(path, [f"a{k}" for k in range(A.shape[1])], A)


def read_matrix(path) -> np.ndarray:
    header, data = _read_matrix(path)
    if header != [f"a{k}" for k in range(len(header))]:
        raise ConfigError(f"{path}: unexpected matrix header {','.join(header)}")
    return data


def _write_matrix(path, header, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.atleast_2d(data):
            fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")


def _read_matrix(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    data = data.reshape(-1, len(header))
    if not np.all(np.isfinite(data)):
        raise ConfigError(f"{path}: non-finite entries")
    return header, data


@dataclass
class Dataset:
    X_train: np.ndarray
    Y_train: np.ndarray
    X_test: np.ndarray
    Y_test: np.ndarray
    a: np.ndarray | None
    b: np.ndarray | None
    metadata: dict[str, Any]


def save_dataset(out_dir, bench) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_cloud(out / "train_X.csv", bench.X_train)
    write_cloud(out / "train_Y.csv", bench.Y_train)
    write_cloud(out / "test_X.csv", bench.X_test)
    write_cloud(out / "test_Y.csv", bench.Y_test)
    with open(out / "metadata.json", "w") as fh:
        json.dump(bench.metadata, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not d.is_dir():
        raise ConfigError(f"data directory not found: {d}")
    X, a = read_cloud(d / "train_X.csv")
    Y, b = read_cloud(d / "train_Y.csv")
    Xt, _ = read_cloud(d / "test_X.csv")
    Yt, _ = read_cloud(d / "test_Y.csv")
    meta: dict[str, Any] = {}
    if (d / "metadata.json").is_file():
        with open(d / "metadata.json") as fh:
            try:
                meta = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{d / 'metadata.json'}: {exc}") from exc
    dims = {X.shape[1], Y.shape[1], Xt.shape[1], Yt.shape[1]}
    if len(dims) != 1:
        raise ConfigError(f"{d}: clouds disagree on dimension {sorted(dims)}")
    if Xt.shape[0] != Yt.shape[0]:
        raise ConfigError(f"{d}: test clouds have {Xt.shape[0]} and {Yt.shape[0]} rows")
    return Dataset(X, Y, Xt, Yt, a, b, meta)


def _dataset_dirs(data_dir, seeds) -> list[tuple[Any, Path]]:
    root = Path(data_dir)
    if seeds is None:
        return [(None, root)]
    return [(s, root / f"seed_{s}") for s in seeds]


# ---------------------------------------------------------------- configs

REQUIRED = object()


def _bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "1", "yes"):
        return True
    if isinstance(v, str) and v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int(v):
    if isinstance(v, bool):
        raise ValueError(f"not an integer: {v!r}")
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(f"not an integer: {v!r}")
    return int(v)


def _float(v):
    if isinstance(v, bool):
        raise ValueError(f"not a number: {v!r}")
    out = float(v)
    if not math.isfinite(out):
        raise ValueError(f"not a finite number: {v!r}")
    return out


def _str(v):
    if not isinstance(v, str):
        raise ValueError(f"not a string: {v!r}")
    return v


def _list(item):
    def parse(v):
        if isinstance(v, str):
            # "1,2,3" or a JSON array
            v = json.loads(v) if v.lstrip().startswith("[") else [s for s in v.split(",") if s.strip()]
        if not isinstance(v, (list, tuple)):
            raise ValueError(f"not a list: {v!r}")
        return [item(x.strip() if isinstance(x, str) else x) for x in v]
    return parse


def _optional(parse):
    def inner(v):
        if v is None or (isinstance(v, str) and v.lower() == "none"):
            return None
        return parse(v)
    return inner


Schema = dict[str, tuple[Callable[[Any], Any], Any]]

GENERATE_SCHEMA: Schema = {
    "out_dir": (_str, REQUIRED),
    "seed": (_int, 0),
    "seeds": (_optional(_list(_int)), None),
    "d": (_int, 5),
    "n": (_int, 1024),
    "n_test": (_optional(_int), None),
    "potential": (_str, "quadratic"),
    "icnn_widths": (_list(_int), [8, 8, 8]),
    "cost_kind": (_str, "l1"),
    "gamma": (_float, 1.0),
    "p_star": (_int, 1),
    "sv_target": (_optional(_float), None),
    "pgd_tol": (_float, 1e-8),
    "pgd_max_iters": (_int, 10_000),
}

ESTIMATE_SCHEMA: Schema = {
    "data_dir": (_str, REQUIRED),
    "out": (_str, REQUIRED),
    "seeds": (_optional(_list(_int)), None),
    "experiment": (_str, "estimate"),
    "gamma_grid": (_optional(_list(_float)), None),
    "gamma_scale": (_optional(_float), None),
    "eps_rel": (_float, 0.01),
    "sinkhorn_tol": (_float, 1e-6),
    "sinkhorn_max_iters": (_int, 5000),
    "divergence": (_bool, False),
    "divergence_eps": (_float, 0.1),
}

LEARN_SCHEMA: Schema = {
    "data_dir": (_str, REQUIRED),
    "out_dir": (_str, REQUIRED),
    "p_hat": (_optional(_int), None),
    "gamma": (_float, 1.0),
    "eps_rel": (_float, 0.01),
    "iters": (_int, 1000),
    "eta0": (_float, 0.1),
    "unroll_iters": (_int, 5),
    "warm_start": (_bool, True),
    "seed": (_optional(_int), None),
}

BENCHMARK_SCHEMA: Schema = {
    "mode": (_str, REQUIRED),
    "out": (_str, REQUIRED),
    "experiment": (_str, "benchmark"),
    "seeds": (_list(_int), [0, 1, 2, 3, 4]),
    "idempotent": (_bool, True),
    "regression": (_bool, False),
    "workers": (_optional(_int), None),
    # estimate mode
    "tasks": (_list(_str), ["l1"]),
    "d": (_int, 5),
    "n": (_optional(_int), None),
    "potential": (_optional(_str), None),
    "gamma_star": (_float, 1.0),
    "p_star": (_int, 2),
    "gamma_grid": (_optional(_list(_float)), None),
    "sinkhorn_tol": (_float, 1e-6),
    "sinkhorn_max_iters": (_int, 5000),
    # learn mode
    "d_grid": (_list(_int), [6, 10]),
    "p_star_grid": (_list(_int), [1, 2]),
    "sv_targets": (_list(_float), [0.9, 0.7]),
    "p_hat_factors": (_list(_float), [1.0, 1.25]),
    "gamma": (_float, 1.0),
    "iters": (_int, 1000),
    "eta0": (_float, 0.1),
    "unroll_iters": (_int, 5),
    "warm_start": (_bool, True),
    # both
    "eps_rel": (_float, 0.01),
}

SCHEMAS = {
    "generate": GENERATE_SCHEMA,
    "estimate": ESTIMATE_SCHEMA,
    "learn": LEARN_SCHEMA,
    "benchmark": BENCHMARK_SCHEMA,
}


def resolve_config(schema: Schema, file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, the config file and flag overrides; reject unknown keys."""
    merged: dict[str, Any] = {}
    for source, name in ((file_cfg or {}, "config"), (overrides or {}, "flag")):
        if not isinstance(source, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(source) - set(schema))
        if unknown:
            raise ConfigError(f"unknown {name} keys: {unknown}")
        merged.update(source)
    out = {}
    for key, (parse, default) in schema.items():
        if key not in merged:
            if default is REQUIRED:
                raise ConfigError(f"missing required key {key!r}")
            out[key] = default
            continue
        try:
            out[key] = parse(merged[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key!r}: {exc}") from exc
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def default_gamma_grid(scale: float) -> list[float]:
    """``{0} U logspace(-2, 2, 9) * scale``."""
    return [0.0] + [float(v) for v in np.logspace(-2, 2, 9) * scale]


def config_hash(cfg: dict, ignore=("out", "workers", "idempotent", "regression")) -> str:
    payload = {k: v for k, v in cfg.items() if k not in ignore}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- generate

def _generation_spec(cfg: dict, seed: int) -> GenerationSpec:
    try:
        return GenerationSpec(
            seed=seed, d=cfg["d"], n=cfg["n"], n_test=cfg["n_test"], potential=cfg["potential"],
            icnn_widths=tuple(cfg["icnn_widths"]), cost_kind=cfg["cost_kind"], gamma=cfg["gamma"],
            p_star=cfg["p_star"], sv_target=cfg["sv_target"],
            pgd=PGDSettings(tol=cfg["pgd_tol"], max_iters=cfg["pgd_max_iters"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_generate(cfg: dict) -> int:
    seeds = cfg["seeds"]
    specs = [(s, _generation_spec(cfg, s)) for s in (seeds if seeds is not None else [cfg["seed"]])]
    for seed, spec in specs:
        out = Path(cfg["out_dir"]) if seeds is None else Path(cfg["out_dir"]) / f"seed_{seed}"
        bench = generate_benchmark(spec)
        if not bench.metadata["all_converged"]:
            logger.warning("seed %s: some ground-truth points did not converge (see metadata)", seed)
        save_dataset(out, bench)
        logger.info("wrote %s", out)
    return EXIT_OK


# ---------------------------------------------------------------- estimate

def _estimation_cost(meta: dict, gamma: float) -> ElasticCost:
    cost = meta.get("cost")
    if not isinstance(cost, dict) or "kind" not in cost:
        raise ConfigError("dataset metadata lacks a cost description")
    kind = cost["kind"]
    if kind == "subspace":
        return ElasticCost(gamma, Regularizer.subspace(np.asarray(cost["A"], dtype=float)))
    return ElasticCost(gamma, Regularizer(kind))


def mse(T, Y) -> float:
    """Mean over points of ``||T(x) - y||^2``."""
    D = np.asarray(T) - np.asarray(Y)
    return float(np.mean(np.sum(D * D, axis=1)))


def estimate_records(data: Dataset, grid, eps_rel: float, settings: SinkhornSettings,
                     experiment: str = "estimate", seed=None, divergence_eps: float | None = None) -> list[dict]:
    """MSE (and MSE ratio against gamma = 0, if in the grid) of the MBO map for every gamma."""
    records = []
    mses: dict[float, float] = {}
    flags: dict[float, bool] = {}
    gt_ok = bool(data.metadata.get("all_converged", True))
    for gamma in grid:
        cost = _estimation_cost(data.metadata, gamma)
        prob = DiscreteProblem.with_relative_epsilon(data.X_train, data.Y_train, cost, eps_rel,
                                                     data.a, data.b)
        duals = solve_duals(prob, settings)
        T = mbo_map(prob, duals, data.X_test)
        mses[gamma] = mse(T, data.Y_test)
        flags[gamma] = duals.converged and gt_ok
        records.append(dict(experiment=experiment, seed=seed, gamma=gamma, metric="mse",
                            value=mses[gamma], converged=flags[gamma]))
        if divergence_eps is not None:
            n = T.shape[0]
            w = np.full(n, 1.0 / n)
            sd = sinkhorn_divergence(T, w, data.Y_test, w, divergence_eps)
            records.append(dict(experiment=experiment, seed=seed, gamma=gamma,
                                metric="sinkhorn_divergence", value=sd, converged=flags[gamma]))
    if 0.0 in mses:
        base = mses[0.0]
        for gamma in grid:
            ratio = mses[gamma] / base if base > 0 else (1.0 if mses[gamma] == 0 else math.inf)
            records.append(dict(experiment=experiment, seed=seed, gamma=gamma, metric="mse_ratio",
                                value=ratio, converged=flags[gamma] and flags[0.0]))
    return records


def _aggregate(records: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        groups.setdefault((r["experiment"], r["gamma"], r["metric"]), []).append(r)
    out = []
    for (exp, gamma, metric), rs in groups.items():
        vals = np.array([r["value"] for r in rs], dtype=float)
        conv = all(r["converged"] for r in rs)
        out.append(dict(experiment=exp, seed="mean", gamma=gamma, metric=metric,
                        value=float(vals.mean()), converged=conv))
        out.append(dict(experiment=exp, seed="std", gamma=gamma, metric=metric,
                        value=float(vals.std()), converged=conv))
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_records(path, records: list[dict], header=METRIC_HEADER, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists())
    with open(path, "a" if not new else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        for r in records:
            w.writerow([_fmt(r.get(k)) for k in header])


def cmd_estimate(cfg: dict) -> int:
    _check(cfg["eps_rel"] > 0, "eps_rel must be > 0")
    _check(cfg["divergence_eps"] > 0, "divergence_eps must be > 0")
    sets = [(s, load_dataset(p)) for s, p in _dataset_dirs(cfg["data_dir"], cfg["seeds"])]
    settings = SinkhornSettings(tol=cfg["sinkhorn_tol"], max_iters=cfg["sinkhorn_max_iters"])
    records = []
    for seed, data in sets:
        seed = data.metadata.get("seed", seed) if seed is None else seed
        if cfg["gamma_grid"] is not None:
            grid = cfg["gamma_grid"]
        else:
            scale = cfg["gamma_scale"] if cfg["gamma_scale"] is not None else data.metadata.get("gamma", 1.0)
            grid = default_gamma_grid(scale)
        _check(all(g >= 0 for g in grid), "gamma grid entries must be >= 0")
        records += estimate_records(data, grid, cfg["eps_rel"], settings, cfg["experiment"], seed,
                                    cfg["divergence_eps"] if cfg["divergence"] else None)
    write_records(cfg["out"], records + _aggregate(records))
    if not all(r["converged"] for r in records):
        logger.warning("some solves did not converge; see the 'converged' column")
    return EXIT_OK


# ---------------------------------------------------------------- learn

def learn_epsilon(X, Y, eps_rel: float, a=None, b=None) -> float:
    """``eps_rel`` times the mean squared-Euclidean half cost between the clouds."""
    a = np.full(X.shape[0], 1.0 / X.shape[0]) if a is None else a
    b = np.full(Y.shape[0], 1.0 / Y.shape[0]) if b is None else b
    sq = a @ (X * X).sum(1) + b @ (Y * Y).sum(1) - 2.0 * (a @ X) @ (b @ Y)
    return eps_rel * 0.5 * float(sq)


def run_learning(X, a, Y, b, p_hat: int, gamma: float, eps_rel: float, iters: int, eta0: float,
                 unroll_iters: int, warm_start: bool, seed: int, A_star=None):
    eps = learn_epsilon(X, Y, eps_rel, a, b)
    state = learn_subspace(X, a, Y, b, p_hat, gamma, eps, schedule=StepSchedule(eta0), iters=iters,
                           seed=seed, unroll_iters=unroll_iters, warm_start=warm_start, A_star=A_star)
    return state, eps


def cmd_learn(cfg: dict) -> int:
    data = load_dataset(cfg["data_dir"])
    meta = data.metadata
    d = data.X_train.shape[1]
    p_hat = cfg["p_hat"] if cfg["p_hat"] is not None else meta.get("p_star")
    _check(p_hat is not None, "p_hat is required when the dataset has no p_star metadata")
    _check(1 <= p_hat <= d, f"p_hat must be in [1, {d}], got {p_hat}")
    _check(cfg["iters"] >= 1, "iters must be >= 1")
    _check(cfg["unroll_iters"] >= 1, "unroll_iters must be >= 1")
    _check(cfg["eps_rel"] > 0 and cfg["eta0"] > 0, "eps_rel and eta0 must be > 0")
    _check(cfg["gamma"] >= 0, "gamma must be >= 0")
    A_star = None
    cost = meta.get("cost")
    if isinstance(cost, dict) and cost.get("kind") == "subspace" and "A" in cost:
        A_star = np.asarray(cost["A"], dtype=float)
    seed = cfg["seed"] if cfg["seed"] is not None else int(meta.get("seed", 0))

    state, eps = run_learning(data.X_train, data.a, data.Y_train, data.b, p_hat, cfg["gamma"],
                              cfg["eps_rel"], cfg["iters"], cfg["eta0"], cfg["unroll_iters"],
                              cfg["warm_start"], seed, A_star)
    out = Path(cfg["out_dir"])
    write_matrix(out / "A_final.csv", state.A.entries)
    write_matrix(out / "A_best.csv", state.best_A.entries)
    rows = []
    for i, (loss, eta) in enumerate(zip(state.loss_history, state.eta_history)):
        rec = state.recovery_history[i] if A_star is not None else None
        rows.append(dict(iteration=i, loss=loss, recovery_error=rec, eta=eta))
    write_records(out / "learn_log.csv", rows, header=LEARN_LOG_HEADER)
    summary = {
        "p_hat": p_hat, "gamma": cfg["gamma"], "eps_rel": cfg["eps_rel"], "epsilon": eps,
        "iters": cfg["iters"], "eta0": cfg["eta0"], "unroll_iters": cfg["unroll_iters"],
        "warm_start": cfg["warm_start"], "seed": seed,
        "final_loss": state.loss_history[-1], "best_loss": state.best_loss,
        "best_iteration": state.best_iteration,
    }
    if A_star is not None:
        summary["recovery_error_final"] = recovery_error(A_star, state.A.entries)
        summary["recovery_error_best"] = recovery_error(A_star, state.best_A.entries)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------- benchmark

def _estimate_unit(args) -> list[dict]:
    cfg, task, seed, grid = args
    potential = cfg["potential"] or "quadratic"
    n = cfg["n"] or 1024
    spec = GenerationSpec(seed=seed, d=cfg["d"], n=n, potential=potential, cost_kind=task,
                          gamma=cfg["gamma_star"], p_star=cfg["p_star"])
    bench = generate_benchmark(spec)
    data = Dataset(bench.X_train, bench.Y_train, bench.X_test, bench.Y_test, None, None, bench.metadata)
    settings = SinkhornSettings(tol=cfg["sinkhorn_tol"], max_iters=cfg["sinkhorn_max_iters"])
    recs = estimate_records(data, grid, cfg["eps_rel"], settings, cfg["experiment"], seed)
    out = []
    for r in recs:
        if r["metric"] != "mse_ratio":
            continue
        out.append(dict(task=task, d=cfg["d"], p_star=cfg["p_star"] if task == "subspace" else None,
                        sv_target=None, p_hat=None, gamma=r["gamma"], seed=seed, metric="mse_ratio",
                        value=r["value"], converged=r["converged"], status="ok"))
    return out


def _learn_unit(args) -> list[dict]:
    cfg, d, p_star, target, p_hat, seed = args
    potential = cfg["potential"] or "icnn"
    n = cfg["n"] or 512
    spec = GenerationSpec(seed=seed, d=d, n=n, n_test=0, potential=potential, cost_kind="subspace",
                          p_star=p_star, sv_target=target)
    bench = generate_benchmark(spec)
    A_star = np.asarray(bench.metadata["cost"]["A"])
    state, _ = run_learning(bench.X_train, None, bench.Y_train, None, p_hat, cfg["gamma"],
                            cfg["eps_rel"], cfg["iters"], cfg["eta0"], cfg["unroll_iters"],
                            cfg["warm_start"], seed)
    err = recovery_error(A_star, state.best_A.entries)
    return [dict(task="subspace", d=d, p_star=p_star, sv_target=target, p_hat=p_hat,
                 gamma=bench.metadata["gamma"], seed=seed, metric="recovery_error", value=err,
                 converged=bool(bench.metadata["all_converged"]), status="ok")]


def benchmark_units(cfg: dict) -> list[tuple[Callable, tuple, dict]]:
    """Work units ``(function, args, failure template)`` in output order."""
    units = []
    _check(len(cfg["seeds"]) > 0, "seeds must be non-empty")
    if cfg["mode"] in ("estimate", "learn"):
        # surface generation errors before any compute
        try:
            GenerationSpec(d=cfg["d"], n=cfg["n"] or 1, potential=cfg["potential"] or "quadratic")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if cfg["mode"] == "estimate":
        grid = cfg["gamma_grid"] if cfg["gamma_grid"] is not None else default_gamma_grid(cfg["gamma_star"])
        _check(all(g >= 0 for g in grid), "gamma grid entries must be >= 0")
        for task in cfg["tasks"]:
            _check(task in ("none", "l1", "subspace"), f"unknown task {task!r}")
            for seed in cfg["seeds"]:
                tmpl = [dict(task=task, d=cfg["d"], p_star=cfg["p_star"] if task == "subspace" else None,
                             sv_target=None, p_hat=None, gamma=g, seed=seed, metric="mse_ratio")
                        for g in grid]
                units.append((_estimate_unit, (cfg, task, seed, grid), tmpl))
    elif cfg["mode"] == "learn":
        for target in cfg["sv_targets"]:
            _check(0 < target < 1, "sv_targets must lie in (0, 1)")
            for d in cfg["d_grid"]:
                for p_star in cfg["p_star_grid"]:
                    _check(1 <= p_star <= d, f"p_star {p_star} out of range for d={d}")
                    p_hats = sorted({min(d, math.ceil(f * p_star - 1e-9)) for f in cfg["p_hat_factors"]})
                    for p_hat in p_hats:
                        for seed in cfg["seeds"]:
                            tmpl = [dict(task="subspace", d=d, p_star=p_star, sv_target=target,
                                         p_hat=p_hat, gamma=None, seed=seed, metric="recovery_error")]
                            units.append((_learn_unit, (cfg, d, p_star, target, p_hat, seed), tmpl))
    else:
        raise ConfigError(f"mode must be 'estimate' or 'learn', got {cfg['mode']!r}")
    return units


def _call(unit):
    fn, args = unit
    return fn(args)


def worker_count(cfg: dict) -> int:
    if cfg["regression"]:
        return 1
    n = cfg["workers"] if cfg["workers"] is not None else (os.cpu_count() or 1)
    cap = os.environ.get("ELASTIC_OT_THREADS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError as exc:
            raise ConfigError(f"ELASTIC_OT_THREADS must be an integer, got {cap!r}") from exc
    return max(1, n)


def _cell_key(r: dict) -> tuple:
    return (r["task"], r["d"], r["p_star"], r["sv_target"], r["p_hat"],
            r["gamma"] if r["metric"] == "mse_ratio" else None, r["metric"])


def run_benchmark(cfg: dict) -> tuple[list[dict], int]:
    """Run every unit; returns the rows (with per-cell mean/std) and the failure count."""
    units = benchmark_units(cfg)
    workers = worker_count(cfg)
    results: list[list[dict] | Exception] = []
    if workers == 1:
        for fn, args, _ in units:
            try:
                results.append(fn(args))
            except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
                results.append(exc)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_call, (fn, args)) for fn, args, _ in units]
            for fut in futures:
                try:
                    results.append(fut.result())
                except (ArithmeticError, RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
                    results.append(exc)
    rows, failures = [], 0
    for (fn, args, tmpl), res in zip(units, results):
        if isinstance(res, Exception):
            failures += 1
            logger.error("cell %s failed: %s", tmpl[0], res)
            rows += [dict(t, value=math.nan, converged=False, status="failed") for t in tmpl]
        else:
            rows += res
    cells: dict[tuple, list[float]] = {}
    for r in rows:
        if r["status"] == "ok":
            cells.setdefault(_cell_key(r), []).append(r["value"])
    h = config_hash(cfg)
    for r in rows:
        vals = np.array(cells.get(_cell_key(r), [math.nan]))
        r.update(config_hash=h, experiment=cfg["experiment"], mode=cfg["mode"],
                 mean=float(vals.mean()), std=float(vals.std()))
    return rows, failures


def _hash_present(path: Path, h: str) -> bool:
    if not path.exists():
        return False
    with open(path, newline="") as fh:
        return any(row.get("config_hash") == h for row in csv.DictReader(fh))


def cmd_benchmark(cfg: dict) -> int:
    out = Path(cfg["out"])
    h = config_hash(cfg)
    if cfg["idempotent"] and _hash_present(out, h):
        logger.info("%s already holds results for config %s; nothing to do", out, h)
        return EXIT_OK
    rows, failures = run_benchmark(cfg)
    write_records(out, rows, header=BENCH_HEADER, append=True)
    return EXIT_PARTIAL if failures else EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "estimate": cmd_estimate,
    "learn": cmd_learn,
    "benchmark": cmd_benchmark,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elastic-ot", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=COMMANDS[name].__doc__)
        p.add_argument("--config", help="JSON config file; flags override its keys")
        for key in schema:
            names = [f"--{key}"]
            if "_" in key:
                names.append(f"--{key.replace('_', '-')}")
            p.add_argument(*names, dest=key, default=argparse.SUPPRESS, metavar="VALUE")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    schema = SCHEMAS[args.command]
    overrides = {k: v for k, v in vars(args).items() if k in schema}
    try:
        file_cfg = None
        if args.config:
            try:
                with open(args.config) as fh:
                    file_cfg = json.load(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: invalid JSON: {exc}") from exc
        cfg = resolve_config(schema, file_cfg, overrides)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
