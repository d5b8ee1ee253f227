"""Batch experiment driver.

Verbs: ``gen``, ``ingest``, ``fit``, ``rmse``, ``chr``, ``tables``.  Every
verb accepts ``--config FILE`` (flat ``key = value`` lines, ``#`` comments)
and ``--set KEY=VALUE`` overrides; targeted flags such as ``--m`` or
``--seed`` override both.  Exit codes: 0 success, 2 configuration or input
error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from pgpcache import hmc, vb
from pgpcache.cache import evaluate_chr, mle_rand_place, place
from pgpcache.datagen import (
    ALPHA0_GRID,
    OMEGA_GRID,
    REFERENCE_HP,
    CellGenConfig,
    UserGenConfig,
    gen_cell_level,
    gen_user_level,
)
from pgpcache.dump import load_dataset, save_dataset
from pgpcache.errors import InvalidInputError, NumericalFailureError
from pgpcache.ingest import parse_ratings, window
from pgpcache.posterior import default_priors, mle_popularity
from pgpcache.predict import type1_hmc, type1_vb, type2_hmc, type2_vb

log = logging.getLogger("pgpcache")

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 2, 3, 4


class ConfigError(InvalidInputError):
    pass


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _words(text):
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _opt_int(text):
    return None if text.strip().lower() in ("", "auto", "none") else int(text)


def _bool(text):
    value = text.strip().lower()
    if value not in ("true", "false", "1", "0", "yes", "no"):
        raise ValueError(text)
    return value in ("true", "1", "yes")


def _grid(values):
    return ",".join(repr(float(v)) for v in values)


# key -> (parser, default as written in a config file)
SCHEMA = {
    "seed": (int, "0"),
    "out": (str, "out"),
    "data": (str, ""),
    "mode": (str, "cell"),
    "m": (int, "100"),
    "n": (int, "20"),
    "unseen_fraction": (float, "0.25"),
    "n_future": (_opt_int, "auto"),
    "users": (int, "10"),
    "p_user_features": (int, "100"),
    "omega": (float, "1.0"),
    "alpha0": (float, "2.5"),
    "beta": (float, "1.0"),
    "size_low": (float, "0"),
    "size_high": (float, "100"),
    "backend": (str, "vb"),
    "backends": (_words, "mle,vb,hmc"),
    "policies": (_words, "pgp-vb,pgp-hmc,mle,mle-rand"),
    "replications": (int, "10"),
    "m_grid": (_ints, "50,100"),
    "n_grid": (_ints, "20,40,60,80"),
    "capacity_grid": (_floats, "0.1,0.2,0.3,0.4,0.5"),
    "sweep": (_bool, "false"),
    "alpha0_grid": (_floats, _grid(ALPHA0_GRID)),
    "omega_grid": (_floats, _grid(OMEGA_GRID)),
    "step_size": (float, "0.015"),
    "leapfrog_steps": (int, "20"),
    "num_samples": (int, "2000"),
    "burn_in": (int, "1000"),
    "type2_stride": (_opt_int, "auto"),
    "prior_shape": (float, "1.0"),
    "prior_scale": (float, "0.1"),
    "vb_outer_tol": (float, "1e-6"),
    "vb_max_outer": (int, "100"),
    "ratings": (str, ""),
    "movies": (str, ""),
    "year_start": (int, "2010"),
    "year_end": (int, "2011"),
    "max_contents": (int, "500"),
    "inputs": (_words, ""),
}


def parse_config_text(text: str) -> dict:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def build_config(config_path=None, overrides=None) -> dict:
    """Defaults, then the config file, then ``overrides`` (strings), all type-checked."""
    raw = {k: v[1] for k, v in SCHEMA.items()}
    if config_path:
        raw.update(parse_config_text(Path(config_path).read_text(encoding="utf-8")))
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            cfg[key] = SCHEMA[key][0](str(value))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    if cfg["replications"] < 1:
        raise ConfigError("replications must be >= 1")
    if cfg["mode"] not in ("cell", "user"):
        raise ConfigError(f"mode must be cell or user, got {cfg['mode']!r}")
    return cfg


def rep_seeds(master: int, n_reps: int, n_streams: int = 4):
    """Independent per-replication integer seeds derived from the master seed."""
    return [tuple(int(s) for s in child.generate_state(n_streams))
            for child in np.random.SeedSequence(master).spawn(n_reps)]


def _pool_size() -> int:
    try:
        return max(1, int(os.environ.get("PGP_THREADS", "1")))
    except ValueError as exc:
        raise ConfigError("PGP_THREADS must be an integer") from exc


def _map(fn, jobs):
    """Ordered map, fanned out over ``PGP_THREADS`` worker processes."""
    workers = min(_pool_size(), len(jobs))
    if workers <= 1:
        yield from map(fn, jobs)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(fn, jobs)


def _hmc_cfg(cfg, seed) -> hmc.HmcConfig:
    return hmc.HmcConfig(step_size=cfg["step_size"], leapfrog_steps=cfg["leapfrog_steps"],
                         num_samples=cfg["num_samples"], burn_in=cfg["burn_in"], seed=seed)


def _vb_cfg(cfg) -> vb.VbConfig:
    return vb.VbConfig(outer_tol=cfg["vb_outer_tol"], max_outer=cfg["vb_max_outer"])


def _priors(cfg, q):
    return default_priors(q, cfg["prior_shape"], cfg["prior_scale"])


def make_dataset(cfg, seed, n_slots=None, m=None, alpha0=None, omega=None, need_future=False):
    m = cfg["m"] if m is None else m
    n_slots = cfg["n"] if n_slots is None else n_slots
    if cfg["mode"] == "cell":
        n_future = cfg["n_future"]
        if n_future is None:
            n_future = 30 if need_future else 0
        return gen_cell_level(CellGenConfig(m_seen=m, n_slots=n_slots, n_future=n_future,
                                            unseen_fraction=cfg["unseen_fraction"], seed=seed))
    n_future = 30 if cfg["n_future"] is None else cfg["n_future"]
    return gen_user_level(UserGenConfig(
        m_seen=m, n_slots=n_slots, unseen_fraction=cfg["unseen_fraction"], users=cfg["users"],
        p_user_features=cfg["p_user_features"],
        omega=cfg["omega"] if omega is None else omega,
        alpha0=cfg["alpha0"] if alpha0 is None else alpha0,
        beta=cfg["beta"], size_range=(cfg["size_low"], cfg["size_high"]),
        n_future=n_future, seed=seed))


def fit_backend(ds, backend, cfg, seed):
    """Fit one backend; returns ``(seen_means, unseen_means, theta or None, info)``."""
    x_seen, x_new = ds.seen_features, ds.unseen_features
    if backend == "mle":
        return mle_popularity(ds.requests), np.full(x_new.shape[0], np.nan), None, {}
    if backend == "truth":
        if ds.true_popularities is None:
            raise InvalidInputError("truth backend needs ground-truth popularities")
        return (ds.true_popularities[ds.seen_mask], ds.true_popularities[~ds.seen_mask],
                None, {})
    if backend == "vb":
        vp = vb.fit(ds.requests, x_seen, _vb_cfg(cfg))
        seen = type1_vb(vp)[0]
        new = type2_vb(vp, x_new, x_seen)[0] if x_new.shape[0] else np.empty(0)
        info = {"status": vp.status, "L": float(vp.elbo_trace[-1]),
                "outer_iterations": int(max(h[0] for h in vp.history))}
        return seen, new, vp.theta.theta, info | {"posterior": vp}
    if backend == "hmc":
        samples = hmc.sample(ds.requests, x_seen, _priors(cfg, x_seen.shape[1]),
                             _hmc_cfg(cfg, seed))
        seen = type1_hmc(samples)[0]
        new = (type2_hmc(samples, x_new, x_seen, cfg["type2_stride"])[0]
               if x_new.shape[0] else np.empty(0))
        info = {"accept_rate": samples.accept_rate, "n_divergent": samples.n_divergent}
        return seen, new, samples.theta_mean(), info | {"posterior": samples}
    raise ConfigError(f"unknown backend {backend!r}")


def _rmse(pred, truth) -> float:
    if pred.size == 0 or np.all(np.isnan(pred)):
        return float("nan")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def _fmt(v) -> str:
    return repr(float(v))


# ---------------------------------------------------------------- gen / ingest

def cmd_gen(cfg) -> Path:
    ds = make_dataset(cfg, cfg["seed"])
    return save_dataset(ds, cfg["out"])


def cmd_ingest(cfg) -> Path:
    if not cfg["ratings"] or not cfg["movies"]:
        raise ConfigError("ingest needs ratings and movies paths")
    rlog, movies = parse_ratings(cfg["ratings"], cfg["movies"])
    report = window(rlog, movies, (cfg["year_start"], cfg["year_end"]), cfg["max_contents"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for w in report.windows:
        save_dataset(w.to_dataset(), out / f"window_{w.window_index:02d}")
    summary = {
        "n_rows": report.n_rows, "n_skipped": report.n_skipped,
        "n_out_of_window": report.n_out_of_window,
        "train_events": report.train_events.tolist(), "eval_events": report.eval_events.tolist(),
        "skipped_windows": report.skipped_windows, "conserved": report.conserved(),
    }
    (out / "ingest_report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
    return out


# ---------------------------------------------------------------- fit

def cmd_fit(cfg) -> Path:
    if not cfg["data"]:
        raise ConfigError("fit needs a dataset directory (data = ...)")
    ds = load_dataset(cfg["data"])
    backend = cfg["backend"]
    if backend not in ("vb", "hmc"):
        raise ConfigError(f"fit backend must be vb or hmc, got {backend!r}")
    seed = rep_seeds(cfg["seed"], 1)[0][0]
    seen, new, theta, info = fit_backend(ds, backend, cfg, seed)
    post = info.pop("posterior")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    if backend == "vb":
        mean_seen, var_seen = type1_vb(post)
        _, var_new, _ = type2_vb(post, ds.unseen_features, ds.seen_features)
        vb.write_trace_csv(post, out / "trace.csv")
    else:
        mean_seen, var_seen = type1_hmc(post)
        _, var_new = type2_hmc(post, ds.unseen_features, ds.seen_features, cfg["type2_stride"])
        hmc.write_draws_csv(post, out / "draws.csv")
    means = np.concatenate([mean_seen, new])
    variances = np.concatenate([var_seen, var_new])
    seen_flags = np.concatenate([np.ones(seen.size, int), np.zeros(new.size, int)])
    with open(out / "posterior.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["content_id", "seen", "mean", "variance"])
        for cid, s, mu, var in zip(ds.content_ids, seen_flags, means, variances):
            w.writerow([int(cid), int(s), _fmt(mu), _fmt(var)])
    summary = {
        "backend": backend, "M": int(ds.n_seen), "N": int(ds.n_slots), "seed": cfg["seed"],
        "theta": [float(t) for t in theta],
        "true_theta": ds.meta.get("theta"),
        "diagnostics": {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                        for k, v in info.items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    return out


# ---------------------------------------------------------------- rmse

def _rmse_job(job):
    cfg, backends, m, n, rep, seeds = job
    ds = make_dataset(cfg, seeds[0], n_slots=n, m=m)
    truth = ds.true_popularities
    rows, thetas = [], []
    for backend in backends:
        seen, new, theta, _ = fit_backend(ds, backend, cfg, seeds[1])
        rows.append([backend, m, n, rep, _rmse(seen, truth[ds.seen_mask]),
                     _rmse(new, truth[~ds.seen_mask])])
        if theta is not None:
            thetas.append([backend, m, n, rep] + [float(t) for t in theta])
    return rows, thetas


def _stderr(v):
    v = np.asarray(v, dtype=float)
    return float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def cmd_rmse(cfg) -> Path:
    if cfg["mode"] != "cell":
        raise ConfigError("rmse runs on the cell-level generator (mode = cell)")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    backends = cfg["backends"]
    seeds = rep_seeds(cfg["seed"], cfg["replications"])
    # the same replication seed is shared across grid points and backends
    jobs = [(cfg, backends, m, n, r, seeds[r])
            for m in cfg["m_grid"] for n in cfg["n_grid"] for r in range(cfg["replications"])]
    results = []
    q = len(REFERENCE_HP.alphas) - 1
    with open(out / "rmse.csv", "w", newline="", encoding="utf-8") as fh, \
            open(out / "thetas.csv", "w", newline="", encoding="utf-8") as th:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["backend", "M", "N", "replication", "rmse_type1", "rmse_type2"])
        wt = csv.writer(th, lineterminator="\n")
        wt.writerow(["backend", "M", "N", "replication", "eta"] + [f"alpha_{k}" for k in range(q + 1)])
        for rows, thetas in _map(_rmse_job, jobs):
            for row in rows:
                w.writerow(row[:4] + [_fmt(row[4]), _fmt(row[5])])
                results.append(row)
            for row in thetas:
                wt.writerow(row[:4] + [_fmt(v) for v in row[4:]])
            fh.flush()
            th.flush()
    _rmse_summary(results, backends, cfg, out)
    return out


def _rmse_summary(results, backends, cfg, out):
    summary = []
    for backend in backends:
        for m in cfg["m_grid"]:
            for n in cfg["n_grid"]:
                sel = [r for r in results if r[0] == backend and r[1] == m and r[2] == n]
                t1 = [r[4] for r in sel]
                t2 = [r[5] for r in sel]
                summary.append([backend, m, n, np.mean(t1), _stderr(t1), np.mean(t2), _stderr(t2)])
    with open(out / "rmse_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["backend", "M", "N", "mean_type1", "stderr_type1", "mean_type2", "stderr_type2"])
        for row in summary:
            w.writerow(row[:3] + [_fmt(v) for v in row[3:]])
    for kind, col in (("type1", 3), ("type2", 5)):
        with open(out / f"rmse_{kind}.dat", "w", encoding="utf-8") as fh:
            for backend in backends:
                for m in cfg["m_grid"]:
                    fh.write(f"# backend={backend} M={m}\n")
                    for row in summary:
                        if row[0] == backend and row[1] == m:
                            fh.write(f"{row[2]} {row[col]!r} {row[col + 1]!r}\n")
                    fh.write("\n\n")
    blocks = [(b, m) for b in backends for m in cfg["m_grid"]]
    script = []
    for kind, label in (("type1", "Type 1"), ("type2", "Type 2")):
        plots = ", ".join(f"'rmse_{kind}.dat' index {k} with yerrorlines title '{b} M={m}'"
                          for k, (b, m) in enumerate(blocks))
        script += [f"set output 'rmse_{kind}.png'", f"set title '{label} RMSE'",
                   "set xlabel 'N (slots)'", "set ylabel 'RMSE'", f"plot {plots}", ""]
    (out / "rmse.gp").write_text("set terminal pngcairo size 800,600\n" + "\n".join(script),
                                 encoding="utf-8")


# ---------------------------------------------------------------- chr

def chr_for_dataset(ds, policies, capacity_grid, cfg, seeds):
    """CHR of each policy at each capacity fraction; rows ``(policy, fraction, chr)``."""
    if ds.future_counts is None:
        raise InvalidInputError("CHR evaluation needs held-out request counts")
    rows = []
    total = ds.catalog.total_size
    for policy in policies:
        if policy == "mle-rand":
            for frac in capacity_grid:
                plan = mle_rand_place(ds.requests, ds.catalog, frac * total, seed=seeds[2])
                rows.append((policy, frac, evaluate_chr(plan, ds.future_counts)))
            continue
        if policy == "mle":
            seen, new = mle_popularity(ds.requests), np.zeros(ds.unseen_features.shape[0])
        elif policy in ("pgp-vb", "pgp-hmc"):
            seen, new, _, _ = fit_backend(ds, policy[4:], cfg, seeds[1])
        else:
            raise ConfigError(f"unknown policy {policy!r}")
        popularity = np.empty(ds.catalog.n_contents)
        popularity[ds.seen_mask] = seen
        popularity[~ds.seen_mask] = new
        for frac in capacity_grid:
            plan = place(popularity, ds.catalog, frac * total)
            rows.append((policy, frac, evaluate_chr(plan, ds.future_counts)))
    return rows


def _chr_job(job):
    cfg, alpha0, omega, rep, seeds = job
    ds = make_dataset(cfg, seeds[0], alpha0=alpha0, omega=omega, need_future=True)
    return chr_for_dataset(ds, cfg["policies"], cfg["capacity_grid"], cfg, seeds)


def _window_job(job):
    cfg, path, seeds = job
    return chr_for_dataset(load_dataset(path), cfg["policies"], cfg["capacity_grid"], cfg, seeds)


def cmd_chr(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for frac in cfg["capacity_grid"]:
        if not 0 <= frac <= 1:
            raise ConfigError("capacity fractions must lie in [0, 1]")
    rows = []
    if cfg["data"]:
        # a directory of window dumps (from ingest) or a single dataset dump
        root = Path(cfg["data"])
        dirs = sorted(p for p in root.iterdir() if (p / "features.csv").exists()) \
            if not (root / "features.csv").exists() else [root]
        if not dirs:
            raise FileNotFoundError(f"no dataset dumps under {root}")
        seeds = rep_seeds(cfg["seed"], len(dirs))
        for rep, res in enumerate(_map(_window_job, [(cfg, d, seeds[k]) for k, d in enumerate(dirs)])):
            rows += [(None, None, p, f, rep, c) for p, f, c in res]
    else:
        alphas = cfg["alpha0_grid"] if cfg["sweep"] else (cfg["alpha0"],)
        omegas = cfg["omega_grid"] if cfg["sweep"] else (cfg["omega"],)
        seeds = rep_seeds(cfg["seed"], cfg["replications"])
        jobs = [(cfg, a, o, r, seeds[r]) for o in omegas for a in alphas
                for r in range(cfg["replications"])]
        for job, res in zip(jobs, _map(_chr_job, jobs)):
            rows += [(job[2], job[1], p, f, job[3], c) for p, f, c in res]
    _write_chr(rows, cfg, out)
    return out


def _write_chr(rows, cfg, out):
    sweep = cfg["sweep"] and not cfg["data"]
    with open(out / "chr.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["omega", "alpha0"] if sweep else []) + ["policy", "capacity_fraction", "replication", "chr"])
        for omega, alpha0, policy, frac, rep, value in rows:
            w.writerow(([_fmt(omega), _fmt(alpha0)] if sweep else []) + [policy, _fmt(frac), rep, _fmt(value)])
    policies = cfg["policies"]
    if sweep:
        _write_chr_sweep(rows, cfg, out)
        return
    with open(out / "chr.dat", "w", encoding="utf-8") as fh:
        for policy in policies:
            fh.write(f"# policy={policy}: capacity_fraction mean_chr stderr\n")
            for frac in cfg["capacity_grid"]:
                vals = [r[5] for r in rows if r[2] == policy and r[3] == frac]
                fh.write(f"{frac!r} {float(np.mean(vals))!r} {_stderr(vals)!r}\n")
            fh.write("\n\n")
    plots = ", ".join(f"'chr.dat' index {k} with yerrorlines title '{p}'" for k, p in enumerate(policies))
    (out / "chr.gp").write_text(
        "set terminal pngcairo size 800,600\nset output 'chr.png'\n"
        "set xlabel 'cache capacity (fraction of total size)'\nset ylabel 'CHR'\n"
        f"set key left top\nplot {plots}\n", encoding="utf-8")


def _write_chr_sweep(rows, cfg, out):
    """One block per (policy, omega, capacity): CHR against alpha0."""
    blocks = []
    with open(out / "chr_sweep.dat", "w", encoding="utf-8") as fh:
        for policy in cfg["policies"]:
            for omega in cfg["omega_grid"]:
                for frac in cfg["capacity_grid"]:
                    fh.write(f"# policy={policy} omega={omega!r} capacity={frac!r}: alpha0 mean_chr stderr\n")
                    for alpha0 in cfg["alpha0_grid"]:
                        vals = [r[5] for r in rows
                                if r[2] == policy and r[0] == omega and r[1] == alpha0 and r[3] == frac]
                        fh.write(f"{alpha0!r} {float(np.mean(vals))!r} {_stderr(vals)!r}\n")
                    fh.write("\n\n")
                    blocks.append(f"{policy} w={omega:g} C={frac:g}")
    plots = ", ".join(f"'chr_sweep.dat' index {k} with yerrorlines title '{t}'"
                      for k, t in enumerate(blocks))
    (out / "chr_sweep.gp").write_text(
        "set terminal pngcairo size 800,600\nset output 'chr_sweep.png'\n"
        "set xlabel 'alpha0'\nset ylabel 'CHR'\n"
        f"set key outside\nplot {plots}\n", encoding="utf-8")


# ---------------------------------------------------------------- tables

BACKEND_ORDER = {"hmc": 0, "vb": 1}


def _read_theta_records(path: Path):
    """``(backend, M, N, theta)`` records from a fit directory or a thetas.csv file."""
    if path.is_dir():
        summary = json.loads((path / "summary.json").read_text(encoding="utf-8"))
        return [(summary["backend"], summary["M"], summary["N"], summary["theta"])]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != ["backend", "M", "N", "replication", "eta"]:
            raise InvalidInputError(f"{path}: not a thetas.csv file")
        return [(r[0], int(r[1]), int(r[2]), [float(v) for v in r[4:]]) for r in reader if r]


def parameter_table(records, true_theta):
    """Mean theta per (backend, M, N) group; columns ordered by backend, then M, then N."""
    groups = {}
    for backend, m, n, theta in records:
        groups.setdefault((backend, m, n), []).append(theta)
    keys = sorted(groups, key=lambda k: (BACKEND_ORDER.get(k[0], 99), k[0], k[1], k[2]))
    sizes = {len(t) for g in groups.values() for t in g}
    if len(sizes) != 1 or (true_theta is not None and len(true_theta) not in sizes):
        raise InvalidInputError("theta lengths differ between artifacts")
    q = sizes.pop()
    names = ["eta"] + [f"alpha_{k}" for k in range(q - 1)]
    header = ["parameter"] + [f"M{m}_N{n}_{b}" for b, m, n in keys] + ["true_value"]
    means = {k: np.mean(np.array(groups[k]), axis=0) for k in keys}
    rows = []
    for i, name in enumerate(names):
        truth = "" if true_theta is None else _fmt(true_theta[i])
        rows.append([name] + [_fmt(means[k][i]) for k in keys] + [truth])
    return header, rows


def cmd_tables(cfg) -> Path:
    if not cfg["inputs"]:
        raise ConfigError("tables needs inputs (fit directories or thetas.csv files)")
    records = []
    for item in cfg["inputs"]:
        path = Path(item)
        if not path.exists():
            raise FileNotFoundError(f"{path} not found")
        records += _read_theta_records(path)
    truth = REFERENCE_HP.theta if len(records[0][3]) == REFERENCE_HP.theta.size else None
    header, rows = parameter_table(records, truth)
    out = Path(cfg["out"])
    target = out if out.suffix == ".csv" else out / "parameters.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return target


# ---------------------------------------------------------------- entry point

COMMANDS = {"gen": cmd_gen, "ingest": cmd_ingest, "fit": cmd_fit, "rmse": cmd_rmse,
            "chr": cmd_chr, "tables": cmd_tables}

FLAGS = {
    "gen": ("mode", "m", "n", "seed", "omega", "alpha0", "out"),
    "ingest": ("ratings", "movies", "out", "max_contents"),
    "fit": ("data", "backend", "seed", "out", "step_size", "num_samples", "burn_in"),
    "rmse": ("backends", "replications", "m_grid", "n_grid", "seed", "out"),
    "chr": ("data", "policies", "capacity_grid", "replications", "omega", "alpha0", "m", "n",
            "mode", "seed", "out"),
    "tables": ("out",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgpcache", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, flags in FLAGS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        for flag in flags:
            p.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None)
        if name == "tables":
            p.add_argument("inputs", nargs="*", help="fit directories or thetas.csv files")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    for flag in FLAGS[args.command]:
        if getattr(args, flag) is not None:
            out[flag] = getattr(args, flag)
    if args.command == "tables" and args.inputs:
        out["inputs"] = ",".join(args.inputs)
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args.config, _overrides(args))
        result = COMMANDS[args.command](cfg)
    except NumericalFailureError as exc:
        print(f"pgpcache {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidInputError as exc:
        print(f"pgpcache {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"pgpcache {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
