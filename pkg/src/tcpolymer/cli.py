"""Command-line entry point: ``tcpolymer <subcommand> --config FILE [--set k=v ...]``.

Replicas are cut into fixed blocks of :data:`analysis.REPLICA_BLOCK`
indices; workers only change which process evaluates a block, and results
are merged in replica order, so outputs do not depend on ``--workers``.
"""

from __future__ import annotations

import argparse
import csv
import multiprocessing
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from .config import ExperimentConfig, default_config
from .environment import green_function, sample_window
from .errors import ConfigError, PolymerError, PreconditionError, exit_code
from .partition import PolymerConfig, quenched_partition_enum
from .regeneration import H_process, tau_moments
from .rng import Stream, derive_seed

SUBCOMMANDS = ("partition", "free-energy", "phase-scan", "lln", "tau", "martingale", "concentration",
               "criteria", "green", "validate")

FLAG_KEYS = {"L": "regen.L", "l": "regen.l", "blocks": "regen.blocks", "inner": "regen.inner"}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
            n += 1
    return n


def _map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    methods = multiprocessing.get_all_start_methods()
    ctx = multiprocessing.get_context("fork" if "fork" in methods else "spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
        return list(ex.map(fn, *zip(*tasks)))


# ---------------------------------------------------------------------------
# Block workers (module level so they pickle)


def _logs_block(walk, spec, betas, Ns, seed, start, stop):
    return an.disorder_logs(walk, spec, betas, Ns, seed, range(start, stop))


def _lln_block(walk, spec, N_max, seed, checkpoints, start, stop):
    return an.lln_trace(walk, spec, N_max, stop - start, seed, checkpoints or None, replica_offset=start)


def _H_block(walk, spec, beta, L, l, blocks, inner, seed, tilt, proposal, start, stop):
    return H_process(PolymerConfig(walk, beta, 0), spec, L, l, blocks, inner, seed, stop - start,
                     replica_offset=start, proposal=proposal, tilt=tilt)


def _blocks(n: int):
    return [(b.start, b.stop) for b in an.replica_blocks(n)]


def _disorder_logs(cfg, betas, Ns, n, workers):
    walk, spec, seed = cfg.walk(), cfg.field_spec(), cfg["run.seed"]
    parts = _map(_logs_block, [(walk, spec, betas, Ns, seed, a, b) for a, b in _blocks(n)], workers)
    return an.DisorderLogs.merge(parts)


# ---------------------------------------------------------------------------
# Subcommands; each returns {file name: row count} and the replica count


def cmd_partition(cfg, out, workers):
    betas, Ns, n, seed = cfg["scan.betas"], cfg["scan.Ns"], cfg["run.n_disorder"], cfg["run.seed"]
    header = ("replica", "beta", "N", "log_Z")
    if cfg["partition.method"] == "enum":
        walk, spec = cfg.walk(), cfg.field_spec()
        rows = []
        for i in range(n):
            sample = sample_window(spec, walk, max(Ns), Stream(derive_seed(seed, i)))
            for b in betas:
                for N in Ns:
                    rows.append((i, b, N, quenched_partition_enum(PolymerConfig(walk, b, N), sample).log_Z))
        return {"partition.csv": write_csv(out / "partition.csv", header, rows)}, n
    logs = _disorder_logs(cfg, betas, Ns, n, workers)
    rows = [(int(r), b, N, logs.log_Z[i, j, k])
            for i, r in enumerate(logs.replicas) for j, b in enumerate(betas) for k, N in enumerate(Ns)]
    return {"partition.csv": write_csv(out / "partition.csv", header, rows)}, n


def _table(cfg, workers):
    betas, Ns, n = cfg["scan.betas"], cfg["scan.Ns"], cfg["run.n_disorder"]
    logs = _disorder_logs(cfg, betas, Ns, n, workers)
    return an.estimate_table(logs, cfg.field_spec(), cfg["run.seed"], cfg.walk(), cfg["annealed.mode"],
                             cfg["lambda.kappa"])


def cmd_free_energy(cfg, out, workers):
    table = _table(cfg, workers)
    n = write_csv(out / "free_energy.csv", an.EstimateRow.COLUMNS, (r.values() for r in table.rows))
    return {"free_energy.csv": n}, cfg["run.n_disorder"]


def cmd_phase_scan(cfg, out, workers):
    table = _table(cfg, workers)
    rep = an.phase_report(table, cfg["scan.betas"])
    files = {
        "free_energy.csv": write_csv(out / "free_energy.csv", an.EstimateRow.COLUMNS, (r.values() for r in table.rows)),
        "phase_scan.csv": write_csv(out / "phase_scan.csv", an.PhaseScanRow.COLUMNS, (r.values() for r in rep.rows)),
    }
    return files, cfg["run.n_disorder"]


def cmd_lln(cfg, out, workers):
    walk, spec, seed = cfg.walk(), cfg.field_spec(), cfg["run.seed"]
    n, N_max, cps = cfg["lln.n_paths"], cfg["lln.N_max"], cfg["lln.checkpoints"]
    parts = _map(_lln_block, [(walk, spec, N_max, seed, cps, a, b) for a, b in _blocks(n)], workers)
    cp = parts[0].checkpoints
    avg = np.concatenate([p.running_avg for p in parts])
    rows = [(r, N, avg[r, k]) for r in range(n) for k, N in enumerate(cp)]
    return {"lln.csv": write_csv(out / "lln.csv", ("replica", "N", "running_avg"), rows)}, n


def cmd_tau(cfg, out, workers):
    rows = []
    for L in cfg["tau.Ls"]:
        for est in tau_moments(L, list(cfg["tau.ps"]), cfg["tau.samples"], derive_seed(cfg["run.seed"], L)):
            rows.append((est.L, est.p, est.moment, est.se, est.censored_frac, est.n_samples))
    header = ("L", "p", "moment_est", "moment_se", "censored_frac", "n_samples")
    return {"tau.csv": write_csv(out / "tau.csv", header, rows)}, 0


def cmd_martingale(cfg, out, workers):
    walk, spec, seed = cfg.walk(), cfg.field_spec(), cfg["run.seed"]
    n = cfg["regen.replicas"]
    rows = []
    for beta in cfg["scan.betas"]:
        tasks = [(walk, spec, beta, cfg["regen.L"], cfg["regen.l"], cfg["regen.blocks"], cfg["regen.inner"],
                  seed, cfg["regen.tilt"], cfg["regen.proposal"], a, b) for a, b in _blocks(n)]
        parts = _map(_H_block, tasks, workers)
        stats = parts[0]
        stats.log_H = np.concatenate([p.log_H for p in parts])
        stats.log_L = np.concatenate([p.log_L for p in parts])
        stats.log_lr = np.concatenate([p.log_lr for p in parts])
        mean, se, m2 = stats.mean(), stats.se(), stats.second_moment()
        gapLH = np.abs(stats.log_L - stats.log_H).mean(axis=0)
        for j in range(stats.n_blocks):
            t = (mean[j] - 1.0) / se[j] if se[j] > 0 else 0.0
            rows.append((beta, j + 1, mean[j], se[j], t, m2[j], gapLH[j], n))
    header = ("beta", "n", "mean_H", "se_H", "t_stat", "second_moment", "mean_abs_logL_minus_logH", "n_replicas")
    return {"martingale.csv": write_csv(out / "martingale.csv", header, rows)}, n


def cmd_concentration(cfg, out, workers):
    n, N, beta = cfg["run.n_disorder"], cfg["concentration.N"], cfg["concentration.beta"]
    if n < 1000:
        raise PreconditionError("run.n_disorder: concentration needs at least 1000 disorders")
    if beta == 0.0:
        lz = np.zeros(n)
    else:
        lz = _disorder_logs(cfg, [beta], [N], n, workers).log_Z[:, 0, 0]
    res = an.concentration_from_logs(lz, N, list(cfg["concentration.eps"]), beta)
    rows = [(r.N, r.eps, r.beta, r.tail, r.tail_se, r.bound, r.passed, r.n_disorder) for r in res]
    header = ("N", "eps", "beta", "tail", "tail_se", "bound", "passed", "n_disorder")
    return {"concentration.csv": write_csv(out / "concentration.csv", header, rows)}, n


def cmd_criteria(cfg, out, workers):
    walk, spec = cfg.walk(), cfg.field_spec()
    bounded = spec.kind == "iid_bernoulli"
    rows = []
    for beta in cfg["scan.betas"]:
        rec = an.entropy_criterion(walk, spec, beta, kappa=cfg["criteria.kappa"], window=bounded)
        w = rec.window
        rows.append((rec.beta, rec.lhs, rec.rhs, rec.satisfied, w.log_inv_p if w else None,
                     w.K_prime if w else None, w.satisfied if w else None))
    header = ("beta", "lhs", "rhs", "satisfied", "window_log_inv_p", "window_K_prime", "window_satisfied")
    files = {"criteria.csv": write_csv(out / "criteria.csv", header, rows)}
    thr = an.criterion_threshold(walk, spec, cfg["criteria.beta_max"])
    files["criteria_threshold.csv"] = write_csv(out / "criteria_threshold.csv", ("beta_threshold",), [(thr,)])
    return files, 0


def cmd_green(cfg, out, workers):
    table = green_function(cfg["walk.d"], cfg["green.box"], cfg["green.margin"])
    d = table.d
    site_rows = ((i,) + tuple(int(c) for c in s) for i, s in enumerate(table.sites))
    files = {"green_sites.csv": write_csv(out / "green_sites.csv", ("index", "t") + tuple(f"x{k}" for k in range(1, d + 1)), site_rows)}
    m = len(table.sites)
    rows = ((i, j, table.matrix[i, j]) for i in range(m) for j in range(i, m))
    files["green.csv"] = write_csv(out / "green.csv", ("i", "j", "G"), rows)
    return files, 0


COMMANDS = {
    "partition": cmd_partition,
    "free-energy": cmd_free_energy,
    "phase-scan": cmd_phase_scan,
    "lln": cmd_lln,
    "tau": cmd_tau,
    "martingale": cmd_martingale,
    "concentration": cmd_concentration,
    "criteria": cmd_criteria,
    "green": cmd_green,
}


def write_manifest(path: Path, cfg: ExperimentConfig, sub: str, files: dict, n_replicas: int, wall: float, workers: int):
    seed = cfg["run.seed"]
    lines = [
        f"subcommand={sub}",
        f"version={__version__}",
        f"config_hash={cfg.digest()}",
        f"seed={seed}",
        f"workers={workers}",
        f"n_replicas={n_replicas}",
        "replica_seeds=" + ",".join(str(derive_seed(seed, i)) for i in range(n_replicas)),
        f"wall_clock_s={wall:.3f}",
    ]
    lines += [f"rows.{name}={n}" for name, n in sorted(files.items())]
    path.write_text("\n".join(lines) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcpolymer", description="Directed polymers in time-correlated environments")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("out"))
    for flag in FLAG_KEYS:
        p.add_argument(f"--{flag}", dest=f"flag_{flag}", metavar=flag.upper())
    return p


def _load(args) -> ExperimentConfig:
    sets = list(args.set)
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, f"flag_{flag}")
        if v is not None:
            sets.append(f"{key}={v}")
    if args.seed is not None:
        sets.append(f"run.seed={args.seed}")
    if args.config is None:
        return default_config().with_overrides(sets)
    return ExperimentConfig.load(args.config, sets)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        problems = cfg.validate()
        if args.subcommand == "validate":
            for msg in problems:
                print(msg)
            return 2 if problems else 0
        if problems:
            for msg in problems:
                print(f"config error: {msg}", file=sys.stderr)
            return 2
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        files, n_rep = COMMANDS[args.subcommand](cfg, out, args.workers)
        (out / "config.txt").write_text(cfg.emit())
        write_manifest(out / "manifest.txt", cfg, args.subcommand, files, n_rep, time.perf_counter() - t0, args.workers)
    except PolymerError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
