"""Benchmark driver: strategy/parameter sweeps, timing, tuning, CSV.

Runs a problem across a grid of dual-operator configurations, times
preprocessing and per-iteration application, verifies every run against the
dense direct solve before its timings may be reported, and derives the
amortization point of each configuration against the implicit baseline.
A small auto-tuner measures candidates on one representative subdomain and
picks the cheapest total for an expected iteration count.
"""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import dualop as dop
from . import mesh as mm
from . import solver as sl
from .decomposition import build_clusters
from .pool import Pool

CSV_COLUMNS = (
    "physics", "dim", "dofs_per_subdomain", "n_subdomains", "strategy", "path",
    "fwd_storage", "bwd_storage", "fwd_order", "bwd_order", "rhs_order", "staging",
    "rep", "t_preprocess_ms", "t_apply_ms", "iterations", "residual",
    "amortization_vs_implicit",
)

VERIFY_RTOL = 1e-6


class BenchError(RuntimeError):
    """Experiment-level failure (all candidates failed, bad config...)."""


@dataclass(eq=False)
class ExperimentConfig:
    physics: str = "heat"
    dim: int = 2
    cells: int = 4                  # cells per subdomain side
    subdomains: int = 2             # subdomains per side
    clusters: int = 1
    grid: list = field(default_factory=lambda: [dop.DualOpConfig()])
    tol: float = 1e-9
    maxit: int | None = None
    reps: int = 1
    pool_bytes: int = 0             # 0 = auto-size
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise BenchError("repetitions must be >= 1")
        if not self.grid:
            raise BenchError("configuration grid must be nonempty")


@dataclass(eq=False)
class Measurement:
    config: dop.DualOpConfig
    rep: int
    t_preprocess: float             # seconds
    t_apply: float                  # seconds per application
    iterations: int
    residual: float
    error: str | None = None


@dataclass(eq=False)
class MeasurementSet:
    experiment: ExperimentConfig
    problem: sl.Problem
    rows: list                      # Measurement, grid-major then rep
    medians: dict                   # config index -> (t_pre, t_apply, iterations)

    def amortization_for(self, idx) -> object:
        """Amortization point of grid entry ``idx`` against the implicit baseline."""
        base = self._implicit_baseline()
        if base is None or idx not in self.medians:
            return ""
        t_pre_i, t_app_i, _ = base
        t_pre_e, t_app_e, _ = self.medians[idx]
        return amortization_point((t_pre_i, t_app_i), (t_pre_e, t_app_e))

    def _implicit_baseline(self):
        for i, cfg in enumerate(self.experiment.grid):
            if cfg.strategy == "implicit" and i in self.medians:
                return self.medians[i]
        return None


def amortization_point(impl, expl):
    """Iterations after which the explicit pair (T_pre, t_app) wins.

    ``ceil`` of the crossing when the explicit application is strictly
    cheaper and its preprocessing strictly dearer; 0 when explicit is never
    slower; "never" when the per-iteration saving is nonpositive.
    """
    t_pre_i, t_app_i = impl
    t_pre_e, t_app_e = expl
    if min(t_pre_i, t_app_i, t_pre_e, t_app_e) < 0:
        raise BenchError("times must be nonnegative")
    denom = t_app_i - t_app_e
    numer = t_pre_e - t_pre_i
    if denom <= 0:
        return "never"
    if numer <= 0:
        return 0
    return int(math.ceil(numer / denom))


def full_grid(staging_modes=("per_subdomain", "cluster_wide"), include_schur=False):
    """The whole explicit parameter space plus the implicit baseline."""
    grid = []
    for staging in staging_modes:
        grid.append(dop.DualOpConfig(strategy="implicit", staging=staging))
    for staging in staging_modes:
        for path in dop.PATHS:
            for fs in dop.STORAGES:
                for bs in dop.STORAGES:
                    for fo in dop.ORDERS:
                        for bo in dop.ORDERS:
                            for ro in dop.ORDERS:
                                grid.append(dop.DualOpConfig(
                                    strategy="explicit", path=path,
                                    forward_storage=fs, backward_storage=bs,
                                    forward_order=fo, backward_order=bo,
                                    rhs_order=ro, staging=staging,
                                ))
    if include_schur:
        grid.append(dop.DualOpConfig(strategy="schur_oracle"))
    return grid


def run_experiment(experiment: ExperimentConfig, problem: sl.Problem | None = None,
                   verbose: bool = False) -> MeasurementSet:
    """Measure every grid point; discard timings of wrong-answer runs.

    Each repetition runs one full solve through the multi-step driver and is
    verified against the dense direct reference before its timings count.
    """
    if problem is None:
        problem = sl.build_problem(experiment.physics, experiment.dim,
                                   experiment.cells, experiment.subdomains,
                                   n_clusters=experiment.clusters)
    u_ref = mm.solve_direct_reference(problem.system)
    ref_norm = np.linalg.norm(u_ref)

    rows = []
    medians = {}
    for idx, cfg in enumerate(experiment.grid):
        pres, apps, iters = [], [], []
        for rep in range(experiment.reps):
            pool = Pool(experiment.pool_bytes) if experiment.pool_bytes else None
            try:
                report = sl.run_steps(problem, 1, config=cfg, tol=experiment.tol,
                                      maxit=experiment.maxit, pool=pool,
                                      workers=experiment.workers)[0]
                err = np.linalg.norm(report.u_global - u_ref) / max(ref_norm, 1e-300)
                if err > VERIFY_RTOL:
                    raise BenchError(f"solution error {err:.2e} above {VERIFY_RTOL:.0e}")
            except Exception as exc:  # noqa: BLE001 - recorded per grid point
                rows.append(Measurement(config=cfg, rep=rep, t_preprocess=math.nan,
                                        t_apply=math.nan, iterations=0,
                                        residual=math.nan, error=str(exc)))
                if verbose:
                    print(f"[grid {idx} rep {rep}] FAILED: {exc}", file=sys.stderr)
                continue
            rows.append(Measurement(config=cfg, rep=rep,
                                    t_preprocess=report.t_preprocess,
                                    t_apply=report.t_apply_mean,
                                    iterations=report.iterations,
                                    residual=report.residual))
            pres.append(report.t_preprocess)
            apps.append(report.t_apply_mean)
            iters.append(report.iterations)
            if verbose:
                print(f"[grid {idx} rep {rep}] {cfg.strategy}/{cfg.path} "
                      f"pre={report.t_preprocess * 1e3:.2f}ms "
                      f"apply={report.t_apply_mean * 1e3:.3f}ms "
                      f"iters={report.iterations}", file=sys.stderr)
        if pres:
            medians[idx] = (statistics.median(pres), statistics.median(apps),
                            int(statistics.median(iters)))
    return MeasurementSet(experiment=experiment, problem=problem, rows=rows, medians=medians)


def write_csv(measurements: MeasurementSet, stream) -> None:
    """Schema-stable CSV, sorted by (config index, repetition)."""
    exp = measurements.experiment
    prob = measurements.problem
    writer = csv.writer(stream)
    writer.writerow(CSV_COLUMNS)
    cfg_index = {id(cfg): i for i, cfg in enumerate(exp.grid)}
    for row in measurements.rows:
        cfg = row.config
        idx = cfg_index[id(cfg)]
        amort = measurements.amortization_for(idx)
        if row.error is not None:
            t_pre = t_app = ""
            iters = ""
            residual = "error"
            amort = ""
        else:
            t_pre = f"{row.t_preprocess * 1e3:.6f}"
            t_app = f"{row.t_apply * 1e3:.6f}"
            iters = row.iterations
            residual = f"{row.residual:.3e}"
        writer.writerow([
            exp.physics, exp.dim, prob.dofs_per_subdomain, prob.n_subdomains,
            cfg.strategy, cfg.path, cfg.forward_storage, cfg.backward_storage,
            cfg.forward_order, cfg.backward_order, cfg.rhs_order, cfg.staging,
            row.rep, t_pre, t_app, iters, residual, amort,
        ])


# ---------------------------------------------------------------------------
# auto-tuning
# ---------------------------------------------------------------------------


def measure_candidate(problem: sl.Problem, config: dop.DualOpConfig,
                      n_applies: int = 3, clock=time.perf_counter, seed: int = 0):
    """One preprocess plus a few applies on the first subdomain."""
    subproblems = problem.subdomain_problems()
    spb = subproblems[0]
    cons = problem.constraints.restricted_to(0)
    layout = build_clusters(_single_subdomain_partition(problem), cons, 1)
    with dop.prepare([spb.stiffness_reg], cons, layout, config) as state:
        t0 = clock()
        state.preprocess()
        t_pre = clock() - t0
        p = np.random.default_rng(seed).normal(size=cons.n_multipliers)
        out = np.zeros_like(p)
        t0 = clock()
        for _ in range(n_applies):
            state.apply(p, out=out)
        t_app = (clock() - t0) / n_applies
    return t_pre, t_app


def _single_subdomain_partition(problem: sl.Problem):
    from .decomposition import Partition

    return Partition(mesh=problem.part.subdomains[0].mesh, subdomains_per_side=1,
                     subdomains=problem.part.subdomains[:1])


def autotune(problem: sl.Problem, candidates, iteration_estimate: int,
             n_applies: int = 3, measure=None, verbose: bool = False,
             seed: int = 0) -> dop.DualOpConfig:
    """argmin of T_pre + k * t_apply over the candidates, ties by grid order."""
    if not candidates:
        raise BenchError("candidate grid is empty")
    if iteration_estimate < 0:
        raise BenchError("iteration estimate must be nonnegative")
    if measure is None:
        measure = lambda cfg: measure_candidate(problem, cfg, n_applies=n_applies, seed=seed)
    best = None
    best_cost = None
    failures = []
    for cfg in candidates:
        try:
            t_pre, t_app = measure(cfg)
        except Exception as exc:  # noqa: BLE001 - tuning tolerates bad candidates
            failures.append((cfg, exc))
            continue
        cost = t_pre + iteration_estimate * t_app
        if verbose:
            print(f"[autotune] {cfg.strategy}/{cfg.path}/{cfg.forward_storage}"
                  f"/{cfg.rhs_order}: cost {cost * 1e3:.3f} ms", file=sys.stderr)
        if best_cost is None or cost < best_cost:
            best, best_cost = cfg, cost
    if best is None:
        raise BenchError(f"all {len(failures)} candidates failed; first: {failures[0][1]}")
    return best


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "physics": str, "dim": int, "cells": int, "subdomains": int, "clusters": int,
    "strategy": str, "path": str, "forward-storage": str, "backward-storage": str,
    "forward-order": str, "backward-order": str, "rhs-order": str, "staging": str,
    "tol": float, "maxit": int, "reps": int, "pool-bytes": int, "seed": int,
    "workers": int, "csv": str,
}


def read_config_file(path) -> dict:
    """Line-based ``key = value`` file; '#' starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BenchError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip().replace("_", "-")
            if key not in _CONFIG_KEYS:
                raise BenchError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _CONFIG_KEYS[key](val.strip())
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tfeti-bench",
        description="Benchmark the Total FETI dual operator across strategies and layouts.",
    )
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--physics", choices=("heat", "elasticity"))
    p.add_argument("--dim", type=int, choices=(2, 3))
    p.add_argument("--cells", type=int, help="cells per subdomain side")
    p.add_argument("--subdomains", type=int, help="subdomains per side")
    p.add_argument("--clusters", type=int)
    p.add_argument("--strategy", choices=dop.STRATEGIES)
    p.add_argument("--path", choices=dop.PATHS)
    p.add_argument("--forward-storage", choices=dop.STORAGES)
    p.add_argument("--backward-storage", choices=dop.STORAGES)
    p.add_argument("--forward-order", choices=dop.ORDERS)
    p.add_argument("--backward-order", choices=dop.ORDERS)
    p.add_argument("--rhs-order", choices=dop.ORDERS)
    p.add_argument("--staging", choices=dop.STAGINGS)
    p.add_argument("--tol", type=float)
    p.add_argument("--maxit", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--pool-bytes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--sweep", action="store_true",
                   help="run the full explicit parameter grid plus the implicit baseline")
    p.add_argument("--autotune", type=int, metavar="K",
                   help="pick the best explicit config for K expected iterations, then run it")
    p.add_argument("--csv", help="write measurements to this path ('-' for stdout)")
    p.add_argument("--verbose", action="store_true")
    return p


_DEFAULTS = {
    "physics": "heat", "dim": 2, "cells": 4, "subdomains": 2, "clusters": 1,
    "strategy": "implicit", "path": "trsm", "forward-storage": "sparse",
    "backward-storage": "sparse", "forward-order": "row", "backward-order": "row",
    "rhs-order": "row", "staging": "per_subdomain", "tol": 1e-9, "maxit": None,
    "reps": 1, "pool-bytes": 0, "seed": 0, "workers": 1, "csv": None,
}


def _resolve_options(args) -> dict:
    opts = dict(_DEFAULTS)
    if args.config:
        opts.update(read_config_file(args.config))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            opts[key] = flag
    return opts


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts = _resolve_options(args)

    single = dop.DualOpConfig(
        strategy=opts["strategy"], path=opts["path"],
        forward_storage=opts["forward-storage"], backward_storage=opts["backward-storage"],
        forward_order=opts["forward-order"], backward_order=opts["backward-order"],
        rhs_order=opts["rhs-order"], staging=opts["staging"],
    )
    grid = full_grid() if args.sweep else [single]
    if args.sweep and single.strategy != "implicit" and single not in grid:
        grid.append(single)

    experiment = ExperimentConfig(
        physics=opts["physics"], dim=opts["dim"], cells=opts["cells"],
        subdomains=opts["subdomains"], clusters=opts["clusters"], grid=grid,
        tol=opts["tol"], maxit=opts["maxit"], reps=opts["reps"],
        pool_bytes=opts["pool-bytes"], seed=opts["seed"], workers=opts["workers"],
    )

    problem = sl.build_problem(experiment.physics, experiment.dim, experiment.cells,
                               experiment.subdomains, n_clusters=experiment.clusters)
    print(f"problem: {experiment.physics} {experiment.dim}D, "
          f"{problem.dofs_per_subdomain} DOFs/subdomain x {problem.n_subdomains} subdomains, "
          f"{problem.constraints.n_multipliers} multipliers")

    if args.autotune is not None:
        candidates = grid if args.sweep else full_grid()
        best = autotune(problem, candidates, args.autotune, verbose=args.verbose,
                        seed=opts["seed"])
        print(f"autotune(k={args.autotune}) -> strategy={best.strategy} path={best.path} "
              f"fwd={best.forward_storage}/{best.forward_order} "
              f"bwd={best.backward_storage}/{best.backward_order} "
              f"rhs={best.rhs_order} staging={best.staging}")
        experiment.grid = [dop.DualOpConfig(strategy="implicit"), best]

    measurements = run_experiment(experiment, problem=problem, verbose=args.verbose)

    failed = [r for r in measurements.rows if r.error is not None]
    for idx, cfg in enumerate(experiment.grid):
        med = measurements.medians.get(idx)
        if med is None:
            print(f"  grid[{idx}] {cfg.strategy}/{cfg.path}: FAILED")
            continue
        amort = measurements.amortization_for(idx)
        print(f"  grid[{idx}] {cfg.strategy:11s} path={cfg.path} "
              f"pre={med[0] * 1e3:8.2f} ms  apply={med[1] * 1e3:8.3f} ms  "
              f"iters={med[2]:3d}  amortization={amort}")

    csv_target = opts["csv"]
    if csv_target:
        if csv_target == "-":
            write_csv(measurements, sys.stdout)
        else:
            with open(csv_target, "w", newline="", encoding="utf-8") as fh:
                write_csv(measurements, fh)
            print(f"wrote {csv_target}")
    return 1 if failed and len(failed) == len(measurements.rows) else 0


if __name__ == "__main__":
    sys.exit(main())
