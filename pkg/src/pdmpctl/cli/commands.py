"""simulate / solve / evaluate commands: run an experiment and write artifacts."""

import json
import platform
from pathlib import Path

import numpy as np
import pydantic
import scipy

from .. import __version__
from ..flow import sine_basis
from ..mdp import (bounding_build, equivalence_verdict, mdp_chain_cost, monte_carlo_cost,
                   value_iteration, _chunks, _map)
from ..models import HHChR2Model
from ..pdmp import run_ensemble, trajectory_rngs
from .config import (ConfigError, build_cost, build_model, build_strategy, config_hash,
                     initial_point, sim_dt, solver_dt)

X_SAMPLES = 201


class VerificationFailure(RuntimeError):
    """A verdict or property check failed (exit code 4)."""


# ------------------------------------------------------------- writers

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % x
    return str(x)


def write_csv(path, header, rows, stamp):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {stamp}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(_plain(data), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def versions():
    return {"pdmpctl": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pydantic": pydantic.__version__, "python": platform.python_version()}


class Context:
    """Validated config plus the objects built from it."""

    def __init__(self, cfg, base=Path("."), seed=None, out=None, workers=1):
        if seed is not None:
            cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"seed": seed})})
        if out is not None:
            cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"out": str(out)})})
        self.cfg = cfg
        self.base = Path(base)
        self.workers = workers
        self.model = build_model(cfg)
        self.cost = build_cost(cfg, self.model, self.base)
        self.hash = config_hash(cfg)
        self.seed = cfg.run.seed
        self.T = cfg.run.T
        out_dir = Path(cfg.run.out)
        self.out = out_dir if out_dir.is_absolute() or out is not None else self.base / out_dir
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self):
        return f"config_hash={self.hash};seed={self.seed}"

    def metadata(self, command):
        return {"command": command, "config_hash": self.hash, "seed": self.seed,
                "versions": versions(), "provenance": self.cfg.model.provenance(),
                "model": self.cfg.model.model, "T": self.T}


# ------------------------------------------------------------- simulate

def _simulate_chunk(model, cost, strategy, z0, seed, start, count, T, dt, dense_rows, xs):
    rngs = trajectory_rngs(seed, start, count)
    basis = sine_basis(xs, model.K)
    stats = {"v_min": np.inf, "v_max": -np.inf, "clamp_count": 0}
    hh = isinstance(model, HHChR2Model)

    def observe(rows, t, c, d):
        v = c @ basis.T
        stats["v_min"] = min(stats["v_min"], float(v.min()))
        stats["v_max"] = max(stats["v_max"], float(v.max()))
        if hh:
            p = model.pairings(c)
            stats["clamp_count"] += int(np.count_nonzero((p < model.v_minus) | (p > model.v_plus)))

    res = run_ensemble(model, strategy, [z0] * count, rngs, T, dt,
                       cost=None if cost.is_zero else cost, record_dense=dense_rows,
                       observer=observe)
    return res.points, res.dense, res.cost, stats


def cmd_simulate(ctx):
    cfg, model = ctx.cfg, ctx.model
    strategy = build_strategy(cfg, model, ctx.base)
    z0 = initial_point(cfg, model)
    dt = sim_dt(cfg)
    n = cfg.run.n_traj
    xs = np.linspace(0.0, 1.0, X_SAMPLES)
    tasks = []
    for start, count in _chunks(n, cfg.run.chunk_size):
        dense = tuple(r - start for r in range(start, start + count) if r < cfg.run.n_dense)
        tasks.append((model, ctx.cost, strategy, z0, ctx.seed, start, count, ctx.T, dt, dense, xs))
    results = _map(_simulate_chunk, tasks, ctx.workers)

    label = model.state_label
    paths, costs = [], []
    v_min, v_max, clamps = np.inf, -np.inf, 0
    for (start, _), (points, dense, cost, stats) in zip(_chunks(n, cfg.run.chunk_size), results):
        for r, traj in sorted(dense.items()):
            header, rows = traj.csv_rows(label)
            write_csv(ctx.out / f"trajectory_{start + r:05d}.csv", header, rows, ctx.stamp)
        paths.extend(points)
        if cost is not None:
            costs.append(cost)
        v_min, v_max = min(v_min, stats["v_min"]), max(v_max, stats["v_max"])
        clamps += stats["clamp_count"]
    for i, pts in enumerate(paths[: cfg.run.n_path_files]):
        K = pts[0].nu.size
        header = ["n", "T_n", "d_n"] + [f"nu_{k}" for k in range(1, K + 1)]
        rows = [[k, z.h, label(z.d), *z.nu] for k, z in enumerate(pts)]
        write_csv(ctx.out / f"path_{i:05d}.csv", header, rows, ctx.stamp)

    jumps = np.array([len(p) - 1 for p in paths])
    meta = ctx.metadata("simulate")
    meta.update(dt=dt, n_traj=n, v_min=v_min, v_max=v_max,
                counters={"clamp_count": clamps, "extrapolation_count": 0},
                jumps={"mean": float(jumps.mean()), "max": int(jumps.max())},
                strategy=cfg.run.strategy.model_dump())
    if isinstance(model, HHChR2Model):
        meta["voltage_bounds"] = [model.v_minus, model.v_plus]
        meta["v_within_bounds"] = bool(model.v_minus <= v_min and v_max <= model.v_plus)
    if costs:
        c = np.concatenate(costs)
        meta["cost"] = {"mean": float(c.mean()), "se": float(c.std(ddof=1) / np.sqrt(c.size))}
    write_json(ctx.out / "metadata.json", meta)
    return meta


# ---------------------------------------------------------------- solve

def cmd_solve(ctx):
    cfg, model = ctx.cfg, ctx.model
    if model.discrete_states is None or model.K > 3:
        raise ConfigError("field model: solve needs a reduced model (finite discrete states, K <= 3)")
    solver = cfg.solver
    try:
        bounding = bounding_build(model, ctx.cost, solver.M2, ctx.T, solver.zeta)
        family = solver.family()
    except ValueError as exc:
        raise ConfigError(f"field solver: {exc}") from None
    grid = solver.grid(model, ctx.T)
    result = value_iteration(model, ctx.cost, bounding, grid, family, ctx.T, solver_dt(cfg),
                             solver.tol, solver.max_iter)
    table = result.table
    policy = result.policy(ctx.T)
    write_json(ctx.out / "value_table.json",
               {"config_hash": ctx.hash, "seed": ctx.seed, **table.to_dict(),
                "weighted_norm": table.weighted_norm()})
    write_json(ctx.out / "policy.json",
               {"config_hash": ctx.hash, "seed": ctx.seed, "policy": policy.to_dict(),
                "encodings": [list(map(list, family[k].numerators)) for k in result.choice]})
    report = ctx.metadata("solve")
    report.update(result.report())
    report.update(bounding=bounding.to_dict(), dt=solver_dt(cfg), n_nodes=grid.n_nodes,
                  n_rules=len(family))
    write_json(ctx.out / "report.json", report)
    return report


# ------------------------------------------------------------- evaluate

def cmd_evaluate(ctx, chain_cost=None):
    """Path-cost and jump-chain estimators of the same strategy, with verdict.

    ``chain_cost`` replaces the cost fed to the chain estimator (negative tests).
    """
    cfg, model = ctx.cfg, ctx.model
    strategy = build_strategy(cfg, model, ctx.base)
    z0 = initial_point(cfg, model)
    dt = sim_dt(cfg)
    n = cfg.run.n_traj
    try:
        bounding = bounding_build(model, ctx.cost, cfg.solver.M2, ctx.T, cfg.solver.zeta)
    except ValueError:
        bounding = None
    V = monte_carlo_cost(model, ctx.cost, strategy, z0, n, ctx.seed, ctx.T, dt,
                         workers=ctx.workers, chunk=cfg.run.chunk_size)
    J = mdp_chain_cost(model, chain_cost or ctx.cost, strategy, z0, n, ctx.seed, ctx.T, dt,
                       bounding=bounding, workers=ctx.workers, chunk=cfg.run.chunk_size)
    verdict = equivalence_verdict(V, J)
    out = ctx.metadata("evaluate")
    out.update(dt=dt, n_traj=n, strategy=cfg.run.strategy.model_dump(), **verdict)
    if bounding is not None:
        out["n_max"] = bounding.n_max(bounding.B_star_point(z0))
    write_json(ctx.out / "evaluate.json", out)
    return out
