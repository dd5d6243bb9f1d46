"""Command-line driver: train, optimize, refine, bench, error-bound, report.

Every run reads an optional TOML config; flags override config keys.  Output
files are plain CSV (numbers at 17 significant digits) with ``#`` metadata
lines where needed, and each has a reader in this module.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli
from scipy import optimize as sopt

from . import errors as eb
from . import optimize as opt
from . import surrogate as sg
from .integrate import REFERENCE, IntegrationError, SolverConfig, reference_solve
from .problems import (
    MeasurementFitObjective,
    QuadratureRule,
    bidiagonal_terminal_state,
    cantilever_exact_objective,
    get_problem,
)

log = logging.getLogger("daeopt")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NOT_CONVERGED = 3
EXIT_MISSING = 4

OUTPUT_ENV = "DAEOPT_OUTPUT_DIR"
DEFAULT_OUTPUT = "daeopt-out"

CHECKPOINT = "surrogate.json"
DATASET = "dataset.csv"
HISTORY = "history.csv"
CURVES = "training_curves.csv"
CANDIDATES = "candidates.csv"
LANDSCAPE = "landscape.csv"
BOUND = "bound.csv"
REFINE = "refine.csv"


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


# -- configuration ------------------------------------------------------------------


@dataclass
class RefineConfig:
    method: str = "newton"
    steps: int = 10
    fd_step: float = 1e-3
    walk_iters: int = 300
    walk_step: float = 0.10
    # "direct" polishes on the true model, "surrogate" on the noise-free network objective
    target: str = "direct"

    def __post_init__(self):
        if self.method not in ("newton", "walk", "none"):
            raise ConfigError(f"refine method must be newton, walk or none, got {self.method!r}")
        if self.target not in ("direct", "surrogate"):
            raise ConfigError(f"refine target must be direct or surrogate, got {self.target!r}")


@dataclass
class GammaConfig:
    # validation parameters drawn for the residual statistics, times per parameter
    params: int = 40
    times: int = 20


@dataclass
class BoundConfig:
    n_samples: int = 50
    t_ref: float | None = None


@dataclass
class RunConfig:
    problem: str = "scalar"
    seed: int = 0
    output_dir: str | None = None
    measurements: str | None = None
    solver: SolverConfig = field(default_factory=lambda: REFERENCE)
    ga: sg.GaConfig = field(default_factory=sg.GaConfig)
    gamma: GammaConfig = field(default_factory=GammaConfig)
    optimize: opt.OptimizeConfig = field(default_factory=opt.OptimizeConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    bound: BoundConfig = field(default_factory=BoundConfig)

    @property
    def out(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)


_SECTIONS = ("solver", "ga", "gamma", "optimize", "refine", "bound")
_SCALARS = ("problem", "seed", "output_dir", "measurements")


def _update(obj, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return dataclasses.replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def load_config(path=None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return apply_overrides(cfg, data)


def apply_overrides(cfg: RunConfig, data: dict) -> RunConfig:
    unknown = sorted(set(data) - set(_SECTIONS) - set(_SCALARS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    top = {k: data[k] for k in _SCALARS if k in data}
    sections = {}
    for s in _SECTIONS:
        if s in data:
            if not isinstance(data[s], dict):
                raise ConfigError(f"[{s}] must be a table")
            sections[s] = _update(getattr(cfg, s), data[s], s)
    return dataclasses.replace(cfg, **top, **sections)


# presets used by `bench`; sized so each benchmark trains in minutes on one core
BENCH_PRESETS: dict[str, dict] = {
    "scalar": {"ga": {"hidden": (32, 32, 32), "epochs": 2000, "lr": 3e-3, "batch_size": 512, "max_generations": 30}},
    "cantilever": {"ga": {"hidden": (32, 32, 32), "epochs": 2000, "lr": 3e-3, "batch_size": 512, "alpha": 5e-3,
                          "max_generations": 15}},
    "bidiag": {"ga": {"hidden": (64, 64, 64), "epochs": 2000, "lr": 3e-3, "batch_size": 512, "alpha": 2e-3,
                      "max_generations": 12, "exact_points": 11, "error_points": 21, "monitor_points": 49}},
}


def bench_preset(name: str) -> dict:
    return BENCH_PRESETS["bidiag" if name.startswith("bidiag:") else name]


# -- file formats ----------------------------------------------------------------


def _g(x) -> str:
    return format(float(x), ".17g")


def write_table(path, header, rows, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_g(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_table(path):
    """(metadata dict, header list, rows as dicts of strings)."""
    meta = {}
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# ") and not body:
            k, _, v = line[2:].partition(": ")
            meta[k] = v
        else:
            body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    return meta, header, [dict(zip(header, r)) for r in reader]


def _floats(row, prefix, m):
    return np.array([float(row[f"{prefix}{i + 1}"]) for i in range(m)])


def write_candidates(path, cands, m: int, meta: dict) -> None:
    header = (["rank"] + [f"p{i + 1}" for i in range(m)] + ["J_pred"] + [f"p_refined{i + 1}" for i in range(m)]
              + ["J_refined", "method", "iters", "seconds", "evals", "seconds_predict", "flag"])
    rows = []
    for k, c in enumerate(cands, 1):
        rows.append([k, *map(float, c.p_pred), float(c.J_pred), *map(float, c.p_refined), float(c.J_refined),
                     c.method, c.iterations, float(c.seconds_refine), c.evaluations, float(c.seconds_predict), c.flag])
    write_table(path, header, rows, meta)


def read_candidates(path):
    meta, header, rows = read_table(path)
    m = sum(1 for h in header if h.startswith("p") and h[1:].isdigit())
    out = []
    for r in rows:
        out.append(opt.CandidateResult(
            _floats(r, "p", m), float(r["J_pred"]), _floats(r, "p_refined", m), float(r["J_refined"]), r["method"],
            int(r["iters"]), int(r["evals"]), float(r["seconds_predict"]), float(r["seconds"]), r["flag"]))
    return meta, out


BOUND_COLUMNS = ("a1_bar", "r_max", "P_norm", "delta_max", "hbar", "bound", "horizon", "horizon_bound", "status")


def write_bound(path, rows, m: int, meta: dict) -> None:
    header = [f"p{i + 1}" for i in range(m)] + list(BOUND_COLUMNS)
    write_table(path, header, [[*map(float, r["p"]), *(r[c] for c in BOUND_COLUMNS)] for r in rows], meta)


def read_bound(path):
    meta, header, rows = read_table(path)
    m = sum(1 for h in header if h.startswith("p") and h[1:].isdigit())
    out = []
    for r in rows:
        d = {c: float(r[c]) for c in BOUND_COLUMNS if c != "status"}
        d["status"] = r["status"]
        d["p"] = _floats(r, "p", m)
        out.append(d)
    return meta, out


def write_curves(path, history) -> None:
    write_table(path, ["generation", "loss", "max_error"],
                [[h["generation"], float(h["loss"]), float(h["max_error"])] for h in history])


def read_curves(path):
    _, _, rows = read_table(path)
    return {k: np.array([float(r[k]) for r in rows]) for k in ("generation", "loss", "max_error")}


def write_landscape(path, P, J, lo, hi) -> None:
    m = P.shape[1]
    header = [f"p{i + 1}" for i in range(m)] + ["J_surrogate", "J_low", "J_high"]
    write_table(path, header, [[*map(float, p), float(a), float(b), float(c)] for p, a, b, c in zip(P, J, lo, hi)])


def read_landscape(path):
    _, header, rows = read_table(path)
    m = sum(1 for h in header if h.startswith("p") and h[1:].isdigit())
    P = np.array([_floats(r, "p", m) for r in rows])
    cols = {k: np.array([float(r[k]) for r in rows]) for k in ("J_surrogate", "J_low", "J_high")}
    return P, cols


def _state_index(token: str, problem) -> int:
    names = list(problem.state_names) or [f"x{i + 1}" for i in range(problem.state_dim)]
    tok = token.strip()
    if tok in names:
        return names.index(tok)
    if tok.startswith("x"):
        tok = tok[1:]
    if tok.isdigit() and 1 <= int(tok) <= problem.state_dim:
        return int(tok) - 1
    raise ConfigError(f"unknown state {token!r}; use 1..{problem.state_dim}, x<i> or a state name")


def read_measurements(path, problem) -> MeasurementFitObjective:
    """Long CSV with columns ``t,x_i,target``: one row per (time, observed state)."""
    _, header, rows = read_table(path)
    if header[:3] != ["t", "x_i", "target"]:
        raise ConfigError(f"{path}: header must be t,x_i,target")
    times = sorted({float(r["t"]) for r in rows})
    observed = sorted({_state_index(r["x_i"], problem) for r in rows})
    targets = np.full((len(times), len(observed)), np.nan)
    for r in rows:
        targets[times.index(float(r["t"])), observed.index(_state_index(r["x_i"], problem))] = float(r["target"])
    if np.isnan(targets).any():
        raise ConfigError(f"{path}: every observed state needs a target at every measurement time")
    try:
        obj = MeasurementFitObjective(np.array(times), targets, tuple(observed))
        obj.validate(problem.t_span)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return obj


def write_measurements(path, times, targets, observed, problem) -> None:
    targets = np.asarray(targets, dtype=float).reshape(len(times), len(observed))
    rows = [[float(t), f"x{i + 1}", float(targets[k, j])] for k, t in enumerate(times) for j, i in enumerate(observed)]
    write_table(path, ["t", "x_i", "target"], rows)


# -- oracles for bench -------------------------------------------------------------


def oracle_optimum(name: str, problem, obj):
    """Reference optimum (p*, J*) for a benchmark, independent of any surrogate."""
    if name == "scalar":
        ev = opt.direct_objective(problem, obj)
        res = sopt.minimize_scalar(lambda x: ev([x]), bounds=(problem.lower[0], problem.upper[0]), method="bounded",
                                   options={"xatol": 1e-10})
        return np.array([res.x]), float(res.fun)
    if name == "cantilever":
        grid = np.linspace(problem.lower[0], problem.upper[0], 1_000_001)
        J = cantilever_exact_objective(grid)
        k = int(np.argmin(J))
        return np.array([grid[k]]), float(J[k])
    n = problem.state_dim

    def resid(p):
        return (bidiagonal_terminal_state(p, n) - np.exp(-5.0 * p)) / np.sqrt(n)

    res = sopt.least_squares(resid, 0.5 * (problem.lower + problem.upper), bounds=(problem.lower, problem.upper),
                             xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return res.x, float(np.sum(res.fun**2))


# -- commands --------------------------------------------------------------------


def _objective(cfg: RunConfig, problem, default_obj):
    return read_measurements(cfg.measurements, problem) if cfg.measurements else default_obj


def _resolve_problem(name):
    try:
        return get_problem(name)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from None


def _load_surrogate(path, problem_name=None) -> sg.ConstraintSurrogate:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing surrogate checkpoint: {path}")
    try:
        surr = sg.ConstraintSurrogate.load(path)
    except KeyError as exc:
        raise MissingArtifact(f"missing gamma block in checkpoint {path} ({exc})") from None
    if problem_name and surr.problem_name and surr.problem_name != problem_name:
        raise ConfigError(f"checkpoint {path} was trained on {surr.problem_name!r}, not {problem_name!r}")
    return surr


def cmd_train_constraint(cfg: RunConfig) -> int:
    problem, _ = _resolve_problem(cfg.problem)
    out = cfg.out
    ga = dataclasses.replace(cfg.ga, rel_tol=cfg.solver.rel_tol, abs_tol=cfg.solver.abs_tol)
    tic = time.perf_counter()
    surr = sg.ga_training_loop(problem, ga, cfg.seed)
    stats = sg.estimate_gamma(surr, problem, sg.fresh_params(problem, cfg.gamma.params, cfg.seed + 1),
                              n_times=cfg.gamma.times)
    seconds = time.perf_counter() - tic
    out.mkdir(parents=True, exist_ok=True)
    surr.save(out / CHECKPOINT)
    surr.dataset.to_csv(out / DATASET, problem)
    sg.save_history(surr.history, out / HISTORY)
    write_curves(out / CURVES, surr.history)
    print(f"problem={problem.name} converged={surr.converged} generations={len(surr.history)} "
          f"best_max_error={surr.best_max_error:.6g} gamma={np.array2string(stats.gamma, precision=6)} "
          f"seconds={seconds:.1f}")
    return EXIT_OK if surr.converged else EXIT_NOT_CONVERGED


def _landscape(surr, obj, problem, ocfg, points=201, side=41):
    m = problem.param_dim
    if m > 2:
        return None
    if m == 1:
        P = np.linspace(problem.lower, problem.upper, points)
    else:
        a = np.linspace(problem.lower[0], problem.upper[0], side)
        b = np.linspace(problem.lower[1], problem.upper[1], side)
        P = np.array([[x, y] for x in a for y in b])
    quad = QuadratureRule.gauss_legendre(ocfg.quad_nodes)
    J = opt.surrogate_objective_batch(P, surr, obj, problem, quad)
    lo_hi = np.array([opt.surrogate_objective_interval(p, surr, obj, problem, ocfg) for p in P])
    return P, J, lo_hi[:, 0], lo_hi[:, 1]


def _refine_kwargs(cfg: RunConfig):
    r = cfg.refine
    return dict(steps=r.steps, fd_step=r.fd_step, walk_iters=r.walk_iters, walk_step=r.walk_step)


def run_optimize(cfg: RunConfig, surr, problem, obj):
    """Generator training plus refinement; returns (GeneratorRun, refined candidates)."""
    quad = QuadratureRule.gauss_legendre(cfg.optimize.quad_nodes)
    run = opt.train_objective_generator(surr, problem, obj, cfg.optimize, seed=cfg.seed, evaluate_direct=False)
    if cfg.refine.target == "surrogate":
        ev = lambda p: opt.surrogate_objective(p, surr, obj, problem, cfg.optimize)
    else:
        ev = opt.direct_objective(problem, obj, quad, cfg.solver)
    for c in run.candidates:
        c.J_refined = float(ev(c.p_pred))
    cands = opt.refine_candidates(run, problem, obj, cfg.refine.method, seed=cfg.seed, evaluator=ev,
                                  **_refine_kwargs(cfg))
    return run, cands


def _optimize_meta(cfg, run, surr):
    return {
        "problem": cfg.problem,
        "seed": cfg.seed,
        "generator_iterations": run.iterations,
        "generator_converged": run.converged,
        "gamma": " ".join(_g(v) for v in surr.gamma),
        "refine": cfg.refine.method,
        "refine_target": cfg.refine.target,
        "newton_steps": cfg.refine.steps,
        "fd_step": _g(cfg.refine.fd_step),
        "walk_iters": cfg.refine.walk_iters,
        "walk_step": _g(cfg.refine.walk_step),
    }


def cmd_optimize(cfg: RunConfig, checkpoint=None) -> int:
    problem, default_obj = _resolve_problem(cfg.problem)
    obj = _objective(cfg, problem, default_obj)
    surr = _load_surrogate(checkpoint or cfg.out / CHECKPOINT, problem.name)
    run, cands = run_optimize(cfg, surr, problem, obj)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    write_candidates(out / CANDIDATES, cands, problem.param_dim, _optimize_meta(cfg, run, surr))
    land = _landscape(surr, obj, problem, cfg.optimize)
    if land is not None:
        write_landscape(out / LANDSCAPE, *land)
    best = cands[0]
    print(f"problem={problem.name} iterations={run.iterations} converged={run.converged} "
          f"p_pred={np.array2string(best.p_pred, precision=10)} J_pred={best.J_pred:.12g} "
          f"p_refined={np.array2string(best.p_refined, precision=15)} J_refined={best.J_refined:.15g}")
    return EXIT_OK if run.converged else EXIT_NOT_CONVERGED


def cmd_refine(cfg: RunConfig, p0, checkpoint=None) -> int:
    problem, default_obj = _resolve_problem(cfg.problem)
    obj = _objective(cfg, problem, default_obj)
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (problem.param_dim,):
        raise ConfigError(f"--p0 needs {problem.param_dim} value(s)")
    if cfg.refine.target == "surrogate":
        surr = _load_surrogate(checkpoint or cfg.out / CHECKPOINT, problem.name)
        ev = lambda p: opt.surrogate_objective(p, surr, obj, problem, cfg.optimize)
    else:
        ev = opt.direct_objective(problem, obj, QuadratureRule.gauss_legendre(cfg.optimize.quad_nodes), cfg.solver)
    r = cfg.refine
    tic = time.perf_counter()
    if r.method == "walk":
        res = opt.random_walk_refine(p0, ev, problem.lower, problem.upper, r.walk_iters, r.walk_step, cfg.seed)
    elif r.method == "newton":
        res = opt.newton_refine(p0, ev, r.steps, r.fd_step, problem.lower, problem.upper)
    else:
        res = opt.RefineResult(p0, ev(p0), 0, 1)
    seconds = time.perf_counter() - tic
    m = problem.param_dim
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / REFINE, [f"p0_{i + 1}" for i in range(m)] + [f"p{i + 1}" for i in range(m)]
                + ["J", "method", "iters", "evals", "seconds", "flag"],
                [[*map(float, p0), *map(float, res.p), float(res.J), r.method, res.iterations, res.evaluations,
                  seconds, res.message]],
                {"problem": cfg.problem, "seed": cfg.seed, "refine_target": cfg.refine.target})
    print(f"p={np.array2string(res.p, precision=15)} J={res.J:.15g} iterations={res.iterations}")
    return EXIT_OK if res.ok else EXIT_NOT_CONVERGED


def bound_rows(surr, problem, params, cfg: RunConfig, delta_max=None):
    delta = float(np.max(surr.gamma)) if delta_max is None else float(delta_max)
    hbar = float(surr.hbar) if surr.hbar else (problem.t_span[1] - problem.t_span[0]) / (cfg.ga.exact_points - 1)
    horizon = problem.t_span[1] - problem.t_span[0]
    rows = []
    for p in np.atleast_2d(params):
        row = {"p": p, "delta_max": delta, "hbar": hbar, "horizon": horizon}
        try:
            traj = reference_solve(problem, p)
            lin = eb.linearize(problem, p, traj, cfg.bound.n_samples, cfg.bound.t_ref)
        except eb.PreconditionViolation as exc:
            # the theorem does not apply; report the empirical relaxation alone
            row.update(a1_bar=math.nan, r_max=math.nan, P_norm=math.nan, bound=delta, horizon_bound=delta,
                       status=f"precondition-violation: {exc}; gamma fallback")
        else:
            row.update(a1_bar=lin.a1_bar, r_max=lin.r_max, P_norm=lin.P_norm,
                       bound=eb.global_bound(eb.BoundInputs(lin, delta, hbar)),
                       horizon_bound=eb.horizon_bound(lin, delta, horizon), status="ok")
        rows.append(row)
    return rows


def cmd_error_bound(cfg: RunConfig, params=None, checkpoint=None, delta_max=None) -> int:
    problem, _ = _resolve_problem(cfg.problem)
    surr = _load_surrogate(checkpoint or cfg.out / CHECKPOINT, problem.name)
    if params is None:
        params = [0.5 * (problem.lower + problem.upper)]
    params = np.atleast_2d(np.asarray(params, dtype=float))
    if params.shape[1] != problem.param_dim:
        raise ConfigError(f"--p needs {problem.param_dim} value(s)")
    rows = bound_rows(surr, problem, params, cfg, delta_max)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    write_bound(out / BOUND, rows, problem.param_dim, {"problem": cfg.problem})
    for r in rows:
        print(f"p={np.array2string(r['p'], precision=6)} bound={r['bound']:.6g} status={r['status']}")
    return EXIT_OK


BENCH_FILE = "bench.csv"


def cmd_bench(cfg: RunConfig, name: str) -> int:
    """Full pipeline with offline/online timings and accuracy against the oracle."""
    problem, obj = _resolve_problem(name)
    cfg = dataclasses.replace(cfg, problem=name)
    tic = time.perf_counter()
    ga = dataclasses.replace(cfg.ga, rel_tol=cfg.solver.rel_tol, abs_tol=cfg.solver.abs_tol)
    surr = sg.ga_training_loop(problem, ga, cfg.seed)
    sg.estimate_gamma(surr, problem, sg.fresh_params(problem, cfg.gamma.params, cfg.seed + 1), n_times=cfg.gamma.times)
    t_train = time.perf_counter() - tic
    run, cands = run_optimize(cfg, surr, problem, obj)
    best = cands[0]
    t_pred = run.seconds
    t_corr = sum(c.seconds_refine for c in cands)
    p_star, J_star = oracle_optimum(name, problem, obj)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    surr.save(out / CHECKPOINT)
    sg.save_history(surr.history, out / HISTORY)
    write_curves(out / CURVES, surr.history)
    write_candidates(out / CANDIDATES, cands, problem.param_dim, _optimize_meta(cfg, run, surr))
    m = problem.param_dim
    header = (["problem", "n"] + [f"p_oracle{i + 1}" for i in range(m)] + [f"p_pred{i + 1}" for i in range(m)]
              + [f"p_refined{i + 1}" for i in range(m)]
              + ["J_oracle", "J_pred", "J_refined", "err_pred", "err_refined", "iterations", "generations",
                 "train_converged", "train_seconds", "predict_seconds", "correct_seconds"])
    row = [name, problem.state_dim, *map(float, p_star), *map(float, best.p_pred), *map(float, best.p_refined),
           J_star, float(best.J_pred), float(best.J_refined), float(np.max(np.abs(best.p_pred - p_star))),
           float(np.max(np.abs(best.p_refined - p_star))), run.iterations, len(surr.history), surr.converged,
           t_train, t_pred, t_corr]
    write_table(out / BENCH_FILE, header, [row], {"problem": name, "seed": cfg.seed})
    print(",".join(header))
    print(",".join(_g(v) if isinstance(v, float) else str(v) for v in row))
    return EXIT_OK if surr.converged else EXIT_NOT_CONVERGED


def read_bench(path):
    meta, _, rows = read_table(path)
    return meta, rows


def cmd_report(directory) -> int:
    from . import plotting

    directory = Path(directory)
    found = plotting.render_directory(directory)
    if not found:
        raise MissingArtifact(f"no report inputs found in {directory}")
    write_table(directory / "report.csv", ["input", "figure"], found)
    for src, fig in found:
        print(f"{src},{fig}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------


def _floats_arg(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints_arg(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="daeopt", description="Surrogate-based optimization of parametric DAEs.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, problem=True):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        p.add_argument("--seed", type=int)
        if problem:
            p.add_argument("--problem", help="scalar, cantilever or bidiag:<n>")
        p.add_argument("--rtol", type=float, dest="rel_tol")
        p.add_argument("--atol", type=float, dest="abs_tol")

    def ga_flags(p):
        p.add_argument("--alpha", type=float)
        p.add_argument("--pop", type=int, dest="population")
        p.add_argument("--per-gen", type=int, dest="per_generation")
        p.add_argument("--sigma", type=float)
        p.add_argument("--max-gen", type=int, dest="max_generations")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--hidden", type=_ints_arg, help="hidden layer widths, e.g. 32,32,32")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--n-colloc", type=int)

    def opt_flags(p):
        p.add_argument("--n-seeds", type=int)
        p.add_argument("--max-iter", type=int)
        p.add_argument("--gen-lr", type=float)
        p.add_argument("--noise", choices=("per-iteration", "fixed"))
        p.add_argument("--top-k", type=int)
        p.add_argument("--measurements", help="measurement CSV with header t,x_i,target")

    def refine_flags(p):
        p.add_argument("--refine", choices=("newton", "walk", "none"), dest="method")
        p.add_argument("--newton-steps", type=int, dest="steps")
        p.add_argument("--fd-step", type=float)
        p.add_argument("--walk-iters", type=int)
        p.add_argument("--walk-step", type=float)
        p.add_argument("--refine-target", choices=("direct", "surrogate"), dest="target")

    p = sub.add_parser("train-constraint", help="train the constraint surrogate and estimate gamma")
    common(p)
    ga_flags(p)

    p = sub.add_parser("optimize", help="train the parameter generator and refine candidates")
    common(p)
    p.add_argument("--checkpoint")
    opt_flags(p)
    refine_flags(p)

    p = sub.add_parser("refine", help="refine one starting point against the direct objective")
    common(p)
    p.add_argument("--p0", type=_floats_arg, required=True)
    p.add_argument("--checkpoint", help="surrogate checkpoint, needed with --refine-target surrogate")
    p.add_argument("--measurements")
    refine_flags(p)

    p = sub.add_parser("bench", help="full pipeline on a benchmark with oracle comparison")
    p.add_argument("name", help="scalar, cantilever or bidiag:<n>")
    common(p, problem=False)
    ga_flags(p)
    opt_flags(p)
    refine_flags(p)

    p = sub.add_parser("error-bound", help="a-posteriori bound for a trained surrogate")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--p", type=_floats_arg, action="append", help="parameter point (repeatable)")
    p.add_argument("--delta-max", type=float, help="override the residual bound taken from gamma")

    p = sub.add_parser("report", help="render figures from the CSV files in a directory")
    p.add_argument("--dir", help="directory holding run outputs (default: output directory)")
    return ap


_FLAG_MAP = {
    "solver": ("rel_tol", "abs_tol"),
    "ga": ("alpha", "population", "per_generation", "sigma", "max_generations", "epochs", "lr", "hidden",
           "batch_size", "n_colloc"),
    "optimize": ("n_seeds", "max_iter", "noise", "top_k"),
    "refine": ("method", "steps", "fd_step", "walk_iters", "walk_step", "target"),
}


def config_from_args(args, preset: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if preset:
        cfg = apply_overrides(cfg, preset)
    cfg = load_config(getattr(args, "config", None), cfg)
    flags = vars(args)
    data: dict = {}
    for k in ("problem", "seed", "measurements"):
        if flags.get(k) is not None:
            data[k] = flags[k]
    if flags.get("out") is not None:
        data["output_dir"] = flags["out"]
    for section, keys in _FLAG_MAP.items():
        vals = {k: flags[k] for k in keys if flags.get(k) is not None}
        if vals:
            data[section] = vals
    if flags.get("gen_lr") is not None:
        data.setdefault("optimize", {})["lr"] = flags["gen_lr"]
    return apply_overrides(cfg, data)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            directory = args.dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
            return cmd_report(directory)
        if args.command == "bench":
            _resolve_problem(args.name)
            cfg = config_from_args(args, bench_preset(args.name.strip().lower()))
            return cmd_bench(cfg, args.name.strip().lower())
        cfg = config_from_args(args)
        _resolve_problem(cfg.problem)
        if args.command == "train-constraint":
            return cmd_train_constraint(cfg)
        if args.command == "optimize":
            return cmd_optimize(cfg, args.checkpoint)
        if args.command == "refine":
            return cmd_refine(cfg, args.p0, args.checkpoint)
        if args.command == "error-bound":
            return cmd_error_bound(cfg, args.p, args.checkpoint, args.delta_max)
    except ConfigError as exc:
        print(f"daeopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"daeopt: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except IntegrationError as exc:
        print(f"daeopt: error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    ap.error(f"unknown command {args.command}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
