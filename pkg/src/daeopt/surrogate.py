"""Offline training of the constraint network (t, p) -> x.

The loss mixes three record sets: initial values (set I), equation residuals
at collocation points (set F) and exact solution values from reference
solves (set B).  Set B grows generation by generation: parameters where the
network is worst are recombined and mutated, solved exactly, and appended.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from . import neural
from .integrate import IntegrationError, SolverConfig, detect_degeneracy, integrate, reference_solve
from .neural import AdamState, Mlp
from .problems import ParametricDaeProblem

log = logging.getLogger(__name__)


@dataclass
class GaConfig:
    alpha: float = 1e-3
    population: int = 50
    per_generation: int = 1000
    sigma: float = 0.05
    max_generations: int = 30
    monitor_points: int = 100
    epochs: int = 2000
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_every: int = 5
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_colloc: int = 2000
    hidden: tuple[int, ...] = (128,) * 6
    # uniform time grid for exact records; also the spacing used as hbar
    exact_points: int = 21
    # uniform time grid for the prediction error sup-norm
    error_points: int = 41
    batch_size: int | None = 1024
    exclusion_radius: float = 0.05
    degeneracy_tol: float = 1e-3
    # tolerances of the solves that produce exact records
    rel_tol: float = 1e-12
    abs_tol: float = 1e-14

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("tolerance alpha must be positive")
        if self.population < 2:
            raise ValueError("initial population must be >= 2")
        if self.sigma < 0:
            raise ValueError("mutation sigma must be >= 0")
        if self.exact_points < 2 or self.error_points < 2:
            raise ValueError("time grids need at least two points")
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def offspring_per_generation(self) -> int:
        return max(1, math.ceil(self.per_generation / self.exact_points))


# -- dataset ---------------------------------------------------------------------


@dataclass
class TrainingDataset:
    I_t: np.ndarray
    I_p: np.ndarray
    I_x: np.ndarray
    I_gen: np.ndarray
    F_t: np.ndarray
    F_p: np.ndarray
    F_gen: np.ndarray
    B_t: np.ndarray
    B_p: np.ndarray
    B_x: np.ndarray
    B_gen: np.ndarray

    @classmethod
    def empty(cls, m: int, n: int) -> "TrainingDataset":
        z = np.empty(0)
        return cls(z, np.empty((0, m)), np.empty((0, n)), np.empty(0, int),
                   z, np.empty((0, m)), np.empty(0, int),
                   z, np.empty((0, m)), np.empty((0, n)), np.empty(0, int))

    @property
    def m(self) -> int:
        return self.I_p.shape[1]

    @property
    def n(self) -> int:
        return self.I_x.shape[1]

    def add_initial(self, t, p, x, gen):
        self.I_t = np.append(self.I_t, t)
        self.I_p = np.vstack([self.I_p, np.reshape(p, (-1, self.m))])
        self.I_x = np.vstack([self.I_x, np.reshape(x, (-1, self.n))])
        self.I_gen = np.append(self.I_gen, np.full(np.size(t), gen))

    def add_exact(self, t, p, x, gen):
        t = np.atleast_1d(t)
        self.B_t = np.append(self.B_t, t)
        self.B_p = np.vstack([self.B_p, np.broadcast_to(p, (len(t), self.m))])
        self.B_x = np.vstack([self.B_x, np.reshape(x, (len(t), self.n))])
        self.B_gen = np.append(self.B_gen, np.full(len(t), gen))

    def check(self, problem: ParametricDaeProblem) -> None:
        t0, tf = problem.t_span
        for name in "IFB":
            P = getattr(self, f"{name}_p")
            T = getattr(self, f"{name}_t")
            if P.size and (np.any(P < problem.lower - 1e-12) or np.any(P > problem.upper + 1e-12)):
                raise ValueError(f"set {name}: parameter outside the box")
            if T.size and (np.any(T < t0 - 1e-12) or np.any(T > tf + 1e-12)):
                raise ValueError(f"set {name}: time outside the span")
        if not np.all(np.isfinite(self.B_x)):
            raise ValueError("set B: non-finite exact state")

    def to_csv(self, path, problem: ParametricDaeProblem | None = None) -> None:
        if problem is not None:
            self.check(problem)
        m, n = self.m, self.n
        f = lambda v: format(float(v), ".17g")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["set", "t"] + [f"p{i + 1}" for i in range(m)] + [f"x{i + 1}" for i in range(n)] + ["gen"])
            for t, p, x, g in zip(self.I_t, self.I_p, self.I_x, self.I_gen):
                w.writerow(["I", f(t)] + [f(v) for v in p] + [f(v) for v in x] + [int(g)])
            for t, p, g in zip(self.F_t, self.F_p, self.F_gen):
                w.writerow(["F", f(t)] + [f(v) for v in p] + [""] * n + [int(g)])
            for t, p, x, g in zip(self.B_t, self.B_p, self.B_x, self.B_gen):
                w.writerow(["B", f(t)] + [f(v) for v in p] + [f(v) for v in x] + [int(g)])

    @classmethod
    def read_csv(cls, path) -> "TrainingDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        m = sum(1 for h in header if h.startswith("p"))
        n = sum(1 for h in header if h.startswith("x"))
        ds = cls.empty(m, n)
        for r in rows[1:]:
            s, t = r[0], float(r[1])
            p = np.array([float(v) for v in r[2:2 + m]])
            g = int(r[-1])
            if s == "F":
                ds.F_t = np.append(ds.F_t, t)
                ds.F_p = np.vstack([ds.F_p, p])
                ds.F_gen = np.append(ds.F_gen, g)
                continue
            x = np.array([float(v) for v in r[2 + m:2 + m + n]])
            if s == "I":
                ds.add_initial(t, p, x, g)
            elif s == "B":
                ds.add_exact(t, p, x, g)
            else:
                raise ValueError(f"unknown record set {s!r}")
        return ds


def uniform_param_grid(problem: ParametricDaeProblem, count: int) -> np.ndarray:
    """About ``count`` points on a tensor grid over the parameter box."""
    m = problem.param_dim
    k = max(2, int(round(count ** (1.0 / m))))
    axes = [np.linspace(lo, hi, k) for lo, hi in zip(problem.lower, problem.upper)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=-1)


@dataclass
class ExactSolution:
    """Reference solve of one parameter, sampled for training and error checks."""

    p: np.ndarray
    record_t: np.ndarray
    record_x: np.ndarray
    error_t: np.ndarray
    error_x: np.ndarray
    flagged: list[float] = field(default_factory=list)


def solve_exact(problem: ParametricDaeProblem, p, cfg: GaConfig) -> ExactSolution:
    t0, tf = problem.t_span
    rec_t = np.linspace(t0, tf, cfg.exact_points)
    err_t = np.linspace(t0, tf, cfg.error_points)
    # land on the sample times so the records carry no interpolation error
    grid = tuple(np.union1d(rec_t, err_t))
    traj = integrate(problem, p, SolverConfig(rel_tol=cfg.rel_tol, abs_tol=cfg.abs_tol, output_grid=grid, keep_steps=True))
    flagged: list[float] = []
    if problem.algebraic_idx:
        flagged = detect_degeneracy(problem, p, traj, cfg.degeneracy_tol).flagged_times
        if flagged:
            near = np.min(np.abs(rec_t[:, None] - np.asarray(flagged)[None, :]), axis=1) <= cfg.exclusion_radius
            rec_t = rec_t[~near]
    return ExactSolution(np.asarray(p, float), rec_t, traj.at(rec_t), err_t, traj.at(err_t), flagged)


def _solve_or_resample(problem, p, cfg, rng, draw):
    for attempt in range(10):
        try:
            return solve_exact(problem, p, cfg)
        except IntegrationError as exc:
            log.warning("reference solve failed for p=%s (%s); resampling", p, exc)
            p = draw(rng)
    raise IntegrationError(f"reference solves keep failing near p={p}")


def build_initial_dataset(problem: ParametricDaeProblem, M: int, n_colloc: int, seed, cfg: GaConfig | None = None):
    """Latin-hypercube initial population with its initial, collocation and exact records.

    Returns the dataset and the list of exact solutions (one per draw).
    """
    if M < 2:
        raise ValueError("need at least two initial draws")
    cfg = cfg or GaConfig()
    rng = np.random.default_rng(seed)
    lo, hi = problem.lower, problem.upper
    sampler = qmc.LatinHypercube(d=problem.param_dim, seed=rng)
    P = qmc.scale(sampler.random(M), lo, hi) if problem.param_dim else np.empty((M, 0))
    P = np.clip(P, lo, hi)
    t0, tf = problem.t_span
    ds = TrainingDataset.empty(problem.param_dim, problem.state_dim)
    draw = lambda r: r.uniform(lo, hi)
    sols = []
    for p in P:
        sol = _solve_or_resample(problem, p, cfg, rng, draw)
        sols.append(sol)
        ds.add_initial(t0, sol.p, problem.initial_map(sol.p), 0)
        ds.add_exact(sol.record_t, sol.p, sol.record_x, 0)
    ds.F_t = rng.uniform(t0, tf, n_colloc)
    ds.F_p = rng.uniform(lo, hi, (n_colloc, problem.param_dim))
    ds.F_gen = np.zeros(n_colloc, int)
    return ds, sols


# -- model wrappers ------------------------------------------------------------


class AnalyticModel:
    """Stand-in for a trained network given a closed-form state map.

    ``fn(t, p)`` takes t of shape (B,) and p of shape (B, m) and returns
    (B, n).  Derivatives are central differences.
    """

    def __init__(self, fn, n_in: int, n_out: int, h: float = 1e-6):
        self.fn = fn
        self.n_in = n_in
        self.n_out = n_out
        self.layer_sizes = [n_in, n_out]
        self.h = h

    def __call__(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.asarray(self.fn(X[:, 0], X[:, 1:]), dtype=float).reshape(len(X), self.n_out)

    def jacobian(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        J = np.empty((len(X), self.n_out, self.n_in))
        for j in range(self.n_in):
            E = np.zeros(self.n_in)
            E[j] = self.h
            J[:, :, j] = (self(X + E) - self(X - E)) / (2 * self.h)
        return J


def predict(net, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return neural.forward(net, X) if isinstance(net, Mlp) else net(X)


def predict_jacobian(net, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return neural.grad_input(net, X) if isinstance(net, Mlp) else net.jacobian(X)


def _inputs(t, P):
    t = np.asarray(t, dtype=float).reshape(-1)
    P = np.asarray(P, dtype=float).reshape(len(t), -1)
    return np.column_stack([t, P])


@dataclass
class ConstraintSurrogate:
    net: object
    gamma: np.ndarray
    problem_name: str = ""
    residual_mean: np.ndarray | None = None
    residual_std: np.ndarray | None = None
    history: list[dict] = field(default_factory=list)
    converged: bool = False
    hbar: float | None = None
    dataset: TrainingDataset | None = field(default=None, repr=False)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=float)
        if np.any(self.gamma < 0):
            raise ValueError("gamma must be non-negative")

    def predict(self, t, P) -> np.ndarray:
        return predict(self.net, _inputs(t, P))

    @property
    def best_max_error(self) -> float:
        return min((h["max_error"] for h in self.history), default=math.inf)

    def to_dict(self) -> dict:
        if not isinstance(self.net, Mlp):
            raise TypeError("only network surrogates can be saved")
        d = neural.net_to_dict(self.net)
        d["gamma"] = self.gamma
        d["residual_mean"] = self.residual_mean
        d["residual_std"] = self.residual_std
        d["problem"] = self.problem_name
        d["converged"] = bool(self.converged)
        d["hbar"] = self.hbar
        d["history"] = self.history
        return d

    def save(self, path) -> None:
        Path(path).write_text(neural.dumps_json17(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ConstraintSurrogate":
        d = json.loads(Path(path).read_text())
        if "gamma" not in d or d["gamma"] is None:
            raise KeyError(f"{path}: checkpoint has no gamma block")
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)
        return cls(
            neural.net_from_dict(d),
            arr(d["gamma"]),
            d.get("problem", ""),
            arr(d.get("residual_mean")),
            arr(d.get("residual_std")),
            d.get("history", []),
            bool(d.get("converged", False)),
            d.get("hbar"),
        )


def make_network(problem: ParametricDaeProblem, hidden, seed, exact_x=None) -> Mlp:
    """Network with inputs scaled to [-1, 1] and outputs standardized."""
    t0, tf = problem.t_span
    in_shift = np.concatenate([[0.5 * (t0 + tf)], 0.5 * (problem.lower + problem.upper)])
    in_scale = np.concatenate([[0.5 * (tf - t0)], 0.5 * problem.width])
    if exact_x is not None and len(exact_x):
        out_shift = exact_x.mean(axis=0)
        out_scale = np.maximum(exact_x.std(axis=0), 1e-8)
    else:
        out_shift, out_scale = None, None
    sizes = [1 + problem.param_dim, *hidden, problem.state_dim]
    return neural.init(sizes, seed, in_shift, in_scale, out_shift, out_scale)


# -- loss ------------------------------------------------------------------------


def _residual_scales(problem: ParametricDaeProblem, net) -> np.ndarray:
    """Per-equation scale making differential residuals dimensionless."""
    out_scale = getattr(net, "out_scale", np.ones(problem.state_dim))
    half = 0.5 * (problem.t_span[1] - problem.t_span[0])
    d = np.asarray(out_scale)[list(problem.differential)] / half
    return np.concatenate([d, np.ones(problem.n_alg)])


def _out_scale(problem, net):
    return np.asarray(getattr(net, "out_scale", np.ones(problem.state_dim)), dtype=float)


def _residual_jacobian(problem, t, P, Y, h=1e-6):
    """d residual / d state for batched states (central differences)."""
    B, n = Y.shape
    zero = np.zeros_like(Y)
    J = np.empty((B, len(problem.differential) + problem.n_alg, n))
    for j in range(n):
        step = h * np.maximum(1.0, np.abs(Y[:, j]))
        Yp, Ym = Y.copy(), Y.copy()
        Yp[:, j] += step
        Ym[:, j] -= step
        J[:, :, j] = (problem.residual(t, P, Yp, zero) - problem.residual(t, P, Ym, zero)) / (2 * step[:, None])
    return J


def _terms(problem, net, t, P, Y, dY=None, target=None):
    """Per-term mean squared error and its cotangents."""
    if target is not None:
        s = _out_scale(problem, net)
        r = (Y - target) / s
        N = r.size
        return float(np.sum(r * r) / N), 2.0 * r / s / N, None
    res = problem.residual(t, P, Y, dY)
    sc = _residual_scales(problem, net)
    r = res / sc
    N = r.size
    val = float(np.sum(r * r) / N)
    gr = 2.0 * r / sc / N
    Jr = _residual_jacobian(problem, t, P, Y)
    gY = np.einsum("bk,bkj->bj", gr, Jr)
    gdY = np.zeros_like(Y)
    gdY[:, list(problem.differential)] = gr[:, : len(problem.differential)]
    return val, gY, gdY


def composite_loss(surr, dataset: TrainingDataset, weights=(1.0, 1.0, 1.0), problem: ParametricDaeProblem | None = None):
    """w_I * MSE(I) + w_F * MSE(residual on F) + w_B * MSE(B).

    Errors are measured in standardized output units, residuals of the
    differential equations in standardized state per normalized time.
    Returns (total, {"I": .., "F": .., "B": ..}) with unweighted terms.
    """
    net = surr.net if isinstance(surr, ConstraintSurrogate) else surr
    if problem is None:
        raise ValueError("composite_loss needs the problem for its residual")
    parts = {"I": 0.0, "F": 0.0, "B": 0.0}
    if len(dataset.I_t):
        Y = predict(net, _inputs(dataset.I_t, dataset.I_p))
        parts["I"] = _terms(problem, net, None, None, Y, target=dataset.I_x)[0]
    if len(dataset.B_t):
        Y = predict(net, _inputs(dataset.B_t, dataset.B_p))
        parts["B"] = _terms(problem, net, None, None, Y, target=dataset.B_x)[0]
    if len(dataset.F_t):
        X = _inputs(dataset.F_t, dataset.F_p)
        Y = predict(net, X)
        dY = predict_jacobian(net, X)[:, :, 0]
        res = problem.residual(dataset.F_t, dataset.F_p, Y, dY) / _residual_scales(problem, net)
        parts["F"] = float(np.mean(res * res))
    wI, wF, wB = weights
    return wI * parts["I"] + wF * parts["F"] + wB * parts["B"], parts


def _batch(rng, n, size):
    if size is None or n <= size:
        return slice(None)
    return rng.choice(n, size, replace=False)


def train_epochs(net: Mlp, problem, dataset: TrainingDataset, adam: AdamState, epochs: int, weights, rng, batch_size=None):
    """Adam steps on the composite loss; returns the last full-batch loss."""
    wI, wF, wB = weights
    e_t = np.zeros(net.n_in)
    e_t[0] = 1.0
    XI = _inputs(dataset.I_t, dataset.I_p)
    XB = _inputs(dataset.B_t, dataset.B_p)
    XF = _inputs(dataset.F_t, dataset.F_p)
    for _ in range(epochs):
        params = net.params()
        total = [np.zeros_like(q) for q in params]
        for X, tgt, w, kind in ((XI, dataset.I_x, wI, "I"), (XB, dataset.B_x, wB, "B")):
            if not len(X) or w == 0:
                continue
            idx = _batch(rng, len(X), batch_size)
            Xb, Tb = X[idx], tgt[idx]

            def loss(y, dy, Tb=Tb, w=w):
                v, gy, _ = _terms(problem, net, None, None, y, target=Tb)
                return w * v, w * gy, None

            _, g = neural.grad_weights(net, Xb, loss)
            total = [a + b for a, b in zip(total, g)]
        if len(XF) and wF != 0:
            idx = _batch(rng, len(XF), batch_size)
            Xb = XF[idx]

            def loss(y, dy, Xb=Xb):
                v, gy, gdy = _terms(problem, net, Xb[:, 0], Xb[:, 1:], y, dy)
                return wF * v, wF * gy, wF * gdy

            _, g = neural.grad_weights(net, Xb, loss, direction=e_t)
            total = [a + b for a, b in zip(total, g)]
        net.set_params(neural.adam_step(adam, params, total))
    return composite_loss(net, dataset, weights, problem)[0]


# -- adaptive sampling -----------------------------------------------------------


def sup_error(net, sol: ExactSolution) -> float:
    Y = predict(net, _inputs(sol.error_t, np.broadcast_to(sol.p, (len(sol.error_t), len(sol.p)))))
    return float(np.max(np.abs(Y - sol.error_x)))


def prediction_error(surr, problem: ParametricDaeProblem, p, cfg: GaConfig | None = None) -> float:
    """Sup-norm of network minus reference solution over a uniform time grid."""
    cfg = cfg or GaConfig()
    net = surr.net if isinstance(surr, ConstraintSurrogate) else surr
    try:
        sol = solve_exact(problem, p, cfg)
    except IntegrationError as exc:
        raise IntegrationError(f"reference solve failed for p={np.asarray(p).tolist()}: {exc}", exc.t) from exc
    return sup_error(net, sol)


def select_parents(errors, alpha: float, count: int, seed):
    """Index pairs drawn with probability proportional to error above alpha.

    Returns None when no error exceeds alpha (the loop has converged).
    """
    rng = np.random.default_rng(seed)
    e = np.asarray(errors, dtype=float)
    pool = np.flatnonzero(e > alpha)
    if pool.size == 0:
        return None
    w = e[pool] / e[pool].sum()
    pairs = []
    for _ in range(count):
        i = rng.choice(pool, p=w)
        if pool.size >= 2:
            rest = pool != i
            j = rng.choice(pool[rest], p=w[rest] / w[rest].sum())
        else:
            j = i
        pairs.append((int(i), int(j)))
    return pairs


def generate_offspring(p1, p2, lower, upper, sigma: float, seed, beta: float | None = None) -> np.ndarray:
    """Blend crossover plus Gaussian mutation, projected onto the box."""
    rng = np.random.default_rng(seed)
    p1, p2 = np.asarray(p1, float), np.asarray(p2, float)
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    b = rng.uniform(0.0, 1.0) if beta is None else beta
    # where the parents agree the blend must return them exactly
    child = np.where(p1 == p2, p1, b * p1 + (1.0 - b) * p2)
    if sigma > 0:
        child = child + rng.normal(0.0, sigma * (upper - lower))
    return np.clip(child, lower, upper)


def ga_training_loop(problem: ParametricDaeProblem, cfg: GaConfig, seed) -> ConstraintSurrogate:
    """Alternate training, error monitoring and error-driven enrichment of set B."""
    rng = np.random.default_rng(seed)
    ds, population = build_initial_dataset(problem, cfg.population, cfg.n_colloc, rng, cfg)
    monitor = [solve_exact(problem, p, cfg) for p in uniform_param_grid(problem, cfg.monitor_points)]
    net = make_network(problem, cfg.hidden, int(rng.integers(2**31)), ds.B_x)
    adam = AdamState(lr=cfg.lr)
    best_net, best_err = net.copy(), math.inf
    history: list[dict] = []
    converged = False
    for gen in range(cfg.max_generations + 1):
        adam.lr = cfg.lr * cfg.lr_decay ** (gen // max(1, cfg.decay_every))
        loss = train_epochs(net, problem, ds, adam, cfg.epochs, cfg.loss_weights, rng, cfg.batch_size)
        sols = population + monitor
        errors = np.array([sup_error(net, s) for s in sols])
        max_err = float(errors.max())
        if max_err < best_err:
            best_err, best_net = max_err, net.copy()
        history.append({
            "generation": gen,
            "loss": loss,
            "max_error": max_err,
            "best_max_error": best_err,
            "n_exact": int(len(ds.B_t)),
        })
        log.info("generation %d: loss %.3e, max error %.3e, |B| = %d", gen, loss, max_err, len(ds.B_t))
        if max_err <= cfg.alpha:
            converged = True
            break
        if gen == cfg.max_generations:
            break
        pairs = select_parents(errors, cfg.alpha, cfg.offspring_per_generation, rng)
        for i, j in pairs:
            child = generate_offspring(sols[i].p, sols[j].p, problem.lower, problem.upper, cfg.sigma, rng)
            draw = lambda r: generate_offspring(sols[i].p, sols[j].p, problem.lower, problem.upper, cfg.sigma, r)
            sol = _solve_or_resample(problem, child, cfg, rng, draw)
            ds.add_exact(sol.record_t, sol.p, sol.record_x, gen + 1)
            population.append(sol)
    t0, tf = problem.t_span
    surr = ConstraintSurrogate(
        best_net,
        np.zeros(problem.state_dim),
        problem.name,
        history=history,
        converged=converged,
        hbar=(tf - t0) / (cfg.exact_points - 1),
        dataset=ds,
    )
    return surr


# -- relaxation vector ------------------------------------------------------------


@dataclass
class ResidualStats:
    mean: np.ndarray
    std: np.ndarray
    gamma: np.ndarray
    samples: np.ndarray


def gamma_from_samples(samples) -> ResidualStats:
    """gamma_k = max(|E_k - 3 D_k|, |E_k + 3 D_k|) per state dimension."""
    Z = np.asarray(samples, dtype=float)
    Z = Z.reshape(len(Z), -1)
    if len(Z) < 30:
        raise ValueError(f"need at least 30 residual samples per dimension, got {len(Z)}")
    E = Z.mean(axis=0)
    D = Z.std(axis=0)
    gamma = np.maximum(np.abs(E - 3 * D), np.abs(E + 3 * D))
    return ResidualStats(E, D, gamma, Z)


def validation_residuals(surr, problem: ParametricDaeProblem, validation_params, n_times: int = 20) -> np.ndarray:
    """Samples of (network - reference) over a uniform time grid, shape (K, n)."""
    net = surr.net if isinstance(surr, ConstraintSurrogate) else surr
    t0, tf = problem.t_span
    ts = np.linspace(t0, tf, n_times)
    out = []
    for p in np.atleast_2d(validation_params):
        ref = reference_solve(problem, p, output_grid=ts).states
        out.append(predict(net, _inputs(ts, np.broadcast_to(p, (len(ts), len(p))))) - ref)
    return np.concatenate(out, axis=0)


def estimate_gamma(surr: ConstraintSurrogate, problem: ParametricDaeProblem, validation_params, seed=None, n_times: int = 20) -> ResidualStats:
    """Fit the relaxation vector on held-out parameters and store it on ``surr``."""
    stats = gamma_from_samples(validation_residuals(surr, problem, validation_params, n_times))
    surr.gamma = stats.gamma
    surr.residual_mean = stats.mean
    surr.residual_std = stats.std
    return stats


def fresh_params(problem: ParametricDaeProblem, count: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(problem.lower, problem.upper, (count, problem.param_dim))


def save_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "loss", "max_error", "best_max_error", "n_exact"])
        for h in history:
            w.writerow([h["generation"], format(h["loss"], ".17g"), format(h["max_error"], ".17g"),
                        format(h["best_max_error"], ".17g"), h["n_exact"]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"generation": int(r["generation"]), "loss": float(r["loss"]), "max_error": float(r["max_error"]),
             "best_max_error": float(r["best_max_error"]), "n_exact": int(r["n_exact"])} for r in rows]


__all__ = [
    "GaConfig",
    "TrainingDataset",
    "ConstraintSurrogate",
    "AnalyticModel",
    "build_initial_dataset",
    "composite_loss",
    "prediction_error",
    "select_parents",
    "generate_offspring",
    "ga_training_loop",
    "estimate_gamma",
    "gamma_from_samples",
]
