"""Dormand-Prince 5(4) integration of explicit and semi-explicit index-1 systems.

Semi-explicit systems are advanced half-explicitly: the differential states
take ordinary Runge-Kutta stages, and at every stage the algebraic states are
recovered from g = 0 by damped Newton warm-started from the last accepted
value.  The warm start is what keeps a solve on one branch of a constraint
with several solution manifolds.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .problems import ParametricDaeProblem

log = logging.getLogger(__name__)

# Dormand-Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B4


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float | None = None):
        super().__init__(message if t is None else f"{message} at t={t:.17g}")
        self.t = t


class StepSizeError(IntegrationError):
    """Step size fell below what floating point can resolve."""


class NewtonError(IntegrationError):
    """Algebraic stage solve did not converge; the constraint Jacobian may be singular."""


class ParameterOutOfBoxError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_steps: int = 200_000
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    output_grid: tuple[float, ...] | None = None
    # with an output grid, also record the accepted steps between grid times
    keep_steps: bool = False
    max_step: float = math.inf

    def __post_init__(self):
        if self.rel_tol <= 0 or self.abs_tol <= 0 or self.newton_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1 or self.newton_max_iter < 1:
            raise ValueError("step and iteration caps must be >= 1")


REFERENCE = SolverConfig(rel_tol=1e-12, abs_tol=1e-14)


@dataclass
class Trajectory:
    """Time-gridded solution with cubic Hermite dense output.

    ``slopes`` are time derivatives of the differential states.  Algebraic
    states between grid points are re-solved from g = 0 when the problem is
    attached, otherwise interpolated with finite-difference slopes.
    """

    times: np.ndarray
    states: np.ndarray
    slopes: np.ndarray | None = None
    problem: ParametricDaeProblem | None = field(default=None, repr=False)
    p: np.ndarray | None = None
    newton_tol: float = 1e-12

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float).reshape(len(self.times), -1)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")

    @property
    def max_step(self) -> float:
        """Largest gap between adjacent times."""
        return float(np.max(np.diff(self.times))) if len(self.times) > 1 else 0.0

    @property
    def t_span(self):
        return float(self.times[0]), float(self.times[-1])

    def covers(self, t0, tf, rtol=1e-12) -> bool:
        tol = rtol * max(1.0, abs(t0), abs(tf))
        return self.times[0] <= t0 + tol and self.times[-1] >= tf - tol

    def _full_slopes(self) -> np.ndarray:
        if len(self.times) < 2:
            return np.zeros_like(self.states)
        edge = 2 if len(self.times) > 2 else 1
        fd = np.gradient(self.states, self.times, axis=0, edge_order=edge)
        if self.slopes is None:
            return fd
        out = fd.copy()
        cols = list(self.problem.differential) if self.problem is not None else list(range(self.states.shape[1]))
        out[:, cols] = self.slopes
        return out

    def at(self, t) -> np.ndarray:
        """States at arbitrary times inside the grid, shape (len(t), n)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        lo, hi = self.times[0], self.times[-1]
        tol = 1e-12 * max(1.0, abs(lo), abs(hi))
        if np.any(t < lo - tol) or np.any(t > hi + tol):
            raise ValueError("interpolation time outside the trajectory span")
        t = np.clip(t, lo, hi)
        if len(self.times) == 1:
            return np.repeat(self.states, len(t), axis=0)
        if not hasattr(self, "_dx"):
            self._dx = self._full_slopes()
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[i], self.times[i + 1]
        h = (t1 - t0)[:, None]
        s = ((t - t0) / (t1 - t0))[:, None]
        y0, y1 = self.states[i], self.states[i + 1]
        d0, d1 = self._dx[i], self._dx[i + 1]
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        X = h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1
        prob = self.problem
        if prob is not None and prob.algebraic_idx and self.p is not None:
            alg = list(prob.algebraic_idx)
            exact = np.isclose(s[:, 0], 0.0) | np.isclose(s[:, 0], 1.0)
            for k in np.flatnonzero(~exact):
                xd = X[k, list(prob.differential)]
                xa = newton_algebraic(prob, t[k], self.p, xd, X[k, alg], self.newton_tol, 50)
                X[k, alg] = xa
        return X

    def to_csv(self, path) -> None:
        n = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i + 1}" for i in range(n)])
            for t, x in zip(self.times, self.states):
                w.writerow([format(t, ".17g")] + [format(v, ".17g") for v in x])

    @classmethod
    def read_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[0] != "t":
            raise ValueError(f"{path}: expected header starting with 't'")
        data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
        return cls(data[:, 0], data[:, 1:])


def newton_algebraic(problem: ParametricDaeProblem, t, p, xd, xa0, tol, max_iter) -> np.ndarray:
    """Damped Newton for g(t, p, [xd, xa]) = 0 in the algebraic states."""
    n = problem.state_dim
    x = np.empty(n)
    dif, alg = list(problem.differential), list(problem.algebraic_idx)
    x[dif] = xd
    x[alg] = xa0
    r = problem.g(t, p, x)
    rn = np.max(np.abs(r))
    polish = 0
    for _ in range(max_iter):
        if rn <= tol:
            if polish == 1:
                return x[alg].copy()
            # a converged residual can still leave a sizable error when the
            # Jacobian is small; extra Newton steps are nearly free here
            polish += 1
        J = problem.g_jacobian(t, p, x)
        try:
            step = np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, r, rcond=None)[0]
        lam = 1.0
        for _ in range(30):
            trial = x.copy()
            trial[alg] = x[alg] - lam * step
            rt = problem.g(t, p, trial)
            rtn = np.max(np.abs(rt))
            if np.isfinite(rtn) and (rtn < rn or (polish and rtn <= tol)):
                break
            lam *= 0.5
        else:
            break
        x, r, rn = trial, rt, rtn
    if rn <= tol:
        return x[alg].copy()
    raise NewtonError(f"algebraic solve stalled at |g|={rn:.3e}", float(t))


def _check_box(problem, p):
    p = np.asarray(p, dtype=float).reshape(problem.param_dim)
    if not problem.contains(p, slack=1e-12):
        raise ParameterOutOfBoxError(f"parameter {p} outside [{problem.lower}, {problem.upper}]")
    return p


def integrate(problem: ParametricDaeProblem, p, cfg: SolverConfig | None = None) -> Trajectory:
    cfg = cfg or SolverConfig()
    p = _check_box(problem, p)
    t0, tf = map(float, problem.t_span)
    dif = list(problem.differential)
    alg = list(problem.algebraic_idx)
    semi = bool(alg)

    x0 = np.asarray(problem.initial_map(p), dtype=float).reshape(problem.state_dim)
    yd = x0[dif].copy()
    ya = x0[alg].copy()
    if semi:
        ya = newton_algebraic(problem, t0, p, yd, ya, cfg.newton_tol, cfg.newton_max_iter)

    def rhs(t, y, guess):
        a = newton_algebraic(problem, t, p, y, guess, cfg.newton_tol, cfg.newton_max_iter) if semi else guess
        return np.asarray(problem.dynamics(t, p, y, a), dtype=float).reshape(len(dif)), a

    stops = None
    if cfg.output_grid is not None:
        grid = np.asarray(cfg.output_grid, dtype=float)
        if grid[0] > t0 + 1e-14 or grid[-1] < tf - 1e-14 or np.any(np.diff(grid) <= 0):
            raise ValueError("output grid must be increasing and span [t0, tf]")
        stops = grid[1:]
        stop_i = 0

    def full(yd_, ya_):
        x = np.empty(problem.state_dim)
        x[dif] = yd_
        x[alg] = ya_
        return x

    k1, ya = rhs(t0, yd, ya)
    ts, xs, ks = [t0], [full(yd, ya)], [k1]

    # starting step (Hairer, Norsett & Wanner II.4)
    sc = cfg.abs_tol + cfg.rel_tol * np.abs(yd)
    d0 = np.sqrt(np.mean((yd / sc) ** 2)) if len(yd) else 0.0
    d1 = np.sqrt(np.mean((k1 / sc) ** 2)) if len(yd) else 0.0
    span = tf - t0
    h = 1e-6 * span if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h = min(h, span, cfg.max_step)
    if len(yd):
        y1 = yd + h * k1
        f1, _ = rhs(t0 + h, y1, ya)
        d2 = np.sqrt(np.mean(((f1 - k1) / sc) ** 2)) / h
        m = max(d1, d2)
        h1 = max(1e-6 * h, h * 1e-3) if m <= 1e-15 else (0.01 / m) ** (1 / 5)
        h = min(100 * h, h1, span, cfg.max_step)

    t = t0
    err_prev = 1e-4
    n_steps = 0
    rejected = False
    newton_failures = 0
    while t < tf:
        if n_steps >= cfg.max_steps:
            raise IntegrationError(f"step limit {cfg.max_steps} reached", t)
        if h < 16 * np.finfo(float).eps * max(1.0, abs(t)):
            raise StepSizeError("step size underflow", t)
        target = tf if stops is None else stops[stop_i]
        h_free = h
        last = t + h >= target - 1e-14 * max(1.0, abs(target))
        if last:
            h = target - t
        try:
            K = [k1]
            guess = ya
            for s in range(1, 7):
                ys = yd + h * sum(a * k for a, k in zip(_A[s], K))
                ks_, guess = rhs(t + _C[s] * h, ys, guess)
                K.append(ks_)
        except NewtonError as exc:
            newton_failures += 1
            if newton_failures > 12:
                raise
            log.debug("algebraic solve failed at t=%g, shrinking step", exc.t)
            h *= 0.25
            rejected = True
            continue
        newton_failures = 0
        # stage 7 sits at t + h with the 5th-order weights (FSAL)
        ynew = ys
        if len(yd):
            errv = h * sum(e * k for e, k in zip(_E, K))
            sc = cfg.abs_tol + cfg.rel_tol * np.maximum(np.abs(yd), np.abs(ynew))
            err = float(np.sqrt(np.mean((errv / sc) ** 2)))
        else:
            err = 0.0
        n_steps += 1
        if err <= 1.0:
            t = target if last else t + h
            yd, ya, k1 = ynew, guess, K[6]
            if stops is None or last or cfg.keep_steps:
                ts.append(t)
                xs.append(full(yd, ya))
                ks.append(k1)
            if last and stops is not None:
                stop_i += 1
            fac = 0.9 * max(err, 1e-10) ** (-0.7 / 5) * err_prev ** (0.4 / 5)
            fac = min(10.0, max(0.2, fac))
            if rejected:
                fac = min(1.0, fac)
            err_prev = max(err, 1e-4)
            rejected = False
            # a step shortened to land on a stop does not shrink the next one
            h = min(max(h * fac, h_free) if last else h * fac, cfg.max_step)
        else:
            h *= max(0.2, 0.9 * err ** (-1 / 5))
            rejected = True

    times = np.array(ts)
    states = np.array(xs)
    slopes = np.array(ks).reshape(len(ts), len(dif))
    return Trajectory(times, states, slopes, problem, p, cfg.newton_tol)


def reference_solve(problem: ParametricDaeProblem, p, output_grid=None) -> Trajectory:
    """Tight-tolerance solve (rel_tol 1e-12) used as ground truth."""
    cfg = REFERENCE if output_grid is None else SolverConfig(
        rel_tol=REFERENCE.rel_tol, abs_tol=REFERENCE.abs_tol, output_grid=tuple(np.asarray(output_grid, dtype=float))
    )
    return integrate(problem, p, cfg)


@dataclass
class DegeneracyReport:
    flagged_times: list[float]
    min_singular_values: list[float]
    tolerance: float

    @property
    def degenerate(self) -> bool:
        return bool(self.flagged_times)


def detect_degeneracy(problem: ParametricDaeProblem, p, traj: Trajectory, tol: float = 1e-3) -> DegeneracyReport:
    """Flag output times where d g / d x_alg is (nearly) rank deficient."""
    if not problem.algebraic_idx:
        return DegeneracyReport([], [], tol)
    p = np.asarray(p, dtype=float)
    flagged, sigmas = [], []
    for t, x in zip(traj.times, traj.states):
        smin = float(np.linalg.svd(np.atleast_2d(problem.g_jacobian(t, p, x)), compute_uv=False).min())
        if smin < tol:
            flagged.append(float(t))
            sigmas.append(smin)
    return DegeneracyReport(flagged, sigmas, tol)
