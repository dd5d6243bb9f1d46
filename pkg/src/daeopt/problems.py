"""Parametric DAE optimization problems, objective functionals and benchmarks.

Evaluators act on the trailing axis and broadcast over leading axes, so the
same callable serves a single point (``x.shape == (n,)``) and a batch
(``x.shape == (B, n)``).  Time arguments are scalars or arrays matching the
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

EXPLICIT_ODE = "explicit-ode"
SEMI_EXPLICIT = "semi-explicit-index-1"


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre nodes and weights on [-1, 1]."""

    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def gauss_legendre(cls, n: int = 32) -> "QuadratureRule":
        if n < 1:
            raise ValueError("quadrature needs at least one node")
        x, w = np.polynomial.legendre.leggauss(n)
        return cls(x, w)

    def on(self, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
        half = 0.5 * (b - a)
        return a + half * (self.nodes + 1.0), half * self.weights


@dataclass(frozen=True)
class ParametricDaeProblem:
    name: str
    state_dim: int
    param_dim: int
    t_span: tuple[float, float]
    lower: np.ndarray
    upper: np.ndarray
    kind: str
    # f(t, p, x_diff, x_alg) -> d x_diff / dt
    dynamics: Callable
    # x0(p) -> full state at t0
    initial_map: Callable
    differential: tuple[int, ...]
    algebraic_idx: tuple[int, ...] = ()
    # g(t, p, x) -> residual, x is the full state
    algebraic: Callable | None = None
    # optional analytic d g / d x_alg, shape (..., n_alg, n_alg)
    algebraic_jacobian: Callable | None = None
    state_names: tuple[str, ...] = ()

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != (self.param_dim,) or hi.shape != (self.param_dim,):
            raise ValueError("parameter bounds must be m-vectors")
        if not np.all(lo < hi):
            raise ValueError("need p_lower < p_upper elementwise")
        if not self.t_span[0] < self.t_span[1]:
            raise ValueError("need t0 < tf")
        if self.kind not in (EXPLICIT_ODE, SEMI_EXPLICIT):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        d, a = set(self.differential), set(self.algebraic_idx)
        if (d & a or d | a != set(range(self.state_dim))
                or len(self.differential) + len(self.algebraic_idx) != self.state_dim):
            raise ValueError("differential/algebraic index sets must partition the state")
        if (self.kind == SEMI_EXPLICIT) != bool(self.algebraic_idx):
            raise ValueError("semi-explicit problems need algebraic states, explicit ones none")
        if self.algebraic_idx and self.algebraic is None:
            raise ValueError("algebraic states given without an algebraic residual")

    @property
    def n_alg(self) -> int:
        return len(self.algebraic_idx)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, p, slack: float = 0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lower - slack) and np.all(p <= self.upper + slack))

    def clip(self, p) -> np.ndarray:
        return np.clip(np.asarray(p, dtype=float), self.lower, self.upper)

    def split(self, x):
        x = np.asarray(x, dtype=float)
        return x[..., list(self.differential)], x[..., list(self.algebraic_idx)]

    def g(self, t, p, x) -> np.ndarray:
        if self.algebraic is None:
            return np.zeros(np.shape(x)[:-1] + (0,))
        return np.asarray(self.algebraic(t, p, x), dtype=float)

    def g_jacobian(self, t, p, x, h: float = 1e-7) -> np.ndarray:
        """d g / d x_alg at a single point (analytic if provided)."""
        if self.algebraic_jacobian is not None:
            return np.asarray(self.algebraic_jacobian(t, p, x), dtype=float)
        x = np.asarray(x, dtype=float)
        J = np.empty((self.n_alg, self.n_alg))
        for j, k in enumerate(self.algebraic_idx):
            step = h * max(1.0, abs(x[k]))
            xp, xm = x.copy(), x.copy()
            xp[k] += step
            xm[k] -= step
            J[:, j] = (self.g(t, p, xp) - self.g(t, p, xm)) / (2 * step)
        return J

    def state_derivative(self, t, p, x) -> np.ndarray:
        """Time derivative of the differential states for a full state."""
        xd, xa = self.split(x)
        return np.asarray(self.dynamics(t, p, xd, xa), dtype=float)

    def residual(self, t, p, x, xdot) -> np.ndarray:
        """Stacked equation residual [x_d' - f, g] for batched states.

        ``xdot`` holds time derivatives of the full state; only the
        differential components enter.
        """
        xdot = np.asarray(xdot, dtype=float)
        rd = xdot[..., list(self.differential)] - self.state_derivative(t, p, x)
        if not self.algebraic_idx:
            return rd
        return np.concatenate([rd, self.g(t, p, x)], axis=-1)


@dataclass(frozen=True)
class ObjectiveSpec:
    """J(p) = integral of running_cost over [t0, tf] + terminal_cost at tf.

    Either part may be None (treated as zero).  Signatures are
    ``running_cost(t, p, x)`` and ``terminal_cost(p, x_tf)``.
    """

    running_cost: Callable | None = None
    terminal_cost: Callable | None = None
    name: str = "objective"

    def nodes(self, t_span, quadrature: QuadratureRule):
        """Times at which the state is needed, plus per-node weights.

        The terminal time is always appended last (weight 0 when there is no
        terminal cost, it then carries no information).
        """
        t0, tf = t_span
        if self.running_cost is not None:
            ts, ws = quadrature.on(t0, tf)
        else:
            ts, ws = np.empty(0), np.empty(0)
        return np.append(ts, tf), ws

    def node_costs(self, t_nodes, weights, p, X) -> np.ndarray:
        """Per-node contributions; ``X`` has shape (B, K, n), ``p`` (B, m).

        Summing over the last axis yields J for each batch row.
        """
        p = np.asarray(p, dtype=float)
        X = np.asarray(X, dtype=float)
        B, K = X.shape[:2]
        out = np.zeros((B, K))
        nq = len(weights)
        if self.running_cost is not None and nq:
            tq = np.broadcast_to(t_nodes[:nq], (B, nq))
            pq = np.broadcast_to(p[:, None, :], (B, nq, p.shape[-1]))
            lam = np.asarray(self.running_cost(tq, pq, X[:, :nq, :]), dtype=float)
            out[:, :nq] = weights * lam.reshape(B, nq)
        if self.terminal_cost is not None:
            out[:, -1] = np.asarray(self.terminal_cost(p, X[:, -1, :]), dtype=float).reshape(B)
        return out


@dataclass(frozen=True)
class MeasurementFitObjective:
    """Normalized least squares against measured states.

    J(p) = (1/L) * sum over measurement times l and observed components i of
    ((x_i(t_l, p) - target_li) / target_li)^2.
    """

    times: np.ndarray
    targets: np.ndarray
    observed: tuple[int, ...]
    name: str = "measurement-fit"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        targets = np.asarray(self.targets, dtype=float).reshape(len(times), len(self.observed))
        if np.any(targets == 0.0):
            raise ValueError("measurement targets must be nonzero (they normalize the residual)")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "observed", tuple(int(i) for i in self.observed))

    def validate(self, t_span) -> None:
        if np.any(self.times < t_span[0]) or np.any(self.times > t_span[1]):
            raise ValueError("measurement times must lie inside the time span")

    def nodes(self, t_span, quadrature=None):
        return self.times.copy(), np.empty(0)

    def node_costs(self, t_nodes, weights, p, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        rel = (X[:, :, list(self.observed)] - self.targets) / self.targets
        return (rel * rel).sum(axis=-1) / len(self.times)


def eval_objective(obj, problem: ParametricDaeProblem, p, states_at, quadrature: QuadratureRule | None = None) -> float:
    """J(p) given ``states_at(times) -> (K, n)`` for one parameter vector."""
    quadrature = quadrature or QuadratureRule.gauss_legendre()
    ts, ws = obj.nodes(problem.t_span, quadrature)
    X = np.asarray(states_at(ts), dtype=float)
    p = np.asarray(p, dtype=float).reshape(1, -1)
    return float(obj.node_costs(ts, ws, p, X[None]).sum())


def eval_objective_on_trajectory(obj, traj, p, quadrature: QuadratureRule | None = None, problem=None) -> float:
    """Quadrature of the running cost along ``traj`` plus the terminal cost."""
    t0, tf = traj.t_span if problem is None else problem.t_span
    if not traj.covers(t0, tf):
        raise TruncatedSolveError(f"trajectory covers [{traj.times[0]}, {traj.times[-1]}], need [{t0}, {tf}]")
    quadrature = quadrature or QuadratureRule.gauss_legendre()
    ts, ws = obj.nodes((t0, tf), quadrature)
    X = traj.at(ts)
    p = np.asarray(p, dtype=float).reshape(1, -1)
    return float(obj.node_costs(ts, ws, p, X[None]).sum())


class TruncatedSolveError(RuntimeError):
    """A trajectory does not reach the end of the time span."""


# -- benchmark catalog ----------------------------------------------------------


def make_scalar_problem():
    """x' = x^4 - 3x^2 - x + 0.4, x(0) = p - p^3/3, min -3x(tf)^3 + (1+p)x(tf)."""

    def f(t, p, xd, xa):
        x = xd
        return x**4 - 3 * x**2 - x + 0.4

    def x0(p):
        p = np.asarray(p, dtype=float)
        return p - p**3 / 3.0

    problem = ParametricDaeProblem(
        name="scalar",
        state_dim=1,
        param_dim=1,
        t_span=(0.0, 0.9),
        lower=[-1.2],
        upper=[-0.2],
        kind=EXPLICIT_ODE,
        dynamics=f,
        initial_map=x0,
        differential=(0,),
        state_names=("x",),
    )

    def phi(p, x):
        p = np.asarray(p, dtype=float)
        x = np.asarray(x, dtype=float)
        return (-3.0 * x[..., 0] ** 3 + (1.0 + p[..., 0]) * x[..., 0])

    return problem, ObjectiveSpec(None, phi, name="scalar")


def cantilever_quartic(p):
    p = np.asarray(p, dtype=float)
    return (p - 3.1) * (p - 3.3) * (p - 3.6) * (p - 3.8)


def cantilever_exact_objective(p):
    """Closed form of the cantilever objective on the consistent branch."""
    p = np.asarray(p, dtype=float)
    return cantilever_quartic(p) * (4.0 + np.cos(5.0)) / (p + 1.0)


def cantilever_branch(x, p):
    """Consistent-branch solution (y1, y2) = (-(1 - sin x)/(p+1), (1 - sin x)/(p+1))."""
    y2 = (1.0 - np.sin(x)) / (np.asarray(p, dtype=float) + 1.0)
    return -y2, y2


def cantilever_original_residuals(x, p, y1, y2, d2_sum):
    """Residuals of the unreduced equations given (y1 + y2)'' as ``d2_sum``."""
    r_diff = d2_sum + (1.0 - np.sin(x)) / (p + 1.0) + y1
    r_alg = y1 * y1 - y2 * y2
    return r_diff, r_alg


def make_cantilever_problem():
    """Cantilever beam with the y1 = -y2 branch made explicit.

    On that branch (y1 + y2)'' vanishes, the second-order relation collapses to
    y1 = -(1 - sin x)/(p + 1), and differentiating once gives the differential
    state equation y1' = cos(x)/(p + 1).  y2 stays algebraic through
    y1^2 - y2^2 = 0; the solver keeps it on the branch by warm starting.
    """

    def f(t, p, xd, xa):
        return np.cos(np.asarray(t, dtype=float))[..., None] / (np.asarray(p, dtype=float) + 1.0)

    def g(t, p, x):
        x = np.asarray(x, dtype=float)
        return (x[..., 0] ** 2 - x[..., 1] ** 2)[..., None]

    def g_jac(t, p, x):
        x = np.asarray(x, dtype=float)
        return (-2.0 * x[..., 1])[..., None, None]

    def x0(p):
        p = np.asarray(p, dtype=float)
        c = 1.0 / (p[..., 0] + 1.0)
        return np.stack([-c, c], axis=-1)

    problem = ParametricDaeProblem(
        name="cantilever",
        state_dim=2,
        param_dim=1,
        t_span=(0.0, 5.0),
        lower=[3.0],
        upper=[4.0],
        kind=SEMI_EXPLICIT,
        dynamics=f,
        initial_map=x0,
        differential=(0,),
        algebraic_idx=(1,),
        algebraic=g,
        algebraic_jacobian=g_jac,
        state_names=("y1", "y2"),
    )

    def lam(t, p, x):
        p = np.asarray(p, dtype=float)
        return cantilever_quartic(p[..., 0]) * np.asarray(x, dtype=float)[..., 1]

    return problem, ObjectiveSpec(lam, None, name="cantilever")


def bidiagonal_matrix(n: int) -> np.ndarray:
    A = np.diag(np.full(n, -5.0 * n))
    if n > 1:
        A += np.diag(np.full(n - 1, 5.0 * n), -1)
    return A


def bidiagonal_terminal_state(p, n: int | None = None) -> np.ndarray:
    """x(1; p) = e^A 1 + A^{-1}(e^A - I) p for the bidiagonal family."""
    from scipy.linalg import expm

    p = np.asarray(p, dtype=float)
    n = p.shape[-1] if n is None else n
    A = bidiagonal_matrix(n)
    E = expm(A)
    M = np.linalg.solve(A, E - np.eye(n))
    return E @ np.ones(n) + p @ M.T


def make_bidiagonal_problem(n: int):
    """x' = A x + p, x(0) = 1, J = (1/n) |x(1) - exp(-5 p)|^2 on [0, 1]^n."""
    n = int(n)
    if n < 1:
        raise ValueError("bidiagonal dimension must be >= 1")
    A = bidiagonal_matrix(n)

    def f(t, p, xd, xa):
        return np.asarray(xd, dtype=float) @ A.T + np.asarray(p, dtype=float)

    def x0(p):
        p = np.asarray(p, dtype=float)
        return np.ones(p.shape[:-1] + (n,))

    problem = ParametricDaeProblem(
        name=f"bidiag:{n}",
        state_dim=n,
        param_dim=n,
        t_span=(0.0, 1.0),
        lower=np.zeros(n),
        upper=np.ones(n),
        kind=EXPLICIT_ODE,
        dynamics=f,
        initial_map=x0,
        differential=tuple(range(n)),
        state_names=tuple(f"x{i + 1}" for i in range(n)),
    )

    def phi(p, x):
        d = np.asarray(x, dtype=float) - np.exp(-5.0 * np.asarray(p, dtype=float))
        return (d * d).sum(axis=-1) / n

    return problem, ObjectiveSpec(None, phi, name=f"bidiag:{n}")


def get_problem(name: str):
    """Resolve "scalar", "cantilever" or "bidiag:<n>"."""
    key = name.strip().lower()
    if key == "scalar":
        return make_scalar_problem()
    if key == "cantilever":
        return make_cantilever_problem()
    if key.startswith("bidiag:"):
        try:
            n = int(key.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad bidiagonal size in {name!r}") from None
        return make_bidiagonal_problem(n)
    raise KeyError(f"unknown problem {name!r}; expected scalar, cantilever or bidiag:<n>")


PROBLEM_NAMES = ("scalar", "cantilever", "bidiag:<n>")
