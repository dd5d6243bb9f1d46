"""A-posteriori error bound for a surrogate trajectory.

Around a reference point the dynamics are linearized as x' = (A0 + R(t)) x.
With A0 = P diag(lambda) P^-1, a residual bounded by delta_max gives

    ||dx||_inf <= ||P||_inf * delta_max / a * (exp(a h) - 1),  a = a1_bar + n r_max

over a horizon h.  P is scaled so that ||P^-1||_inf = 1; any column scaling
of an eigenvector matrix is again one, and this is the scaling for which the
constant-coefficient case (r_max = 0) holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problems import ParametricDaeProblem


class PreconditionViolation(ValueError):
    """A0 is not diagonalizable with distinct eigenvalues."""


@dataclass
class LinearizationData:
    A0: np.ndarray
    P: np.ndarray
    eigenvalues: np.ndarray
    P_norm: float
    a1_bar: float
    r_max: float
    t_ref: float = 0.0

    @property
    def n(self) -> int:
        return self.A0.shape[0]

    def __post_init__(self):
        if self.r_max < 0:
            raise ValueError("r_max must be non-negative")


@dataclass
class BoundInputs:
    linearization: LinearizationData
    delta_max: float
    horizon: float

    def __post_init__(self):
        if not self.delta_max >= 0:
            raise ValueError(f"delta_max must be non-negative, got {self.delta_max}")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")


def reduced_jacobian(problem: ParametricDaeProblem, t, p, x, h: float = 1e-7) -> np.ndarray:
    """d(x_d')/d(x_d) with algebraic states eliminated along g = 0.

    For an explicit ODE this is just the Jacobian of the right-hand side.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    d, a = list(problem.differential), list(problem.algebraic_idx)

    def col(fun, k):
        step = h * max(1.0, abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += step
        xm[k] -= step
        return (fun(xp) - fun(xm)) / (2 * step)

    f = lambda z: problem.state_derivative(t, p, z)
    f_d = np.column_stack([col(f, k) for k in d])
    if not a:
        return f_d
    g = lambda z: problem.g(t, p, z)
    f_a = np.column_stack([col(f, k) for k in a])
    if not np.any(f_a):
        return f_d
    g_d = np.column_stack([col(g, k) for k in d])
    g_a = problem.g_jacobian(t, p, x)
    if np.linalg.cond(g_a) > 1e12:
        raise PreconditionViolation(f"algebraic Jacobian singular at t={t:.6g}; branch is degenerate there")
    return f_d - f_a @ np.linalg.solve(g_a, g_d)


def eigen_data(A0, rep_tol: float = 1e-8, cond_max: float = 1e12):
    """Eigenvalues, eigenvector matrix with ||P^-1||_inf = 1, and ||P||_inf."""
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    lam, V = np.linalg.eig(A0)
    n = len(lam)
    for i in range(n):
        for j in range(i + 1, n):
            if abs(lam[i] - lam[j]) <= rep_tol * max(1.0, abs(lam[i])):
                raise PreconditionViolation(f"repeated eigenvalue {lam[i]:.6g}; A0 is not certified diagonalizable")
    if np.linalg.cond(V) > cond_max:
        raise PreconditionViolation("eigenvector matrix is numerically singular")
    Vinv = np.linalg.inv(V)
    s = np.abs(Vinv).sum(axis=1)
    P = V * s
    return lam, P, float(np.abs(P).sum(axis=1).max())


def linearize(problem: ParametricDaeProblem, p, traj, n_samples: int = 50, t_ref: float | None = None) -> LinearizationData:
    """Linearize at the trajectory state at t_ref (default: the time midpoint)."""
    p = np.asarray(p, dtype=float)
    t0, tf = traj.t_span
    t_ref = 0.5 * (t0 + tf) if t_ref is None else float(t_ref)
    A0 = reduced_jacobian(problem, t_ref, p, traj.at(t_ref))
    lam, P, P_norm = eigen_data(A0)
    r_max = 0.0
    for t in np.linspace(t0, tf, max(int(n_samples), 2)):
        At = reduced_jacobian(problem, t, p, traj.at(t))
        r_max = max(r_max, float(np.max(np.abs(At - A0))))
    return LinearizationData(A0, P, lam, P_norm, float(np.max(lam.real)), r_max, t_ref)


def linear_data(A0) -> LinearizationData:
    """Linearization of a constant-coefficient system (r_max = 0)."""
    A0 = np.atleast_2d(np.asarray(A0, dtype=float))
    lam, P, P_norm = eigen_data(A0)
    return LinearizationData(A0, P, lam, P_norm, float(np.max(lam.real)), 0.0)


def global_bound(inputs: BoundInputs, limit_tol: float = 1e-12) -> float:
    lin = inputs.linearization
    a = lin.a1_bar + lin.n * lin.r_max
    h = inputs.horizon
    if abs(a) < limit_tol:
        return lin.P_norm * inputs.delta_max * h
    return lin.P_norm * inputs.delta_max * np.expm1(a * h) / a


def horizon_bound(lin: LinearizationData, delta_max: float, t: float) -> float:
    """Same estimate over the whole elapsed time t instead of one sample gap."""
    return global_bound(BoundInputs(lin, delta_max, t))
