"""Online optimization over a frozen constraint surrogate, plus local refinement.

A single tanh layer maps random seeds z to parameters inside the box.  Its
weights are trained with Adam on the mean surrogate objective over a fixed
batch of seeds; the states feeding the objective come from the frozen
network with uniform noise of half-width gamma added per quadrature node.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .integrate import REFERENCE, SolverConfig, integrate
from .neural import AdamState, adam_step
from .problems import ParametricDaeProblem, QuadratureRule, eval_objective_on_trajectory
from .surrogate import ConstraintSurrogate, predict, predict_jacobian

log = logging.getLogger(__name__)


@dataclass
class OptimizeConfig:
    n_seeds: int = 100
    seed_dim: int | None = None
    max_iter: int = 200
    lr: float = 0.1
    # light momentum: the default 0.9 overshoots while the seed spread collapses
    beta1: float = 0.5
    quad_nodes: int = 32
    # "per-iteration" redraws xi every update, "fixed" draws it once
    noise: str = "per-iteration"
    # stop when the noise-free mean loss moved less than this for `patience`
    # consecutive updates (the noisy training loss jitters by about gamma)
    loss_tol: float = 1e-6
    patience: int = 3
    top_k: int = 5
    dedup_frac: float = 0.02

    def __post_init__(self):
        if self.n_seeds < 1 or self.max_iter < 1:
            raise ValueError("need at least one seed and one iteration")
        if self.noise not in ("per-iteration", "fixed"):
            raise ValueError(f"unknown noise schedule {self.noise!r}")


@dataclass
class ObjectiveGenerator:
    W: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def init(cls, lower, upper, seed_dim: int, seed) -> "ObjectiveGenerator":
        rng = np.random.default_rng(seed)
        lower, upper = np.asarray(lower, float), np.asarray(upper, float)
        m = len(lower)
        limit = np.sqrt(6.0 / (m + seed_dim))
        return cls(rng.uniform(-limit, limit, (m, seed_dim)), np.zeros(m), lower, upper)

    def __call__(self, Z):
        return generate_params(self, Z)


def generate_params(gen: ObjectiveGenerator, Z) -> np.ndarray:
    """p = ((tanh(W z + b) * (pU - pL)) + (pU + pL)) / 2 for each seed row."""
    Z = np.asarray(Z, dtype=float)
    a = Z @ gen.W.T + gen.b
    p = 0.5 * (np.tanh(a) * (gen.upper - gen.lower) + (gen.upper + gen.lower))
    # saturated tanh can overshoot a bound by one ulp after rounding
    return np.clip(p, gen.lower, gen.upper)


def perturbed_state(surr: ConstraintSurrogate, t, p, xi) -> np.ndarray:
    """Network state plus gamma * xi (xi in [-1, 1]^n)."""
    x = surr.predict(np.atleast_1d(t), np.atleast_2d(p))
    return (x + surr.gamma * np.asarray(xi, dtype=float)).reshape(np.shape(x))


class ObjectiveEvaluationError(FloatingPointError):
    pass


def surrogate_objective_batch(P, surr: ConstraintSurrogate, obj, problem: ParametricDaeProblem,
                              quadrature: QuadratureRule, xi=None, grad: bool = False, h: float = 1e-6):
    """J-hat for each row of P, optionally with dJ-hat/dp.

    ``xi`` has shape (B, K, n) for K objective nodes; None means no noise.
    Network sensitivities are exact; cost sensitivities are central
    differences on the user's cost evaluators.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    B, m = P.shape
    ts, ws = obj.nodes(problem.t_span, quadrature)
    K, n = len(ts), problem.state_dim
    X_in = np.column_stack([np.tile(ts, B), np.repeat(P, K, axis=0)])
    Y = predict(surr.net, X_in).reshape(B, K, n)
    if xi is not None:
        Y = Y + surr.gamma * np.asarray(xi, dtype=float).reshape(B, K, n)
    C = obj.node_costs(ts, ws, P, Y)
    if not np.all(np.isfinite(C)):
        b, k = np.argwhere(~np.isfinite(C))[0]
        raise ObjectiveEvaluationError(f"non-finite cost at node t={ts[k]:.6g}, p={P[b].tolist()}")
    J = C.sum(axis=1)
    if not grad:
        return J
    dY_dp = predict_jacobian(surr.net, X_in)[:, :, 1:].reshape(B, K, n, m)
    dJ = np.zeros((B, m))
    for j in range(n):
        step = h * np.maximum(1.0, np.abs(Y[:, :, j]))
        Yp, Ym = Y.copy(), Y.copy()
        Yp[:, :, j] += step
        Ym[:, :, j] -= step
        dC = (obj.node_costs(ts, ws, P, Yp) - obj.node_costs(ts, ws, P, Ym)) / (2 * step)
        dJ += np.einsum("bk,bkm->bm", dC, dY_dp[:, :, j, :])
    for i in range(m):
        step = h * max(1.0, float(np.max(np.abs(P[:, i]))))
        Pp, Pm = P.copy(), P.copy()
        Pp[:, i] += step
        Pm[:, i] -= step
        dJ[:, i] += (obj.node_costs(ts, ws, Pp, Y).sum(1) - obj.node_costs(ts, ws, Pm, Y).sum(1)) / (2 * step)
    return J, dJ


def surrogate_objective(p, surr, obj, problem, cfg: OptimizeConfig | None = None, xi=None) -> float:
    cfg = cfg or OptimizeConfig()
    quad = QuadratureRule.gauss_legendre(cfg.quad_nodes)
    return float(surrogate_objective_batch(np.atleast_2d(p), surr, obj, problem, quad, xi)[0])


def surrogate_objective_interval(p, surr, obj, problem, cfg: OptimizeConfig | None = None, levels: int = 5):
    """Range of J-hat(p) as the noise xi sweeps [-1, 1]^n.

    The noise is held constant in time and sampled on a tensor grid with
    ``levels`` values per state (corners included); for n > 3 only the
    corners and the center are used.
    """
    cfg = cfg or OptimizeConfig()
    quad = QuadratureRule.gauss_legendre(cfg.quad_nodes)
    n = problem.state_dim
    ts, _ = obj.nodes(problem.t_span, quad)
    if n <= 3:
        axis = np.linspace(-1.0, 1.0, levels)
        pts = np.stack([g.ravel() for g in np.meshgrid(*([axis] * n), indexing="ij")], axis=-1)
    else:
        pts = np.vstack([np.array(np.meshgrid(*([[-1.0, 1.0]] * n), indexing="ij")).reshape(n, -1).T, np.zeros(n)])
    P = np.repeat(np.atleast_2d(p), len(pts), axis=0)
    xi = np.repeat(pts[:, None, :], len(ts), axis=1)
    J = surrogate_objective_batch(P, surr, obj, problem, quad, xi)
    return float(J.min()), float(J.max())


def direct_objective(problem: ParametricDaeProblem, obj, quadrature: QuadratureRule | None = None,
                     solver: SolverConfig | None = None):
    """J(p) evaluated through a full solve (reference tolerances by default)."""
    quadrature = quadrature or QuadratureRule.gauss_legendre()
    solver = solver or REFERENCE

    def evaluate(p):
        p = np.asarray(p, dtype=float).reshape(problem.param_dim)
        traj = integrate(problem, p, solver)
        return eval_objective_on_trajectory(obj, traj, p, quadrature, problem)

    return evaluate


@dataclass
class CandidateResult:
    p_pred: np.ndarray
    J_pred: float
    p_refined: np.ndarray
    J_refined: float
    method: str = "none"
    iterations: int = 0
    evaluations: int = 0
    seconds_predict: float = 0.0
    seconds_refine: float = 0.0
    flag: str = ""


@dataclass
class GeneratorRun:
    generator: ObjectiveGenerator
    candidates: list[CandidateResult]
    iterations: int
    converged: bool
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def dedup_candidates(P, J, radius: float, k: int):
    """Indices of the best ``k`` rows of P that are at least ``radius`` apart."""
    keep: list[int] = []
    for i in np.argsort(J, kind="stable"):
        if all(np.linalg.norm(P[i] - P[j]) >= radius for j in keep):
            keep.append(int(i))
        if len(keep) == k:
            break
    return keep


def train_objective_generator(surr: ConstraintSurrogate, problem: ParametricDaeProblem, obj,
                              cfg: OptimizeConfig | None = None, seed=None, evaluate_direct: bool = True) -> GeneratorRun:
    """Fit the parameter generator to the surrogate objective and rank its outputs."""
    cfg = cfg or OptimizeConfig()
    rng = np.random.default_rng(seed)
    tic = time.perf_counter()
    m = problem.param_dim
    d = cfg.seed_dim or m
    quad = QuadratureRule.gauss_legendre(cfg.quad_nodes)
    K = len(obj.nodes(problem.t_span, quad)[0])
    n = problem.state_dim
    gen = ObjectiveGenerator.init(problem.lower, problem.upper, d, rng)
    Z = rng.uniform(-1.0, 1.0, (cfg.n_seeds, d))
    xi = rng.uniform(-1.0, 1.0, (cfg.n_seeds, K, n))
    half = 0.5 * (gen.upper - gen.lower)
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1)
    losses: list[float] = []
    converged = False
    quiet = 0
    it = 0
    for it in range(1, cfg.max_iter + 1):
        if cfg.noise == "per-iteration" and it > 1:
            xi = rng.uniform(-1.0, 1.0, (cfg.n_seeds, K, n))
        a = Z @ gen.W.T + gen.b
        P = generate_params(gen, Z)
        _, dJ = surrogate_objective_batch(P, surr, obj, problem, quad, xi, grad=True)
        ga = dJ / cfg.n_seeds * half * (1.0 - np.tanh(a) ** 2)
        gen.W, gen.b = adam_step(adam, [gen.W, gen.b], [ga.T @ Z, ga.sum(axis=0)])
        loss = float(surrogate_objective_batch(generate_params(gen, Z), surr, obj, problem, quad).mean())
        if losses and abs(loss - losses[-1]) < cfg.loss_tol * max(1.0, abs(loss)):
            quiet += 1
        else:
            quiet = 0
        losses.append(loss)
        if quiet >= cfg.patience:
            converged = True
            break
    P = generate_params(gen, Z)
    J = surrogate_objective_batch(P, surr, obj, problem, quad)
    radius = cfg.dedup_frac * float(np.linalg.norm(problem.width))
    keep = dedup_candidates(P, J, radius, cfg.top_k)
    seconds = time.perf_counter() - tic
    direct = direct_objective(problem, obj, quad) if evaluate_direct else None
    cands = []
    for i in keep:
        Jd = direct(P[i]) if direct is not None else float("nan")
        cands.append(CandidateResult(P[i].copy(), float(J[i]), P[i].copy(), Jd, seconds_predict=seconds))
    return GeneratorRun(gen, cands, it, converged, losses, seconds)


# -- local refinement -------------------------------------------------------------


@dataclass
class RefineResult:
    p: np.ndarray
    J: float
    iterations: int
    evaluations: int
    ok: bool = True
    message: str = ""
    path: list[float] = field(default_factory=list)


def _fd_stencil_center(p, lower, upper, h):
    if lower is None:
        return p
    return np.clip(p, np.asarray(lower) + 2 * h, np.asarray(upper) - 2 * h)


def fd_gradient_hessian(f, p, h, f0=None):
    """Fourth-order central differences for the gradient and Hessian diagonal.

    Off-diagonal Hessian entries use the four-point (+-h, +-h) stencil.
    Returns (f(p), g, H, number of evaluations).
    """
    p = np.asarray(p, dtype=float)
    m = len(p)
    f0 = f(p) if f0 is None else f0
    nev = 1
    g = np.empty(m)
    H = np.empty((m, m))
    E = np.eye(m) * h
    for i in range(m):
        fp1, fm1 = f(p + E[i]), f(p - E[i])
        fp2, fm2 = f(p + 2 * E[i]), f(p - 2 * E[i])
        nev += 4
        g[i] = (-fp2 + 8 * fp1 - 8 * fm1 + fm2) / (12 * h)
        H[i, i] = (-fp2 + 16 * fp1 - 30 * f0 + 16 * fm1 - fm2) / (12 * h * h)
    for i in range(m):
        for j in range(i + 1, m):
            fpp = f(p + E[i] + E[j])
            fpm = f(p + E[i] - E[j])
            fmp = f(p - E[i] + E[j])
            fmm = f(p - E[i] - E[j])
            nev += 4
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
    return f0, g, H, nev


def newton_refine(p0, evaluator, steps: int = 10, fd_step: float = 1e-3, lower=None, upper=None) -> RefineResult:
    """Newton iteration on finite-difference derivatives of ``evaluator``.

    In one dimension this is p - J'/J''.  In several, the Hessian system is
    solved, with a tiny diagonal shift if factorization fails and a
    backtracked gradient step if the Hessian is not positive definite.
    Iterates are clamped to the box; the best visited point is returned.
    """
    p = np.asarray(p0, dtype=float).copy()
    lo = None if lower is None else np.asarray(lower, float)
    hi = None if upper is None else np.asarray(upper, float)
    clamp = (lambda q: q) if lo is None else (lambda q: np.clip(q, lo, hi))
    p = clamp(p)
    nev = 0
    try:
        Jp = evaluator(p)
        nev += 1
    except Exception as exc:  # noqa: BLE001 - evaluator failure is reported, not raised
        return RefineResult(p, math.nan, 0, 1, False, f"evaluator failed at start: {exc}")
    best_p, best_J = p.copy(), Jp
    path = [Jp]
    it = 0
    try:
        for it in range(1, steps + 1):
            c = _fd_stencil_center(p, lo, hi, fd_step)
            f0 = Jp if np.array_equal(c, p) else None
            _, g, H, k = fd_gradient_hessian(evaluator, c, fd_step, f0)
            nev += k
            if len(p) == 1:
                step = -g / H[0, 0] if H[0, 0] > 0 else None
            else:
                step = None
                try:
                    np.linalg.cholesky(H)
                    step = -np.linalg.solve(H, g)
                except np.linalg.LinAlgError:
                    mu = 1e-8 * np.max(np.abs(H).sum(axis=1))
                    try:
                        np.linalg.cholesky(H + mu * np.eye(len(p)))
                        step = -np.linalg.solve(H + mu * np.eye(len(p)), g)
                    except np.linalg.LinAlgError:
                        step = None
            if step is not None:
                q = clamp(c + step)
                Jq = evaluator(q)
                nev += 1
            else:
                # damped gradient step, halved until it improves
                width = (hi - lo) if lo is not None else np.ones_like(p)
                gn = np.linalg.norm(g)
                if gn == 0:
                    break
                eta = 0.1 * float(np.min(width)) / gn
                for _ in range(20):
                    q = clamp(p - eta * g)
                    Jq = evaluator(q)
                    nev += 1
                    if Jq < Jp:
                        break
                    eta *= 0.5
            if np.array_equal(q, p):
                break
            p, Jp = q, Jq
            path.append(Jp)
            if Jp < best_J or (Jp == best_J and not np.array_equal(p, best_p)):
                best_p, best_J = p.copy(), Jp
    except Exception as exc:  # noqa: BLE001
        return RefineResult(best_p, best_J, it, nev, False, f"evaluator failed: {exc}", path)
    return RefineResult(best_p, best_J, it, nev, True, "", path)


def random_walk_refine(p0, evaluator, lower, upper, iters: int = 300, step_frac: float = 0.10, seed=None) -> RefineResult:
    """Accept uniform box-clamped proposals that strictly improve J."""
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    p = np.clip(np.asarray(p0, dtype=float), lo, hi)
    J = evaluator(p)
    path = [J]
    span = step_frac * (hi - lo)
    for _ in range(iters):
        q = np.clip(p + rng.uniform(-span, span), lo, hi)
        Jq = evaluator(q)
        if Jq < J:
            p, J = q, Jq
        path.append(J)
    return RefineResult(p, J, iters, iters + 1, True, "", path)


def refine_candidates(run: GeneratorRun, problem: ParametricDaeProblem, obj, method: str = "newton", *,
                      steps: int = 10, fd_step: float = 1e-3, walk_iters: int = 300, walk_step: float = 0.10,
                      seed=None, evaluator=None, quadrature: QuadratureRule | None = None) -> list[CandidateResult]:
    """Refine every retained candidate and return them ranked by refined J."""
    evaluator = evaluator or direct_objective(problem, obj, quadrature)
    rng = np.random.default_rng(seed)
    out = []
    for c in run.candidates:
        tic = time.perf_counter()
        if method == "none":
            res = RefineResult(c.p_pred.copy(), c.J_refined, 0, 0)
        elif method == "newton":
            res = newton_refine(c.p_pred, evaluator, steps, fd_step, problem.lower, problem.upper)
        elif method == "walk":
            res = random_walk_refine(c.p_pred, evaluator, problem.lower, problem.upper, walk_iters, walk_step, rng)
        else:
            raise ValueError(f"unknown refinement method {method!r}")
        c.p_refined = res.p
        c.J_refined = float(res.J)
        c.method = method
        c.iterations = res.iterations
        c.evaluations = res.evaluations
        c.seconds_refine = time.perf_counter() - tic
        c.flag = res.message
        out.append(c)
    out.sort(key=lambda c: (not np.isfinite(c.J_refined), c.J_refined))
    return out
