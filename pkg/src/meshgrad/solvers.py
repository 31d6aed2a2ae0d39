"""First- and second-order descent drivers.

All solvers share the same skeleton: evaluate the problem, build a descent
direction, backtrack until the Armijo condition holds (non-finite trial
energies are rejected exactly like insufficient decrease), step, repeat. The
report's energy column never increases, and it decreases strictly until the
Armijo decrement falls below the energy's float resolution (at that plateau
consecutive rows can tie bit-for-bit).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .problem import BlockSparseMatrix, Problem

__all__ = [
    "CGResult",
    "IterationRecord",
    "LbfgsHistory",
    "SolverConfig",
    "SolverReport",
    "Termination",
    "backtracking_line_search",
    "cg_linear_solve",
    "gradient_descent_solve",
    "lbfgs_solve",
    "newton_cg_solve",
    "newton_solve",
]


@dataclass
class SolverConfig:
    max_iters: int = 100
    grad_tol: float = 1e-6          # stop when the max-norm of the gradient drops below this
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 64
    cg_tol: float = 1e-4            # relative residual for inner CG solves
    cg_max_iters: int = 100
    cg_precondition: bool = True    # block-Jacobi preconditioning when solving assembled systems
    lbfgs_memory: int = 8
    lbfgs_clear_on_post_step: bool = False
    psd_floor: float = 1e-9
    filter_hvp: bool = True         # eigenvalue-clamp local Hessians inside matrix-free Newton

    def __post_init__(self):
        if not (0.0 < self.armijo_c < 1.0):
            raise ValueError("armijo_c must lie in (0, 1)")
        if not (0.0 < self.backtrack_factor < 1.0):
            raise ValueError("backtrack_factor must lie in (0, 1)")
        for name in ("max_iters", "max_backtracks", "cg_max_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


class Termination(Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max_iters"
    LINE_SEARCH_FAILED = "line_search_failed"


@dataclass
class IterationRecord:
    iteration: int
    energy: float
    grad_inf_norm: float
    step: float
    inner_iters: int
    time_ms: float


@dataclass
class SolverReport:
    records: list[IterationRecord] = field(default_factory=list)
    termination: Termination | None = None
    fallback_iterations: list[int] = field(default_factory=list)

    def log(self, *args) -> None:
        self.records.append(IterationRecord(*args))

    @property
    def energies(self) -> list[float]:
        return [r.energy for r in self.records]

    @property
    def final_energy(self) -> float:
        return self.records[-1].energy

    @property
    def accepted_steps(self) -> int:
        return sum(1 for r in self.records if r.iteration > 0)

    def to_csv(self, path=None) -> str:
        lines = ["iter,energy,grad_inf_norm,step,inner_iters,time_ms"]
        for r in self.records:
            lines.append(
                f"{r.iteration},{r.energy:.17g},{r.grad_inf_norm:.17g},"
                f"{r.step:.17g},{r.inner_iters},{r.time_ms:.3f}"
            )
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def backtracking_line_search(eval_energy, x, d, g, f0, cfg: SolverConfig):
    """Largest step in {1, b, b^2, ...} satisfying the Armijo condition.

    Returns (alpha, f_new), or (None, inf) after max_backtracks rejections.
    Non-finite trial energies (infeasible states) are rejected like
    insufficient decrease.
    """
    gd = float(g @ d)
    if gd >= 0.0:
        raise ValueError("line search needs a descent direction (g . d < 0)")
    if not math.isfinite(f0):
        raise ValueError("line search needs a finite starting energy")
    alpha = 1.0
    for _ in range(cfg.max_backtracks):
        f_new = float(eval_energy(x + alpha * d))
        if math.isfinite(f_new) and f_new <= f0 + cfg.armijo_c * alpha * gd:
            return alpha, f_new
        alpha *= cfg.backtrack_factor
    return None, math.inf


@dataclass
class CGResult:
    iterations: int
    converged: bool
    negative_curvature: bool


def cg_linear_solve(apply, b, tol, max_iters, precond=None, x0=None):
    """Conjugate gradients on an operator given as a matvec callable.

    Stops at relative residual `tol` or `max_iters`. On detecting non-positive
    curvature it truncates: the current iterate is returned, or `b` itself if
    no progress was made yet (the steepest-descent fallback when solving
    H d = -g).
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), CGResult(0, True, False)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply(x) if x0 is not None else b.copy()
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iters + 1):
        ap = apply(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            if it == 1 and not np.any(x):
                return b.copy(), CGResult(it, False, True)
            return x, CGResult(it, False, True)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if float(np.linalg.norm(r)) <= tol * bnorm:
            return x, CGResult(it, True, False)
        z = precond(r) if precond is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, CGResult(max_iters, False, False)


def _block_jacobi(h: BlockSparseMatrix):
    inv = h.diagonal_block_inverses()
    n = h.block_dim

    def apply(r):
        r2 = r.reshape(-1, n)
        return np.einsum("vij,vj->vi", inv, r2).ravel()

    return apply


def _require_finite_start(f):
    if not math.isfinite(f):
        raise ValueError("energy is not finite at the initial point")


def _newton_direction(problem: Problem, g, cfg: SolverConfig, linear: str):
    """Solve H d = -g on the assembled filtered Hessian. Returns (d, inner, fallback)."""
    h = problem.hess
    if linear == "dense":
        free = problem.free_dof_indices
        dense = h.to_dense()
        try:
            d_free = np.linalg.solve(dense[np.ix_(free, free)], -g[free])
            d = np.zeros_like(g)
            d[free] = d_free
            return d, 0, False
        except np.linalg.LinAlgError:
            return -g.copy(), 0, True
    precond = _block_jacobi(h) if cfg.cg_precondition else None
    d, info = cg_linear_solve(h.matvec, -g, cfg.cg_tol, cfg.cg_max_iters, precond=precond)
    if not np.all(np.isfinite(d)):
        return -g.copy(), info.iterations, True
    return d, info.iterations, False


def _descent_loop(problem: Problem, cfg: SolverConfig, direction_fn, evaluate, report: SolverReport):
    """Shared outer loop: direction_fn(g) -> (d, inner_iters, fallback)."""
    f, g = evaluate()
    _require_finite_start(f)
    ginf = float(np.max(np.abs(g))) if g.size else 0.0
    report.log(0, f, ginf, 0.0, 0, 0.0)
    for it in range(1, cfg.max_iters + 1):
        if ginf <= cfg.grad_tol:
            report.termination = Termination.CONVERGED
            return report
        t0 = time.perf_counter()
        d, inner, fallback = direction_fn(g)
        if fallback or float(g @ d) >= 0.0:
            d = -g.copy()
            report.fallback_iterations.append(it)
        alpha, f_new = backtracking_line_search(problem.eval_energy_only, problem.x, d, g, f, cfg)
        if alpha is None:
            report.termination = Termination.LINE_SEARCH_FAILED
            return report
        problem.x = problem.x + alpha * d
        _, g = evaluate()
        # carry the accepted line-search energy as the next Armijo reference;
        # it makes the recorded energy column strictly decreasing by construction
        f = f_new
        ginf = float(np.max(np.abs(g)))
        report.log(it, f, ginf, alpha, inner, (time.perf_counter() - t0) * 1e3)
    report.termination = Termination.MAX_ITERS
    return report


def newton_solve(problem: Problem, cfg: SolverConfig | None = None, linear: str = "cg") -> SolverReport:
    """Newton's method on the assembled sparse Hessian with per-element
    eigenvalue clamping (floor cfg.psd_floor), backtracking line search, and a
    steepest-descent fallback when the linear solve breaks down.

    `linear` is "cg" (block-Jacobi preconditioned by default) or "dense"
    (direct solve on the free submatrix; intended for small systems).
    """
    cfg = cfg or SolverConfig()
    if linear not in ("cg", "dense"):
        raise ValueError(f"unknown linear solver {linear!r}")
    if not problem.with_hessian:
        raise ValueError("newton_solve needs a Hessian-mode problem")
    report = SolverReport()

    def evaluate():
        f = problem.eval_terms(psd_floor=cfg.psd_floor)
        return f, problem.grad.copy()

    return _descent_loop(problem, cfg, lambda g: _newton_direction(problem, g, cfg, linear), evaluate, report)


def newton_cg_solve(problem: Problem, cfg: SolverConfig | None = None) -> SolverReport:
    """Matrix-free Newton: the inner CG consumes Hessian-vector products
    directly, never assembling the global matrix, and truncates on negative
    curvature. With cfg.filter_hvp the local Hessians are eigenvalue clamped
    inside each product, mirroring the filtered assembled solve.
    """
    cfg = cfg or SolverConfig()
    report = SolverReport()
    floor = cfg.psd_floor if cfg.filter_hvp else None

    def direction(g):
        apply = lambda w: problem.hvp(problem.x, w, psd_floor=floor)
        d, info = cg_linear_solve(apply, -g, cfg.cg_tol, cfg.cg_max_iters)
        if not np.all(np.isfinite(d)):
            return -g.copy(), info.iterations, True
        return d, info.iterations, False

    def evaluate():
        f = problem.eval_terms(psd_floor=cfg.psd_floor if problem.with_hessian else None)
        return f, problem.grad.copy()

    return _descent_loop(problem, cfg, direction, evaluate, report)


class LbfgsHistory:
    """Curvature pairs and the two-loop recursion.

    Pairs with s.y <= 1e-12 |s||y| are skipped so a flat or adversarial step
    never corrupts the inverse-Hessian model or divides by zero.
    """

    def __init__(self, memory: int):
        self.memory = memory
        self.s: list[np.ndarray] = []
        self.y: list[np.ndarray] = []
        self.rho: list[float] = []

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        if self.memory < 1:
            return False
        sy = float(s @ y)
        if sy <= 1e-12 * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
            return False
        self.s.append(s)
        self.y.append(y)
        self.rho.append(1.0 / sy)
        if len(self.s) > self.memory:
            self.s.pop(0)
            self.y.pop(0)
            self.rho.pop(0)
        return True

    def clear(self) -> None:
        self.s.clear()
        self.y.clear()
        self.rho.clear()

    def direction(self, g: np.ndarray) -> np.ndarray:
        """-H_approx g via the two-loop recursion; reduces to -g when empty."""
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(self.s), reversed(self.y), reversed(self.rho)):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        if self.s:
            gamma = float(self.s[-1] @ self.y[-1]) / float(self.y[-1] @ self.y[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(self.s, self.y, self.rho), reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q


def lbfgs_solve(problem: Problem, cfg: SolverConfig | None = None, post_step=None) -> SolverReport:
    """Limited-memory quasi-Newton with backtracking line search.

    `post_step(problem)`, if given, runs after every accepted step; it may
    rewrite problem.x and any constants the terms close over (used for
    manifold retraction and tangent-basis updates), after which the gradient
    is re-evaluated in the new coordinates. By default the curvature history
    carries across such re-parameterizations; cfg.lbfgs_clear_on_post_step
    drops it instead.
    """
    cfg = cfg or SolverConfig()
    report = SolverReport()
    history = LbfgsHistory(cfg.lbfgs_memory)

    f = problem.eval_terms()
    _require_finite_start(f)
    g = problem.grad.copy()
    ginf = float(np.max(np.abs(g))) if g.size else 0.0
    report.log(0, f, ginf, 0.0, 0, 0.0)
    for it in range(1, cfg.max_iters + 1):
        if ginf <= cfg.grad_tol:
            report.termination = Termination.CONVERGED
            return report
        t0 = time.perf_counter()
        d = history.direction(g)
        if float(g @ d) >= 0.0:
            d = -g.copy()
            report.fallback_iterations.append(it)
        alpha, f_new = backtracking_line_search(problem.eval_energy_only, problem.x, d, g, f, cfg)
        if alpha is None:
            report.termination = Termination.LINE_SEARCH_FAILED
            return report
        step = alpha * d
        problem.x = problem.x + step
        problem.eval_terms()
        g_next = problem.grad.copy()
        history.push(step, g_next - g)
        if post_step is not None:
            post_step(problem)
            if cfg.lbfgs_clear_on_post_step:
                history.clear()
            problem.eval_terms()
            g = problem.grad.copy()
        else:
            g = g_next
        # the accepted line-search energy is carried as the next Armijo
        # reference (re-evaluation after a re-parameterization only reproduces
        # it to rounding), keeping the energy column strictly decreasing
        f = f_new
        ginf = float(np.max(np.abs(g)))
        report.log(it, f_new, ginf, alpha, 0, (time.perf_counter() - t0) * 1e3)
    report.termination = Termination.MAX_ITERS
    return report


def gradient_descent_solve(problem: Problem, step: float, iters: int) -> SolverReport:
    """Plain explicit updates x <- x - step * grad, no line search."""
    if step < 0:
        raise ValueError("step must be non-negative")
    report = SolverReport()
    f = problem.eval_terms()
    g = problem.grad.copy()
    ginf = float(np.max(np.abs(g))) if g.size else 0.0
    report.log(0, f, ginf, 0.0, 0, 0.0)
    for it in range(1, iters + 1):
        t0 = time.perf_counter()
        problem.x = problem.x - step * g
        f = problem.eval_terms()
        g = problem.grad.copy()
        report.log(it, f, float(np.max(np.abs(g))), step, 0, (time.perf_counter() - t0) * 1e3)
    report.termination = Termination.MAX_ITERS
    return report
