"""Smoothing by gradient descent on the sum of squared edge lengths.

Two interchangeable gradient kernels: "ad" registers a per-edge term and lets
the assembly scatter the differentiated contributions; "manual" gathers the
closed form 2 * sum_j (x_i - x_j) per vertex. The two must track each other
to rounding, which pins the scatter assembly against an independent gather
baseline. The bench helper times the ad gradient kernel across grid sizes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..mesh import Element, Mesh, Op, generate_grid
from ..problem import Problem
from ..solvers import SolverReport, gradient_descent_solve


def edge_length_energy(mesh: Mesh, with_hessian: bool = False, workers: int = 1,
                       accumulation: str = "deterministic") -> Problem:
    """Problem with the single per-edge term |x_i - x_j|^2 (3 variables per vertex)."""
    problem = Problem(mesh, 3, with_hessian=with_hessian, workers=workers, accumulation=accumulation)

    def edge_term(edge, verts, x):
        return (x[verts[0]] - x[verts[1]]).norm2()

    problem.add_term(Element.EDGE, Op.EV, edge_term)
    return problem


def manual_energy(x: np.ndarray, mesh: Mesh) -> float:
    d = x[mesh.edges[:, 0]] - x[mesh.edges[:, 1]]
    return float(np.sum(d * d))


def manual_gradient(x: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Closed-form gather: grad_i = 2 * sum_{j in N(i)} (x_i - x_j)."""
    nbr_sum = np.zeros_like(x)
    e = mesh.edges
    np.add.at(nbr_sum, e[:, 0], x[e[:, 1]])
    np.add.at(nbr_sum, e[:, 1], x[e[:, 0]])
    deg = mesh.vertex_to_vertex.degrees().astype(np.float64)
    return 2.0 * (deg[:, None] * x - nbr_sum)


@dataclass
class SmoothReport:
    energies: list = field(default_factory=list)
    positions: np.ndarray | None = None


def smooth(mesh: Mesh, lam: float, iters: int, mode: str = "ad",
           x0: np.ndarray | None = None, workers: int = 1,
           accumulation: str = "deterministic"):
    """Run `iters` explicit updates x <- x - lam * grad; returns (positions, report).

    mode "ad" drives the registered edge term through gradient_descent_solve;
    mode "manual" runs the closed-form gather loop and reports the same shape
    of trace.
    """
    if lam < 0:
        raise ValueError("step must be non-negative")
    x0 = mesh.positions.copy() if x0 is None else np.array(x0, dtype=np.float64)
    if mode == "ad":
        problem = edge_length_energy(mesh, workers=workers, accumulation=accumulation)
        problem.x = x0.ravel().copy()
        report = gradient_descent_solve(problem, lam, iters)
        return problem.x.reshape(-1, 3).copy(), report
    if mode != "manual":
        raise ValueError(f"unknown mode {mode!r}")
    x = x0.copy()
    report = SolverReport()
    g = manual_gradient(x, mesh)
    report.log(0, manual_energy(x, mesh), float(np.max(np.abs(g))), 0.0, 0, 0.0)
    for it in range(1, iters + 1):
        t0 = time.perf_counter()
        x = x - lam * g
        g = manual_gradient(x, mesh)
        report.log(it, manual_energy(x, mesh), float(np.max(np.abs(g))), lam, 0,
                   (time.perf_counter() - t0) * 1e3)
    from ..solvers import Termination

    report.termination = Termination.MAX_ITERS
    return x, report


def bench_gradient(sizes=(64, 128, 256, 512), repeats: int = 3, workers: int = 1,
                   accumulation: str = "deterministic"):
    """Median per-iteration time of the ad gradient kernel on n x n grids.

    Returns a list of dicts (side, vertices, edges, ms_per_iter, ratio) where
    ratio is against the previous size in the list. Mesh construction and
    layout are excluded from the timed region.
    """
    rows = []
    prev_ms = None
    for n in sizes:
        mesh = generate_grid(n, 1.0 / (n - 1))
        problem = edge_length_energy(mesh, workers=workers, accumulation=accumulation)
        problem.x = mesh.positions.ravel().copy()
        problem.eval_terms()  # warm-up: builds layouts outside the timed region
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            problem.eval_terms()
            times.append((time.perf_counter() - t0) * 1e3)
        ms = float(np.median(times))
        rows.append({
            "side": n,
            "vertices": mesh.num_vertices,
            "edges": mesh.num_edges,
            "ms_per_iter": ms,
            "ratio": (ms / prev_ms) if prev_ms else float("nan"),
        })
        prev_ms = ms
    return rows
