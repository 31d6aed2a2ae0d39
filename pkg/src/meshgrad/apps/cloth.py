"""Mass-spring cloth stepped by implicit Euler.

Each timestep minimizes the incremental potential

    E(x) = 0.5 ||x - (x_n + h v_n)||^2_M + h^2 P(x)

over three registered terms: a per-vertex inertia term, a per-edge quadratic
spring, and a per-vertex gravity term (the h^2 scaling of the potential is
folded into the spring and gravity terms). Pinned vertices are excluded from
the unknowns entirely; their rows are never assembled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mesh import Element, Mesh, Op, generate_grid
from ..problem import Problem
from ..solvers import SolverConfig, SolverReport, newton_solve


@dataclass
class ClothConfig:
    grid_n: int = 10
    spacing: float = 0.1
    h: float = 0.01                 # timestep, seconds
    k: float = 1e4                  # spring stiffness
    mass_density: float = 1.0       # mass per unit area
    gravity: tuple = (0.0, -9.8, 0.0)
    steps: int = 100
    pinned: tuple | None = None     # vertex ids; None pins the grid's two top corners

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("timestep must be positive")
        if self.k <= 0:
            raise ValueError("stiffness must be positive")


def default_pins(n: int) -> tuple:
    """The two top corners of an n x n grid (max-y row)."""
    return (n * (n - 1), n * n - 1)


def lumped_masses(mesh: Mesh, density: float) -> np.ndarray:
    """One third of the incident rest area per vertex, times density.

    Face-free meshes (wire networks) fall back to unit masses."""
    masses = np.zeros(mesh.num_vertices)
    if mesh.num_faces:
        p = mesh.positions
        f = mesh.faces
        areas = 0.5 * np.linalg.norm(
            np.cross(p[f[:, 1]] - p[f[:, 0]], p[f[:, 2]] - p[f[:, 0]]), axis=1
        )
        np.add.at(masses, f.ravel(), np.repeat(areas / 3.0, 3))
        masses *= density
    else:
        masses[:] = density
    return masses


class ClothSim:
    """Owns the problem, rest lengths, masses, and the inertial target buffer.

    The same Problem instance is reused across steps: the terms close over
    the target buffer, which step() rewrites in place.
    """

    def __init__(self, cfg: ClothConfig, mesh: Mesh | None = None,
                 solver_cfg: SolverConfig | None = None, masses: np.ndarray | None = None,
                 workers: int = 1, accumulation: str = "deterministic"):
        self.cfg = cfg
        self.mesh = mesh if mesh is not None else generate_grid(cfg.grid_n, cfg.spacing)
        self.solver_cfg = solver_cfg or SolverConfig(grad_tol=1e-8)
        pinned = cfg.pinned if cfg.pinned is not None else (
            default_pins(cfg.grid_n) if mesh is None else ()
        )
        self.pinned = tuple(pinned)
        self.masses = masses if masses is not None else lumped_masses(self.mesh, cfg.mass_density)
        rest = self.mesh.positions[self.mesh.edges[:, 1]] - self.mesh.positions[self.mesh.edges[:, 0]]
        self.rest_len2 = np.einsum("ij,ij->i", rest, rest)
        if np.any(self.rest_len2 <= 0):
            raise ValueError("degenerate rest edge with zero length")

        self._target = self.mesh.positions.copy()  # x_n + h v_n, rewritten every step
        self.problem = Problem(self.mesh, 3, with_hessian=True, fixed_vertices=self.pinned,
                               workers=workers, accumulation=accumulation)
        self._register_terms()
        self.problem.precompute_sparsity()

    def _register_terms(self):
        cfg = self.cfg
        h2 = cfg.h * cfg.h
        masses = self.masses
        target = self._target
        rest2 = self.rest_len2
        gvec = np.asarray(cfg.gravity, dtype=np.float64)

        def inertia(vertex, nbrs, x):
            d = x[vertex] - target[vertex.index]
            return 0.5 * masses[vertex.index] * d.norm2()

        def spring(edge, verts, x):
            d = x[verts[0]] - x[verts[1]]
            l2 = rest2[edge.index]
            s = d.norm2() / l2 - 1.0
            return (0.5 * cfg.k * h2) * l2 * (s * s)

        def gravity(vertex, nbrs, x):
            return (-h2) * (masses[vertex.index] * x[vertex].dot(gvec))

        self.problem.add_term(Element.VERTEX, Op.V, inertia)
        self.problem.add_term(Element.EDGE, Op.EV, spring)
        self.problem.add_term(Element.VERTEX, Op.V, gravity)

    def step(self, x: np.ndarray, v: np.ndarray):
        """Advance one implicit-Euler step from (x, v).

        Returns (x_next, v_next, report). Raises if the inner Newton solve's
        line search fails before making any progress.
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
        self._target[:] = x + cfg.h * v
        if self.pinned:
            self._target[list(self.pinned)] = x[list(self.pinned)]
        self.problem.x = x.ravel().copy()
        report = newton_solve(self.problem, self.solver_cfg)
        from ..solvers import Termination

        if report.termination is Termination.LINE_SEARCH_FAILED and report.accepted_steps == 0 \
                and report.records[0].grad_inf_norm > self.solver_cfg.grad_tol:
            raise RuntimeError(
                f"cloth step aborted: line search failed at energy {report.final_energy:.6g}"
            )
        x_next = self.problem.x.reshape(-1, 3).copy()
        v_next = (x_next - x) / cfg.h
        return x_next, v_next, report

    def simulate(self, steps: int | None = None, x0: np.ndarray | None = None,
                 v0: np.ndarray | None = None, callback=None):
        """Run `steps` implicit-Euler steps; returns (x, v, reports)."""
        steps = steps if steps is not None else self.cfg.steps
        x = self.mesh.positions.copy() if x0 is None else np.array(x0, dtype=np.float64)
        v = np.zeros_like(x) if v0 is None else np.array(v0, dtype=np.float64)
        reports: list[SolverReport] = []
        for s in range(steps):
            x, v, rep = self.step(x, v)
            reports.append(rep)
            if callback is not None:
                callback(s, x, v, rep)
        return x, v, reports
