"""Spherical embedding of a genus-0 mesh by tangent-space optimization.

Every vertex lives on the unit sphere. The unknowns are 2-D tangent
displacements at per-vertex base points; a normalizing retraction maps them
back onto the sphere, and the whole energy (a log-determinant barrier against
flipped faces plus a uniform edge-length stretch penalty) is differentiated
through the retraction. After each accepted quasi-Newton step the base points
absorb the displacement, the displacement resets to zero, and the tangent
bases are rebuilt, so vertex positions stay exactly unit-norm throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..active import ActiveVec, SmallMatrix, log
from ..mesh import Element, Mesh, Op
from ..problem import Problem
from ..solvers import SolverConfig, SolverReport, lbfgs_solve


@dataclass
class SphereConfig:
    iters: int = 200
    lbfgs_memory: int = 8
    grad_tol: float = 1e-10


def check_genus_zero(mesh: Mesh) -> None:
    chi = mesh.num_vertices - mesh.num_edges + mesh.num_faces
    if chi != 2:
        raise ValueError(f"mesh is not closed genus 0 (Euler characteristic {chi}, expected 2)")


def face_determinants(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """det of the 3x3 matrix whose columns are a face's three unit points."""
    a = points[faces[:, 0]]
    b = points[faces[:, 1]]
    c = points[faces[:, 2]]
    return np.einsum("ij,ij->i", a, np.cross(b, c))


def tangent_bases(s: np.ndarray):
    """Deterministic orthonormal (b1, b2) spanning the tangent plane at each
    unit point: cross against the axis least aligned with the point."""
    axis = np.zeros_like(s)
    axis[np.arange(len(s)), np.argmin(np.abs(s), axis=1)] = 1.0
    b1 = np.cross(s, axis)
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 = np.cross(s, b1)
    return b1, b2


def retract_rows(s: np.ndarray, b1: np.ndarray, b2: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Normalize(s + x1 b1 + x2 b2) row-wise (plain numpy)."""
    r = s + x2[:, :1] * b1 + x2[:, 1:2] * b2
    return r / np.linalg.norm(r, axis=1, keepdims=True)


def initial_sphere(mesh: Mesh) -> np.ndarray:
    """Center at the centroid and push every vertex onto the unit sphere."""
    s = mesh.positions - mesh.positions.mean(axis=0)
    norms = np.linalg.norm(s, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("a vertex coincides with the centroid; cannot project to the sphere")
    return s / norms


def _retract_active(x2, s, b1, b2) -> ActiveVec:
    r = ActiveVec([x2[0] * b1[:, c] + x2[1] * b2[:, c] + s[:, c] for c in range(3)])
    return r / r.norm()


def make_sphere_problem(mesh: Mesh, base: np.ndarray, b1: np.ndarray, b2: np.ndarray,
                        with_hessian: bool = False, workers: int = 1,
                        accumulation: str = "deterministic",
                        include_barrier: bool = True, include_stretch: bool = True) -> Problem:
    """Tangent-coordinate problem (2 variables per vertex) whose term closes
    over `base`, `b1`, `b2`: rewriting those arrays in place re-targets the
    energy without re-registering."""
    problem = Problem(mesh, 2, with_hessian=with_hessian, workers=workers, accumulation=accumulation)

    def face_energy(face, verts, x):
        ps = []
        for q in range(3):
            vid = verts[q].index
            ps.append(_retract_active(x[verts[q]], base[vid], b1[vid], b2[vid]))
        total = 0.0
        if include_barrier:
            det = SmallMatrix.from_columns(ps[0], ps[1], ps[2]).det()
            total = -log(det) + total
        if include_stretch:
            total = total + (ps[0] - ps[1]).norm2() + (ps[1] - ps[2]).norm2() + (ps[2] - ps[0]).norm2()
        return total

    problem.add_term(Element.FACE, Op.FV, face_energy)
    return problem


def spherical_parameterize(mesh: Mesh, cfg: SphereConfig | None = None, workers: int = 1,
                           accumulation: str = "deterministic", on_accept=None):
    """Optimize the embedding; returns (points, report).

    The initial projection must already be flip-free (every face determinant
    positive); otherwise the offending faces are reported and nothing runs.
    `on_accept(points)` is called after every accepted step.
    """
    cfg = cfg or SphereConfig()
    check_genus_zero(mesh)
    base = initial_sphere(mesh)
    dets = face_determinants(base, mesh.faces)
    if np.any(dets <= 0):
        flipped = np.flatnonzero(dets <= 0)
        raise ValueError(f"initial sphere projection has flipped faces: {flipped[:10].tolist()}")
    b1, b2 = tangent_bases(base)
    problem = make_sphere_problem(mesh, base, b1, b2, workers=workers, accumulation=accumulation)
    problem.x = np.zeros(2 * mesh.num_vertices)

    def post_step(pb: Problem) -> None:
        x2 = pb.x.reshape(-1, 2)
        base[:] = retract_rows(base, b1, b2, x2)
        nb1, nb2 = tangent_bases(base)
        b1[:] = nb1
        b2[:] = nb2
        pb.x = np.zeros_like(pb.x)
        if on_accept is not None:
            on_accept(base.copy())

    solver_cfg = SolverConfig(max_iters=cfg.iters, grad_tol=cfg.grad_tol,
                              lbfgs_memory=cfg.lbfgs_memory)
    report = lbfgs_solve(problem, solver_cfg, post_step=post_step)
    return base.copy(), report
