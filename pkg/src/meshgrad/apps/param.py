"""Planar parameterization by area-scaled symmetric Dirichlet minimization.

Each triangle is isometrically flattened to a 2D rest shape; the per-face
energy is area * (|J|_F^2 + |J^-1|_F^2) where J maps the rest shape onto the
current UV triangle. J = I everywhere is the global minimum, so 4 * total
rest area is a hard lower bound on the energy. States with a non-positive
Jacobian determinant (a flipped face) evaluate to NaN, which the line search
rejects, keeping every accepted iterate flip-free.

Minimization is matrix-free Newton: the inner CG consumes per-face
Hessian-vector products and the global Hessian is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..active import SmallMatrix, positive_guard
from ..mesh import Element, Mesh, Op
from ..problem import Problem
from ..solvers import SolverConfig, cg_linear_solve, newton_cg_solve


@dataclass
class ParamConfig:
    init: str = "tutte"         # "tutte" or "planar"
    outer_iters: int = 30
    cg_tol: float = 1e-4
    cg_max_iters: int = 100
    grad_tol: float = 1e-6


def rest_geometry(mesh: Mesh):
    """Per-face isometric flattening.

    Returns (rest_inv, areas): rest_inv is the (F, 2, 2) inverse of the
    flattened edge matrix [b_r - a_r, c_r - a_r], areas the rest face areas.
    """
    p = mesh.positions
    f = mesh.faces
    e1 = p[f[:, 1]] - p[f[:, 0]]
    e2 = p[f[:, 2]] - p[f[:, 0]]
    len1 = np.linalg.norm(e1, axis=1)
    normal = np.cross(e1, e2)
    areas = 0.5 * np.linalg.norm(normal, axis=1)
    if np.any(len1 <= 0) or np.any(areas <= 0):
        bad = int(np.argmax((len1 <= 0) | (areas <= 0)))
        raise ValueError(f"degenerate face {bad}: zero edge or zero area")
    u = e1 / len1[:, None]
    w = normal / (2.0 * areas)[:, None]
    v = np.cross(w, u)
    # rest matrix columns: (|e1|, 0) and (e2.u, e2.v); invert analytically
    r00 = len1
    r01 = np.einsum("ij,ij->i", e2, u)
    r11 = np.einsum("ij,ij->i", e2, v)
    det = r00 * r11
    rest_inv = np.empty((len(f), 2, 2))
    rest_inv[:, 0, 0] = r11 / det
    rest_inv[:, 0, 1] = -r01 / det
    rest_inv[:, 1, 0] = 0.0
    rest_inv[:, 1, 1] = r00 / det
    return rest_inv, areas


def uv_jacobians(uv: np.ndarray, mesh: Mesh, rest_inv: np.ndarray) -> np.ndarray:
    """Per-face 2x2 Jacobians of the rest-shape to UV map (plain numpy; the
    feasibility companion to the differentiated energy)."""
    f = mesh.faces
    d1 = uv[f[:, 1]] - uv[f[:, 0]]
    d2 = uv[f[:, 2]] - uv[f[:, 0]]
    d = np.stack([d1, d2], axis=2)  # columns
    return np.einsum("fij,fjk->fik", d, rest_inv)


def jacobian_dets(uv: np.ndarray, mesh: Mesh, rest_inv: np.ndarray) -> np.ndarray:
    j = uv_jacobians(uv, mesh, rest_inv)
    return j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]


def planar_project(mesh: Mesh) -> np.ndarray:
    """Drop the z coordinate; a valid flip-free start for height-field meshes."""
    return mesh.positions[:, :2].copy()


def boundary_loop(mesh: Mesh) -> list[int]:
    """Ordered vertex loop of the single boundary; raises if the mesh is
    closed or has several boundary components."""
    counts = mesh.edge_to_face.degrees()
    bmask = counts == 1
    if not bmask.any():
        raise ValueError("mesh has no boundary; expected a topological disk")
    nbr: dict[int, list[int]] = {}
    for i, j in mesh.edges[bmask]:
        nbr.setdefault(int(i), []).append(int(j))
        nbr.setdefault(int(j), []).append(int(i))
    for v, ns in nbr.items():
        if len(ns) != 2:
            raise ValueError(f"boundary vertex {v} has {len(ns)} boundary edges; not a disk")
    start = min(nbr)
    loop = [start]
    prev, cur = start, min(nbr[start])
    while cur != start:
        loop.append(cur)
        a, b = nbr[cur]
        prev, cur = cur, (b if a == prev else a)
    if len(loop) != len(nbr):
        raise ValueError("mesh has more than one boundary loop; not a disk")
    return loop


def tutte_embedding(mesh: Mesh, tol: float = 1e-12, max_iters: int = 20000) -> np.ndarray:
    """Flip-free disk initialization: boundary on the unit circle, interior
    vertices at the uniform average of their neighbors (solved with CG on the
    reduced graph Laplacian)."""
    if mesh.num_vertices - mesh.num_edges + mesh.num_faces != 1:
        raise ValueError("mesh is not a topological disk (Euler characteristic != 1)")
    loop = boundary_loop(mesh)
    nv = mesh.num_vertices
    uv = np.zeros((nv, 2))
    theta = 2.0 * np.pi * np.arange(len(loop)) / len(loop)
    uv[loop, 0] = np.cos(theta)
    uv[loop, 1] = np.sin(theta)

    on_boundary = np.zeros(nv, dtype=bool)
    on_boundary[loop] = True
    interior = np.flatnonzero(~on_boundary)
    if len(interior) == 0:
        return uv
    pos_of = -np.ones(nv, dtype=np.int64)
    pos_of[interior] = np.arange(len(interior))

    src, dst, b_rows, b_vals = [], [], [], []
    for row, v in enumerate(interior):
        for u in mesh.vertex_to_vertex[v]:
            if on_boundary[u]:
                b_rows.append(row)
                b_vals.append(uv[u])
            else:
                src.append(row)
                dst.append(pos_of[u])
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    deg = mesh.vertex_to_vertex.degrees()[interior].astype(np.float64)
    rhs = np.zeros((len(interior), 2))
    if b_rows:
        np.add.at(rhs, np.asarray(b_rows), np.asarray(b_vals))

    def laplacian(y):
        out = deg * y
        if len(src):
            np.subtract.at(out, src, y[dst])
        return out

    inv_deg = 1.0 / deg
    for c in range(2):
        sol, info = cg_linear_solve(laplacian, rhs[:, c], tol, max_iters, precond=lambda r: inv_deg * r)
        if not info.converged:
            raise RuntimeError("interior solve for the disk embedding did not converge")
        uv[interior, c] = sol
    return uv


def make_distortion_problem(mesh: Mesh, rest_inv: np.ndarray, areas: np.ndarray,
                            with_hessian: bool = False, workers: int = 1,
                            accumulation: str = "deterministic") -> Problem:
    problem = Problem(mesh, 2, with_hessian=with_hessian, workers=workers, accumulation=accumulation)

    def distortion(face, verts, x):
        a, b, c = x[verts[0]], x[verts[1]], x[verts[2]]
        d1 = b - a
        d2 = c - a
        jac = SmallMatrix([[d1[0], d2[0]], [d1[1], d2[1]]]) @ rest_inv[face.index]
        det = positive_guard(jac.det())
        fro = jac.frobenius2()
        return areas[face.index] * (fro + fro / (det * det))

    problem.add_term(Element.FACE, Op.FV, distortion)
    return problem


def parameterize(mesh: Mesh, cfg: ParamConfig | None = None, workers: int = 1,
                 accumulation: str = "deterministic"):
    """Flatten a disk mesh; returns (uv, report).

    The initialization must be flip-free; a flipped face is a hard error
    naming the face.
    """
    cfg = cfg or ParamConfig()
    rest_inv, areas = rest_geometry(mesh)
    if cfg.init == "tutte":
        uv0 = tutte_embedding(mesh)
    elif cfg.init == "planar":
        uv0 = planar_project(mesh)
    else:
        raise ValueError(f"unknown initialization {cfg.init!r}")
    dets = jacobian_dets(uv0, mesh, rest_inv)
    if np.any(dets <= 0):
        flipped = np.flatnonzero(dets <= 0)
        raise ValueError(f"initialization contains flipped faces: {flipped[:10].tolist()}")

    problem = make_distortion_problem(mesh, rest_inv, areas, with_hessian=False,
                                      workers=workers, accumulation=accumulation)
    problem.x = uv0.ravel().copy()
    solver_cfg = SolverConfig(max_iters=cfg.outer_iters, grad_tol=cfg.grad_tol,
                              cg_tol=cfg.cg_tol, cg_max_iters=cfg.cg_max_iters)
    report = newton_cg_solve(problem, solver_cfg)
    return problem.x.reshape(-1, 2).copy(), report
