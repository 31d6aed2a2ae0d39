"""Command-line driver for the four reference applications plus a scaling bench.

Subcommands: cloth, param, sphere, smooth, bench. Unknown flags or subcommands
exit 2 with usage; runtime failures exit 1 with a message on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .apps.cloth import ClothConfig, ClothSim
from .apps.param import ParamConfig, make_distortion_problem, parameterize, rest_geometry
from .apps.smooth import bench_gradient, edge_length_energy, smooth
from .apps.sphere import SphereConfig, make_sphere_problem, spherical_parameterize, tangent_bases
from .mesh import load_obj, save_obj
from .problem import Problem


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads for term evaluation")
    p.add_argument("--deterministic", action="store_true",
                   help="force deterministic accumulation (also via MESHGRAD_DETERMINISTIC=1)")
    p.add_argument("--report", type=str, default=None, help="write the per-iteration CSV trace here")
    p.add_argument("--dump-hessian", type=str, default=None,
                   help="write the assembled Hessian at the final state (MatrixMarket)")


def _accumulation(args) -> str:
    return "deterministic" if args.deterministic else "atomic"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meshgrad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cloth", help="implicit-Euler mass-spring simulation on a grid")
    p.add_argument("--grid", type=int, default=10, help="vertices per side")
    p.add_argument("--spacing", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--h", type=float, default=0.01, help="timestep")
    p.add_argument("--stiffness", type=float, default=1e4)
    p.add_argument("--mass-density", type=float, default=1.0)
    p.add_argument("--gravity", type=str, default="0,-9.8,0")
    p.add_argument("--out", type=str, default=None, help="final positions OBJ")
    p.add_argument("--snap-every", type=int, default=0, help="write OBJ snapshots every k steps")
    _add_common(p)

    p = sub.add_parser("param", help="flatten a disk mesh (symmetric Dirichlet, matrix-free Newton)")
    p.add_argument("--mesh", type=str, required=True)
    p.add_argument("--init", choices=("tutte", "planar"), default="tutte")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--cg-tol", type=float, default=1e-4)
    p.add_argument("--cg-max-iters", type=int, default=100)
    p.add_argument("--out", type=str, default=None, help="flattened OBJ (uv in x, y)")
    _add_common(p)

    p = sub.add_parser("sphere", help="embed a genus-0 mesh on the unit sphere (L-BFGS)")
    p.add_argument("--mesh", type=str, required=True)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--memory", type=int, default=8)
    p.add_argument("--out", type=str, default=None)
    _add_common(p)

    p = sub.add_parser("smooth", help="gradient-descent smoothing of squared edge lengths")
    p.add_argument("--mesh", type=str, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--mode", choices=("ad", "manual"), default="ad")
    p.add_argument("--out", type=str, default=None)
    _add_common(p)

    p = sub.add_parser("bench", help="time the smoothing gradient kernel over grid sizes")
    p.add_argument("--sizes", type=str, default="64,128,256,512", help="grid sides, comma separated")
    p.add_argument("--repeats", type=int, default=3)
    _add_common(p)

    return parser


def _summary(label: str, final_energy: float, iters: int, ms: float) -> None:
    print(f"{label}: final energy {final_energy:.9g}, {iters} iterations, {ms:.1f} ms total")


def _dump_hessian(problem: Problem, path: str) -> None:
    problem.eval_terms()
    problem.export_hessian(path)
    print(f"wrote Hessian to {path}")


def _run_cloth(args) -> int:
    g = tuple(float(t) for t in args.gravity.split(","))
    if len(g) != 3:
        raise ValueError("--gravity needs three comma-separated components")
    cfg = ClothConfig(grid_n=args.grid, spacing=args.spacing, h=args.h, k=args.stiffness,
                      mass_density=args.mass_density, gravity=g, steps=args.steps)
    sim = ClothSim(cfg, workers=args.threads, accumulation=_accumulation(args))
    t0 = time.perf_counter()

    def callback(step, x, v, rep):
        if args.snap_every and args.out and (step + 1) % args.snap_every == 0:
            save_obj(f"{args.out}.{step + 1:05d}.obj", x, sim.mesh.faces)

    x, v, reports = sim.simulate(callback=callback)
    total_ms = (time.perf_counter() - t0) * 1e3
    stats = sim.problem.stats
    deriv_ms = stats["eval_terms_ms"]
    print(f"derivative evaluation: {deriv_ms / max(1, len(reports)):.3f} ms per step "
          f"({stats['eval_terms_calls']} gradient+Hessian evaluations)")
    _summary("cloth", reports[-1].final_energy, len(reports), total_ms)
    if args.out:
        save_obj(args.out, x, sim.mesh.faces)
    if args.report:
        reports[-1].to_csv(args.report)
    if args.dump_hessian:
        _dump_hessian(sim.problem, args.dump_hessian)
    return 0


def _run_param(args) -> int:
    mesh = load_obj(args.mesh)
    cfg = ParamConfig(init=args.init, outer_iters=args.iters, cg_tol=args.cg_tol,
                      cg_max_iters=args.cg_max_iters)
    t0 = time.perf_counter()
    uv, report = parameterize(mesh, cfg, workers=args.threads, accumulation=_accumulation(args))
    _summary("param", report.final_energy, report.accepted_steps, (time.perf_counter() - t0) * 1e3)
    if args.out:
        flat = np.concatenate([uv, np.zeros((len(uv), 1))], axis=1)
        save_obj(args.out, flat, mesh.faces)
    if args.report:
        report.to_csv(args.report)
    if args.dump_hessian:
        rest_inv, areas = rest_geometry(mesh)
        problem = make_distortion_problem(mesh, rest_inv, areas, with_hessian=True,
                                          workers=args.threads)
        problem.x = uv.ravel().copy()
        _dump_hessian(problem, args.dump_hessian)
    return 0


def _run_sphere(args) -> int:
    mesh = load_obj(args.mesh)
    cfg = SphereConfig(iters=args.iters, lbfgs_memory=args.memory)
    t0 = time.perf_counter()
    points, report = spherical_parameterize(mesh, cfg, workers=args.threads,
                                            accumulation=_accumulation(args))
    _summary("sphere", report.final_energy, report.accepted_steps, (time.perf_counter() - t0) * 1e3)
    if args.out:
        save_obj(args.out, points, mesh.faces)
    if args.report:
        report.to_csv(args.report)
    if args.dump_hessian:
        b1, b2 = tangent_bases(points)
        problem = make_sphere_problem(mesh, points, b1, b2, with_hessian=True, workers=args.threads)
        problem.x = np.zeros(2 * mesh.num_vertices)
        _dump_hessian(problem, args.dump_hessian)
    return 0


def _run_smooth(args) -> int:
    mesh = load_obj(args.mesh)
    t0 = time.perf_counter()
    positions, report = smooth(mesh, args.lam, args.iters, mode=args.mode,
                               workers=args.threads, accumulation=_accumulation(args))
    _summary("smooth", report.final_energy, args.iters, (time.perf_counter() - t0) * 1e3)
    if args.out:
        save_obj(args.out, positions, mesh.faces)
    if args.report:
        report.to_csv(args.report)
    if args.dump_hessian:
        problem = edge_length_energy(mesh, with_hessian=True, workers=args.threads)
        problem.x = positions.ravel().copy()
        _dump_hessian(problem, args.dump_hessian)
    return 0


def _run_bench(args) -> int:
    sizes = tuple(int(t) for t in args.sizes.split(","))
    rows = bench_gradient(sizes, repeats=args.repeats, workers=args.threads,
                          accumulation=_accumulation(args))
    print(f"{'side':>6} {'vertices':>10} {'edges':>10} {'ms/iter':>10} {'ratio':>7}")
    for r in rows:
        ratio = f"{r['ratio']:.2f}" if np.isfinite(r["ratio"]) else "-"
        print(f"{r['side']:>6} {r['vertices']:>10} {r['edges']:>10} {r['ms_per_iter']:>10.3f} {ratio:>7}")
    if args.report:
        with open(args.report, "w") as fh:
            fh.write("side,vertices,edges,ms_per_iter,ratio\n")
            for r in rows:
                fh.write(f"{r['side']},{r['vertices']},{r['edges']},{r['ms_per_iter']:.6f},{r['ratio']:.6f}\n")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    runners = {
        "cloth": _run_cloth,
        "param": _run_param,
        "sphere": _run_sphere,
        "smooth": _run_smooth,
        "bench": _run_bench,
    }
    try:
        return runners[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
