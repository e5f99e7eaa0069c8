"""Command line entry point ``thm``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .harness import exit_code, iteration_matrix, run_experiment
from .mesh import check_regularity, generate_voronoi, load_mesh


def _mesh_generate(args) -> int:
    domain = tuple(args.domain)
    mesh = generate_voronoi(args.cells, domain=domain, rng_seed=args.seed, lloyd_iterations=args.lloyd)
    mesh.write(args.out)
    print(f"{mesh.n_cells} cells, {len(mesh.vertices)} vertices, h={mesh.h:.6f} -> {args.out}")
    return 0


def _mesh_check(args) -> int:
    mesh = load_mesh(args.path)
    rep = check_regularity(mesh)
    print(f"cells={mesh.n_cells} faces={mesh.n_faces} h={mesh.h:.6f}")
    print(f"min_simplex_ratio={rep.min_simplex_ratio:.6f} max_neighbor_h_ratio={rep.max_neighbor_h_ratio:.6f}")
    return 0


def _run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rows, text = run_experiment(cfg, out=args.out, heavy=args.heavy)
    if args.out is None and cfg.out is None:
        sys.stdout.write(text)
    if cfg.kind.startswith("robustness"):
        print(iteration_matrix(rows), file=sys.stderr)
    code = exit_code(rows)
    if code:
        bad = [r for r in rows if r["status"] not in ("order", "converged") and not r.get("expected_failure")]
        for r in bad:
            print(f"unexpected status {r['status']}: {r['kind']} {r['variant']} ell={r['ell']} N={r['N']}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thm", description="PolyDG thermo-poroelasticity experiments")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v: run summaries, -vv: Picard iterations")
    sub = p.add_subparsers(dest="command", required=True)

    mesh = sub.add_parser("mesh", help="mesh utilities").add_subparsers(dest="mesh_command", required=True)
    gen = mesh.add_parser("generate", help="Lloyd-relaxed Voronoi mesh")
    gen.add_argument("--cells", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--lloyd", type=int, default=100)
    gen.add_argument("--domain", type=float, nargs=4, default=(0.0, 1.0, 0.0, 1.0), metavar=("X0", "X1", "Y0", "Y1"))
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_mesh_generate)
    chk = mesh.add_parser("check", help="load a mesh file and report regularity")
    chk.add_argument("path")
    chk.set_defaults(func=_mesh_check)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", default=None, help="CSV path (default: config 'out' or stdout)")
    run.add_argument("--heavy", action="store_true", help="include N >= 10000 and high-degree runs")
    run.set_defaults(func=_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(name)s: %(message)s")
    if args.verbose < 2:
        logging.getLogger("polythm.picard").setLevel(max(level, logging.WARNING))
    if args.verbose >= 2:
        logging.getLogger("polythm.picard").setLevel(logging.INFO)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
