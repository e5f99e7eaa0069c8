"""Experiment sweeps: convergence, robustness and superconvergence tables."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .forms import BASE_PARAMS, VARIANTS, ModelParams
from .mesh import PolyMesh, generate_voronoi
from .mms import ExactSolution, error_norms, observed_order, trig_case
from .picard import PicardOptions, Problem, fixed_point_solve
from .system import Discretization, SolverOptions

log = logging.getLogger(__name__)

CSV_HEADER = (
    "kind", "variant", "ell", "N", "h", "status", "iters",
    "err_u_L2", "err_u_dG", "err_p_L2", "err_p_dG", "err_T_L2", "err_T_dG", "err_phi_L2",
)
ERROR_FIELDS = CSV_HEADER[7:]

# coefficient changes relative to the convergence-test set, per experiment kind
KIND_DEFAULTS = {
    "convergence-h": {},
    "convergence-p": {},
    "robustness-theta": {"a0": 0.0, "b0": 0.0, "c0": 0.0, "K": 1.0},
    "robustness-kappa": {"a0": 0.0, "b0": 0.0, "c0": 0.0, "K": 1e-10, "Theta": 1.0},
    "robustness-thetakappa": {"a0": 0.01, "b0": 0.01, "c0": 0.01, "K": 1e-10, "Theta": 1e-10},
    "superconvergence": {},
}


@dataclass(frozen=True)
class SweepPoint:
    kind: str
    variant: str
    ell: int
    N: int
    value: float | None = None  # swept parameter (theta or nu_p = nu_T)

    @property
    def label(self) -> str:
        if self.value is None:
            return self.kind
        name = "theta" if self.kind == "robustness-theta" else "nu"
        return f"{self.kind}/{name}={self.value:.0e}"


def physical_parameters(cfg: ExperimentConfig, value: float | None) -> dict:
    kw = dict(KIND_DEFAULTS[cfg.kind])
    if cfg.abc is not None:
        kw.update(a0=cfg.abc, b0=cfg.abc, c0=cfg.abc)
    if cfg.kappa is not None:
        kw["K"] = cfg.kappa
    if cfg.theta is not None and cfg.kind != "robustness-theta":
        kw["Theta"] = cfg.theta[0]
    if cfg.kind == "robustness-theta":
        kw["Theta"] = value
    if cfg.cf is not None:
        kw["cf"] = cfg.cf
    return kw


def amplitudes(cfg: ExperimentConfig, value: float | None) -> tuple[float, float, float]:
    nu = cfg.nu_pT[0] if value is None or cfg.kind != "superconvergence" else value
    return cfg.nu_u, nu, nu


def expected_failure(point: SweepPoint) -> bool:
    """Cells where the reference results report the iteration cap for the old linearization."""
    if point.variant != "old":
        return False
    if point.kind == "robustness-theta":
        return point.value is not None and point.value <= 1e-2
    if point.kind == "robustness-kappa":
        return point.ell == 2 and point.N == 310
    return False


@lru_cache(maxsize=8)
def cached_mesh(N: int, seed: int, lloyd: int) -> PolyMesh:
    return generate_voronoi(N, rng_seed=seed, lloyd_iterations=lloyd)


@lru_cache(maxsize=32)
def _exact(nu: tuple[float, float, float], mirrored: bool, phys: tuple) -> ExactSolution:
    # symbolic derivation is the slow part; cache per coefficient set
    return ExactSolution(trig_case(*nu, mirrored=mirrored), {**BASE_PARAMS, **dict(phys)})


def sweep_points(cfg: ExperimentConfig, heavy: bool = False) -> list[SweepPoint]:
    pts = []
    for ell in cfg.ell:
        for N in cfg.N:
            if cfg.is_heavy(N, ell) and not heavy:
                log.info("skipping heavy run N=%d ell=%d", N, ell)
                continue
            for variant in cfg.variants:
                for value in cfg.sweep():
                    pts.append(SweepPoint(cfg.kind, variant, ell, N, value))
    return pts


def run_point(cfg: ExperimentConfig, point: SweepPoint) -> dict:
    """One Picard solve plus error evaluation, as a CSV row dict."""
    row = {"kind": point.label, "variant": point.variant, "ell": point.ell, "N": point.N}
    try:
        mesh = cached_mesh(point.N, cfg.seed, cfg.lloyd_iterations)
        row["h"] = mesh.h
        phys = physical_parameters(cfg, point.value)
        params = ModelParams.uniform(mesh.n_cells, **phys)
        exact = _exact(amplitudes(cfg, point.value), cfg.mirrored, tuple(sorted(phys.items())))
        disc = Discretization(mesh, point.ell, params)
        popts = PicardOptions(tol=cfg.tol, max_iter=cfg.max_iter, variant=point.variant, norm=cfg.stopping_norm)
        x, state = fixed_point_solve(Problem(disc, exact.dirichlet, exact.sources), popts, SolverOptions(method=cfg.solver))
        report = error_norms(disc, x, exact, iterations=state.iteration)
        row.update(status=state.status, iters=state.iteration, **report.as_dict())
    except Exception as exc:  # recorded in-row; the sweep continues
        log.error("run %s failed: %s", point, exc)
        row.setdefault("h", float("nan"))
        row.update(status="error", iters=0, **{k: float("nan") for k in ERROR_FIELDS})
    row["expected_failure"] = expected_failure(point)
    log.info("%s %s ell=%d N=%d: %s after %s iterations", point.label, point.variant, point.ell, point.N, row["status"], row["iters"])
    return row


def _run_star(args):
    return run_point(*args)


def run_sweep(cfg: ExperimentConfig, heavy: bool = False) -> list[dict]:
    points = sweep_points(cfg, heavy)
    if cfg.workers > 1 and len(points) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(_run_star, [(cfg, p) for p in points]))
    else:
        rows = [run_point(cfg, p) for p in points]
    order = {p: i for i, p in enumerate(points)}
    keyed = sorted(zip(points, rows), key=lambda pr: (pr[0].ell, pr[0].N, pr[0].variant, order[pr[0]]))
    return [r for _, r in keyed]


def order_rows(rows: list[dict]) -> list[dict]:
    """Observed orders over the last two refinements per (kind, ell, variant)."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r["status"] == "order":
            continue
        groups.setdefault((r["kind"], r["ell"], r["variant"]), []).append(r)
    out = []
    for (kind, ell, variant), rs in groups.items():
        rs = sorted(rs, key=lambda r: r["N"])
        if len({r["N"] for r in rs}) < 2:
            continue
        a, b = rs[-2], rs[-1]
        row = {"kind": f"{kind}/order", "variant": variant, "ell": ell, "N": f"{a['N']}-{b['N']}", "h": "", "status": "order", "iters": ""}
        for k in ERROR_FIELDS:
            try:
                row[k] = observed_order([a[k], b[k]], [a["h"], b["h"]])
            except (ValueError, FloatingPointError):
                row[k] = float("nan")
        out.append(row)
    return sorted(out, key=lambda r: (r["ell"], r["variant"], r["kind"]))


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6e}"
    return str(v)


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(r.get(k, "")) for k in CSV_HEADER])
    return buf.getvalue()


def iteration_matrix(rows: list[dict]) -> str:
    """Variant x (sweep value or N) grid of iteration counts, one block per (ell, N)."""
    data = [r for r in rows if r["status"] != "order"]
    by_block: dict[tuple, dict] = {}
    for r in data:
        sweep = "/" in r["kind"]
        block = (r["ell"], r["N"]) if sweep else (r["ell"],)
        col = r["kind"].split("/", 1)[1] if sweep else f"N={r['N']}"
        cell = str(r["iters"]) + ("*" if r["status"] != "converged" else "")
        by_block.setdefault(block, {}).setdefault(r["variant"], {})[col] = cell
    lines = []
    for block, table in by_block.items():
        lines.append("ell=%d" % block[0] + (f" N={block[1]}" if len(block) > 1 else ""))
        cols = list(dict.fromkeys(c for v in table.values() for c in v))
        lines.append("  ".join(["variant".ljust(8)] + [c.rjust(12) for c in cols]))
        for variant, cells in sorted(table.items(), key=lambda kv: VARIANTS.index(kv[0])):
            lines.append("  ".join([variant.ljust(8)] + [cells.get(c, "-").rjust(12) for c in cols]))
        lines.append("")
    lines.append("* not converged")
    return "\n".join(lines)


def exit_code(rows: list[dict]) -> int:
    """0 iff every run converged or failed where a failure is expected."""
    for r in rows:
        if r["status"] in ("order", "converged"):
            continue
        if r.get("expected_failure") and r["status"] in ("max_iter", "diverged"):
            continue
        return 1
    return 0


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, heavy: bool = False) -> tuple[list[dict], str]:
    rows = run_sweep(cfg, heavy)
    if cfg.kind != "convergence-p":
        rows = rows + order_rows(rows)
    text = format_csv(rows)
    target = out if out is not None else cfg.out
    if target is not None:
        Path(target).parent.mkdir(parents=True, exist_ok=True)
        Path(target).write_text(text, encoding="utf-8")
    return rows, text


# convenience wrappers named after the experiment families

def run_convergence(cfg: ExperimentConfig, out=None, heavy: bool = False):
    return run_experiment(cfg, out, heavy)


def run_robustness(cfg: ExperimentConfig, out=None, heavy: bool = False):
    rows, text = run_experiment(cfg, out, heavy)
    return rows, text, iteration_matrix(rows)


def run_superconvergence(cfg: ExperimentConfig, out=None, heavy: bool = False):
    return run_experiment(cfg, out, heavy)
