"""Fixed-point (Picard) linearization of the convective heat transport term."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .fespace import FESpace, mesh_element_quadrature, mesh_face_quadrature
from .forms import DirichletData, FieldFn, ModelParams, darcy_field
from .mesh import PolyMesh
from .system import (
    Discretization,
    SolverError,
    SequenceSolver,
    SolverOptions,
    Sources,
    assemble_global,
    assemble_linear_part,
)

log = logging.getLogger(__name__)

CONVERGED, MAX_ITER, DIVERGED = "converged", "max_iter", "diverged"


@dataclass(frozen=True)
class PicardOptions:
    tol: float = 1e-10
    max_iter: int = 1000
    variant: str = "stab"
    norm: str = "absolute"  # or "relative"
    divergence_threshold: float = 1e12
    diagnostics: bool = True

    def __post_init__(self):
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("need tol > 0 and max_iter >= 1")
        if self.norm not in ("absolute", "relative"):
            raise ValueError("norm must be 'absolute' or 'relative'")


@dataclass
class IterationRecord:
    k: int
    increment: float
    relative: float
    eta_dg_inf: float
    T_dg_inf: float


@dataclass
class PicardState:
    iteration: int = 0
    x: np.ndarray | None = None
    p_prev: np.ndarray | None = None
    T_prev: np.ndarray | None = None
    history: list[IterationRecord] = field(default_factory=list)
    status: str = "running"

    @property
    def increments(self) -> list[float]:
        return [r.increment for r in self.history]


@dataclass(eq=False)
class Problem:
    disc: Discretization
    dirichlet: DirichletData = DirichletData()
    sources: Sources = Sources()


def compute_eta(space: FESpace, p: np.ndarray, params: ModelParams) -> FieldFn:
    """eta = -c_f K grad_h p, evaluated exactly from the modal coefficients."""
    return darcy_field(space, params, p)


def eta_dg_inf_seminorm(eta: FieldFn, mesh: PolyMesh, ell: int, order: int | None = None) -> float:
    """|eta|_{dG,inf}: sup of div_h eta plus scaled sup of normal jumps.

    Suprema are taken over quadrature points.
    """
    order = 2 * ell + 2 if order is None else order
    q = mesh_element_quadrature(mesh, order)
    e = np.arange(mesh.n_cells)
    mask = q.weights != 0
    vol = float(np.max(np.abs(eta(e, q.points)["div"])[mask]))
    fq = mesh_face_quadrature(mesh, order)
    own, nbr = mesh.face_cells.T
    inner = nbr >= 0
    nb = np.where(inner, nbr, own)
    a = eta(own, fq.points)["value"]
    b = np.where(inner[:, None, None], eta(nb, fq.points)["value"], 0.0)
    jn = np.abs(np.einsum("fqa,fa->fq", a - b, mesh.normals)).max(axis=1)
    h = mesh.cell_diameters
    scale = ell**2 / np.minimum(h[own], h[nb])
    return vol + float(np.max(scale * jn))


def T_dg_inf_norm(space: FESpace, T: np.ndarray, order: int | None = None) -> float:
    """||T||_{dG,inf}: sup |grad_h T| plus scaled sup of jumps."""
    mesh, ell = space.mesh, space.degree
    order = 2 * ell + 2 if order is None else order
    q = mesh_element_quadrature(mesh, order)
    e = np.arange(mesh.n_cells)
    _, g = space.field_at_quadrature(T, e, q.points, deriv=1)
    vol = float(np.max(np.linalg.norm(g, axis=-1)[q.weights != 0]))
    fq = mesh_face_quadrature(mesh, order)
    own, nbr = mesh.face_cells.T
    inner = nbr >= 0
    nb = np.where(inner, nbr, own)
    a = space.field_at_quadrature(T, own, fq.points, deriv=0)[0]
    b = np.where(inner[:, None], space.field_at_quadrature(T, nb, fq.points, deriv=0)[0], 0.0)
    h = mesh.cell_diameters
    scale = ell**2 / np.minimum(h[own], h[nb])
    return vol + float(np.max(scale * np.abs(a - b).max(axis=1)))


def fixed_point_solve(problem: Problem, opts: PicardOptions = PicardOptions(), solver: SolverOptions = SolverOptions()):
    """Iterate linearized solves until the coefficient increment is below ``tol``.

    Every linear solve counts as one iteration; the first uses eta = 0 (and,
    for the ``old`` variant, a zero temperature gradient).
    Returns ``(x, state)``; ``state.status`` is converged, max_iter or diverged.
    """
    disc = problem.disc
    lin = assemble_linear_part(disc, problem.dirichlet, problem.sources)
    state = PicardState(x=np.zeros(disc.ndofs))
    sl = disc.slices
    linsolve = SequenceSolver(solver, n_cells=disc.mesh.n_cells)
    for k in range(1, opts.max_iter + 1):
        system = assemble_global(disc, opts.variant, state.p_prev, state.T_prev, problem.dirichlet, problem.sources, lin)
        try:
            x = linsolve(system)
        except SolverError as exc:
            log.warning("iter %d: linear solve failed: %s", k, exc)
            state.status = DIVERGED
            break
        inc = float(np.linalg.norm(x - state.x))
        nx = float(np.linalg.norm(x))
        rel = inc / nx if nx > 0 else 0.0
        eta_n = T_n = float("nan")
        if opts.diagnostics and np.all(np.isfinite(x)):
            if state.p_prev is not None:
                eta_n = eta_dg_inf_seminorm(compute_eta(disc.V, state.p_prev, disc.params), disc.mesh, disc.ell)
            else:
                eta_n = 0.0
            T_n = T_dg_inf_norm(disc.V, x[sl["T"]])
        state.iteration = k
        state.history.append(IterationRecord(k, inc, rel, eta_n, T_n))
        log.info("iter %d %.6e %.6e %.6e", k, inc, rel, eta_n)
        state.x = x
        if not np.isfinite(inc) or inc > opts.divergence_threshold:
            state.status = DIVERGED
            break
        crit = inc if opts.norm == "absolute" else rel
        if crit <= opts.tol:
            state.status = CONVERGED
            break
        state.p_prev = x[sl["p"]].copy()
        state.T_prev = x[sl["T"]].copy()
    else:
        state.status = MAX_ITER
    return state.x, state
