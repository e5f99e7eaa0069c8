"""Global block system over (u, p, T, phi) and its linear solvers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import forms
from .fespace import FESpace, build_space
from .forms import DirichletData, ModelParams, PenaltyParams, TransportOptions
from .mesh import PolyMesh, nested_dissection

log = logging.getLogger(__name__)

FIELDS = ("u", "p", "T", "phi")


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class Sources:
    """Volume forcings as pointwise callables; ``None`` means zero."""

    f: Callable | None = None  # vector
    g: Callable | None = None
    H: Callable | None = None


class Discretization:
    """Spaces, face coefficients and dof layout for one (mesh, degrees, params) triple."""

    def __init__(
        self,
        mesh: PolyMesh,
        ell: int,
        params: ModelParams,
        m: int | None = None,
        penalties: PenaltyParams = PenaltyParams(),
        transport: TransportOptions = TransportOptions(),
    ):
        m = ell if m is None else m
        if m > ell + 1:
            raise forms.ParameterError(f"need m <= ell + 1, got m={m}, ell={ell}")
        if params.nel != mesh.n_cells:
            raise forms.ParameterError("parameter arrays do not match the mesh")
        self.mesh, self.ell, self.m = mesh, ell, m
        self.params, self.penalties, self.transport = params, penalties, transport
        self.V = build_space(mesh, ell)
        self.Vv = build_space(mesh, ell, components=2)
        self.Q = build_space(mesh, m)
        self.fc = forms.face_coefficients(mesh, params, penalties, ell, m)
        sizes = (self.Vv.ndofs, self.V.ndofs, self.V.ndofs, self.Q.ndofs)
        starts = np.concatenate([[0], np.cumsum(sizes)])
        self.slices = {name: slice(int(starts[i]), int(starts[i + 1])) for i, name in enumerate(FIELDS)}
        self.ndofs = int(starts[-1])

    def space(self, name: str) -> FESpace:
        return {"u": self.Vv, "p": self.V, "T": self.V, "phi": self.Q}[name]

    def split(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {k: x[s] for k, s in self.slices.items()}

    @cached_property
    def dof_cells(self) -> np.ndarray:
        """Owning cell of every global dof."""
        out = np.empty(self.ndofs, dtype=np.int64)
        for name in FIELDS:
            spc = self.space(name)
            out[self.slices[name]] = (np.arange(spc.ndofs) % spc.ncomp_dofs) // spc.nloc
        return out

    @cached_property
    def dof_permutation(self) -> np.ndarray:
        """Fill-reducing order: all dofs of a cell together, cells by nested dissection."""
        rank = np.empty(self.mesh.n_cells, dtype=np.int64)
        rank[nested_dissection(self.mesh)] = np.arange(self.mesh.n_cells)
        return np.lexsort((np.arange(self.ndofs), rank[self.dof_cells]))


@dataclass(eq=False)
class BlockSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    slices: dict[str, slice] = field(default_factory=dict)
    perm: np.ndarray | None = None  # optional fill-reducing dof order

    def block(self, row: str, col: str) -> sp.csr_matrix:
        return self.matrix[self.slices[row], self.slices[col]]

    def dump(self, path: str | Path) -> None:
        """Write the matrix in MatrixMarket coordinate format."""
        scipy.io.mmwrite(str(path), self.matrix.tocoo())


def _place(blocks: dict[tuple[str, str], sp.spmatrix], disc: Discretization) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for (r, c), B in blocks.items():
        B = B.tocoo()
        rows.append(B.row + disc.slices[r].start)
        cols.append(B.col + disc.slices[c].start)
        vals.append(B.data)
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(disc.ndofs, disc.ndofs)
    )
    return A.tocsr()


def load_vector(space: FESpace, fn: Callable | None, order: int | None = None) -> np.ndarray:
    """``(fn, phi_i)`` for every basis function of ``space``."""
    if fn is None:
        return np.zeros(space.ndofs)
    vd = forms.volume_data(space, order)
    vals = np.asarray(fn(vd.points[..., 0], vd.points[..., 1]), dtype=float)
    if space.components == 1:
        vals = np.broadcast_to(vals, vd.weights.shape)[None]
    else:
        vals = np.moveaxis(np.broadcast_to(vals, vd.weights.shape + (2,)), -1, 0)
    loc = np.einsum("eq,ceq,eqi->cei", vd.weights, vals, vd.phi, optimize=True)
    return loc.reshape(-1)


@dataclass(eq=False)
class LinearPart:
    """Everything except the transport term: matrix and right-hand side."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    blocks: dict[tuple[str, str], sp.csr_matrix]


def assemble_linear_part(disc: Discretization, dirichlet: DirichletData = DirichletData(), sources: Sources = Sources()) -> LinearPart:
    p = disc.params
    AT, bT = forms.assemble_AT(disc.V, p, disc.fc, dirichlet.g_T)
    Ap, bp = forms.assemble_Ap(disc.V, p, disc.fc, dirichlet.g_p)
    Ae, bu = forms.assemble_Ae(disc.Vv, p, disc.fc, dirichlet.g_u)
    B, bphi = forms.assemble_B(disc.Vv, disc.Q, dirichlet.g_u)
    D = forms.assemble_D(disc.Q, disc.fc)
    M = forms.assemble_M(disc.V, disc.Q, p)
    names = ("p", "T", "phi")
    blocks: dict[tuple[str, str], sp.csr_matrix] = {}
    for (r, c), Mrc in M.items():
        blocks[(names[r], names[c])] = Mrc
    blocks[("T", "T")] = blocks[("T", "T")] + AT
    blocks[("p", "p")] = blocks[("p", "p")] + Ap
    blocks[("phi", "phi")] = blocks[("phi", "phi")] + D
    blocks[("u", "u")] = Ae
    blocks[("u", "phi")] = (-B).tocsr()
    blocks[("phi", "u")] = B.T.tocsr()
    rhs = np.zeros(disc.ndofs)
    rhs[disc.slices["u"]] = bu + load_vector(disc.Vv, sources.f)
    rhs[disc.slices["p"]] = bp + load_vector(disc.V, sources.g)
    rhs[disc.slices["T"]] = bT + load_vector(disc.V, sources.H)
    rhs[disc.slices["phi"]] = bphi
    return LinearPart(_place(blocks, disc), rhs, blocks)


def assemble_transport(
    disc: Discretization,
    variant: str,
    p_prev: np.ndarray | None,
    T_prev: np.ndarray | None,
    dirichlet: DirichletData = DirichletData(),
) -> tuple[sp.csr_matrix, np.ndarray]:
    C, bC = forms.assemble_C(
        variant, disc.V, disc.params, p_prev, T_prev, dirichlet.g_T, disc.fc, disc.penalties, disc.transport
    )
    col = "p" if variant == "old" else "T"
    rhs = np.zeros(disc.ndofs)
    rhs[disc.slices["T"]] = bC
    return _place({("T", col): C}, disc), rhs


def assemble_global(
    disc: Discretization,
    variant: str,
    p_prev: np.ndarray | None = None,
    T_prev: np.ndarray | None = None,
    dirichlet: DirichletData = DirichletData(),
    sources: Sources = Sources(),
    linear: LinearPart | None = None,
) -> BlockSystem:
    """Full linearized operator for one fixed-point step."""
    if linear is None:
        linear = assemble_linear_part(disc, dirichlet, sources)
    C, bC = assemble_transport(disc, variant, p_prev, T_prev, dirichlet)
    return BlockSystem((linear.matrix + C).tocsr(), linear.rhs + bC, dict(disc.slices), disc.dof_permutation)


# ---------------------------------------------------------------------------
# solvers


@dataclass(frozen=True)
class SolverOptions:
    method: Literal["direct", "gmres", "auto"] = "auto"
    rtol: float = 1e-12
    # direct solves above rtol are accepted with a warning up to this residual
    fail_rtol: float = 1e-6
    maxiter: int = 2000
    restart: int = 200
    direct_max_cells: int = 3100
    check_residual: bool = True
    # sequences of nearby systems: precondition GMRES with the last LU
    reuse_factorization: bool = True
    reuse_krylov: int = 30

    def __post_init__(self):
        if self.rtol <= 0 or self.fail_rtol < self.rtol or self.maxiter < 1 or self.reuse_krylov < 1:
            raise ValueError("solver tolerances must be positive")


def _residual(A, x, b) -> float:
    r = np.linalg.norm(A @ x - b)
    nb = np.linalg.norm(b)
    if nb > 0:
        return float(r / nb)
    return float(np.linalg.norm(A @ x) / max(spla.norm(A), 1e-300))


class Factorization:
    """Sparse LU of a square matrix, solving in the original dof order.

    With ``perm`` and no pivoting the factorization follows that order
    exactly; otherwise SuperLU picks a COLAMD order with partial pivoting.
    """

    def __init__(self, A: sp.spmatrix, perm: np.ndarray | None = None, pivoting: bool = False):
        A = sp.csr_matrix(A)
        if pivoting or perm is None:
            self.perm = None
            self.lu = spla.splu(A.tocsc(), permc_spec="COLAMD")
        else:
            self.perm = perm
            self.lu = spla.splu(A[perm][:, perm].tocsc(), permc_spec="NATURAL", diag_pivot_thresh=0.0)

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.perm is None:
            return self.lu.solve(b)
        x = np.empty_like(b)
        x[self.perm] = self.lu.solve(b[self.perm])
        return x


def _refine(A, F: Factorization, b, rtol, steps=3):
    x = F.solve(b)
    res = _residual(A, x, b)
    for _ in range(steps):
        if res <= rtol:
            break
        x_new = x + F.solve(b - A @ x)
        res_new = _residual(A, x_new, b)
        if not res_new < res:
            break
        x, res = x_new, res_new
    return x, res


def _direct(A, b, perm, opts: SolverOptions) -> tuple[np.ndarray, Factorization]:
    best = None
    for pivoting in ([False, True] if perm is not None else [True]):
        try:
            F = Factorization(A, perm, pivoting)
        except RuntimeError as exc:
            log.debug("LU failed (pivoting=%s): %s", pivoting, exc)
            continue
        x, res = _refine(A, F, b, opts.rtol)
        if not np.all(np.isfinite(x)):
            continue
        if best is None or res < best[2]:
            best = (x, F, res)
        if res <= opts.rtol or not opts.check_residual:
            break
    if best is None:
        raise SolverError("sparse LU failed")
    if opts.check_residual and best[2] > opts.fail_rtol:
        raise SolverError("direct solve inaccurate", best[2])
    if best[2] > opts.rtol:
        log.warning("direct solve reached relres=%.2e above rtol=%.1e", best[2], opts.rtol)
    log.debug("direct solve: n=%d relres=%.2e", A.shape[0], best[2])
    return best[0], best[1]


def _gmres_ilu(A, b, opts: SolverOptions) -> np.ndarray:
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
    Mop = spla.LinearOperator(A.shape, ilu.solve)
    x, info = spla.gmres(A, b, M=Mop, rtol=opts.rtol, restart=opts.restart, maxiter=opts.maxiter, atol=0.0)
    res = _residual(A, x, b)
    if info != 0 and res > 1e3 * opts.rtol:
        raise SolverError(f"GMRES did not converge (info={info})", res)
    return x


def _unpack(system, rhs):
    if isinstance(system, BlockSystem):
        A, b, perm = system.matrix, system.rhs, system.perm
    else:
        A, b, perm = sp.csr_matrix(system), np.asarray(rhs, dtype=float), None
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square")
    return A.tocsr(), b, perm


def _method(opts: SolverOptions, n_cells) -> str:
    if opts.method != "auto":
        return opts.method
    return "direct" if (n_cells is None or n_cells <= opts.direct_max_cells) else "gmres"


def solve_linear(system: BlockSystem | sp.spmatrix, opts: SolverOptions = SolverOptions(), rhs=None, n_cells: int | None = None) -> np.ndarray:
    """Solve the assembled system; raises SolverError on failure.

    The direct path factorizes in the system's fill-reducing order when one
    is attached, falling back to COLAMD with partial pivoting if that misses
    the tolerance. Up to three steps of iterative refinement follow; the best
    residual reached is accepted (with a warning) when it lies between
    ``rtol`` and ``fail_rtol``; beyond that a SolverError is raised.
    """
    A, b, perm = _unpack(system, rhs)
    if not np.any(b):
        return np.zeros_like(b)
    if _method(opts, n_cells) == "direct":
        return _direct(A, b, perm, opts)[0]
    return _gmres_ilu(A, b, opts)


class SequenceSolver:
    """Solves a sequence of nearby systems (one per fixed-point step).

    After the first factorization, each new system is solved by GMRES
    preconditioned with the most recent LU; when that does not reach the
    tolerance within ``reuse_krylov`` iterations the matrix is refactorized.
    Consecutive failures double the number of systems for which reuse is
    not attempted (up to 64), so wildly changing sequences pay little for it.
    """

    def __init__(self, opts: SolverOptions = SolverOptions(), n_cells: int | None = None):
        self.opts = opts
        self.method = _method(opts, n_cells)
        self.factorization: Factorization | None = None
        self.n_factorizations = 0
        self.n_krylov = 0
        self._skip = 0
        self._backoff = 1

    def _reuse(self, A, b) -> np.ndarray | None:
        F = self.factorization
        Mop = spla.LinearOperator(A.shape, F.solve)
        x, info = spla.gmres(A, b, M=Mop, rtol=self.opts.rtol, atol=0.0, restart=self.opts.reuse_krylov, maxiter=1)
        res = _residual(A, x, b)
        if np.all(np.isfinite(x)) and res <= self.opts.rtol:
            self.n_krylov += 1
            return x
        log.debug("preconditioned GMRES stalled at relres=%.2e; refactorizing", res)
        return None

    def __call__(self, system: BlockSystem | sp.spmatrix, rhs=None) -> np.ndarray:
        A, b, perm = _unpack(system, rhs)
        if not np.any(b):
            return np.zeros_like(b)
        if self.method != "direct":
            return _gmres_ilu(A, b, self.opts)
        if self.opts.reuse_factorization and self.factorization is not None:
            if self._skip > 0:
                self._skip -= 1
            else:
                x = self._reuse(A, b)
                if x is not None:
                    self._backoff = 1
                    return x
                self._skip = self._backoff
                self._backoff = min(2 * self._backoff, 64)
        x, self.factorization = _direct(A, b, perm, self.opts)
        self.n_factorizations += 1
        return x


def inf_sup_proxy(disc: Discretization) -> float:
    """Smallest generalized singular value of the (phi, u) block.

    Computes ``min_phi sup_u b(phi,u) / (|u|_A |phi|)`` with ``D`` added to the
    total-pressure norm: the smallest eigenvalue of
    ``B^T A_e^{-1} B + D`` relative to the phi mass matrix (identity here),
    over mean-zero phi. Constants lie in the kernel of both B and D when the
    whole boundary carries displacement data. Dense; meant for small meshes.
    """
    lin = assemble_linear_part(disc)
    Ae = lin.blocks[("u", "u")].toarray()
    B = lin.blocks[("u", "phi")].toarray()
    D = forms.assemble_D(disc.Q, disc.fc).toarray()
    S = B.T @ np.linalg.solve(Ae, B) + D
    # constant function in the orthonormal basis: sqrt|cell| on each constant mode
    z = np.zeros(disc.Q.ndofs)
    z[:: disc.Q.nloc] = np.sqrt(disc.mesh.cell_areas)
    Z = scipy.linalg.null_space(z[None, :])
    S = Z.T @ S @ Z
    S = 0.5 * (S + S.T)
    return float(np.sqrt(max(np.linalg.eigvalsh(S)[0], 0.0)))
