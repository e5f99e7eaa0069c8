"""Bilinear and linearized transport forms of the four-field WSIP scheme.

Conventions. On an interior face the normal ``n`` points from the owner
(side ``+``) to the neighbor (side ``-``); the scalar jump is
``[a] = (a+ - a-) n`` and the weighted average ``<a> = w+ a+ + w- a-``.
On boundary faces ``[a] = a n`` and ``<a> = a``.

Every ``assemble_*`` function returns a ``scipy.sparse.csr_matrix`` whose rows
and columns are the dofs of the relevant space (see ``FESpace.dofs``); the
system module shifts them into the global block layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Literal

import numpy as np
import scipy.sparse as sp

from .fespace import FESpace
from .mesh import PolyMesh

Variant = Literal["old", "vol", "plain", "stab"]
VARIANTS: tuple[str, ...] = ("old", "vol", "plain", "stab")


class ParameterError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters


def _tensor_field(value, nel: int) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.broadcast_to(a * np.eye(2), (nel, 2, 2)).copy()
    if a.shape == (2, 2):
        return np.broadcast_to(a, (nel, 2, 2)).copy()
    if a.shape == (nel,):
        return a[:, None, None] * np.eye(2)
    if a.shape == (nel, 2, 2):
        return a.copy()
    raise ParameterError(f"cannot interpret tensor of shape {a.shape}")


def _scalar_field(value, nel: int) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    return np.broadcast_to(a, (nel,)).copy()


SCALARS = ("a0", "b0", "c0", "alpha", "beta", "cf", "mu", "lam")

# coefficients of the convergence test
BASE_PARAMS = dict(a0=0.02, b0=0.01, c0=0.03, alpha=1.0, beta=0.8, cf=1.0, mu=1.0, lam=5.0, K=0.2, Theta=0.05)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Per-element physical coefficients; tensors have shape (nel, 2, 2)."""

    a0: np.ndarray
    b0: np.ndarray
    c0: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    cf: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    K: np.ndarray
    Theta: np.ndarray
    porosity: float | None = None

    @classmethod
    def uniform(cls, nel: int, validate: bool = True, porosity: float | None = None, **values) -> "ModelParams":
        """Constant coefficients; K and Theta may be scalars (times identity)."""
        merged = {**BASE_PARAMS, **values}
        unknown = set(merged) - set(SCALARS) - {"K", "Theta"}
        if unknown:
            raise ParameterError(f"unknown parameters {sorted(unknown)}")
        kw = {k: _scalar_field(merged[k], nel) for k in SCALARS}
        kw["K"] = _tensor_field(merged["K"], nel)
        kw["Theta"] = _tensor_field(merged["Theta"], nel)
        out = cls(porosity=porosity, **kw)
        if validate:
            out.validate()
        return out

    @property
    def nel(self) -> int:
        return len(self.mu)

    def with_(self, validate: bool = True, **values) -> "ModelParams":
        kw = {}
        for k, v in values.items():
            kw[k] = _tensor_field(v, self.nel) if k in ("K", "Theta") else _scalar_field(v, self.nel)
        out = replace(self, **kw)
        if validate:
            out.validate()
        return out

    def validate(self) -> None:
        tol = 1e-14
        for name in ("K", "Theta"):
            A = getattr(self, name)
            if np.max(np.abs(A - A.transpose(0, 2, 1))) > tol * max(1.0, np.abs(A).max()):
                raise ParameterError(f"{name} must be symmetric")
        ek = np.linalg.eigvalsh(self.K)
        if ek.min() <= 0:
            raise ParameterError("K must be positive definite")
        if np.linalg.eigvalsh(self.Theta).min() < -tol:
            raise ParameterError("Theta must be positive semidefinite")
        if np.any(self.mu <= 0):
            raise ParameterError("mu must be positive")
        if np.any(self.cf < 0):
            raise ParameterError("c_f must be nonnegative")
        lo = 0.0 if self.porosity is None else self.porosity
        if np.any(self.alpha <= lo) or np.any(self.alpha > 1):
            raise ParameterError("alpha must lie in (porosity, 1]")
        if np.any(self.beta <= 0):
            raise ParameterError("beta must be positive")
        if np.any(self.lam <= 0):
            raise ParameterError("lambda must be positive (M contains 1/lambda)")
        if np.any(self.b0 < 0) or np.any(self.a0 < self.b0) or np.any(self.c0 < self.b0):
            raise ParameterError("need a0, c0 >= b0 >= 0")


@dataclass(frozen=True)
class PenaltyParams:
    alpha1: float = 10.0
    alpha2: float = 10.0
    alpha3: float = 10.0
    alpha4: float = 10.0
    varpi: float = 1.0

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3, self.alpha4, self.varpi) <= 0:
            raise ParameterError("penalty parameters must be positive")


def negative_part(x):
    """(|x| - x) / 2."""
    return 0.5 * (np.abs(x) - x)


def wsip_weights(dp, dm):
    """Weights ``w+ = d-/(d+ + d-)``, ``w- = d+/(d+ + d-)`` and harmonic ``gamma``.

    Degenerate faces (``d+ + d- = 0``) get ``w = 1/2`` and ``gamma = 0``.
    """
    dp = np.asarray(dp, dtype=float)
    dm = np.asarray(dm, dtype=float)
    if np.any(dp < 0) or np.any(dm < 0):
        raise ParameterError("negative normal diffusivity (tensor not PSD)")
    s = dp + dm
    zero = s == 0
    safe = np.where(zero, 1.0, s)
    wp = np.where(zero, 0.5, dm / safe)
    wm = np.where(zero, 0.5, dp / safe)
    gamma = np.where(zero, 0.0, dp * dm / safe)
    return wp, wm, gamma


@dataclass(frozen=True, eq=False)
class FaceCoefficients:
    """Per-face WSIP data. ``omega_*[:, 0]`` is the owner weight.

    Boundary faces carry ``omega = (1, 0)``.
    """

    omega_T: np.ndarray
    omega_K: np.ndarray
    omega_mu: np.ndarray
    gamma_T: np.ndarray
    gamma_K: np.ndarray
    gamma_mu: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray
    zeta: np.ndarray
    rho: np.ndarray


def face_coefficients(mesh: PolyMesh, params: ModelParams, penalties: PenaltyParams, ell: int, m: int) -> FaceCoefficients:
    nf = mesh.n_faces
    n = mesh.normals
    own, nbr = mesh.face_cells.T
    inner = nbr >= 0
    nb = np.where(inner, nbr, own)
    h = mesh.cell_diameters
    hmax_inv = np.maximum(ell**2 / h[own], ell**2 / h[nb])

    def normal_diff(A):
        return np.einsum("fa,fab,fb->f", n, A[own], n, optimize=True), np.einsum("fa,fab,fb->f", n, A[nb], n, optimize=True)

    out = {}
    for key, A, mu in (("T", params.Theta, None), ("K", params.K, None), ("mu", None, params.mu)):
        if A is not None:
            dp, dm = normal_diff(A)
            bnd_scale = np.linalg.eigvalsh(A[own])[:, -1]
        else:
            dp, dm = mu[own], mu[nb]
            bnd_scale = mu[own]
        wp, wm, g = wsip_weights(dp, dm)
        wp = np.where(inner, wp, 1.0)
        wm = np.where(inner, wm, 0.0)
        g = np.where(inner, g, 0.0)
        out["omega_" + key] = np.column_stack([wp, wm])
        out["gamma_" + key] = g
        out["_bnd_" + key] = bnd_scale
    bl = ell**2 / h[own]
    out["sigma"] = penalties.alpha1 * np.where(inner, out["gamma_T"] * hmax_inv, out["_bnd_T"] * bl)
    out["xi"] = penalties.alpha2 * np.where(inner, out["gamma_K"] * hmax_inv, out["_bnd_K"] * bl)
    out["zeta"] = penalties.alpha3 * np.where(inner, out["gamma_mu"] * hmax_inv, out["_bnd_mu"] * bl)
    out["rho"] = penalties.alpha4 * np.where(inner, np.minimum(h[own], h[nb]) / m, h[own] / m)
    for k in [k for k in out if k.startswith("_")]:
        del out[k]
    assert all(len(v) == nf for v in out.values())
    return FaceCoefficients(**out)


# ---------------------------------------------------------------------------
# Dirichlet data


VectorFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DirichletData:
    """Boundary traces as pointwise callables ``g(x, y)``; ``None`` means zero."""

    g_u: VectorFn | None = None
    g_p: VectorFn | None = None
    g_T: VectorFn | None = None

    @staticmethod
    def eval(fn, pts: np.ndarray, vector: bool = False) -> np.ndarray:
        shape = pts.shape[:-1] + ((2,) if vector else ())
        if fn is None:
            return np.zeros(shape)
        out = np.broadcast_to(np.asarray(fn(pts[..., 0], pts[..., 1]), dtype=float), shape)
        if not np.all(np.isfinite(out)):
            raise ParameterError("non-finite Dirichlet data")
        return out


# ---------------------------------------------------------------------------
# quadrature traces


@dataclass(frozen=True, eq=False)
class VolumeData:
    elems: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    phi: np.ndarray
    grad: np.ndarray


@dataclass(frozen=True, eq=False)
class FaceData:
    """Traces of a scalar basis on a set of faces (interior or boundary)."""

    faces: np.ndarray
    cells: tuple[np.ndarray, ...]  # owner (and neighbor) cell per face
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    phi: tuple[np.ndarray, ...]
    grad: tuple[np.ndarray, ...]


def default_order(space: FESpace) -> int:
    return 3 * space.degree + 2


def volume_data(space: FESpace, order: int | None = None) -> VolumeData:
    order = default_order(space) if order is None else order
    key = ("voldata", order)
    cache = space.__dict__.setdefault("_data", {})
    if key not in cache:
        q = space.volume_quadrature(order)
        elems = np.arange(space.nel)
        phi, grad = space.basis(elems, q.points, deriv=1)
        cache[key] = VolumeData(elems, q.points, q.weights, phi, grad)
    return cache[key]


def face_data(space: FESpace, kind: str, order: int | None = None) -> FaceData:
    order = default_order(space) if order is None else order
    key = ("facedata", kind, order)
    cache = space.__dict__.setdefault("_data", {})
    if key not in cache:
        mesh = space.mesh
        faces = mesh.interior_faces if kind == "interior" else mesh.boundary_faces
        q = space.face_quadrature(order)
        pts = q.points[faces]
        sides = (0, 1) if kind == "interior" else (0,)
        cells = tuple(mesh.face_cells[faces, s] for s in sides)
        phis, grads = [], []
        for c in cells:
            phi, grad = space.basis(c, pts, deriv=1)
            phis.append(phi)
            grads.append(grad)
        cache[key] = FaceData(faces, cells, pts, q.weights[faces], mesh.normals[faces], tuple(phis), tuple(grads))
    return cache[key]


# ---------------------------------------------------------------------------
# triplet accumulation


class Triplets:
    def __init__(self, shape):
        self.shape = shape
        self.rows, self.cols, self.vals = [], [], []

    def add(self, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray) -> None:
        """Add local blocks: rows (n, a), cols (n, b), vals (n, a, b)."""
        r = np.broadcast_to(rows[:, :, None], vals.shape)
        c = np.broadcast_to(cols[:, None, :], vals.shape)
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(vals.ravel())

    def tocsr(self) -> sp.csr_matrix:
        if not self.vals:
            return sp.csr_matrix(self.shape)
        A = sp.coo_matrix(
            (np.concatenate(self.vals), (np.concatenate(self.rows), np.concatenate(self.cols))), shape=self.shape
        )
        return A.tocsr()


def _symmetric(A: sp.csr_matrix) -> sp.csr_matrix:
    """Drop the roundoff asymmetry of a symmetric form's assembly."""
    return (0.5 * (A + A.T)).tocsr()


def _vector_dofs(space: FESpace, elems) -> np.ndarray:
    return np.concatenate([space.dofs(elems, c) for c in range(space.components)], axis=-1)


# ---------------------------------------------------------------------------
# symmetric interior penalty core


def _ip_faces(trip, rhs, fd_i, fd_b, flux_i, jump_i, flux_b, jump_b, w_i, pen_i, pen_b, dofs, g_b):
    """Face terms of a WSIP form, shared by scalar and vector problems.

    ``flux_*`` hold (weighted) normal fluxes ``w (A grad phi) n`` and ``jump_*``
    the signed traces, each shaped (nf, nq, nb, dv).
    """
    for r in range(2 if fd_i is not None else 0):
        for s in range(2):
            vals = (
                -np.einsum("fq,fqjd,fqid->fij", fd_i.weights, flux_i[s], jump_i[r], optimize=True)
                - np.einsum("fq,fqjd,fqid->fij", fd_i.weights, jump_i[s], flux_i[r], optimize=True)
                + np.einsum("fq,f,fqjd,fqid->fij", fd_i.weights, pen_i, jump_i[s], jump_i[r], optimize=True)
            )
            trip.add(dofs(fd_i.cells[r]), dofs(fd_i.cells[s]), vals)
    if fd_b is None or len(fd_b.faces) == 0:
        return
    w = fd_b.weights
    vals = (
        -np.einsum("fq,fqjd,fqid->fij", w, flux_b, jump_b, optimize=True)
        - np.einsum("fq,fqjd,fqid->fij", w, jump_b, flux_b, optimize=True)
        + np.einsum("fq,f,fqjd,fqid->fij", w, pen_b, jump_b, jump_b, optimize=True)
    )
    trip.add(dofs(fd_b.cells[0]), dofs(fd_b.cells[0]), vals)
    if g_b is not None:
        loc = -np.einsum("fq,fqd,fqid->fi", w, g_b, flux_b, optimize=True) + np.einsum("fq,f,fqd,fqid->fi", w, pen_b, g_b, jump_b, optimize=True)
        np.add.at(rhs, dofs(fd_b.cells[0]), loc)


def _assemble_scalar_diffusion(space, D, omega, pen, g, order):
    mesh = space.mesh
    n = space.ndofs
    trip = Triplets((n, n))
    rhs = np.zeros(n)
    vd = volume_data(space, order)
    loc = np.einsum("eq,eqia,eab,eqjb->eij", vd.weights, vd.grad, D, vd.grad, optimize=True)
    trip.add(space.dofs(vd.elems), space.dofs(vd.elems), loc)

    fi = face_data(space, "interior", order)
    fb = face_data(space, "boundary", order)
    flux_i, jump_i = [], []
    for s, sign in ((0, 1.0), (1, -1.0)):
        Dn = np.einsum("fab,fb->fa", D[fi.cells[s]], fi.normals)
        fl = omega[fi.faces, s][:, None, None] * np.einsum("fqia,fa->fqi", fi.grad[s], Dn)
        flux_i.append(fl[..., None])
        jump_i.append(sign * fi.phi[s][..., None])
    Dn = np.einsum("fab,fb->fa", D[fb.cells[0]], fb.normals)
    flux_b = np.einsum("fqia,fa->fqi", fb.grad[0], Dn)[..., None]
    jump_b = fb.phi[0][..., None]
    g_b = None if g is None else DirichletData.eval(g, fb.points)[..., None]
    _ip_faces(trip, rhs, fi, fb, flux_i, jump_i, flux_b, jump_b, None, pen[fi.faces], pen[fb.faces], space.dofs, g_b)
    return _symmetric(trip.tocsr()), rhs


def assemble_AT(space: FESpace, params: ModelParams, fc: FaceCoefficients, g_T=None, order=None):
    """Thermal diffusion form with Theta-weighted averages and penalty sigma."""
    return _assemble_scalar_diffusion(space, params.Theta, fc.omega_T, fc.sigma, g_T, order)


def assemble_Ap(space: FESpace, params: ModelParams, fc: FaceCoefficients, g_p=None, order=None):
    """Darcy form with K-weighted averages and penalty xi."""
    return _assemble_scalar_diffusion(space, params.K, fc.omega_K, fc.xi, g_p, order)


def _strain_basis(grad: np.ndarray) -> np.ndarray:
    """Symmetric gradients of the vector basis (phi_i e_c), shape (..., 2*nloc, 2, 2)."""
    shp = grad.shape[:-2]
    nloc = grad.shape[-2]
    E = np.zeros(shp + (2, nloc, 2, 2))
    for c in range(2):
        for d in range(2):
            E[..., c, :, c, d] += 0.5 * grad[..., d]
            E[..., c, :, d, c] += 0.5 * grad[..., d]
    return E.reshape(shp + (2 * nloc, 2, 2))


def _vector_values(phi: np.ndarray) -> np.ndarray:
    """Vector basis values (phi_i e_c), shape (..., 2*nloc, 2)."""
    shp = phi.shape[:-1]
    nloc = phi.shape[-1]
    V = np.zeros(shp + (2, nloc, 2))
    V[..., 0, :, 0] = phi
    V[..., 1, :, 1] = phi
    return V.reshape(shp + (2 * nloc, 2))


def assemble_Ae(vspace: FESpace, params: ModelParams, fc: FaceCoefficients, g_u=None, order=None):
    """Elasticity form (2 mu eps(u), eps(v)) with mu-weighted averages and penalty zeta."""
    if vspace.components != 2:
        raise ValueError("assemble_Ae needs a vector space")
    n = vspace.ndofs
    trip = Triplets((n, n))
    rhs = np.zeros(n)
    mu = params.mu
    dofs = lambda e: _vector_dofs(vspace, e)  # noqa: E731
    vd = volume_data(vspace, order)
    E = _strain_basis(vd.grad)
    loc = np.einsum("eq,e,eqiab,eqjab->eij", vd.weights, 2.0 * mu, E, E, optimize=True)
    trip.add(dofs(vd.elems), dofs(vd.elems), loc)

    fi = face_data(vspace, "interior", order)
    fb = face_data(vspace, "boundary", order)
    flux_i, jump_i = [], []
    for s, sign in ((0, 1.0), (1, -1.0)):
        En = np.einsum("fqiab,fb->fqia", _strain_basis(fi.grad[s]), fi.normals)
        flux_i.append((fc.omega_mu[fi.faces, s] * 2.0 * mu[fi.cells[s]])[:, None, None, None] * En)
        jump_i.append(sign * _vector_values(fi.phi[s]))
    En = np.einsum("fqiab,fb->fqia", _strain_basis(fb.grad[0]), fb.normals)
    flux_b = (2.0 * mu[fb.cells[0]])[:, None, None, None] * En
    jump_b = _vector_values(fb.phi[0])
    g_b = None if g_u is None else DirichletData.eval(g_u, fb.points, vector=True)
    _ip_faces(trip, rhs, fi, fb, flux_i, jump_i, flux_b, jump_b, None, fc.zeta[fi.faces], fc.zeta[fb.faces], dofs, g_b)
    return _symmetric(trip.tocsr()), rhs


def assemble_B(vspace: FESpace, qspace: FESpace, g_u=None, order=None):
    """Matrix ``B[v, phi] = B_h(phi, v) = -(phi, div v) + sum_F int {phi} [v]_n``.

    Also returns the lifting vector over ``qspace`` dofs,
    ``int_{boundary} psi (g_u . n)``, which belongs to the total-pressure rows.
    """
    if vspace.components != 2 or qspace.components != 1:
        raise ValueError("assemble_B needs (vector, scalar) spaces")
    if qspace.degree > vspace.degree + 1:
        raise ParameterError(f"total-pressure degree {qspace.degree} exceeds {vspace.degree}+1")
    order = max(default_order(vspace), default_order(qspace)) if order is None else order
    trip = Triplets((vspace.ndofs, qspace.ndofs))
    vdofs = lambda e: _vector_dofs(vspace, e)  # noqa: E731
    vv = volume_data(vspace, order)
    vq = volume_data(qspace, order)
    div = np.concatenate([vv.grad[..., 0], vv.grad[..., 1]], axis=-1)  # (e, q, 2nloc)
    loc = -np.einsum("eq,eqi,eqj->eij", vv.weights, div, vq.phi, optimize=True)
    trip.add(vdofs(vv.elems), qspace.dofs(vq.elems), loc)

    fiv, fiq = face_data(vspace, "interior", order), face_data(qspace, "interior", order)
    for r, sign in ((0, 1.0), (1, -1.0)):
        vn = sign * np.einsum("fqic,fc->fqi", _vector_values(fiv.phi[r]), fiv.normals)
        for s in range(2):
            vals = 0.5 * np.einsum("fq,fqi,fqj->fij", fiv.weights, vn, fiq.phi[s], optimize=True)
            trip.add(vdofs(fiv.cells[r]), qspace.dofs(fiq.cells[s]), vals)
    fbv, fbq = face_data(vspace, "boundary", order), face_data(qspace, "boundary", order)
    vn = np.einsum("fqic,fc->fqi", _vector_values(fbv.phi[0]), fbv.normals)
    vals = np.einsum("fq,fqi,fqj->fij", fbv.weights, vn, fbq.phi[0], optimize=True)
    trip.add(vdofs(fbv.cells[0]), qspace.dofs(fbq.cells[0]), vals)

    lift = np.zeros(qspace.ndofs)
    if g_u is not None:
        gn = np.einsum("fqc,fc->fq", DirichletData.eval(g_u, fbq.points, vector=True), fbq.normals)
        np.add.at(lift, qspace.dofs(fbq.cells[0]), np.einsum("fq,fq,fqj->fj", fbq.weights, gn, fbq.phi[0], optimize=True))
    return trip.tocsr(), lift


def assemble_D(qspace: FESpace, fc: FaceCoefficients, order=None):
    """Interior-face jump penalty ``sum_{F_I} int rho [phi].[psi]``."""
    n = qspace.ndofs
    trip = Triplets((n, n))
    fi = face_data(qspace, "interior", order)
    rho = fc.rho[fi.faces]
    signs = (1.0, -1.0)
    for r in range(2):
        for s in range(2):
            vals = signs[r] * signs[s] * np.einsum("fq,f,fqi,fqj->fij", fi.weights, rho, fi.phi[r], fi.phi[s], optimize=True)
            trip.add(qspace.dofs(fi.cells[r]), qspace.dofs(fi.cells[s]), vals)
    return _symmetric(trip.tocsr())


def mixed_mass(space_a: FESpace, space_b: FESpace, order=None) -> np.ndarray:
    """Per-element matrices ``int phi^a_i phi^b_j``, shape (nel, na, nb)."""
    order = space_a.degree + space_b.degree + 2 if order is None else order
    q = space_a.volume_quadrature(order)
    e = np.arange(space_a.nel)
    pa = space_a.basis(e, q.points)[0]
    pb = space_b.basis(e, q.points)[0]
    return np.einsum("eq,eqi,eqj->eij", q.weights, pa, pb, optimize=True)


def mass_coefficients(params: ModelParams) -> np.ndarray:
    """Per-element 3x3 coefficient matrix of M over (p, T, phi)."""
    if np.any(params.lam <= 0):
        raise ParameterError("lambda must be positive")
    il = 1.0 / params.lam
    a, b = params.alpha, params.beta
    C = np.empty((params.nel, 3, 3))
    C[:, 0, 0] = params.c0 + a * a * il
    C[:, 0, 1] = C[:, 1, 0] = -params.b0 + a * b * il
    C[:, 1, 1] = params.a0 + b * b * il
    C[:, 0, 2] = C[:, 2, 0] = a * il
    C[:, 1, 2] = C[:, 2, 1] = b * il
    C[:, 2, 2] = il
    return C


def assemble_M(space: FESpace, qspace: FESpace, params: ModelParams) -> dict[tuple[int, int], sp.csr_matrix]:
    """Blocks of M keyed by (row, col) in {0: p, 1: T, 2: phi}."""
    C = mass_coefficients(params)
    spaces = (space, space, qspace)
    out = {}
    e = np.arange(space.nel)
    for r in range(3):
        for c in range(3):
            Mloc = mixed_mass(spaces[r], spaces[c])
            trip = Triplets((spaces[r].ndofs, spaces[c].ndofs))
            trip.add(spaces[r].dofs(e), spaces[c].dofs(e), C[:, r, c, None, None] * Mloc)
            out[(r, c)] = trip.tocsr()
    return out


# ---------------------------------------------------------------------------
# transport


@dataclass(frozen=True)
class TransportOptions:
    """Switches for the transport discretization.

    ``upwind_faces="all"`` assembles the upwind jump on every face together
    with the ``-(eta.n)/2 T S`` boundary term; algebraically this equals the
    default interior upwind plus inflow term.
    ``average="weighted"`` uses K-weighted face averages of eta instead of
    arithmetic ones.
    """

    upwind_faces: Literal["interior", "all"] = "interior"
    average: Literal["arithmetic", "weighted"] = "arithmetic"


def eta_at(space: FESpace, params: ModelParams, p: np.ndarray, elems, pts) -> np.ndarray:
    """Darcy velocity ``-c_f K grad p`` at per-element points, shape (n, q, 2)."""
    _, gp = space.field_at_quadrature(p, elems, pts, deriv=1)
    A = params.cf[elems][:, None, None] * params.K[elems]
    return -np.einsum("nab,nqb->nqa", A, gp)


def _face_eta(space, params, p, fd, fc, options):
    e0 = eta_at(space, params, p, fd.cells[0], fd.points)
    e1 = eta_at(space, params, p, fd.cells[1], fd.points)
    if options.average == "weighted":
        w = fc.omega_K[fd.faces]
        return w[:, 0, None, None] * e0 + w[:, 1, None, None] * e1
    return 0.5 * (e0 + e1)


def assemble_C(
    variant: str,
    space: FESpace,
    params: ModelParams,
    p_prev: np.ndarray | None,
    T_prev: np.ndarray | None = None,
    g_T=None,
    fc: FaceCoefficients | None = None,
    penalties: PenaltyParams = PenaltyParams(),
    options: TransportOptions = TransportOptions(),
    order=None,
):
    """Linearized transport matrix and RHS contribution for the T rows.

    For ``old`` the matrix acts on the pressure dofs (T-row, p-column block);
    otherwise on the temperature dofs. ``p_prev``/``T_prev`` of ``None`` mean
    the zero field (first iterate).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown transport variant {variant!r}")
    n = space.ndofs
    trip = Triplets((n, n))
    rhs = np.zeros(n)
    vd = volume_data(space, order)
    e = vd.elems
    if variant == "old":
        if T_prev is None:
            return trip.tocsr(), rhs
        _, gT = space.field_at_quadrature(T_prev, e, vd.points, deriv=1)
        A = params.cf[:, None, None] * params.K
        # -(c_f K grad phi_j) . grad T_prev
        coef = -np.einsum("eab,eqjb,eqa->eqj", A, vd.grad, gT, optimize=True)
        loc = np.einsum("eq,eqj,eqi->eij", vd.weights, coef, vd.phi, optimize=True)
        trip.add(space.dofs(e), space.dofs(e), loc)
        return trip.tocsr(), rhs
    if p_prev is None:
        return trip.tocsr(), rhs

    eta = eta_at(space, params, p_prev, e, vd.points)
    loc = np.einsum("eq,eqa,eqja,eqi->eij", vd.weights, eta, vd.grad, vd.phi, optimize=True)
    trip.add(space.dofs(e), space.dofs(e), loc)
    if variant == "vol":
        return trip.tocsr(), rhs

    fi = face_data(space, "interior", order)
    if fc is None and options.average == "weighted":
        raise ValueError("weighted transport averages need face coefficients")
    eta_f = _face_eta(space, params, p_prev, fi, fc, options)
    etan = np.einsum("fqa,fa->fq", eta_f, fi.normals)
    signs = (1.0, -1.0)
    for r in range(2):
        for s in range(2):
            # -({eta}.[T]) {S}
            vals = -0.5 * signs[s] * np.einsum("fq,fq,fqj,fqi->fij", fi.weights, etan, fi.phi[s], fi.phi[r], optimize=True)
            if variant == "stab":
                up = penalties.varpi * 0.5 * np.abs(etan)
                vals = vals + signs[r] * signs[s] * np.einsum("fq,fq,fqj,fqi->fij", fi.weights, up, fi.phi[s], fi.phi[r], optimize=True)
            trip.add(space.dofs(fi.cells[r]), space.dofs(fi.cells[s]), vals)
    if variant == "plain":
        return trip.tocsr(), rhs

    fb = face_data(space, "boundary", order)
    eb = eta_at(space, params, p_prev, fb.cells[0], fb.points)
    etan_b = np.einsum("fqa,fa->fq", eb, fb.normals)
    if options.upwind_faces == "all":
        # upwind on boundary faces plus the -(eta.n)/2 T S term
        coef = penalties.varpi * 0.5 * np.abs(etan_b) - 0.5 * etan_b
    else:
        coef = negative_part(etan_b)
    vals = np.einsum("fq,fq,fqj,fqi->fij", fb.weights, coef, fb.phi[0], fb.phi[0], optimize=True)
    dofs_b = space.dofs(fb.cells[0])
    trip.add(dofs_b, dofs_b, vals)
    if g_T is not None:
        g = DirichletData.eval(g_T, fb.points)
        np.add.at(rhs, dofs_b, np.einsum("fq,fq,fq,fqi->fi", fb.weights, coef, g, fb.phi[0], optimize=True))
    return trip.tocsr(), rhs


def upwind_matrix(space, params, p, penalties=PenaltyParams(), order=None):
    """Matrix of ``s_uw(., p, .)`` alone."""
    fi = face_data(space, "interior", order)
    eta_f = _face_eta(space, params, p, fi, None, TransportOptions())
    up = penalties.varpi * 0.5 * np.abs(np.einsum("fqa,fa->fq", eta_f, fi.normals))
    trip = Triplets((space.ndofs, space.ndofs))
    signs = (1.0, -1.0)
    for r in range(2):
        for s in range(2):
            vals = signs[r] * signs[s] * np.einsum("fq,fq,fqj,fqi->fij", fi.weights, up, fi.phi[s], fi.phi[r], optimize=True)
            trip.add(space.dofs(fi.cells[r]), space.dofs(fi.cells[s]), vals)
    return trip.tocsr()


def inflow_matrix(space, params, p, order=None):
    """Matrix of ``s_inflow(., p, .)`` alone."""
    fb = face_data(space, "boundary", order)
    eb = eta_at(space, params, p, fb.cells[0], fb.points)
    coef = negative_part(np.einsum("fqa,fa->fq", eb, fb.normals))
    trip = Triplets((space.ndofs, space.ndofs))
    d = space.dofs(fb.cells[0])
    trip.add(d, d, np.einsum("fq,fq,fqj,fqi->fij", fb.weights, coef, fb.phi[0], fb.phi[0], optimize=True))
    return trip.tocsr()


# ---------------------------------------------------------------------------
# pointwise form evaluation (arguments need not lie in a discrete space)

# A field callable maps (elems (n,), pts (n, q, 2)) to a dict with keys
# among "value", "grad", "div".
FieldFn = Callable[[np.ndarray, np.ndarray], dict]


def discrete_field(space: FESpace, coeffs: np.ndarray) -> FieldFn:
    def f(elems, pts):
        vals, grads = space.field_at_quadrature(coeffs, elems, pts, deriv=1)
        out = {"value": vals, "grad": grads}
        if space.components == 2:
            out["div"] = grads[..., 0, 0] + grads[..., 1, 1]
        return out

    return f


def square_field(space: FESpace, coeffs: np.ndarray) -> FieldFn:
    """The broken field T**2 for T in a scalar space."""

    def f(elems, pts):
        v, g = space.field_at_quadrature(coeffs, elems, pts, deriv=1)
        return {"value": v * v, "grad": 2.0 * v[..., None] * g}

    return f


def darcy_field(space: FESpace, params: ModelParams, p: np.ndarray) -> FieldFn:
    """eta = -c_f K grad_h p with its broken divergence."""

    def f(elems, pts):
        _, g, H = space.field_at_quadrature(p, elems, pts, deriv=2)
        A = params.cf[elems][:, None, None] * params.K[elems]
        return {
            "value": -np.einsum("nab,nqb->nqa", A, g),
            "div": -np.einsum("nab,nqab->nq", A, H),
        }

    return f


def _volume_points(mesh, order):
    from .fespace import mesh_element_quadrature

    q = mesh_element_quadrature(mesh, order)
    return np.arange(mesh.n_cells), q.points, q.weights


def _face_points(mesh, order):
    from .fespace import mesh_face_quadrature

    return mesh_face_quadrature(mesh, order)


def evaluate_B(mesh: PolyMesh, phi: FieldFn, v: FieldFn, order: int) -> float:
    """B_h(phi, v) = -(phi, div_h v) + sum_F int {phi} [v]_n."""
    e, pts, w = _volume_points(mesh, order)
    total = -np.sum(w * phi(e, pts)["value"] * v(e, pts)["div"])
    fq = _face_points(mesh, order)
    fi, fb = mesh.interior_faces, mesh.boundary_faces
    own, nbr = mesh.face_cells[fi, 0], mesh.face_cells[fi, 1]
    p_avg = 0.5 * (phi(own, fq.points[fi])["value"] + phi(nbr, fq.points[fi])["value"])
    jump = v(own, fq.points[fi])["value"] - v(nbr, fq.points[fi])["value"]
    vn = np.einsum("fqa,fa->fq", jump, mesh.normals[fi])
    total += np.sum(fq.weights[fi] * p_avg * vn)
    ob = mesh.face_cells[fb, 0]
    vb = np.einsum("fqa,fa->fq", v(ob, fq.points[fb])["value"], mesh.normals[fb])
    total += np.sum(fq.weights[fb] * phi(ob, fq.points[fb])["value"] * vb)
    return float(total)


def evaluate_transport_identity(mesh: PolyMesh, eta: FieldFn, T2: FieldFn, order: int) -> float:
    """-1/2 (div_h eta, T2) + 1/2 sum_F int [eta]_n {T2} over all faces."""
    e, pts, w = _volume_points(mesh, order)
    total = -0.5 * np.sum(w * eta(e, pts)["div"] * T2(e, pts)["value"])
    fq = _face_points(mesh, order)
    fi, fb = mesh.interior_faces, mesh.boundary_faces
    own, nbr = mesh.face_cells[fi, 0], mesh.face_cells[fi, 1]
    jn = np.einsum("fqa,fa->fq", eta(own, fq.points[fi])["value"] - eta(nbr, fq.points[fi])["value"], mesh.normals[fi])
    avg = 0.5 * (T2(own, fq.points[fi])["value"] + T2(nbr, fq.points[fi])["value"])
    total += 0.5 * np.sum(fq.weights[fi] * jn * avg)
    ob = mesh.face_cells[fb, 0]
    jb = np.einsum("fqa,fa->fq", eta(ob, fq.points[fb])["value"], mesh.normals[fb])
    total += 0.5 * np.sum(fq.weights[fb] * jb * T2(ob, fq.points[fb])["value"])
    return float(total)


def evaluate_upwind(mesh: PolyMesh, eta: FieldFn, T: FieldFn, order: int, varpi: float = 1.0) -> float:
    """sum_{F_I} int varpi |{eta}.n| / 2 [T]^2."""
    fq = _face_points(mesh, order)
    fi = mesh.interior_faces
    own, nbr = mesh.face_cells[fi, 0], mesh.face_cells[fi, 1]
    x = fq.points[fi]
    en = np.einsum("fqa,fa->fq", 0.5 * (eta(own, x)["value"] + eta(nbr, x)["value"]), mesh.normals[fi])
    jt = T(own, x)["value"] - T(nbr, x)["value"]
    return float(np.sum(fq.weights[fi] * varpi * 0.5 * np.abs(en) * jt * jt))


def evaluate_inflow(mesh: PolyMesh, eta: FieldFn, T: FieldFn, order: int) -> float:
    """sum_{F_B} int (eta.n)^- T^2."""
    fq = _face_points(mesh, order)
    fb = mesh.boundary_faces
    ob = mesh.face_cells[fb, 0]
    x = fq.points[fb]
    en = np.einsum("fqa,fa->fq", eta(ob, x)["value"], mesh.normals[fb])
    t = T(ob, x)["value"]
    return float(np.sum(fq.weights[fb] * negative_part(en) * t * t))


def evaluate_form(matrix: sp.spmatrix, trial: np.ndarray, test: np.ndarray) -> float:
    """Value of an assembled bilinear form: ``test^T A trial``."""
    return float(test @ (matrix @ trial))
