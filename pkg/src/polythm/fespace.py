"""Broken polynomial spaces with element-wise orthonormal modal bases."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .mesh import PolyMesh
from .quadrature import QuadratureRule, gauss_legendre_01, polygon_rule


class SpaceError(ValueError):
    pass


def monomial_exponents(degree: int) -> np.ndarray:
    """Exponents (a, b) of x^a y^b, total degree <= degree, graded order."""
    return np.array([(d - j, j) for d in range(degree + 1) for j in range(d + 1)], dtype=np.int64)


def local_dim(degree: int) -> int:
    return (degree + 1) * (degree + 2) // 2


@dataclass(frozen=True)
class ElementQuadrature:
    """Padded element rules: points (nel, nq, 2), weights (nel, nq).

    Padding entries carry zero weight and sit at the cell centroid.
    """

    points: np.ndarray
    weights: np.ndarray
    order: int


@dataclass(frozen=True)
class FaceQuadrature:
    points: np.ndarray  # (nf, nq, 2)
    weights: np.ndarray  # (nf, nq)
    order: int


def element_quadrature(mesh: PolyMesh, cell: int, order: int) -> QuadratureRule:
    """Centroid-fan rule on one cell, exact to ``order``."""
    if order < 0:
        raise ValueError("order must be >= 0")
    return polygon_rule(mesh.cell_xy(cell), order, mesh.cell_centroids[cell])


def face_quadrature(mesh: PolyMesh, face: int, order: int) -> QuadratureRule:
    """Gauss-Legendre rule on one face, exact to ``order``."""
    a, b = mesh.vertices[mesh.faces[face]]
    s, w = gauss_legendre_01(order)
    return QuadratureRule(a + s[:, None] * (b - a), w * mesh.face_lengths[face], order)


def mesh_element_quadrature(mesh: PolyMesh, order: int) -> ElementQuadrature:
    key = ("vol", order)
    if key not in mesh._cache:
        rules = [element_quadrature(mesh, k, order) for k in range(mesh.n_cells)]
        nq = max(len(r.weights) for r in rules)
        pts = np.repeat(mesh.cell_centroids[:, None, :], nq, axis=1)
        wts = np.zeros((mesh.n_cells, nq))
        for k, r in enumerate(rules):
            pts[k, : len(r.weights)] = r.points
            wts[k, : len(r.weights)] = r.weights
        mesh._cache[key] = ElementQuadrature(pts, wts, order)
    return mesh._cache[key]


def mesh_face_quadrature(mesh: PolyMesh, order: int) -> FaceQuadrature:
    key = ("face", order)
    if key not in mesh._cache:
        s, w = gauss_legendre_01(order)
        a = mesh.vertices[mesh.faces[:, 0]]
        b = mesh.vertices[mesh.faces[:, 1]]
        pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
        mesh._cache[key] = FaceQuadrature(pts, mesh.face_lengths[:, None] * w[None, :], order)
    return mesh._cache[key]


class FESpace:
    """Broken space P^degree on every cell, scalar or 2-vector valued.

    Each scalar component uses the same L2(cell)-orthonormal basis, obtained
    from monomials shifted and scaled to the cell bounding box. Global dof of
    component ``c``, cell ``e``, basis ``i`` is ``c*nel*nloc + e*nloc + i``.
    """

    def __init__(self, mesh: PolyMesh, degree: int, components: int = 1):
        if degree < 0:
            raise SpaceError("degree must be >= 0")
        if components not in (1, 2):
            raise SpaceError("components must be 1 or 2")
        if np.any(mesh.cell_areas <= 0):
            bad = int(np.argmin(mesh.cell_areas))
            raise SpaceError(f"cell {bad} has non-positive area")
        self.mesh = mesh
        self.degree = degree
        self.components = components
        self.exps = monomial_exponents(degree)
        self.nloc = len(self.exps)
        bb = mesh.bounding_boxes
        self.center = np.column_stack([bb[:, :2].mean(1), bb[:, 2:].mean(1)])
        self.scale = 0.5 * np.maximum(bb[:, 1] - bb[:, 0], bb[:, 3] - bb[:, 2])
        self.coef = self._orthonormalize()

    @property
    def nel(self) -> int:
        return self.mesh.n_cells

    @property
    def ncomp_dofs(self) -> int:
        return self.nel * self.nloc

    @property
    def ndofs(self) -> int:
        return self.components * self.ncomp_dofs

    def _orthonormalize(self) -> np.ndarray:
        q = mesh_element_quadrature(self.mesh, 2 * self.degree + 2)
        M = self._monomials(np.arange(self.nel), q.points)
        C = np.broadcast_to(np.eye(self.nloc), (self.nel, self.nloc, self.nloc)).copy()
        # two Cholesky passes: the second removes round-off left by the first
        for _ in range(2):
            B = M @ C
            G = np.einsum("eq,eqi,eqj->eij", q.weights, B, B, optimize=True)
            try:
                L = np.linalg.cholesky(G)
            except np.linalg.LinAlgError as exc:
                raise SpaceError("local Gram matrix is not positive definite") from exc
            C = C @ np.linalg.inv(L).transpose(0, 2, 1)
        return C

    # -- monomial evaluation -------------------------------------------------

    def _scaled(self, elems, pts):
        c = self.center[elems][:, None, :]
        s = self.scale[elems][:, None, None]
        return (pts - c) / s, self.scale[elems]

    def _powers(self, t: np.ndarray) -> np.ndarray:
        out = np.ones(t.shape + (self.degree + 1,))
        for k in range(1, self.degree + 1):
            out[..., k] = out[..., k - 1] * t
        return out

    def _monomials(self, elems, pts) -> np.ndarray:
        xh, _ = self._scaled(elems, pts)
        px, py = self._powers(xh[..., 0]), self._powers(xh[..., 1])
        a, b = self.exps[:, 0], self.exps[:, 1]
        return px[..., a] * py[..., b]

    def _monomial_derivs(self, elems, pts, deriv: int):
        xh, s = self._scaled(elems, pts)
        px, py = self._powers(xh[..., 0]), self._powers(xh[..., 1])
        a, b = self.exps[:, 0], self.exps[:, 1]

        def dpow(p, e, k):
            # k-th derivative of t^e evaluated from the powers table
            coef = np.ones_like(e, dtype=float)
            for j in range(k):
                coef = coef * (e - j)
            idx = np.maximum(e - k, 0)
            return p[..., idx] * coef

        out = [px[..., a] * py[..., b]]
        if deriv >= 1:
            s1 = s[:, None, None]
            gx = dpow(px, a, 1) * py[..., b] / s1
            gy = px[..., a] * dpow(py, b, 1) / s1
            out.append(np.stack([gx, gy], axis=-1))
        if deriv >= 2:
            s2 = (s**2)[:, None, None]
            hxx = dpow(px, a, 2) * py[..., b] / s2
            hxy = dpow(px, a, 1) * dpow(py, b, 1) / s2
            hyy = px[..., a] * dpow(py, b, 2) / s2
            H = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, hyy], -1)], -2)
            out.append(H)
        return out

    def basis(self, elems, pts, deriv: int = 0):
        """Basis values (and derivatives) at per-element points.

        ``elems`` has shape (n,), ``pts`` shape (n, q, 2). Returns a list
        ``[phi (n,q,nloc), grad (n,q,nloc,2), hess (n,q,nloc,2,2)]`` truncated
        at ``deriv``.
        """
        elems = np.asarray(elems)
        C = self.coef[elems]
        mons = self._monomial_derivs(elems, pts, deriv)
        out = [mons[0] @ C]
        if deriv >= 1:
            # (n,q,d,m) @ (n,1,m,i) -> (n,q,d,i), derivative axis moved last
            g = np.swapaxes(mons[1], -1, -2) @ C[:, None]
            out.append(np.moveaxis(g, -2, -1))
        if deriv >= 2:
            n, q, m = mons[2].shape[:3]
            h = np.moveaxis(mons[2].reshape(n, q, m, 4), 2, 3) @ C[:, None]
            out.append(np.moveaxis(h, 2, -1).reshape(h.shape[:2] + (h.shape[-1], 2, 2)))
        return out

    # -- quadrature helpers ---------------------------------------------------

    def volume_quadrature(self, order: int | None = None) -> ElementQuadrature:
        return mesh_element_quadrature(self.mesh, 3 * self.degree + 2 if order is None else order)

    def face_quadrature(self, order: int | None = None) -> FaceQuadrature:
        return mesh_face_quadrature(self.mesh, 3 * self.degree + 2 if order is None else order)

    def dofs(self, elems, component: int = 0) -> np.ndarray:
        elems = np.asarray(elems)
        return component * self.ncomp_dofs + elems[..., None] * self.nloc + np.arange(self.nloc)

    def boundary_mass(self) -> np.ndarray:
        """Per-cell matrix of boundary integrals of phi_i phi_j."""
        mesh = self.mesh
        fq = self.face_quadrature(2 * self.degree + 2)
        out = np.zeros((self.nel, self.nloc, self.nloc))
        for side in (0, 1):
            fc = mesh.face_cells[:, side]
            sel = np.flatnonzero(fc >= 0)
            phi = self.basis(fc[sel], fq.points[sel])[0]
            loc = np.einsum("fq,fqi,fqj->fij", fq.weights[sel], phi, phi, optimize=True)
            np.add.at(out, fc[sel], loc)
        return out

    # -- fields ----------------------------------------------------------------

    def split(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficients reshaped to (components, nel, nloc)."""
        return np.asarray(coeffs).reshape(self.components, self.nel, self.nloc)

    def evaluate(self, coeffs: np.ndarray, cell: int, points) -> dict[str, np.ndarray]:
        """Value and broken derivatives of a field at points of one cell."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        phi, dphi = self.basis(np.array([cell]), pts[None], deriv=1)
        c = self.split(coeffs)[:, cell]  # (ncomp, nloc)
        vals = np.einsum("qi,ci->qc", phi[0], c)
        grads = np.einsum("qid,ci->qcd", dphi[0], c)
        if self.components == 1:
            return {"value": vals[:, 0], "grad": grads[:, 0]}
        eps = 0.5 * (grads + grads.transpose(0, 2, 1))
        return {"value": vals, "grad": grads, "eps": eps, "div": grads[:, 0, 0] + grads[:, 1, 1]}

    def field_at_quadrature(self, coeffs, elems, pts, deriv: int = 1):
        """Field values/grads at (n, q, 2) per-element points.

        Scalar: value (n,q), grad (n,q,2). Vector: value (n,q,2), grad (n,q,2,2)
        with ``grad[..., c, d] = d u_c / d x_d``.
        """
        elems = np.asarray(elems)
        b = self.basis(elems, pts, deriv)
        c = self.split(coeffs)[:, elems]  # (ncomp, n, nloc)
        vals = np.einsum("nqi,cni->nqc", b[0], c)
        out = [vals]
        if deriv >= 1:
            out.append(np.einsum("nqid,cni->nqcd", b[1], c))
        if deriv >= 2:
            out.append(np.einsum("nqiab,cni->nqcab", b[2], c))
        if self.components == 1:
            out = [o[:, :, 0] for o in out]
        return out

    def project(self, f: Callable[[np.ndarray, np.ndarray], np.ndarray], order: int | None = None) -> np.ndarray:
        """Element-wise L2 projection; ``f(x, y)`` returns (...,) or (..., 2)."""
        q = self.volume_quadrature(2 * self.degree + 2 if order is None else order)
        phi = self.basis(np.arange(self.nel), q.points)[0]
        vals = np.asarray(f(q.points[..., 0], q.points[..., 1]), dtype=float)
        if self.components == 1:
            vals = np.broadcast_to(vals, q.weights.shape)[..., None]
        else:
            vals = np.broadcast_to(vals, q.weights.shape + (2,))
        c = np.einsum("eq,eqi,eqc->cei", q.weights, phi, vals, optimize=True)
        return c.reshape(-1)


def build_space(mesh: PolyMesh, degree: int, components: int = 1) -> FESpace:
    if degree < 1:
        raise SpaceError("degree must be >= 1")
    key = ("space", degree, components)
    if key not in mesh._cache:
        mesh._cache[key] = FESpace(mesh, degree, components)
    return mesh._cache[key]
