"""Manufactured solutions, symbolically derived forcings and error norms."""
from __future__ import annotations

from dataclasses import dataclass, fields
from functools import cached_property

import numpy as np
import sympy as sym

from .fespace import mesh_element_quadrature, mesh_face_quadrature
from .forms import DirichletData, ModelParams
from .system import Discretization, Sources

x, y = sym.symbols("x y", real=True)


@dataclass(frozen=True)
class ManufacturedCase:
    """Closed-form displacement, pressure and temperature (sympy expressions)."""

    name: str
    u: tuple[sym.Expr, sym.Expr]
    p: sym.Expr
    T: sym.Expr


def trig_case(nu_u: float = 1.0, nu_p: float = 1.0, nu_T: float = 1.0, mirrored: bool = False) -> ManufacturedCase:
    """The trigonometric convergence-test solution with amplitudes.

    ``mirrored=True`` swaps x and y in the second displacement component;
    by default both components are the same function of x.
    """
    pi = sym.pi
    ux = x**2 * sym.cos(pi * x / 2) * sym.sin(pi * x)
    uy = y**2 * sym.cos(pi * y / 2) * sym.sin(pi * y) if mirrored else ux
    nu_u, nu_p, nu_T = (sym.nsimplify(v) if float(v).is_integer() else sym.Float(v) for v in (nu_u, nu_p, nu_T))
    return ManufacturedCase(
        name="trig-mirrored" if mirrored else "trig",
        u=(nu_u * ux, nu_u * uy),
        p=nu_p * x**2 * sym.sin(pi * x) * sym.sin(pi * y),
        T=-nu_T * y**2 * sym.sin(pi * x) * sym.sin(pi * y),
    )


def polynomial_case(degree: int) -> ManufacturedCase:
    """Globally polynomial fields of total degree <= ``degree`` (patch test)."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    u = (x**degree + y, x ** (degree - 1) * y)
    return ManufacturedCase(name=f"poly{degree}", u=u, p=x + 2 * y + 1, T=x - y)


def zero_case() -> ManufacturedCase:
    z = sym.Integer(0)
    return ManufacturedCase("zero", (z, z), z, z)


def _scalar_params(params: ModelParams | dict) -> dict:
    if isinstance(params, dict):
        d = dict(params)
        for key in ("K", "Theta"):
            v = np.asarray(d[key], dtype=float)
            d[key] = v * np.eye(2) if v.ndim == 0 else v
        return d
    out = {}
    for f in fields(params):
        if f.name == "porosity":
            continue
        arr = getattr(params, f.name)
        if np.ptp(arr, axis=0).max() > 0:
            raise ValueError(f"manufactured forcings need uniform {f.name}")
        out[f.name] = arr[0]
    return out


def _mat(a) -> sym.Matrix:
    return sym.Matrix(2, 2, [sym.Float(float(v)) if not float(v).is_integer() else sym.Integer(int(v)) for v in np.ravel(a)])


def _num(v):
    v = float(v)
    return sym.Integer(int(v)) if v.is_integer() else sym.Float(v)


def derive_forcings(case: ManufacturedCase, params: ModelParams | dict) -> dict[str, sym.Expr]:
    """Symbolic phi, f, g and H for the stationary coupled problem."""
    c = _scalar_params(params)
    a0, b0, c0 = _num(c["a0"]), _num(c["b0"]), _num(c["c0"])
    al, be, cf = _num(c["alpha"]), _num(c["beta"]), _num(c["cf"])
    mu, lam = _num(c["mu"]), _num(c["lam"])
    K, Th = _mat(c["K"]), _mat(c["Theta"])
    u = sym.Matrix(case.u)
    p, T = case.p, case.T
    X = (x, y)
    grad = lambda s: sym.Matrix([sym.diff(s, v) for v in X])  # noqa: E731
    div = lambda w: sum(sym.diff(w[i], X[i]) for i in range(2))  # noqa: E731
    Du = sym.Matrix(2, 2, lambda i, j: sym.diff(u[i], X[j]))
    eps = (Du + Du.T) / 2
    divu = div(u)
    sigma = 2 * mu * eps + (lam * divu - al * p - be * T) * sym.eye(2)
    f = sym.Matrix([-sum(sym.diff(sigma[i, j], X[j]) for j in range(2)) for i in range(2)])
    Kgp = K * grad(p)
    g = c0 * p - b0 * T + al * divu - div(Kgp)
    H = a0 * T - b0 * p + be * divu - cf * (grad(T).T * Kgp)[0] - div(Th * grad(T))
    return {"phi": lam * divu - al * p - be * T, "f": f, "g": g, "H": H}


def _lambdify(expr):
    fn = sym.lambdify((x, y), expr, modules="numpy")

    def scalar(X, Y):
        return np.broadcast_to(np.asarray(fn(X, Y), dtype=float), np.shape(X)).copy()

    return scalar


def _lambdify_vec(exprs):
    fs = [_lambdify(e) for e in exprs]

    def vec(X, Y):
        return np.stack([f(X, Y) for f in fs], axis=-1)

    return vec


class ExactSolution:
    """Numerical callables for a manufactured case under given parameters."""

    def __init__(self, case: ManufacturedCase, params: ModelParams | dict):
        self.case = case
        d = derive_forcings(case, params)
        self.exprs = d
        X = (x, y)
        self.u = _lambdify_vec(case.u)
        self.grad_u = _lambdify_vec([sym.diff(case.u[i], X[j]) for i in range(2) for j in range(2)])
        self.p = _lambdify(case.p)
        self.grad_p = _lambdify_vec([sym.diff(case.p, v) for v in X])
        self.T = _lambdify(case.T)
        self.grad_T = _lambdify_vec([sym.diff(case.T, v) for v in X])
        self.phi = _lambdify(d["phi"])
        self.f = _lambdify_vec(list(d["f"]))
        self.g = _lambdify(d["g"])
        self.H = _lambdify(d["H"])

    def exact_eval(self, point) -> tuple[np.ndarray, float, float, float]:
        X, Y = float(point[0]), float(point[1])
        return self.u(X, Y), float(self.p(X, Y)), float(self.T(X, Y)), float(self.phi(X, Y))

    @cached_property
    def dirichlet(self) -> DirichletData:
        return DirichletData(g_u=self.u, g_p=self.p, g_T=self.T)

    @cached_property
    def sources(self) -> Sources:
        return Sources(f=self.f, g=self.g, H=self.H)


@dataclass(frozen=True)
class ErrorReport:
    err_u_L2: float
    err_u_dG: float
    err_p_L2: float
    err_p_dG: float
    err_T_L2: float
    err_T_dG: float
    err_phi_L2: float
    h: float
    iterations: int | None = None

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name.startswith("err_")}


def error_norms(disc: Discretization, x_h: np.ndarray, exact: ExactSolution, order: int | None = None, iterations=None) -> ErrorReport:
    """L2 errors of all fields and dG-energy errors of u, p, T."""
    mesh = disc.mesh
    order = 2 * max(disc.ell, disc.m) + 4 if order is None else order
    parts = disc.split(x_h)
    q = mesh_element_quadrature(mesh, order)
    e = np.arange(mesh.n_cells)
    X, Y = q.points[..., 0], q.points[..., 1]
    w = q.weights
    prm = disc.params

    def field(name):
        return disc.space(name).field_at_quadrature(parts[name], e, q.points, deriv=1)

    uh, guh = field("u")
    ph, gph = field("p")
    Th, gTh = field("T")
    phih, _ = field("phi")

    eu = uh - exact.u(X, Y)
    egu = guh - exact.grad_u(X, Y).reshape(guh.shape)
    ep, egp = ph - exact.p(X, Y), gph - exact.grad_p(X, Y)
    eT, egT = Th - exact.T(X, Y), gTh - exact.grad_T(X, Y)
    ephi = phih - exact.phi(X, Y)

    L2 = lambda a: float(np.sqrt(np.sum(w * a * a)))  # noqa: E731
    L2v = lambda a: float(np.sqrt(np.sum(w[..., None] * a * a)))  # noqa: E731

    epsu = 0.5 * (egu + np.swapaxes(egu, -1, -2))
    vol_u = np.sum(w * 2.0 * prm.mu[:, None] * np.einsum("eqab,eqab->eq", epsu, epsu))
    vol_p = np.sum(w * np.einsum("eqa,eab,eqb->eq", egp, prm.K, egp, optimize=True))
    vol_T = np.sum(w * np.einsum("eqa,eab,eqb->eq", egT, prm.Theta, egT, optimize=True))

    fq = mesh_face_quadrature(mesh, order)
    jp = _face_jumps(disc, parts, fq, exact)
    fc = disc.fc
    fw = fq.weights
    jump_u = np.sum(fw * fc.zeta[:, None] * np.sum(jp["u"] ** 2, axis=-1))
    jump_p = np.sum(fw * fc.xi[:, None] * jp["p"] ** 2)
    jump_T = np.sum(fw * fc.sigma[:, None] * jp["T"] ** 2)

    return ErrorReport(
        err_u_L2=L2v(eu),
        err_u_dG=float(np.sqrt(vol_u + jump_u)),
        err_p_L2=L2(ep),
        err_p_dG=float(np.sqrt(vol_p + jump_p)),
        err_T_L2=L2(eT),
        err_T_dG=float(np.sqrt(vol_T + jump_T)),
        err_phi_L2=L2(ephi),
        h=mesh.h,
        iterations=iterations,
    )


def _face_jumps(disc, parts, fq, exact):
    """Jumps of the error on every face: (discrete+ - discrete-) inside, (discrete - exact) on the boundary."""
    mesh = disc.mesh
    own, nbr = mesh.face_cells.T
    inner = nbr >= 0
    nb = np.where(inner, nbr, own)
    pts = fq.points
    out = {}
    for name, fn in (("u", exact.u), ("p", exact.p), ("T", exact.T)):
        sp_ = disc.space(name)
        a = sp_.field_at_quadrature(parts[name], own, pts, deriv=0)[0]
        b = sp_.field_at_quadrature(parts[name], nb, pts, deriv=0)[0]
        ex = fn(pts[..., 0], pts[..., 1])
        mask = inner[:, None, None] if a.ndim == 3 else inner[:, None]
        out[name] = np.where(mask, a - b, a - ex)
    return out


def observed_order(errors, hs) -> float:
    """Least-squares slope of log(error) against log(h)."""
    errors = np.asarray(errors, dtype=float)
    hs = np.asarray(hs, dtype=float)
    if len(errors) != len(hs) or len(hs) < 2:
        raise ValueError("need at least two (error, h) pairs")
    d = np.diff(hs)
    if not (np.all(d < 0) or np.all(d > 0)):
        raise ValueError("h sequence must be strictly monotone")
    slope, _ = np.polyfit(np.log(hs), np.log(errors), 1)
    return float(slope)
