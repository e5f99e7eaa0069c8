"""Quadrature rules on segments, triangles and polygons.

Polygon rules are built from the fan of triangles joining the cell centroid
to each edge, each triangle carrying a collapsed (Duffy) Gauss product rule.
All rules are returned as plain arrays in physical coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)
    order: int


@lru_cache(maxsize=None)
def gauss_legendre_01(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes/weights on [0, 1], exact to polynomial `order`."""
    n = order // 2 + 1
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@lru_cache(maxsize=None)
def reference_triangle_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Conical product rule on the triangle (0,0), (1,0), (0,1).

    Returns barycentric-like coordinates (s, t) and weights summing to 1/2.
    """
    n = order // 2 + 1
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    u = 0.5 * (1.0 + xj)
    wu = 0.25 * wj
    v, wv = gauss_legendre_01(order)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    ww = np.outer(wu, wv)
    st = np.column_stack([uu.ravel(), ((1.0 - uu) * vv).ravel()])
    return st, ww.ravel()


def triangle_rule(a, b, c, order: int) -> QuadratureRule:
    a, b, c = (np.asarray(p, dtype=float) for p in (a, b, c))
    st, w = reference_triangle_rule(order)
    det = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    pts = a + st[:, :1] * (b - a) + st[:, 1:] * (c - a)
    return QuadratureRule(pts, w * det, order)


def segment_rule(a, b, order: int) -> QuadratureRule:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    s, w = gauss_legendre_01(order)
    length = float(np.hypot(*(b - a)))
    return QuadratureRule(a + s[:, None] * (b - a), w * length, order)


def polygon_area_centroid(xy: np.ndarray) -> tuple[float, np.ndarray]:
    """Signed area and area centroid of a polygon given as an (n, 2) loop."""
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if area == 0.0:
        return 0.0, xy.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return float(area), np.array([cx, cy])


def polygon_rule(xy: np.ndarray, order: int, center: np.ndarray | None = None) -> QuadratureRule:
    """Centroid-fan rule on a simple polygon.

    Triangle weights are signed, so the rule stays exact for polygons that
    are not star-shaped with respect to the centroid.
    """
    xy = np.asarray(xy, dtype=float)
    if center is None:
        _, center = polygon_area_centroid(xy)
    st, w = reference_triangle_rule(order)
    a = xy
    b = np.roll(xy, -1, axis=0)
    # triangle (center, a_k, b_k) for each edge k
    ea = a - center
    eb = b - center
    det = ea[:, 0] * eb[:, 1] - ea[:, 1] * eb[:, 0]
    pts = center + st[None, :, :1] * ea[:, None, :] + st[None, :, 1:] * eb[:, None, :]
    wts = det[:, None] * w[None, :]
    return QuadratureRule(pts.reshape(-1, 2), wts.ravel(), order)


def monomial_integral_polygon(xy: np.ndarray, a: int, b: int) -> float:
    """Exact integral of x**a * y**b over a polygon (divergence theorem).

    Uses int_P x^a y^b = 1/(a+1) oint x^(a+1) y^b n_x ds, evaluated edge by
    edge with a Gauss rule exact for the edge polynomial.
    """
    xy = np.asarray(xy, dtype=float)
    total = 0.0
    s, w = gauss_legendre_01(a + b + 1)
    for k in range(len(xy)):
        p0, p1 = xy[k], xy[(k + 1) % len(xy)]
        pts = p0 + s[:, None] * (p1 - p0)
        # n_x ds = dy
        dy = p1[1] - p0[1]
        total += dy * np.sum(w * pts[:, 0] ** (a + 1) * pts[:, 1] ** b)
    return total / (a + 1)
