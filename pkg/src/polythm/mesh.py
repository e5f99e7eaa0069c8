"""Polygonal meshes: Lloyd-relaxed clipped Voronoi diagrams and file I/O."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Voronoi, cKDTree

from .quadrature import polygon_area_centroid

log = logging.getLogger(__name__)

UNIT_SQUARE = (0.0, 1.0, 0.0, 1.0)

# boundary tags for rectangle sides
BOTTOM, RIGHT, TOP, LEFT = 0, 1, 2, 3


class MeshError(ValueError):
    """Raised for malformed or invalid mesh input."""


class MeshGenerationError(RuntimeError):
    """Raised when Voronoi generation hits a degenerate site configuration."""


@dataclass(frozen=True, eq=False)
class PolyMesh:
    """Conforming 2D polygonal mesh with face topology.

    ``face_cells[f] = (owner, neighbor)`` with ``neighbor = -1`` on the
    boundary; ``normals[f]`` points from owner to neighbor (outward on the
    boundary). Face vertices are stored in the owner's counterclockwise order.
    """

    vertices: np.ndarray
    cells: tuple[np.ndarray, ...]
    faces: np.ndarray
    face_cells: np.ndarray
    normals: np.ndarray
    face_lengths: np.ndarray
    cell_areas: np.ndarray
    cell_centroids: np.ndarray
    cell_diameters: np.ndarray
    boundary_tag: np.ndarray
    cell_faces: tuple[np.ndarray, ...]
    domain: tuple[float, float, float, float] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def interior_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] >= 0)

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        return np.flatnonzero(self.face_cells[:, 1] < 0)

    @property
    def h(self) -> float:
        return float(self.cell_diameters.max())

    def cell_xy(self, k: int) -> np.ndarray:
        return self.vertices[self.cells[k]]

    @cached_property
    def bounding_boxes(self) -> np.ndarray:
        """(nel, 4) array of xmin, xmax, ymin, ymax."""
        out = np.empty((self.n_cells, 4))
        for k, c in enumerate(self.cells):
            xy = self.vertices[c]
            out[k] = xy[:, 0].min(), xy[:, 0].max(), xy[:, 1].min(), xy[:, 1].max()
        return out

    @cached_property
    def max_cell_vertices(self) -> int:
        return max(len(c) for c in self.cells)

    def write(self, path: str | Path) -> None:
        lines = [f"{len(self.vertices)} {self.n_cells}"]
        lines += [f"{x!r} {y!r}" for x, y in self.vertices.tolist()]
        lines += [" ".join(map(str, [len(c), *c.tolist()])) for c in self.cells]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# construction from vertex loops


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _segments_intersect(p1, p2, q1, q2) -> bool:
    """Proper or touching intersection of two closed segments."""
    d1 = _cross(p2 - p1, q1 - p1)
    d2 = _cross(p2 - p1, q2 - p1)
    d3 = _cross(q2 - q1, p1 - q1)
    d4 = _cross(q2 - q1, p2 - q1)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def _is_simple(xy: np.ndarray) -> bool:
    n = len(xy)
    for i in range(n):
        a0, a1 = xy[i], xy[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_intersect(a0, a1, xy[j], xy[(j + 1) % n]):
                return False
    return True


def _boundary_tag(mid: np.ndarray, domain, tol: float) -> int:
    if domain is None:
        return 0
    x0, x1, y0, y1 = domain
    x, y = mid
    if abs(y - y0) < tol:
        return BOTTOM
    if abs(x - x1) < tol:
        return RIGHT
    if abs(y - y1) < tol:
        return TOP
    if abs(x - x0) < tol:
        return LEFT
    return -2  # boundary face not on the rectangle


def build_mesh(vertices: np.ndarray, cells, domain=None, validate: bool = True) -> PolyMesh:
    """Assemble a PolyMesh from vertex coordinates and CCW index loops."""
    vertices = np.ascontiguousarray(vertices, dtype=float)
    cells = tuple(np.asarray(c, dtype=np.int64) for c in cells)
    nel = len(cells)
    if nel == 0:
        raise MeshError("mesh has no cells")

    areas = np.empty(nel)
    cents = np.empty((nel, 2))
    diams = np.empty(nel)
    for k, c in enumerate(cells):
        if len(c) < 3:
            raise MeshError(f"cell {k} has fewer than 3 vertices")
        if c.min() < 0 or c.max() >= len(vertices):
            raise MeshError(f"cell {k} references a missing vertex")
        if len(np.unique(c)) != len(c):
            raise MeshError(f"cell {k} repeats a vertex")
        xy = vertices[c]
        a, g = polygon_area_centroid(xy)
        if validate and a <= 0.0:
            raise MeshError(f"cell {k} is clockwise or degenerate (signed area {a:.3e})")
        if validate and not _is_simple(xy):
            raise MeshError(f"cell {k} is self-intersecting")
        areas[k], cents[k] = a, g
        diff = xy[:, None, :] - xy[None, :, :]
        diams[k] = np.sqrt((diff**2).sum(-1).max())

    edge_map: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    for k, c in enumerate(cells):
        for i in range(len(c)):
            a, b = int(c[i]), int(c[(i + 1) % len(c)])
            edge_map.setdefault((min(a, b), max(a, b)), []).append((k, a, b))

    faces, face_cells, cell_faces = [], [], [[] for _ in range(nel)]
    for key in sorted(edge_map):
        users = edge_map[key]
        if len(users) > 2:
            raise MeshError(f"edge {key} shared by more than two cells: {[u[0] for u in users]}")
        if len(users) == 2 and (users[0][1], users[0][2]) != (users[1][2], users[1][1]):
            raise MeshError(f"cells {users[0][0]} and {users[1][0]} traverse a shared edge with equal orientation")
        owner, a, b = users[0]
        nb = users[1][0] if len(users) == 2 else -1
        fidx = len(faces)
        faces.append((a, b))
        face_cells.append((owner, nb))
        cell_faces[owner].append(fidx)
        if nb >= 0:
            cell_faces[nb].append(fidx)

    faces = np.asarray(faces, dtype=np.int64)
    face_cells = np.asarray(face_cells, dtype=np.int64)
    d = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    lengths = np.hypot(d[:, 0], d[:, 1])
    if np.any(lengths <= 0):
        raise MeshError("zero-length face")
    normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]

    scale = float(np.ptp(vertices, axis=0).max())
    bmask = face_cells[:, 1] < 0
    tags = np.full(len(faces), -1, dtype=np.int64)
    mids = 0.5 * (vertices[faces[:, 0]] + vertices[faces[:, 1]])
    for f in np.flatnonzero(bmask):
        tags[f] = _boundary_tag(mids[f], domain, 1e-9 * scale)

    mesh = PolyMesh(
        vertices=vertices,
        cells=cells,
        faces=faces,
        face_cells=face_cells,
        normals=normals,
        face_lengths=lengths,
        cell_areas=areas,
        cell_centroids=cents,
        cell_diameters=diams,
        boundary_tag=tags,
        cell_faces=tuple(np.asarray(cf, dtype=np.int64) for cf in cell_faces),
        domain=domain,
    )
    if validate:
        _check_conformity(mesh)
    return mesh


def _check_conformity(mesh: PolyMesh) -> None:
    """Detect hanging nodes: a vertex lying in the interior of a boundary face.

    In a conforming mesh every boundary face lies on the outer boundary, so
    the total boundary length equals the perimeter of the union of cells.
    A hanging node produces overlapping boundary faces, caught here by
    testing vertices against the interior of boundary segments.
    """
    bf = mesh.boundary_faces
    if len(bf) == 0:
        return
    p0 = mesh.vertices[mesh.faces[bf, 0]]
    p1 = mesh.vertices[mesh.faces[bf, 1]]
    used = np.unique(np.concatenate(mesh.cells))
    V = mesh.vertices[used]
    scale = float(np.ptp(mesh.vertices, axis=0).max())
    tol = 1e-10 * scale
    tree = cKDTree(V)
    for i, f in enumerate(bf):
        a, b = p0[i], p1[i]
        L = mesh.face_lengths[f]
        cand = tree.query_ball_point(0.5 * (a + b), 0.5 * L + tol)
        for j in cand:
            v = V[j]
            t = np.dot(v - a, b - a) / L**2
            if tol / L < t < 1 - tol / L and abs(_cross(b - a, v - a)) / L < tol:
                owner = mesh.face_cells[f, 0]
                raise MeshError(f"non-conforming mesh: vertex {used[j]} hangs on boundary face of cell {owner}")
    total = mesh.cell_areas.sum()
    if mesh.domain is not None:
        x0, x1, y0, y1 = mesh.domain
        dom = (x1 - x0) * (y1 - y0)
        if abs(total - dom) > 1e-10 * dom:
            raise MeshError(f"cell areas sum to {total!r}, domain area is {dom!r}")


# ---------------------------------------------------------------------------
# Voronoi generation


def _clip(poly: np.ndarray, normal: np.ndarray, offset: float) -> np.ndarray:
    """Keep the part of a convex polygon with ``normal . x <= offset``."""
    d = poly @ normal - offset
    inside = d <= 0.0
    if inside.all():
        return poly
    if not inside.any():
        return poly[:0]
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        if inside[i]:
            out.append(poly[i])
        if inside[i] != inside[j]:
            t = d[i] / (d[i] - d[j])
            out.append(poly[i] + t * (poly[j] - poly[i]))
    return np.asarray(out)


def _rect(domain) -> np.ndarray:
    x0, x1, y0, y1 = domain
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)


def voronoi_cells_clipping(sites: np.ndarray, domain=UNIT_SQUARE) -> list[np.ndarray]:
    """Clipped Voronoi cells (CCW vertex arrays) by half-plane intersection.

    Slow reference construction, independent of Qhull. Each cell is the rectangle cut by the bisector half-planes against other
    sites, visited nearest first. A k-d tree bounds the candidate set: once
    the next candidate is farther than twice the current cell radius its
    bisector cannot reach the cell.
    """
    sites = np.asarray(sites, dtype=float)
    n = len(sites)
    _check_duplicates(sites, domain)
    rect = _rect(domain)
    if n == 1:
        return [rect]
    tree = cKDTree(sites)
    k0 = min(n, 16)
    dist, idx = tree.query(sites, k=k0)
    cells = []
    for i in range(n):
        s = sites[i]
        poly = rect
        k = k0
        di, ii = dist[i], idx[i]
        start = 1
        while True:
            for d, j in zip(di[start:], ii[start:]):
                r2 = ((poly - s) ** 2).sum(1).max()
                if d * d > 4.0 * r2:
                    break
                t = sites[j] - s
                poly = _clip(poly, t, 0.5 * (t @ (sites[j] + s)))
            else:
                if k < n:
                    start = k
                    k = min(n, 2 * k)
                    di, ii = tree.query(s, k=k)
                    continue
            break
        if len(poly) < 3:
            raise MeshGenerationError(f"site {i} produced an empty cell")
        cells.append(poly)
    return cells


def _check_duplicates(sites: np.ndarray, domain) -> None:
    x0, x1, y0, y1 = domain
    tol = 1e-12 * max(x1 - x0, y1 - y0)
    pairs = cKDTree(sites).query_pairs(tol, output_type="ndarray")
    if len(pairs):
        i, j = pairs[0]
        raise MeshGenerationError(
            f"duplicate Voronoi sites {int(i)} and {int(j)} at {sites[i].tolist()}"
        )


def _loop_area_centroid(verts: np.ndarray, loops: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized signed areas and centroids of many polygons."""
    lens = np.fromiter((len(l) for l in loops), dtype=np.int64, count=len(loops))
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]])
    flat = np.concatenate(loops)
    nxt = np.arange(len(flat)) + 1
    nxt[starts + lens - 1] = starts
    p, q = verts[flat], verts[flat[nxt]]
    cr = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
    area = 0.5 * np.add.reduceat(cr, starts)
    cx = np.add.reduceat((p[:, 0] + q[:, 0]) * cr, starts) / (6.0 * area)
    cy = np.add.reduceat((p[:, 1] + q[:, 1]) * cr, starts) / (6.0 * area)
    return area, np.column_stack([cx, cy])


def _mirrored_voronoi(sites, domain, band):
    x0, x1, y0, y1 = domain
    pts = [sites]
    for col, v in ((0, x0), (0, x1), (1, y0), (1, y1)):
        sel = np.abs(sites[:, col] - v) < band
        m = sites[sel].copy()
        m[:, col] = 2.0 * v - m[:, col]
        pts.append(m)
    return Voronoi(np.concatenate(pts))


def voronoi_regions(sites: np.ndarray, domain=UNIT_SQUARE) -> tuple[np.ndarray, list[np.ndarray]]:
    """Clipped Voronoi diagram via Qhull on sites mirrored across the sides.

    For a rectangle, the Voronoi cells of the original sites in the mirrored
    set are exactly the rectangle-clipped cells. Only sites within a band of
    each side are mirrored; if a resulting cell leaves the rectangle the band
    is widened. Returns vertex coordinates and one CCW index loop per site.
    """
    sites = np.asarray(sites, dtype=float)
    n = len(sites)
    _check_duplicates(sites, domain)
    if n == 1:
        return _rect(domain), [np.arange(4)]
    x0, x1, y0, y1 = domain
    scale = max(x1 - x0, y1 - y0)
    band = 4.0 * np.sqrt((x1 - x0) * (y1 - y0) / n)
    while True:
        vor = _mirrored_voronoi(sites, domain, band)
        regions = [vor.regions[r] for r in vor.point_region[:n]]
        ok = all(len(r) >= 3 and -1 not in r for r in regions)
        if ok:
            used = np.unique(np.concatenate(regions))
            v = vor.vertices[used]
            tol = 1e-9 * scale
            ok = bool(
                np.all(v[:, 0] > x0 - tol) and np.all(v[:, 0] < x1 + tol)
                and np.all(v[:, 1] > y0 - tol) and np.all(v[:, 1] < y1 + tol)
            )
        if ok or band > 2 * scale:
            break
        band *= 2.0
    if not ok:
        raise MeshGenerationError("Voronoi cells could not be confined to the domain")
    verts = vor.vertices
    # order each convex region counterclockwise by angle about its site
    lens = np.array([len(r) for r in regions])
    owner = np.repeat(np.arange(n), lens)
    flat = np.concatenate(regions).astype(np.int64)
    rel = verts[flat] - sites[owner]
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    order = np.lexsort((ang, owner))
    flat = flat[order]
    loops = np.split(flat, np.cumsum(lens)[:-1])
    return verts, loops


def lloyd_step(sites: np.ndarray, domain=UNIT_SQUARE) -> tuple[np.ndarray, np.ndarray]:
    """One Lloyd relaxation: move each site to its cell centroid.

    Returns new sites and the cell areas of the current diagram.
    """
    verts, loops = voronoi_regions(sites, domain)
    areas, cents = _loop_area_centroid(verts, loops)
    return cents, areas


def _merge_vertices(verts: np.ndarray, loops: list[np.ndarray], tol: float):
    """Merge near-coincident vertices, drop collapsed edges and unused points."""
    pairs = cKDTree(verts).query_pairs(tol, output_type="ndarray")
    parent = np.arange(len(verts))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(a) for a in range(len(verts))])
    out = []
    for loop in loops:
        ids = roots[loop]
        ids = ids[ids != np.roll(ids, 1)]
        out.append(ids)
    used = np.unique(np.concatenate(out))
    remap = np.full(len(verts), -1)
    remap[used] = np.arange(len(used))
    return verts[used].copy(), [remap[l] for l in out]


def generate_voronoi(
    n_cells: int,
    domain=UNIT_SQUARE,
    rng_seed: int = 0,
    lloyd_iterations: int = 100,
    sites: np.ndarray | None = None,
) -> PolyMesh:
    """Lloyd-relaxed clipped Voronoi mesh of a rectangle.

    Initial sites are drawn uniformly with ``numpy.random.default_rng(rng_seed)``
    unless given explicitly.
    """
    if n_cells < 1:
        raise ValueError("n_cells must be >= 1")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate domain {domain}")
    domain = (x0, x1, y0, y1)
    if sites is None:
        rng = np.random.default_rng(rng_seed)
        sites = rng.uniform(size=(n_cells, 2)) * [x1 - x0, y1 - y0] + [x0, y0]
    else:
        sites = np.array(sites, dtype=float)
        if len(sites) != n_cells:
            raise ValueError("len(sites) != n_cells")
    for _ in range(lloyd_iterations):
        sites, _ = lloyd_step(sites, domain)
    verts, loops = voronoi_regions(sites, domain)
    scale = max(x1 - x0, y1 - y0)
    verts, loops = _merge_vertices(verts, loops, 1e-10 * scale)
    # snap boundary vertices exactly onto the rectangle
    for col, lo, hi in ((0, x0, x1), (1, y0, y1)):
        v = verts[:, col]
        v[np.abs(v - lo) < 1e-9 * scale] = lo
        v[np.abs(v - hi) < 1e-9 * scale] = hi
    mesh = build_mesh(verts, loops, domain=domain)
    log.debug("generated %d-cell Voronoi mesh, h=%.4f", mesh.n_cells, mesh.h)
    return mesh


def lloyd_area_variance(n_cells: int, iterations: int, domain=UNIT_SQUARE, rng_seed: int = 0) -> np.ndarray:
    """Cell-area variance before each of ``iterations`` Lloyd steps."""
    x0, x1, y0, y1 = domain
    rng = np.random.default_rng(rng_seed)
    sites = rng.uniform(size=(n_cells, 2)) * [x1 - x0, y1 - y0] + [x0, y0]
    out = []
    for _ in range(iterations):
        sites, areas = lloyd_step(sites, domain)
        out.append(areas.var())
    return np.asarray(out)


# ---------------------------------------------------------------------------
# file I/O


def cell_adjacency(mesh: PolyMesh) -> sp.csr_matrix:
    own, nbr = mesh.face_cells.T
    m = nbr >= 0
    n = mesh.n_cells
    G = sp.coo_matrix((np.ones(m.sum()), (own[m], nbr[m])), shape=(n, n)).tocsr()
    return (G + G.T).tocsr()


def nested_dissection(mesh: PolyMesh, leaf: int = 4) -> np.ndarray:
    """Cell elimination order from recursive coordinate bisection.

    Each part is split at the median centroid along its longer extent; cells
    of the first half touching the second form the separator and are
    ordered after both halves.
    """
    G = cell_adjacency(mesh)
    c = mesh.cell_centroids
    out: list[np.ndarray] = []
    stack = [(np.arange(mesh.n_cells), False)]
    # explicit stack: (index set, emit-as-is flag) processed in reverse order
    while stack:
        idx, emit = stack.pop()
        if emit or len(idx) <= leaf:
            out.append(idx)
            continue
        pts = c[idx]
        ax = int(np.argmax(np.ptp(pts, axis=0)))
        order = idx[np.argsort(pts[:, ax], kind="stable")]
        left, right = order[: len(order) // 2], order[len(order) // 2 :]
        in_right = np.zeros(mesh.n_cells, dtype=bool)
        in_right[right] = True
        touch = np.asarray(G[left][:, in_right].sum(axis=1)).ravel() > 0
        stack.append((left[touch], True))
        stack.append((right, False))
        stack.append((left[~touch], False))
    return np.concatenate(out)


def load_mesh(path: str | Path, domain=None) -> PolyMesh:
    """Read a mesh file: ``nv nc``, nv lines ``x y``, nc lines ``k i1 .. ik``."""
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in (l.strip() for l in text.splitlines()) if ln and not ln.startswith("#")]
    try:
        nv, nc = (int(t) for t in lines[0].split())
    except (IndexError, ValueError) as exc:
        raise MeshError(f"{path}: bad header line") from exc
    if len(lines) < 1 + nv + nc:
        raise MeshError(f"{path}: expected {nv} vertices and {nc} cells, file is truncated")
    try:
        verts = np.array([[float(t) for t in lines[1 + i].split()] for i in range(nv)])
    except ValueError as exc:
        raise MeshError(f"{path}: bad vertex line") from exc
    if verts.shape != (nv, 2):
        raise MeshError(f"{path}: vertex lines must hold two coordinates")
    cells = []
    for k in range(nc):
        try:
            toks = [int(t) for t in lines[1 + nv + k].split()]
        except ValueError as exc:
            raise MeshError(f"{path}: cell {k}: non-integer entry") from exc
        if not toks or toks[0] != len(toks) - 1:
            raise MeshError(f"{path}: cell {k}: vertex count does not match")
        cells.append(toks[1:])
    if domain is None:
        lo, hi = verts.min(0), verts.max(0)
        domain = (lo[0], hi[0], lo[1], hi[1])
        total = sum(polygon_area_centroid(verts[c])[0] for c in map(np.asarray, cells) if len(c) >= 3)
        if abs(total - (hi[0] - lo[0]) * (hi[1] - lo[1])) > 1e-10 * abs(total):
            domain = None  # not a rectangle, skip tags/area check
    try:
        return build_mesh(verts, cells, domain=domain)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class RegularityReport:
    min_simplex_ratio: float
    max_neighbor_h_ratio: float
    worst_face: np.ndarray  # per cell: face index attaining the min ratio
    cell_ratio: np.ndarray  # per cell: min ratio over its faces


def check_regularity(mesh: PolyMesh) -> RegularityReport:
    d = 2
    nel = mesh.n_cells
    worst = np.full(nel, -1)
    ratio = np.full(nel, np.inf)
    for k in range(nel):
        g = mesh.cell_centroids[k]
        for f in mesh.cell_faces[k]:
            a, b = mesh.vertices[mesh.faces[f]]
            s_area = 0.5 * abs(_cross(a - g, b - g))
            r = d * s_area / (mesh.face_lengths[f] * mesh.cell_diameters[k])
            if r < ratio[k]:
                ratio[k], worst[k] = r, f
    inner = mesh.interior_faces
    h = mesh.cell_diameters
    if len(inner):
        o, n = mesh.face_cells[inner].T
        hr = float(np.max(np.maximum(h[o] / h[n], h[n] / h[o])))
    else:
        hr = 1.0
    return RegularityReport(float(ratio.min()), hr, worst, ratio)


def measure_trace_constant(mesh: PolyMesh, degree: int, trials: int = 20, rng_seed: int = 0) -> float:
    """Sampled trace-inverse ratio ``|v|_{dk} h^(1/2) / (degree |v|_k)``.

    Random coefficient vectors in the orthonormal basis; the constant mode is
    always included as the first sample.
    """
    from .fespace import build_space

    if degree < 1:
        raise ValueError("degree must be >= 1")
    space = build_space(mesh, degree)
    rng = np.random.default_rng(rng_seed)
    B = space.boundary_mass()  # (nel, nloc, nloc) in an orthonormal basis
    nloc = space.nloc
    best = 0.0
    for t in range(trials + 1):
        if t == 0:
            c = np.zeros((mesh.n_cells, nloc))
            c[:, 0] = 1.0
        else:
            c = rng.standard_normal((mesh.n_cells, nloc))
        nrm2 = (c * c).sum(1)
        ok = nrm2 > 0
        tr2 = np.einsum("ei,eij,ej->e", c, B, c, optimize=True)
        r = np.sqrt(tr2[ok] / nrm2[ok]) * np.sqrt(mesh.cell_diameters[ok]) / degree
        best = max(best, float(r.max()))
    return best
