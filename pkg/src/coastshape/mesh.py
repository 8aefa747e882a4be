"""Mesh representation, construction, deformation and validity checking.

A mesh is immutable after construction: deformation produces a new Mesh, so
read-only sharing across assembly code is safe. Topology (facets, normals,
tags) is derived once in `build_mesh`.

Tag conventions (fixed, documented in the README):
  boundary facets: 1 = shore Γ1, 2 = open sea Γ2; interface facets: 3 = Γ3;
  ordinary interior facets: 0.  Cell regions: 0 = water Ω̃, 1 = obstacle D.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TAG_INTERIOR = 0
TAG_SHORE = 1
TAG_OPEN_SEA = 2
TAG_INTERFACE = 3

REGION_WATER = 0
REGION_OBSTACLE = 1


class MeshError(Exception):
    """Geometry or topology violation."""


@dataclass(frozen=True)
class Mesh:
    """Unstructured simplex mesh (intervals in 1D, triangles in 2D)."""

    dim: int
    vertices: np.ndarray          # (nv, dim)
    cells: np.ndarray             # (nc, dim+1) vertex indices, positively oriented
    region: np.ndarray            # (nc,) REGION_* tags
    # facet topology, derived:
    facet_vertices: np.ndarray    # (nf, dim) vertex indices (a point in 1D)
    facet_cells: np.ndarray       # (nf, 2) plus/minus cell, minus = -1 on the boundary
    facet_local: np.ndarray       # (nf, 2) local facet index inside plus/minus cell
    facet_tag: np.ndarray         # (nf,) TAG_*
    facet_normal: np.ndarray = field(repr=False, default=None)   # (nf, dim), unit, outward from plus
    facet_measure: np.ndarray = field(repr=False, default=None)  # (nf,) length (1.0 in 1D)
    facet_midpoint: np.ndarray = field(repr=False, default=None) # (nf, dim)
    cell_volume: np.ndarray = field(repr=False, default=None)    # (nc,) signed area / length
    cell_diameter: np.ndarray = field(repr=False, default=None)  # (nf,) longest edge

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def n_facets(self) -> int:
        return self.facet_vertices.shape[0]

    def boundary_facets(self, tag: int | None = None) -> np.ndarray:
        mask = self.facet_cells[:, 1] < 0
        if tag is not None:
            mask &= self.facet_tag == tag
        return np.nonzero(mask)[0]

    def interface_facets(self) -> np.ndarray:
        return np.nonzero(self.facet_tag == TAG_INTERFACE)[0]

    def vertices_on_tag(self, tags: tuple[int, ...]) -> np.ndarray:
        """Sorted vertex indices lying on facets with any of the given tags."""
        sel = np.isin(self.facet_tag, tags)
        return np.unique(self.facet_vertices[sel].ravel())


def _cell_geometry(dim, vertices, cells):
    if dim == 1:
        a = vertices[cells[:, 0], 0]
        b = vertices[cells[:, 1], 0]
        vol = b - a
        diam = np.abs(vol)
        return vol, diam
    p0 = vertices[cells[:, 0]]
    p1 = vertices[cells[:, 1]]
    p2 = vertices[cells[:, 2]]
    vol = 0.5 * ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                 - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
    e0 = np.linalg.norm(p1 - p0, axis=1)
    e1 = np.linalg.norm(p2 - p1, axis=1)
    e2 = np.linalg.norm(p0 - p2, axis=1)
    diam = np.maximum(e0, np.maximum(e1, e2))
    return vol, diam


def _local_facets(dim):
    # local facet i of a cell, as local vertex indices in traversal order
    if dim == 1:
        return [(0,), (1,)]
    return [(0, 1), (1, 2), (2, 0)]


def build_mesh(dim, vertices, cells, region=None, boundary_tag_of=None,
               require_positive=True) -> Mesh:
    """Derive facet topology, normals and tags, and validate invariants.

    boundary_tag_of: optional dict mapping a frozenset of vertex indices to a
    boundary tag; untagged boundary facets raise MeshError.
    """
    vertices = np.asarray(vertices, dtype=float).reshape(-1, dim)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, dim + 1)
    nc = cells.shape[0]
    region = (np.zeros(nc, dtype=np.int8) if region is None
              else np.asarray(region, dtype=np.int8).reshape(nc))

    vol, diam = _cell_geometry(dim, vertices, cells)
    if require_positive and np.any(vol <= 0.0):
        bad = int(np.argmin(vol))
        raise MeshError(f"cell {bad} has non-positive signed volume {vol[bad]:.3e}"
                        " (clockwise or degenerate)")

    locs = _local_facets(dim)
    # facet key -> (plus cell, plus local); second visit fills minus side
    first: dict[tuple, tuple[int, int]] = {}
    fverts, fcells, flocal = [], [], []
    for c in range(nc):
        cv = cells[c]
        for li, lv in enumerate(locs):
            ordered = tuple(int(cv[j]) for j in lv)
            key = tuple(sorted(ordered))
            if key not in first:
                first[key] = len(fverts)
                fverts.append(ordered)
                fcells.append([c, -1])
                flocal.append([li, -1])
            else:
                fi = first[key]
                if fcells[fi][1] != -1:
                    raise MeshError(f"facet {key} shared by more than two cells")
                fcells[fi][1] = c
                flocal[fi][1] = li

    facet_vertices = np.asarray(fverts, dtype=np.int64)
    facet_cells = np.asarray(fcells, dtype=np.int64)
    facet_local = np.asarray(flocal, dtype=np.int64)
    nf = facet_vertices.shape[0]

    normal, measure, midpoint = _facet_geometry(dim, vertices, facet_vertices)

    tag = np.zeros(nf, dtype=np.int8)
    interior = facet_cells[:, 1] >= 0
    # interface = interior facets between different regions
    rplus = region[facet_cells[:, 0]]
    rminus = np.where(interior, region[np.maximum(facet_cells[:, 1], 0)], rplus)
    tag[interior & (rplus != rminus)] = TAG_INTERFACE

    for fi in np.nonzero(~interior)[0]:
        key = frozenset(int(v) for v in facet_vertices[fi])
        t = None if boundary_tag_of is None else boundary_tag_of.get(key)
        if t is None:
            if boundary_tag_of is not None:
                raise MeshError(f"untagged boundary facet with vertices {sorted(key)}")
            t = TAG_SHORE
        if t == TAG_INTERFACE:
            raise MeshError(f"boundary facet {sorted(key)} tagged as interface Γ3")
        tag[fi] = t

    if boundary_tag_of is not None:
        # interface lines named in the input must coincide with the derived set
        for key, t in boundary_tag_of.items():
            if t == TAG_INTERFACE:
                fi = first.get(tuple(sorted(key)))
                if fi is None or tag[fi] != TAG_INTERFACE:
                    raise MeshError(f"facet {sorted(key)} tagged Γ3 but does not "
                                    "separate differently-tagged regions")

    return Mesh(dim=dim, vertices=vertices, cells=cells, region=region,
                facet_vertices=facet_vertices, facet_cells=facet_cells,
                facet_local=facet_local, facet_tag=tag,
                facet_normal=normal, facet_measure=measure,
                facet_midpoint=midpoint, cell_volume=vol, cell_diameter=diam)


def _facet_geometry(dim, vertices, facet_vertices):
    if dim == 1:
        midpoint = vertices[facet_vertices[:, 0]]
        measure = np.ones(facet_vertices.shape[0])
        normal = np.zeros((facet_vertices.shape[0], 1))
        return normal, measure, midpoint
    a = vertices[facet_vertices[:, 0]]
    b = vertices[facet_vertices[:, 1]]
    t = b - a
    measure = np.linalg.norm(t, axis=1)
    if np.any(measure <= 0.0):
        raise MeshError("zero-length facet")
    # plus cell traverses (a, b) counterclockwise => outward normal is the
    # right-hand rotation of the tangent
    normal = np.stack([t[:, 1], -t[:, 0]], axis=1) / measure[:, None]
    return normal, measure, 0.5 * (a + b)


def _fix_normals(mesh: Mesh) -> Mesh:
    """1D normals point from the plus cell toward the facet."""
    if mesh.dim != 1:
        return mesh
    cmid = 0.5 * (mesh.vertices[mesh.cells[:, 0], 0] + mesh.vertices[mesh.cells[:, 1], 0])
    sgn = np.sign(mesh.facet_midpoint[:, 0] - cmid[mesh.facet_cells[:, 0]])
    object.__setattr__(mesh, "facet_normal", sgn[:, None])
    return mesh


# ---------------------------------------------------------------------------
# builders


def build_interval(n_cells: int, length: float = 1.0) -> Mesh:
    """Uniform 1D mesh on [0, length]; both endpoints tagged as shore Γ1."""
    if n_cells < 1:
        raise ValueError("n_cells must be >= 1")
    if length <= 0.0:
        raise ValueError("length must be positive")
    x = np.linspace(0.0, length, n_cells + 1)
    cells = np.stack([np.arange(n_cells), np.arange(1, n_cells + 1)], axis=1)
    tags = {frozenset((0,)): TAG_SHORE, frozenset((n_cells,)): TAG_SHORE}
    return _fix_normals(build_mesh(1, x[:, None], cells, boundary_tag_of=tags))


def _ring(center, r, n, phase=0.5):
    k = np.arange(n)
    th = (k + phase) * (2.0 * np.pi / n)
    # deterministic, mirror-symmetric de-cocircularization (negligible size)
    wobble = 1.0 + 3e-7 * (np.sin(3.0 * np.sin(th)) + 0.37 * np.cos(2.0 * th))
    rr = r * wobble
    return np.stack([center[0] + rr * np.cos(th), center[1] + rr * np.sin(th)], axis=1)


def build_half_circle(radius: float, obstacle_center: tuple[float, float],
                      obstacle_radius: float, target_h: float,
                      gamma3_refine: float = 2.0) -> Mesh:
    """Half-disk domain with an interior circular permeable obstacle.

    The flat diameter (y=0, x in [0, 2*radius]) is the shore Γ1, the arc the
    open sea Γ2, and the obstacle circle the interface Γ3 (derived from the
    region tags). Element diameters next to Γ3 are at most target_h/2
    (stronger local refinement via gamma3_refine >= 2).
    """
    from scipy.spatial import Delaunay

    cx, cy = float(obstacle_center[0]), float(obstacle_center[1])
    ro = float(obstacle_radius)
    R = float(radius)
    if ro <= 0.0:
        raise MeshError("obstacle radius must be positive")
    dome = np.hypot(cx - R, cy)
    if cy - ro <= 1e-12 or dome + ro >= R - 1e-12 or cy <= 0.0:
        raise MeshError("obstacle disk must lie strictly inside the half-disk")
    if target_h <= 0.0:
        raise ValueError("target_h must be positive")
    if gamma3_refine < 2.0:
        raise ValueError("gamma3_refine must be at least 2")

    h3 = target_h / gamma3_refine
    n3 = int(np.ceil(2.0 * np.pi * ro / h3))
    n3 = max(16, n3 + (n3 % 2))
    ell3 = 2.0 * ro * np.sin(np.pi / n3)

    def inside(pts, margin):
        d_out = R - np.hypot(pts[:, 0] - R, pts[:, 1])
        return (pts[:, 1] > margin) & (d_out > margin)

    for attempt in range(3):
        delta = (0.85 + 0.15 * attempt) * ell3
        pts = [_ring((cx, cy), ro, n3)]
        # interior of the obstacle: shrinking rings plus the center
        r = ro - delta
        while r > 0.55 * delta:
            nr = max(8, int(round(n3 * r / ro)))
            nr += nr % 2
            pts.append(_ring((cx, cy), r, nr))
            r -= delta
        pts.append(np.array([[cx, cy]]))
        # graded rings outward until the local spacing reaches target_h
        s = ell3
        r = ro
        r_outer = ro
        while True:
            s_new = min(1.25 * s, target_h)
            r = r + 0.85 * s_new
            nr = max(8, int(round(2.0 * np.pi * r / s_new)))
            nr += nr % 2
            ring = _ring((cx, cy), r, nr)
            keep = inside(ring, 0.55 * s_new)
            pts.append(ring[keep])
            r_outer = r
            s = s_new
            if s >= target_h and r > ro + 2.0 * target_h:
                break
        # background lattice, mirror-symmetric about x = cx
        hy = target_h * np.sqrt(3.0) / 2.0
        rows = np.arange(1, int(np.ceil(R / hy)) + 1)
        bg = []
        for m in rows:
            y = m * hy
            off = 0.5 * (m % 2)
            jmax = int(np.ceil((2 * R) / target_h)) + 1
            xs = cx + (np.arange(-jmax, jmax + 1) + off) * target_h
            row = np.stack([xs, np.full_like(xs, y)], axis=1)
            bg.append(row)
        bg = np.concatenate(bg, axis=0)
        keep = inside(bg, 0.55 * target_h)
        keep &= np.hypot(bg[:, 0] - cx, bg[:, 1] - cy) > r_outer + 0.5 * target_h
        pts.append(bg[keep])
        # outer boundary: diameter and arc
        n_diam = max(8, int(np.ceil(2 * R / target_h)))
        xs = np.linspace(0.0, 2 * R, n_diam + 1)
        pts.append(np.stack([xs, np.zeros_like(xs)], axis=1))
        n_arc = max(8, int(np.ceil(np.pi * R / target_h)))
        th = np.linspace(0.0, np.pi, n_arc + 1)[1:-1]
        pts.append(np.stack([R + R * np.cos(th), R * np.sin(th)], axis=1))

        points = np.concatenate(pts, axis=0)
        # dedupe
        key = np.round(points / 1e-9).astype(np.int64)
        _, idx = np.unique(key, axis=0, return_index=True)
        points = points[np.sort(idx)]

        tri = Delaunay(points)
        cells = tri.simplices.copy()
        p0, p1, p2 = (points[cells[:, i]] for i in range(3))
        area2 = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
                 - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0]))
        flip = area2 < 0
        cells[flip] = cells[flip][:, [0, 2, 1]]
        good = np.abs(area2) > 1e-12 * target_h ** 2
        cells = cells[good]

        centroid = points[cells].mean(axis=1)
        region = (np.hypot(centroid[:, 0] - cx, centroid[:, 1] - cy) < ro).astype(np.int8)

        if _circle_conforms(points, cells, region, (cx, cy), ro, n3):
            break
    else:
        raise MeshError("could not build an interface-conforming half-circle mesh")

    # tag boundary facets of the Delaunay hull
    tags = {}
    edge_count: dict[frozenset, int] = {}
    for cv in cells:
        for a, b in ((cv[0], cv[1]), (cv[1], cv[2]), (cv[2], cv[0])):
            k = frozenset((int(a), int(b)))
            edge_count[k] = edge_count.get(k, 0) + 1
    for k, cnt in edge_count.items():
        if cnt == 1:
            a, b = sorted(k)
            mid = 0.5 * (points[a] + points[b])
            tags[k] = TAG_SHORE if mid[1] < 0.25 * target_h else TAG_OPEN_SEA
    return build_mesh(2, points, cells, region=region, boundary_tag_of=tags)


def _circle_conforms(points, cells, region, center, ro, n3):
    """All n3 circle chords must appear as edges separating the two regions."""
    on_circle = np.nonzero(np.abs(np.hypot(points[:, 0] - center[0],
                                           points[:, 1] - center[1]) - ro)
                           < 1e-5 * ro)[0]
    if on_circle.size != n3:
        return False
    th = np.arctan2(points[on_circle, 1] - center[1], points[on_circle, 0] - center[0])
    ordered = on_circle[np.argsort(th)]
    wanted = {frozenset((int(ordered[i]), int(ordered[(i + 1) % n3]))) for i in range(n3)}
    edges: dict[frozenset, list[int]] = {}
    for ci, cv in enumerate(cells):
        for a, b in ((cv[0], cv[1]), (cv[1], cv[2]), (cv[2], cv[0])):
            edges.setdefault(frozenset((int(a), int(b))), []).append(ci)
    for k in wanted:
        adj = edges.get(k)
        if adj is None or len(adj) != 2 or region[adj[0]] == region[adj[1]]:
            return False
    return True


# ---------------------------------------------------------------------------
# deformation and validation


def apply_displacement(mesh: Mesh, w: np.ndarray, step: float) -> Mesh:
    """New mesh with vertices moved by step*w; tags and regions ride along."""
    w = np.asarray(w, dtype=float).reshape(mesh.n_vertices, mesh.dim)
    vertices = mesh.vertices + step * w
    vol, diam = _cell_geometry(mesh.dim, vertices, mesh.cells)
    normal, measure, midpoint = _facet_geometry(mesh.dim, vertices, mesh.facet_vertices)
    out = Mesh(dim=mesh.dim, vertices=vertices, cells=mesh.cells, region=mesh.region,
               facet_vertices=mesh.facet_vertices, facet_cells=mesh.facet_cells,
               facet_local=mesh.facet_local, facet_tag=mesh.facet_tag,
               facet_normal=normal, facet_measure=measure, facet_midpoint=midpoint,
               cell_volume=vol, cell_diameter=diam)
    return _fix_normals(out)


@dataclass
class ValidityReport:
    inverted_cells: list[int]
    gamma3_crossings: list[tuple[int, int]]

    @property
    def valid(self) -> bool:
        return not self.inverted_cells and not self.gamma3_crossings


def _segments_cross(p1, p2, p3, p4):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def validate_mesh(mesh: Mesh) -> ValidityReport:
    """Report inverted cells and self-intersections of the Γ3 polyline."""
    inverted = np.nonzero(mesh.cell_volume <= 0.0)[0].tolist()
    crossings = []
    if mesh.dim == 2:
        g3 = mesh.interface_facets()
        segs = mesh.facet_vertices[g3]
        pts = mesh.vertices
        # brute force; Γ3 is small
        for i in range(len(g3)):
            for j in range(i + 1, len(g3)):
                if set(segs[i]) & set(segs[j]):
                    continue
                if _segments_cross(pts[segs[i, 0]], pts[segs[i, 1]],
                                   pts[segs[j, 0]], pts[segs[j, 1]]):
                    crossings.append((int(g3[i]), int(g3[j])))
    return ValidityReport([int(c) for c in inverted], crossings)


def gamma3_loop(mesh: Mesh) -> np.ndarray:
    """Vertex indices of the Γ3 polyline ordered as a single closed CCW loop.

    CCW means the obstacle lies to the left of the traversal; raises MeshError
    for an open or multiply-connected interface.
    """
    g3 = mesh.interface_facets()
    if g3.size == 0:
        raise MeshError("mesh has no Γ3 interface")
    adj: dict[int, list[int]] = {}
    for a, b in mesh.facet_vertices[g3]:
        adj.setdefault(int(a), []).append(int(b))
        adj.setdefault(int(b), []).append(int(a))
    if any(len(v) != 2 for v in adj.values()):
        raise MeshError("Γ3 polyline is open or branching")
    start = min(adj)
    loop = [start, adj[start][0]]
    while True:
        a, b = loop[-2], loop[-1]
        nxt = adj[b][0] if adj[b][0] != a else adj[b][1]
        if nxt == start:
            break
        loop.append(nxt)
        if len(loop) > len(adj) + 1:
            raise MeshError("Γ3 polyline is not a single loop")
    if len(loop) != len(adj):
        raise MeshError("Γ3 has more than one loop")
    pts = mesh.vertices[loop]
    signed2 = np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    if signed2 < 0:
        loop = loop[::-1]
    return np.asarray(loop, dtype=np.int64)


def gamma3_outward_normals(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """(facet indices of Γ3, unit normals pointing out of the obstacle D)."""
    g3 = mesh.interface_facets()
    n = mesh.facet_normal[g3].copy()
    plus_region = mesh.region[mesh.facet_cells[g3, 0]]
    flip = plus_region == REGION_WATER
    n[flip] *= -1.0
    return g3, n
