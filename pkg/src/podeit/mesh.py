"""Triangular disk meshes with boundary electrodes.

Vertices carry the piecewise-linear conductivity basis; vertices plus edge
midpoints carry the piecewise-quadratic potential basis. Quadratic node
``n_vertices + e`` is the midpoint of edge ``e``, where edges are stored as
sorted vertex pairs in lexicographic order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from podeit.errors import GenerationFailed, GeometryInfeasible

MIN_ELEMENTS_PER_ELECTRODE = 16


@dataclass(frozen=True)
class ElectrodeLayout:
    """Equispaced electrodes on a circle; electrode ``l`` is centred at
    ``angular_offset + 2*pi*l/count``."""

    count: int = 16
    width: float = 2.5
    radius: float = 14.0
    angular_offset: float = 0.0

    def __post_init__(self):
        if self.count < 2:
            raise GeometryInfeasible(f"need at least 2 electrodes, got {self.count}")
        if self.width <= 0 or self.radius <= 0:
            raise GeometryInfeasible("electrode width and radius must be positive")
        if self.width * self.count >= 2 * np.pi * self.radius:
            raise GeometryInfeasible(
                f"{self.count} electrodes of width {self.width} overlap on a circle "
                f"of radius {self.radius}"
            )

    @property
    def pitch(self) -> float:
        return 2 * np.pi / self.count

    @property
    def half_angle(self) -> float:
        return 0.5 * self.width / self.radius

    def arcs(self) -> np.ndarray:
        """(count, 2) start/end angles, start in [0, 2pi)."""
        centres = self.angular_offset + self.pitch * np.arange(self.count)
        start = np.mod(centres - self.half_angle, 2 * np.pi)
        return np.column_stack([start, start + 2 * self.half_angle])


@dataclass(frozen=True, eq=False)
class Mesh2D:
    vertices: np.ndarray
    triangles: np.ndarray
    electrode_edges: tuple
    # circle radius when boundary vertices lie on a circle; boundary edge
    # measures are then arc lengths
    radius: float | None = None
    layout: ElectrodeLayout | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_linear_nodes(self) -> int:
        return len(self.vertices)

    @property
    def n_quadratic_nodes(self) -> int:
        return len(self.vertices) + len(self.edges)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_edges)

    @cached_property
    def _edge_data(self):
        tri = self.triangles
        # local edge k joins local vertices (k, k+1)
        local = np.stack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=1)
        pairs = np.sort(local.reshape(-1, 2), axis=1)
        edges, inverse, counts = np.unique(
            pairs, axis=0, return_inverse=True, return_counts=True
        )
        return edges, inverse.reshape(-1, 3), counts

    @property
    def edges(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def triangle_edges(self) -> np.ndarray:
        return self._edge_data[1]

    @property
    def edge_midpoint_nodes(self) -> np.ndarray:
        return self.n_linear_nodes + np.arange(len(self.edges))

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return np.flatnonzero(self._edge_data[2] == 1)

    @cached_property
    def quadratic_dofs(self) -> np.ndarray:
        """(n_elements, 6): three vertices, then midpoints of edges 01, 12, 20."""
        return np.hstack([self.triangles, self.edge_midpoint_nodes[self.triangle_edges]])

    @cached_property
    def quadratic_nodes(self) -> np.ndarray:
        mid = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        return np.vstack([self.vertices, mid])

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edge_measure(self, edge_ids) -> np.ndarray:
        a, b = self.vertices[self.edges[edge_ids, 0]], self.vertices[self.edges[edge_ids, 1]]
        chord = np.linalg.norm(b - a, axis=1)
        if self.radius is None:
            return chord
        return 2 * self.radius * np.arcsin(np.clip(chord / (2 * self.radius), 0, 1))

    def electrode_lengths(self) -> np.ndarray:
        return np.array([self.edge_measure(e).sum() for e in self.electrode_edges])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.vertices, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.triangles, dtype=np.int64).tobytes())
        for group in self.electrode_edges:
            h.update(np.asarray(group, dtype=np.int64).tobytes())
            h.update(b"|")
        h.update(repr(None if self.radius is None else float(self.radius)).encode())
        return h.hexdigest()[:16]

    def locate(self, points: np.ndarray, extrapolate: bool = True):
        """Containing triangle and barycentric coordinates for each point.

        Points outside the mesh (e.g. on the circle beyond a boundary chord)
        are attached to the triangle with the least negative barycentric
        coordinate among nearby candidates when ``extrapolate`` is set.
        Unlocated points get triangle -1.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        P = self.vertices[self.triangles]
        if "centroid_tree" not in self._cache:
            self._cache["centroid_tree"] = cKDTree(P.mean(axis=1))
        tree = self._cache["centroid_tree"]
        k = min(12, self.n_elements)
        _, cand = tree.query(points, k=k)
        cand = cand.reshape(len(points), k)
        lam = _barycentric(P[cand], points[:, None, :])
        worst = lam.min(axis=2)
        best = np.argmax(worst, axis=1)
        rows = np.arange(len(points))
        tri_id = cand[rows, best]
        bary = lam[rows, best]
        missing = worst[rows, best] < -1e-10
        for i in np.flatnonzero(missing):
            full = _barycentric(P, points[i][None, :])
            j = int(np.argmax(full.min(axis=1)))
            tri_id[i], bary[i] = j, full[j]
            missing[i] = full[j].min() < -1e-10
        if not extrapolate:
            tri_id = np.where(missing, -1, tri_id)
        return tri_id, bary


def _barycentric(P: np.ndarray, x: np.ndarray) -> np.ndarray:
    """P: (..., 3, 2) triangles, x: (..., 2) points -> (..., 3)."""
    a, b, c = P[..., 0, :], P[..., 1, :], P[..., 2, :]
    det = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (c[..., 0] - a[..., 0]) * (b[..., 1] - a[..., 1])
    l1 = ((x[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (c[..., 0] - a[..., 0]) * (x[..., 1] - a[..., 1])) / det
    l2 = ((b[..., 0] - a[..., 0]) * (x[..., 1] - a[..., 1]) - (x[..., 0] - a[..., 0]) * (b[..., 1] - a[..., 1])) / det
    return np.stack([1 - l1 - l2, l1, l2], axis=-1)


def mesh_from_arrays(vertices, triangles, electrode_vertex_pairs, radius=None, layout=None) -> Mesh2D:
    """Build a mesh from raw arrays; electrodes given as lists of boundary
    vertex pairs. Orientation is kept as given (see ``validate_mesh``)."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    probe = Mesh2D(vertices, triangles, ())
    edges = probe.edges
    lookup = {tuple(e): i for i, e in enumerate(edges.tolist())}
    groups = []
    for pairs in electrode_vertex_pairs:
        ids = [lookup[tuple(sorted(p))] for p in pairs]
        groups.append(np.array(sorted(ids), dtype=np.int64))
    return Mesh2D(vertices, triangles, tuple(groups), radius=radius, layout=layout)


def _boundary_angles(layout: ElectrodeLayout, n_boundary: int) -> tuple[np.ndarray, list]:
    """Angles of boundary vertices with every electrode endpoint included,
    and per electrode the index range of its vertices."""
    arcs = layout.arcs()
    L = layout.count
    gap = layout.pitch - 2 * layout.half_angle
    h = 2 * np.pi / n_boundary
    n_el = max(1, int(round(2 * layout.half_angle / h)))
    n_gap = max(1, int(round(gap / h)))
    angles, groups = [], []
    for l in range(L):
        start = arcs[l, 0]
        first = len(angles)
        angles.extend(start + 2 * layout.half_angle * np.arange(n_el) / n_el)
        groups.append((first, first + n_el))  # vertex positions first..first+n_el
        angles.extend(start + 2 * layout.half_angle + gap * np.arange(n_gap) / n_gap)
    return np.mod(np.array(angles), 2 * np.pi), groups


def _ring_points(radius: float, h: float, n_interior: int) -> np.ndarray:
    n_rings = max(1, int(round(radius / h)))
    radii = radius * (n_rings - np.arange(1, n_rings)) / n_rings
    if len(radii) == 0:
        return np.zeros((1, 2)) if n_interior >= 1 else np.zeros((0, 2))
    counts = 2 * np.pi * radii / h
    # one centre point; scale ring counts to hit the interior total exactly
    target = n_interior - 1
    if target <= 0:
        return np.zeros((max(n_interior, 0), 2))[: max(n_interior, 0)]
    counts = counts * target / counts.sum()
    ints = np.floor(counts).astype(int)
    rem = target - ints.sum()
    order = np.argsort(-(counts - ints), kind="stable")
    ints[order[:rem]] += 1
    pts = [np.zeros((1, 2))]
    for k, (r, n) in enumerate(zip(radii, ints)):
        if n == 0:
            continue
        theta = 2 * np.pi * (np.arange(n) + 0.5 * (k % 2)) / n + 0.1234 * k
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
    return np.vstack(pts)


def _smooth(points: np.ndarray, n_fixed: int, iterations: int) -> tuple[np.ndarray, np.ndarray]:
    for _ in range(iterations):
        simplices = Delaunay(points).simplices
        n = len(points)
        acc = np.zeros((n, 2))
        deg = np.zeros(n)
        for a, b in ((0, 1), (1, 2), (2, 0)):
            i, j = simplices[:, a], simplices[:, b]
            np.add.at(acc, i, points[j])
            np.add.at(acc, j, points[i])
            np.add.at(deg, i, 1)
            np.add.at(deg, j, 1)
        # each edge is seen twice (once per triangle); the ratio is unaffected
        new = acc / deg[:, None]
        points = np.vstack([points[:n_fixed], new[n_fixed:]])
    return points, Delaunay(points).simplices


def generate_disk_mesh(layout: ElectrodeLayout, target_elements: int, smoothing: int = 8) -> Mesh2D:
    """Deterministic disk mesh with ``target_elements`` triangles (exactly,
    whenever the boundary parity allows it).

    Boundary vertices lie on the circle and include every electrode endpoint.
    Interior points are seeded on concentric rings, Laplacian-smoothed, and
    Delaunay-triangulated.
    """
    if target_elements < MIN_ELEMENTS_PER_ELECTRODE * layout.count:
        raise GeometryInfeasible(
            f"{target_elements} elements cannot resolve {layout.count} electrodes "
            f"(need at least {MIN_ELEMENTS_PER_ELECTRODE * layout.count})"
        )
    R = layout.radius
    h = np.sqrt(4 * np.pi * R**2 / (np.sqrt(3) * target_elements))
    n_b = max(2 * layout.count, int(round(2 * np.pi * R / h)))
    angles, groups = _boundary_angles(layout, n_b)
    n_b = len(angles)
    # Delaunay of a convex point set with n_b hull vertices: T = 2 n_i + n_b - 2
    n_i = (target_elements - n_b + 2) // 2
    if n_i < 1:
        raise GenerationFailed("too few elements for the boundary resolution")
    boundary = R * np.column_stack([np.cos(angles), np.sin(angles)])
    interior = _ring_points(R, h, n_i)
    # keep interior points safely inside the boundary polygon
    r = np.linalg.norm(interior, axis=1)
    limit = R * np.cos(np.pi / n_b) - 0.35 * h
    interior[r > limit] *= (limit / r[r > limit])[:, None]
    points, simplices = _smooth(np.vstack([boundary, interior]), n_b, smoothing)

    tri = _orient(points, simplices)
    electrode_pairs = []
    for first, last in groups:
        idx = [(first + k) % n_b for k in range(last - first + 1)]
        electrode_pairs.append(list(zip(idx[:-1], idx[1:])))
    mesh = mesh_from_arrays(points, tri, electrode_pairs, radius=R, layout=layout)
    bad = [issue for issue in validate_mesh(mesh) if issue.kind == "electrode-coverage"]
    if bad:
        raise GenerationFailed(f"electrode endpoints not aligned: {bad[0].message}")
    return mesh


def _orient(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    tri = np.array(tri, dtype=np.int64)
    p = points[tri]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]
    # canonical element order for reproducible numbering
    order = np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))
    return tri[order]


@dataclass(frozen=True)
class MeshIssue:
    kind: str
    indices: tuple
    message: str


def validate_mesh(mesh: Mesh2D, chord_tol: float = 1e-9) -> list[MeshIssue]:
    """Every violated invariant, with offending indices. Empty iff valid."""
    issues = []
    tri = mesh.triangles
    nv = mesh.n_linear_nodes
    if tri.size and (tri.min() < 0 or tri.max() >= nv):
        issues.append(MeshIssue("index-range", (), "triangle references a missing vertex"))
        return issues

    areas = mesh.areas
    flipped = np.flatnonzero(areas <= 0)
    if len(flipped):
        issues.append(
            MeshIssue("orientation", tuple(flipped.tolist()),
                      f"triangles {flipped.tolist()} are not positively oriented")
        )

    counts = mesh._edge_data[2]
    overused = np.flatnonzero(counts > 2)
    if len(overused):
        issues.append(
            MeshIssue("conformity", tuple(overused.tolist()),
                      f"edges {overused.tolist()} are shared by more than two triangles")
        )
    if mesh.radius is not None:
        be = mesh.edges[mesh.boundary_edges]
        r = np.linalg.norm(mesh.vertices[be.ravel()], axis=1)
        off = np.flatnonzero(np.abs(r - mesh.radius) > 1e-9 * mesh.radius)
        if len(off):
            issues.append(
                MeshIssue("conformity", tuple(mesh.boundary_edges[off // 2].tolist()),
                          "boundary edges with a vertex off the circle (hanging or interior hole)")
            )

    mid = mesh.quadratic_nodes[mesh.edge_midpoint_nodes]
    expect = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    wrong = np.flatnonzero(np.linalg.norm(mid - expect, axis=1) > 1e-12)
    if len(wrong):
        issues.append(MeshIssue("midpoint", tuple(wrong.tolist()), "second-order nodes off midpoints"))

    boundary = set(mesh.boundary_edges.tolist())
    seen = {}
    for l, group in enumerate(mesh.electrode_edges):
        not_boundary = [int(e) for e in group if int(e) not in boundary]
        if not_boundary:
            issues.append(
                MeshIssue("electrode-coverage", tuple(not_boundary),
                          f"electrode {l} uses non-boundary edges {not_boundary}")
            )
        for e in group:
            if int(e) in seen:
                issues.append(
                    MeshIssue("electrode-overlap", (int(e),),
                              f"edge {int(e)} belongs to electrodes {seen[int(e)]} and {l}")
                )
            seen[int(e)] = l
        if len(group) == 0:
            issues.append(MeshIssue("electrode-coverage", (l,), f"electrode {l} has no edges"))
            continue
        verts, deg = np.unique(mesh.edges[group].ravel(), return_counts=True)
        ends = verts[deg == 1]
        if len(ends) != 2 or np.any(deg > 2):
            issues.append(
                MeshIssue("electrode-coverage", tuple(np.asarray(group).tolist()),
                          f"electrode {l} edges do not form a single chain")
            )
            continue
        if mesh.layout is not None:
            arc = mesh.layout.arcs()[l]
            want = mesh.layout.radius * np.column_stack([np.cos(arc), np.sin(arc)])
            got = mesh.vertices[ends]
            d = np.linalg.norm(got[:, None, :] - want[None, :, :], axis=2)
            if min(d[0, 0] + d[1, 1], d[0, 1] + d[1, 0]) > chord_tol * mesh.layout.radius + 1e-12:
                issues.append(
                    MeshIssue("electrode-coverage", tuple(np.asarray(group).tolist()),
                              f"electrode {l} endpoints miss its arc by {d.min():.3g}")
                )
            length = mesh.edge_measure(np.asarray(group)).sum()
            if abs(length - mesh.layout.width) > 1e-9 * mesh.layout.width:
                issues.append(
                    MeshIssue("electrode-coverage", tuple(np.asarray(group).tolist()),
                              f"electrode {l} length {length:.12g} != width {mesh.layout.width}")
                )
    return issues
