"""Canonical body surface: chart atlas, geodesic metric, evaluation.

The surface is a triangle mesh in canonical pose. Charts partition the
faces: every triangle's vertices share one chart id, so charts never
share triangle vertices; parts are instead welded by coincident vertex
pairs joined through explicit weld edges carried on the mesh. Geodesics
run on the vertex-edge graph (triangle edges plus weld edges) with
Euclidean lengths.

Edge lengths are quantized to multiples of 2**-20 units (~1e-6, far
below any threshold in use). All path sums are then exact in float64,
so every correct shortest-path algorithm returns bit-identical
distances regardless of relaxation order; the brute-force oracle in the
tests exploits this.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

from .puppet import PuppetConfig, build_parts, canonical_pose, place_parts

__all__ = [
    "SurfaceMesh",
    "UVMap",
    "GeodesicIndex",
    "build_puppet_surface",
    "uv_to_point",
    "geodesic",
    "geodesic_many",
    "ratio_within",
    "mesh_to_entries",
    "entries_to_mesh",
    "save_obj",
    "EDGE_QUANTUM",
    "DEFAULT_THRESHOLDS",
]

EDGE_QUANTUM = 2.0 ** -20
DEFAULT_THRESHOLDS = (5.0, 10.0, 20.0)  # body units; 1 unit ~ 1 cm
ALL_PAIRS_LIMIT = 2000


@dataclass
class UVMap:
    """Per-pixel surface assignment: chart index (0 = background) and
    chart coordinates u in [0,1]^2 (meaningless where chart is 0)."""

    chart: np.ndarray
    u: np.ndarray

    def foreground(self):
        """(pixel index array, k, u) for all non-background pixels."""
        ys, xs = np.nonzero(self.chart)
        return (xs, ys), self.chart[ys, xs], self.u[ys, xs]


@dataclass
class SurfaceMesh:
    vertices: np.ndarray      # (V, 3) float64, canonical pose, body units
    triangles: np.ndarray     # (T, 3) int32
    vertex_chart: np.ndarray  # (V,) int32, 1-based
    vertex_uv: np.ndarray     # (V, 2) float64 in [0,1]^2
    weld_edges: np.ndarray    # (W, 2) int32, coincident cross-chart pairs
    _chart_cache: dict = field(default_factory=dict, repr=False)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_charts(self) -> int:
        return int(self.vertex_chart.max())

    def check(self) -> None:
        """Validate the atlas invariants; raises ValueError."""
        tri_charts = self.vertex_chart[self.triangles]
        if np.any(tri_charts.max(axis=1) != tri_charts.min(axis=1)):
            raise ValueError("triangle spans multiple charts")
        if np.min(self.vertex_uv) < 0.0 or np.max(self.vertex_uv) > 1.0:
            raise ValueError("vertex uv outside [0,1]^2")
        # (k, u) -> vertex must be injective
        keys = np.concatenate([self.vertex_chart[:, None].astype(np.float64),
                               self.vertex_uv], axis=1)
        uniq = np.unique(np.round(keys, 12), axis=0)
        if uniq.shape[0] != self.num_vertices:
            raise ValueError("duplicate (chart, u) across vertices")
        n, _ = csgraph.connected_components(_adjacency(self), directed=False)
        if n != 1:
            raise ValueError("mesh is not edge-connected")

    def chart_tables(self, chart: int):
        """Cached per-chart arrays for point location and snapping:
        (triangle uv (M,3,2), triangle xyz (M,3,3), vertex KD-tree,
        global vertex ids). Seam triangles whose uv image wraps around
        (u1 span > 0.5) are excluded from point location."""
        if chart not in self._chart_cache:
            if chart < 1 or chart > self.num_charts:
                raise ValueError(f"unknown chart {chart}")
            tri_chart = self.vertex_chart[self.triangles[:, 0]]
            tris = self.triangles[tri_chart == chart]
            uv = self.vertex_uv[tris]
            span = uv[..., 0].max(axis=1) - uv[..., 0].min(axis=1)
            keep = span <= 0.5
            vid = np.nonzero(self.vertex_chart == chart)[0]
            self._chart_cache[chart] = (
                uv[keep], self.vertices[tris[keep]],
                cKDTree(self.vertices[vid]), vid,
            )
        return self._chart_cache[chart]


def _adjacency(mesh: SurfaceMesh) -> sparse.csr_matrix:
    """Symmetric edge-length graph: triangle edges + weld edges, lengths
    quantized to EDGE_QUANTUM (welds use one quantum, never zero, so
    sparse zero-drop semantics cannot lose them)."""
    tri = mesh.triangles
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]], axis=0)
    edges = np.sort(edges, axis=1)
    edges = np.unique(edges, axis=0)
    if mesh.weld_edges.size:
        welds = np.unique(np.sort(mesh.weld_edges, axis=1), axis=0)
        edges = np.concatenate([edges, welds], axis=0)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]],
                             axis=1)
    lengths = np.maximum(np.round(lengths / EDGE_QUANTUM), 1.0) * EDGE_QUANTUM
    n = mesh.num_vertices
    mat = sparse.coo_matrix(
        (np.concatenate([lengths, lengths]),
         (np.concatenate([edges[:, 0], edges[:, 1]]),
          np.concatenate([edges[:, 1], edges[:, 0]]))),
        shape=(n, n))
    # triangle edges are same-chart, weld edges cross-chart: no duplicates
    return mat.tocsr()


# ---------------------------------------------------------------------------
# construction


def build_puppet_surface(config: PuppetConfig | None = None) -> SurfaceMesh:
    """Triangulated capped-tube body in canonical pose.

    Ring rows sit at u2 = i/(R+1); cap apexes carry u = (0.5, 0) and
    (0.5, 1). Each non-root part's base apex is snapped onto the nearest
    parent-surface vertex and welded to it.
    """
    config = config or PuppetConfig()
    parts = build_parts(config)
    placements = place_parts(parts, canonical_pose(1))

    verts: list = []
    uvs: list = []
    charts: list = []
    tris: list = []
    welds: list = []
    base_apex: dict = {}
    vert_ranges: dict = {}

    for part in parts:
        pl = placements[part.name]
        start = len(verts)
        r_count, s_count = part.rings, part.segments
        ring_idx = np.zeros((r_count, s_count), dtype=np.int64)
        for i in range(1, r_count + 1):
            t = i * part.length / (r_count + 1)
            axis_pt = pl.to_world(t, 0.0)
            for j in range(s_count):
                alpha = j / s_count
                phi = 2.0 * np.pi * (alpha - 0.5)
                d = part.radius * np.sin(phi)
                z = part.radius * np.cos(phi)
                xy = axis_pt + d * pl.normal
                verts.append([xy[0], xy[1], z])
                uvs.append([alpha, t / part.length])
                charts.append(part.chart)
                ring_idx[i - 1, j] = len(verts) - 1
        a0 = len(verts)
        xy0 = pl.to_world(0.0, 0.0)
        verts.append([xy0[0], xy0[1], 0.0])
        uvs.append([0.5, 0.0])
        charts.append(part.chart)
        a1 = len(verts)
        xy1 = pl.to_world(part.length, 0.0)
        verts.append([xy1[0], xy1[1], 0.0])
        uvs.append([0.5, 1.0])
        charts.append(part.chart)
        base_apex[part.name] = a0
        vert_ranges[part.name] = (start, len(verts))

        for i in range(r_count - 1):
            for j in range(s_count):
                j1 = (j + 1) % s_count
                v00, v01 = ring_idx[i, j], ring_idx[i, j1]
                v10, v11 = ring_idx[i + 1, j], ring_idx[i + 1, j1]
                tris.append([v00, v01, v11])
                tris.append([v00, v11, v10])
        for j in range(s_count):
            j1 = (j + 1) % s_count
            tris.append([a0, ring_idx[0, j1], ring_idx[0, j]])
            tris.append([a1, ring_idx[-1, j], ring_idx[-1, j1]])

    vertices = np.array(verts, dtype=np.float64)

    for part in parts:
        if part.parent is None:
            continue
        lo, hi = vert_ranges[part.parent]
        apex = base_apex[part.name]
        d = np.linalg.norm(vertices[lo:hi] - vertices[apex], axis=1)
        d[base_apex[part.parent] - lo] = np.inf  # weld to surface, not apex chain
        near = lo + int(np.argmin(d))
        vertices[apex] = vertices[near]  # coincident weld pair
        welds.append([near, apex])

    mesh = SurfaceMesh(
        vertices=vertices,
        triangles=np.array(tris, dtype=np.int32),
        vertex_chart=np.array(charts, dtype=np.int32),
        vertex_uv=np.array(uvs, dtype=np.float64),
        weld_edges=np.array(welds, dtype=np.int32).reshape(-1, 2),
    )
    return mesh


# ---------------------------------------------------------------------------
# chart coordinates -> 3D


def uv_to_point(mesh: SurfaceMesh, chart, u) -> np.ndarray:
    """Map (chart, u) queries to canonical 3D points.

    Inside the chart's uv triangulation the map is barycentric; queries
    outside are snapped to the nearest point of the triangulation in uv
    space (nearest-edge projection over all triangles). Accepts scalars
    or arrays; returns (..., 3).
    """
    chart_arr = np.atleast_1d(np.asarray(chart, dtype=np.int64))
    u_arr = np.asarray(u, dtype=np.float64).reshape(-1, 2)
    if chart_arr.shape[0] != u_arr.shape[0]:
        raise ValueError("chart and u lengths differ")
    out = np.zeros((u_arr.shape[0], 3))
    for k in np.unique(chart_arr):
        sel = chart_arr == k
        out[sel] = _chart_points(mesh, int(k), u_arr[sel])
    if np.isscalar(chart) or (isinstance(chart, np.ndarray) and chart.ndim == 0):
        return out[0]
    return out


def _chart_points(mesh: SurfaceMesh, chart: int, q: np.ndarray) -> np.ndarray:
    tri_uv, tri_xyz, _, _ = mesh.chart_tables(chart)
    a = tri_uv[:, 0]
    e1 = tri_uv[:, 1] - a          # (M, 2)
    e2 = tri_uv[:, 2] - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    ok = np.abs(det) > 1e-15
    rel = q[:, None, :] - a[None, :, :]        # (Q, M, 2)
    beta = (rel[..., 0] * e2[None, :, 1] - rel[..., 1] * e2[None, :, 0]) / det
    gamma = (e1[None, :, 0] * rel[..., 1] - e1[None, :, 1] * rel[..., 0]) / det
    alpha = 1.0 - beta - gamma
    bary = np.stack([alpha, beta, gamma], axis=-1)   # (Q, M, 3)
    inside = ok[None, :] & np.all(bary >= -1e-12, axis=-1)
    margin = np.where(inside, bary.min(axis=-1), -np.inf)
    best = np.argmax(margin, axis=1)
    got = inside.any(axis=1)

    out = np.zeros((q.shape[0], 3))
    if np.any(got):
        b = bary[np.nonzero(got)[0], best[got]]
        out[got] = np.einsum("qi,qij->qj", b, tri_xyz[best[got]])
    if np.all(got):
        return out

    # outside the hull: nearest point over all triangle edges in uv space
    miss = np.nonzero(~got)[0]
    qm = q[miss]                                  # (Qm, 2)
    best_d = np.full(miss.shape[0], np.inf)
    best_xyz = np.zeros((miss.shape[0], 3))
    for i0, i1 in ((0, 1), (1, 2), (2, 0)):
        p0, p1 = tri_uv[:, i0], tri_uv[:, i1]    # (M, 2)
        seg = p1 - p0
        len2 = np.maximum(np.sum(seg ** 2, axis=1), 1e-30)
        t = np.clip(np.einsum("qmj,mj->qm", qm[:, None, :] - p0[None, :, :], seg) / len2,
                    0.0, 1.0)                     # (Qm, M)
        proj = p0[None, :, :] + t[..., None] * seg[None, :, :]
        d2 = np.sum((qm[:, None, :] - proj) ** 2, axis=-1)
        am = np.argmin(d2, axis=1)
        dm = d2[np.arange(miss.shape[0]), am]
        take = dm < best_d
        if np.any(take):
            tt = t[np.arange(miss.shape[0]), am][take]
            x0 = tri_xyz[am[take], i0]
            x1 = tri_xyz[am[take], i1]
            best_xyz[take] = x0 + tt[:, None] * (x1 - x0)
            best_d[take] = dm[take]
    out[miss] = best_xyz
    return out


# ---------------------------------------------------------------------------
# geodesics


class GeodesicIndex:
    """All-pairs vertex geodesics on the welded edge graph.

    Distances are exact Dijkstra shortest paths over quantized edge
    lengths; meshes up to ALL_PAIRS_LIMIT vertices are solved once and
    cached densely.
    """

    def __init__(self, mesh: SurfaceMesh, cache_all_pairs: bool | None = None):
        self.mesh = mesh
        graph = _adjacency(mesh)
        n_comp, _ = csgraph.connected_components(graph, directed=False)
        if n_comp != 1:
            raise ValueError("mesh graph is disconnected; cannot index geodesics")
        self.graph = graph
        if cache_all_pairs is None:
            cache_all_pairs = mesh.num_vertices <= ALL_PAIRS_LIMIT
        self.all_pairs = (csgraph.dijkstra(graph, directed=False)
                          if cache_all_pairs else None)

    def vertex_distance(self, i, j):
        if self.all_pairs is not None:
            return self.all_pairs[i, j]
        i_arr = np.atleast_1d(i)
        dist = csgraph.dijkstra(self.graph, directed=False, indices=i_arr)
        return dist[np.arange(i_arr.size), np.atleast_1d(j)]

    def snap(self, chart: np.ndarray, u: np.ndarray):
        """Nearest same-chart vertex per (chart, u) query.

        Returns (vertex ids, Euclidean snap offsets). Snapping is
        chart-local: a query never snaps onto a different body part that
        merely passes nearby in space.
        """
        pts = uv_to_point(self.mesh, chart, u).reshape(-1, 3)
        chart = np.atleast_1d(np.asarray(chart, dtype=np.int64))
        ids = np.zeros(pts.shape[0], dtype=np.int64)
        offs = np.zeros(pts.shape[0])
        for k in np.unique(chart):
            sel = chart == k
            _, _, tree, vid = self.mesh.chart_tables(int(k))
            d, local = tree.query(pts[sel])
            ids[sel] = vid[local]
            offs[sel] = d
        return ids, offs


def geodesic(mesh: SurfaceMesh, index: GeodesicIndex, a, b) -> float:
    """Geodesic between two surface points given as (chart, u) pairs.

    Each point snaps to its nearest same-chart vertex; the result is the
    graph shortest path between the two vertices plus both Euclidean
    snap offsets.
    """
    ka, ua = a
    kb, ub = b
    return float(geodesic_many(mesh, index,
                               np.array([ka]), np.array([ua], dtype=np.float64),
                               np.array([kb]), np.array([ub], dtype=np.float64))[0])


def geodesic_many(mesh: SurfaceMesh, index: GeodesicIndex,
                  ka, ua, kb, ub) -> np.ndarray:
    ia, offa = index.snap(ka, ua)
    ib, offb = index.snap(kb, ub)
    if index.all_pairs is not None:
        path = index.all_pairs[ia, ib]
    else:
        path = index.vertex_distance(ia, ib)
    return path + offa + offb


def ratio_within(index: GeodesicIndex, predictions, truths,
                 thresholds=DEFAULT_THRESHOLDS) -> np.ndarray:
    """Fraction of predictions whose geodesic error is within each
    threshold.

    predictions/truths are (chart, u) array pairs. Pairs whose TRUE
    chart is 0 are excluded (nothing to evaluate); predictions with
    chart 0 on a foreground truth count as failures at every threshold.
    """
    pk, pu = predictions
    tk, tu = truths
    pk = np.asarray(pk).reshape(-1)
    tk = np.asarray(tk).reshape(-1)
    pu = np.asarray(pu, dtype=np.float64).reshape(-1, 2)
    tu = np.asarray(tu, dtype=np.float64).reshape(-1, 2)
    if pk.size == 0:
        raise ValueError("empty prediction set")
    keep = tk > 0
    if not np.any(keep):
        raise ValueError("no foreground truth to evaluate")
    pk, pu, tk, tu = pk[keep], pu[keep], tk[keep], tu[keep]
    dist = np.full(pk.shape[0], np.inf)
    fg = pk > 0
    if np.any(fg):
        dist[fg] = geodesic_many(index.mesh, index, pk[fg], pu[fg], tk[fg], tu[fg])
    thresholds = np.asarray(thresholds, dtype=np.float64)
    return np.array([(dist <= t).mean() for t in thresholds])


# ---------------------------------------------------------------------------
# serialization


def mesh_to_entries(mesh: SurfaceMesh, prefix: str = "mesh/") -> dict:
    return {
        prefix + "vertices": mesh.vertices.astype(np.float32),
        prefix + "triangles": mesh.triangles.astype(np.int32),
        prefix + "chart": mesh.vertex_chart.astype(np.int32),
        prefix + "uv": mesh.vertex_uv.astype(np.float32),
        prefix + "welds": mesh.weld_edges.astype(np.int32),
    }


def entries_to_mesh(entries: dict, prefix: str = "mesh/") -> SurfaceMesh:
    return SurfaceMesh(
        vertices=np.asarray(entries[prefix + "vertices"], dtype=np.float64),
        triangles=np.asarray(entries[prefix + "triangles"], dtype=np.int32),
        vertex_chart=np.asarray(entries[prefix + "chart"], dtype=np.int32),
        vertex_uv=np.asarray(entries[prefix + "uv"], dtype=np.float64),
        weld_edges=np.asarray(entries[prefix + "welds"], dtype=np.int32).reshape(-1, 2),
    )


def save_obj(mesh: SurfaceMesh, path) -> None:
    """OBJ export with chart/uv carried in comments (one per vertex)."""
    lines = ["# capped-tube body surface; chart/uv in trailing comments"]
    for i in range(mesh.num_vertices):
        x, y, z = mesh.vertices[i]
        k = mesh.vertex_chart[i]
        u1, u2 = mesh.vertex_uv[i]
        lines.append(f"v {x!r} {y!r} {z!r}  # chart {k} u {u1!r} {u2!r}")
    for a, b in mesh.weld_edges:
        lines.append(f"# weld {a} {b}")
    for a, b, c in mesh.triangles:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")