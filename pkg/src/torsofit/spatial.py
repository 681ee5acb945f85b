"""Octree over scan vertices and the closest-point correspondence search.

The octree gives exact nearest vertices (branch-and-bound, queries batched in
numpy). Correspondences then refine each match by projecting onto the closest
vertex's one-ring triangles and are filtered by distance and normal angle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import TriangleMesh, closest_points_on_triangles

DEFAULT_MAX_LEAF = 16
DEFAULT_MAX_DEPTH = 12


class SpatialError(Exception):
    pass


@dataclass
class FilterConfig:
    """Outlier rejection thresholds for correspondence search.

    `reject_boundary` drops matches whose closest point lies on an open
    (boundary) edge or vertex of the scan: on partial scans these are
    out-of-overlap source points snapping to hole rims, which would both
    drag the fit and inflate the distance statistics.
    """

    max_distance: float = 50.0      # mm
    max_normal_angle: float = 60.0  # degrees
    reject_boundary: bool = True

    def __post_init__(self):
        if self.max_distance <= 0.0:
            raise SpatialError("max_distance must be positive")
        if not (0.0 < self.max_normal_angle <= 180.0):
            raise SpatialError("max_normal_angle must be in (0, 180]")


class Octree:
    """Exact nearest-neighbor index over a fixed point set.

    Nodes are stored in flat arrays (preorder). Leaves hold buckets of point
    indices; the bounding cube is the tight AABB inflated by 1%. Equal
    distances tie-break toward the lower vertex index.
    """

    def __init__(self, points, max_leaf=DEFAULT_MAX_LEAF,
                 max_depth=DEFAULT_MAX_DEPTH):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise SpatialError("points must be (N, 3)")
        if len(points) == 0:
            raise SpatialError("cannot index an empty point set")
        if not np.isfinite(points).all():
            raise SpatialError("non-finite point coordinates")
        self.points = points
        self.max_leaf = int(max_leaf)
        self.max_depth = int(max_depth)

        lo, hi = points.min(axis=0), points.max(axis=0)
        center = 0.5 * (lo + hi)
        half = 0.5 * float((hi - lo).max()) * 1.01
        half = max(half, 1e-9)

        centers, halves, children, starts, counts, depths = [], [], [], [], [], []
        perm = []

        def build(idx, ctr, h, depth):
            node = len(centers)
            centers.append(ctr)
            halves.append(h)
            children.append([-1] * 8)
            depths.append(depth)
            if len(idx) <= self.max_leaf or depth >= self.max_depth:
                starts.append(len(perm))
                counts.append(len(idx))
                perm.extend(idx.tolist())
                return node
            starts.append(-1)
            counts.append(0)
            p = points[idx]
            code = ((p[:, 0] >= ctr[0]).astype(np.int64)
                    | ((p[:, 1] >= ctr[1]).astype(np.int64) << 1)
                    | ((p[:, 2] >= ctr[2]).astype(np.int64) << 2))
            for oct_ in range(8):
                sub = idx[code == oct_]
                if len(sub) == 0:
                    continue
                off = np.array([(oct_ & 1), (oct_ >> 1) & 1, (oct_ >> 2) & 1],
                               dtype=np.float64)
                cctr = ctr + (off - 0.5) * h
                children[node][oct_] = build(sub, cctr, 0.5 * h, depth + 1)
            return node

        build(np.arange(len(points)), center, half, 0)
        self.centers = np.array(centers)
        self.halves = np.array(halves)
        self.children = np.array(children, dtype=np.int64)
        self.leaf_start = np.array(starts, dtype=np.int64)
        self.leaf_count = np.array(counts, dtype=np.int64)
        self.node_depth = np.array(depths, dtype=np.int64)
        self.perm = np.array(perm, dtype=np.int64)
        self.is_leaf = self.leaf_start >= 0
        self._max_bucket = int(self.leaf_count.max())
        # padded leaf buckets for vectorized evaluation
        pad = np.full((len(centers), self._max_bucket), -1, dtype=np.int64)
        for i in np.flatnonzero(self.is_leaf):
            c = self.leaf_count[i]
            pad[i, :c] = self.perm[self.leaf_start[i]:self.leaf_start[i] + c]
        self._bucket = pad

    @property
    def n_nodes(self):
        return len(self.centers)

    @property
    def depth(self):
        return int(self.node_depth.max())

    def _cube_dist2(self, q, nodes):
        """Squared distance from queries (M,3) to node cubes (M,)."""
        d = np.abs(q - self.centers[nodes]) - self.halves[nodes][:, None]
        d = np.maximum(d, 0.0)
        return np.einsum("ij,ij->i", d, d)

    def _leaf_best(self, qidx, nodes, queries):
        """Per-row nearest point in the given leaf nodes.

        Returns (d2, point_index) arrays aligned with the rows. Buckets store
        indices in ascending order, so argmin tie-breaks toward the lower
        vertex index.
        """
        bucket = self._bucket[nodes]                 # (P, B)
        valid = bucket >= 0
        pts = self.points[np.maximum(bucket, 0)]     # (P, B, 3)
        diff = pts - queries[qidx][:, None, :]
        d2 = np.einsum("pbj,pbj->pb", diff, diff)
        d2 = np.where(valid, d2, np.inf)
        col = np.argmin(d2, axis=1)
        rows = np.arange(len(nodes))
        return d2[rows, col], bucket[rows, col]

    def closest_vertices(self, queries, guess=None):
        """Exact nearest indexed point for each query. Returns (idx, dist).

        `guess` optionally gives a candidate point index per query (e.g. the
        previous iteration's answer); it seeds the branch-and-bound upper
        bound and replaces the descent pass. Results are exact either way.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        nq = len(queries)
        best_d2 = np.full(nq, np.inf)
        best_i = np.zeros(nq, dtype=np.int64)

        def merge(qs, d2s, idxs):
            # per-query reduction of a batch, ties toward the lower index
            order = np.lexsort((idxs, d2s, qs))
            qs, d2s, idxs = qs[order], d2s[order], idxs[order]
            first = np.empty(len(qs), dtype=bool)
            first[:1] = True
            first[1:] = qs[1:] != qs[:-1]
            qs, d2s, idxs = qs[first], d2s[first], idxs[first]
            upd = (d2s < best_d2[qs]) | ((d2s == best_d2[qs])
                                         & (idxs < best_i[qs]))
            best_d2[qs[upd]] = d2s[upd]
            best_i[qs[upd]] = idxs[upd]

        if guess is not None:
            gi = np.asarray(guess, dtype=np.int64)
            gdiff = queries - self.points[gi]
            gd2 = np.einsum("ij,ij->i", gdiff, gdiff)
            best_d2 = gd2
            best_i = gi.copy()
        else:
            # descent pass: land every query in one leaf for an initial bound
            qi = np.arange(nq)
            ni = np.zeros(nq, dtype=np.int64)
            while True:
                internal = ~self.is_leaf[ni]
                if not internal.any():
                    break
                sub_q = qi[internal]
                sub_n = ni[internal]
                kids = self.children[sub_n]              # (M, 8)
                q = queries[sub_q]
                ctr = self.centers[sub_n]
                code = ((q[:, 0] >= ctr[:, 0]).astype(np.int64)
                        | ((q[:, 1] >= ctr[:, 1]).astype(np.int64) << 1)
                        | ((q[:, 2] >= ctr[:, 2]).astype(np.int64) << 2))
                chosen = kids[np.arange(len(sub_n)), code]
                missing = chosen < 0
                if missing.any():
                    # fall to the nearest existing child cube
                    mk = kids[missing]                   # (m, 8)
                    mq = queries[sub_q[missing]]
                    d2 = np.full(mk.shape, np.inf)
                    for o in range(8):
                        ok = mk[:, o] >= 0
                        if ok.any():
                            d = (np.abs(mq[ok] - self.centers[mk[ok, o]])
                                 - self.halves[mk[ok, o]][:, None])
                            d = np.maximum(d, 0.0)
                            d2[ok, o] = np.einsum("ij,ij->i", d, d)
                    chosen[missing] = mk[np.arange(len(mk)),
                                         np.argmin(d2, axis=1)]
                ni[internal] = chosen
            d2, pi = self._leaf_best(qi, ni, queries)
            merge(qi, d2, pi)

        # Descend while the current bound ball fits strictly inside one child
        # cube: children partition points by cube geometry, so every candidate
        # then lies in that subtree and branch-and-bound can start there.
        start = np.zeros(nq, dtype=np.int64)
        active = np.arange(nq)
        rad = np.sqrt(best_d2)
        while len(active):
            node = start[active]
            internal = ~self.is_leaf[node]
            active, node = active[internal], node[internal]
            if len(active) == 0:
                break
            q = queries[active]
            ctr = self.centers[node]
            code = ((q[:, 0] >= ctr[:, 0]).astype(np.int64)
                    | ((q[:, 1] >= ctr[:, 1]).astype(np.int64) << 1)
                    | ((q[:, 2] >= ctr[:, 2]).astype(np.int64) << 2))
            child = self.children[node, code]
            ok = child >= 0
            if ok.any():
                sub = child[ok]
                inside = (np.abs(q[ok] - self.centers[sub]).max(axis=1)
                          + rad[active[ok]] < self.halves[sub])
                ok[ok] = inside
            start[active[ok]] = child[ok]
            active = active[ok]

        # branch and bound with the initial bound
        fq = np.arange(nq)
        fn = start
        while len(fq):
            leaf = self.is_leaf[fn]
            lq, ln = fq[leaf], fn[leaf]
            if len(lq):
                d2, pi = self._leaf_best(lq, ln, queries)
                merge(lq, d2, pi)
            iq, inn = fq[~leaf], fn[~leaf]
            if len(iq) == 0:
                break
            kids = self.children[inn]                # (M, 8)
            rep_q = np.repeat(iq, 8)
            rep_k = kids.reshape(-1)
            ok = rep_k >= 0
            rep_q, rep_k = rep_q[ok], rep_k[ok]
            lb = self._cube_dist2(queries[rep_q], rep_k)
            keep = lb <= best_d2[rep_q]
            fq, fn = rep_q[keep], rep_k[keep]

        return best_i, np.sqrt(best_d2)

    def closest_vertex(self, query):
        """Nearest indexed point to a single query. Returns (index, distance)."""
        idx, dist = self.closest_vertices(np.asarray(query)[None, :])
        return int(idx[0]), float(dist[0])


def build_index(vertices, max_leaf=DEFAULT_MAX_LEAF,
                max_depth=DEFAULT_MAX_DEPTH) -> Octree:
    return Octree(vertices, max_leaf=max_leaf, max_depth=max_depth)


# ---------------------------------------------------------------------------
# Scan surface and correspondence search
# ---------------------------------------------------------------------------

FEATURE_NAMES = {0: "face", 1: "edge", 2: "vertex"}


class ScanIndex:
    """Per-scan acceleration data: octree over referenced vertices, one-ring
    adjacency, and feature normals (face, angle-weighted vertex, edge)."""

    def __init__(self, scan: TriangleMesh, max_leaf=DEFAULT_MAX_LEAF,
                 max_depth=DEFAULT_MAX_DEPTH):
        if scan.n_triangles == 0:
            raise SpatialError("scan has no triangles")
        self.scan = scan
        tris = scan.triangles
        nv = scan.n_vertices

        referenced = np.zeros(nv, dtype=bool)
        referenced[tris.reshape(-1)] = True
        self.vertex_ids = np.flatnonzero(referenced)
        self.octree = Octree(scan.vertices[self.vertex_ids],
                             max_leaf=max_leaf, max_depth=max_depth)

        # vertex -> incident triangles (CSR over all vertices)
        corner_v = tris.reshape(-1)
        corner_t = np.repeat(np.arange(len(tris)), 3)
        order = np.argsort(corner_v, kind="stable")
        self.vt_items = corner_t[order]
        self.vt_start = np.searchsorted(corner_v[order], np.arange(nv + 1))

        self.face_normals = scan.face_normals

        # angle-weighted vertex normals
        v0, v1, v2 = (scan.vertices[tris[:, k]] for k in range(3))
        angles = np.empty((len(tris), 3))
        for k, (p, q, r) in enumerate(((v0, v1, v2), (v1, v2, v0), (v2, v0, v1))):
            e1 = q - p
            e2 = r - p
            c = np.einsum("ij,ij->i", e1, e2)
            s = np.linalg.norm(np.cross(e1, e2), axis=1)
            angles[:, k] = np.arctan2(s, c)
        acc = np.zeros((nv, 3))
        for k in range(3):
            np.add.at(acc, tris[:, k], angles[:, k][:, None] * self.face_normals)
        norms = np.linalg.norm(acc, axis=1, keepdims=True)
        self.vertex_feature_normals = acc / np.where(norms > 0.0, norms, 1.0)

        # edge normals: mean of adjacent face normals
        edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        keys = (np.minimum(edges[:, 0], edges[:, 1]) * nv
                + np.maximum(edges[:, 0], edges[:, 1]))
        face_of_edge = np.tile(np.arange(len(tris)), 3)
        uniq, inv = np.unique(keys, return_inverse=True)
        eacc = np.zeros((len(uniq), 3))
        np.add.at(eacc, inv, self.face_normals[face_of_edge])
        enorm = np.linalg.norm(eacc, axis=1, keepdims=True)
        self.edge_keys = uniq
        self.edge_normals = eacc / np.where(enorm > 0.0, enorm, 1.0)

        # open-surface boundary: edges with a single incident face, and the
        # vertices on them
        self.boundary_edge = np.bincount(inv, minlength=len(uniq)) == 1
        self.boundary_vertex = np.zeros(nv, dtype=bool)
        bkeys = uniq[self.boundary_edge]
        self.boundary_vertex[bkeys // nv] = True
        self.boundary_vertex[bkeys % nv] = True

    def edge_normal_lookup(self, va, vb):
        pos = self._edge_pos(va, vb)
        return self.edge_normals[pos]

    def _edge_pos(self, va, vb):
        nv = self.scan.n_vertices
        keys = np.minimum(va, vb) * nv + np.maximum(va, vb)
        return np.searchsorted(self.edge_keys, keys)


@dataclass
class CorrespondenceSet:
    """Retained (source vertex -> closest scan point) pairs, ordered by source
    index, with per-filter rejection counts."""

    source_indices: np.ndarray    # (M,)
    points: np.ndarray            # (M, 3) closest points on the scan
    distances: np.ndarray         # (M,)
    triangle_indices: np.ndarray  # (M,)
    barycentric: np.ndarray       # (M, 3)
    features: np.ndarray          # (M,) 0=face 1=edge 2=vertex
    target_normals: np.ndarray    # (M, 3)
    rejected_count_distance: int
    rejected_count_normal: int
    rejected_count_boundary: int = 0
    # nearest octree-local scan vertex per source vertex (all of them, not
    # just retained pairs); feeds the next search's warm start
    nn_local: np.ndarray | None = None

    def __len__(self):
        return len(self.source_indices)

    @property
    def n_pairs(self):
        return len(self.source_indices)

    def mean_distance(self):
        if len(self.distances) == 0:
            return float("inf")
        return float(self.distances.mean())

    def feature_name(self, i):
        return FEATURE_NAMES[int(self.features[i])]


def project_points(scan_index: ScanIndex, points, guess=None):
    """Closest scan-surface point per query: octree nearest vertex, refined
    over its one-ring triangles.

    Returns (points, distances, triangle_indices, barycentric, local_idx)
    where `local_idx` is the nearest octree-local scan vertex per query.
    """
    src = np.atleast_2d(np.asarray(points, dtype=np.float64))
    ns = len(src)

    local_idx, _ = scan_index.octree.closest_vertices(src, guess=guess)
    cv = scan_index.vertex_ids[local_idx]

    # flatten one-ring triangles of every closest vertex
    start = scan_index.vt_start[cv]
    count = scan_index.vt_start[cv + 1] - start
    pair_of_row = np.repeat(np.arange(ns), count)
    offsets = np.concatenate([[0], np.cumsum(count)])
    row_local = np.arange(offsets[-1]) - offsets[pair_of_row]
    tri_rows = scan_index.vt_items[start[pair_of_row] + row_local]

    verts = scan_index.scan.vertices
    tris = scan_index.scan.triangles[tri_rows]
    pts, bary = closest_points_on_triangles(
        src[pair_of_row], verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]])
    diff = src[pair_of_row] - pts
    d2 = np.einsum("ij,ij->i", diff, diff)

    # best triangle per query (ties to the lower triangle index)
    order = np.lexsort((tri_rows, d2, pair_of_row))
    first = np.searchsorted(pair_of_row[order], np.arange(ns), side="left")
    win = order[first]
    return (pts[win], np.sqrt(d2[win]), tri_rows[win], bary[win], local_idx)


def find_correspondences(source_vertices, source_normals, scan_index: ScanIndex,
                         filters: FilterConfig,
                         guess=None) -> CorrespondenceSet:
    """Closest scan vertex via the octree, refined over its one-ring triangles,
    then filtered by distance and normal-angle thresholds. `guess` warm-starts
    the octree search with the previous set's `nn_local`."""
    src = np.asarray(source_vertices, dtype=np.float64)
    src_n = np.asarray(source_normals, dtype=np.float64)
    ns = len(src)

    best_pts, best_d, best_tri, best_bary, local_idx = project_points(
        scan_index, src, guess=guess)

    zeros = (best_bary <= 0.0).sum(axis=1)
    features = np.minimum(zeros, 2).astype(np.int64)

    normals = np.empty((ns, 3))
    on_boundary = np.zeros(ns, dtype=bool)
    tri_v = scan_index.scan.triangles[best_tri]
    m = features == 0
    normals[m] = scan_index.face_normals[best_tri[m]]
    m = features == 2
    if m.any():
        vcorner = tri_v[m, np.argmax(best_bary[m], axis=1)]
        normals[m] = scan_index.vertex_feature_normals[vcorner]
        on_boundary[m] = scan_index.boundary_vertex[vcorner]
    m = features == 1
    if m.any():
        zero_k = np.argmin(best_bary[m], axis=1)
        k1 = (zero_k + 1) % 3
        k2 = (zero_k + 2) % 3
        rows = np.arange(len(tri_v))[m]
        epos = scan_index._edge_pos(tri_v[rows, k1], tri_v[rows, k2])
        normals[m] = scan_index.edge_normals[epos]
        on_boundary[m] = scan_index.boundary_edge[epos]

    pass_dist = best_d <= filters.max_distance
    cos_thresh = np.cos(np.deg2rad(filters.max_normal_angle))
    cosang = np.einsum("ij,ij->i", src_n, normals)
    pass_norm = cosang >= cos_thresh - 1e-12
    pass_bound = ~on_boundary if filters.reject_boundary else np.ones(ns, dtype=bool)
    keep = pass_dist & pass_norm & pass_bound

    rejected_distance = int((~pass_dist).sum())
    rejected_normal = int((pass_dist & ~pass_norm).sum())
    rejected_boundary = int((pass_dist & pass_norm & ~pass_bound).sum())

    sel = np.flatnonzero(keep)
    return CorrespondenceSet(
        source_indices=sel,
        points=best_pts[sel],
        distances=best_d[sel],
        triangle_indices=best_tri[sel],
        barycentric=best_bary[sel],
        features=features[sel],
        target_normals=normals[sel],
        rejected_count_distance=rejected_distance,
        rejected_count_normal=rejected_normal,
        rejected_count_boundary=rejected_boundary,
        nn_local=local_idx,
    )
