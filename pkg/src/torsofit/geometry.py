"""Triangle meshes, OBJ/PLY IO, normals, and point-to-surface projection.

All coordinates are in millimeters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

DEGENERATE_AREA = 1e-9  # mm^2, faces below this are dropped at load time


class MeshError(Exception):
    """Invalid mesh topology, geometry, or file content."""


class MeshFormatError(MeshError):
    """Unparseable mesh file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _cross(a, b):
    x = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    y = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    z = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return np.stack([x, y, z], axis=-1)


def _normalize_rows(v, fallback=None):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n > 0.0, n, 1.0)
    out = v / safe
    if fallback is not None:
        out = np.where(n > 0.0, out, fallback)
    return out


@dataclass
class TriangleMesh:
    """Immutable triangle mesh; normals are computed lazily and cached."""

    vertices: np.ndarray  # (N, 3) float64
    triangles: np.ndarray  # (T, 3) int64
    _face_normals: np.ndarray | None = field(default=None, repr=False)
    _vertex_normals: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be (N, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be (T, 3)")
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle index out of range")
        if self.triangles.size and self.triangles.min() < 0:
            raise MeshError("negative triangle index")
        if not np.isfinite(self.vertices).all():
            raise MeshError("non-finite vertex coordinates")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def face_areas(self):
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(_cross(b - a, c - a), axis=-1)

    @property
    def face_normals(self):
        if self._face_normals is None:
            a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
            self._face_normals = _normalize_rows(_cross(b - a, c - a))
        return self._face_normals

    @property
    def vertex_normals(self):
        """Area-weighted vertex normals, unit length."""
        if self._vertex_normals is None:
            a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
            weighted = _cross(b - a, c - a)  # length = 2 * area
            acc = np.zeros_like(self.vertices)
            for k in range(3):
                np.add.at(acc, self.triangles[:, k], weighted)
            self._vertex_normals = _normalize_rows(acc)
        return self._vertex_normals

    def with_vertices(self, vertices):
        """Same topology, new vertex positions (normals recomputed lazily)."""
        return TriangleMesh(np.asarray(vertices, dtype=np.float64), self.triangles)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def compute_normals(mesh: TriangleMesh) -> TriangleMesh:
    """Force computation of face and vertex normals; returns the same mesh."""
    mesh.face_normals
    mesh.vertex_normals
    return mesh


def clean_mesh(vertices, triangles):
    """Drop degenerate faces (area <= DEGENERATE_AREA). Vertices are kept.

    Returns (mesh, dropped_face_count).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(triangles):
        a, b, c = (vertices[triangles[:, k]] for k in range(3))
        areas = 0.5 * np.linalg.norm(_cross(b - a, c - a), axis=-1)
        keep = areas > DEGENERATE_AREA
        dropped = int((~keep).sum())
        triangles = triangles[keep]
    else:
        dropped = 0
    return TriangleMesh(vertices, triangles), dropped


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def _format_from_path(path, format=None):
    if format is not None:
        return format.lower()
    s = str(path).lower()
    if s.endswith(".obj"):
        return "obj"
    if s.endswith(".ply"):
        return "ply"
    raise MeshError(f"cannot infer mesh format from path: {path}")


def load_mesh(path, format=None):
    """Load an OBJ or PLY mesh, dropping degenerate faces.

    Returns (mesh, warnings) where warnings is the dropped-face count.
    """
    fmt = _format_from_path(path, format)
    if fmt == "obj":
        vertices, triangles, _ = _read_obj(path)
    elif fmt == "ply":
        vertices, triangles, _ = _read_ply(path)
    else:
        raise MeshError(f"unsupported format: {fmt}")
    if len(vertices) == 0:
        raise MeshError(f"empty mesh: {path}")
    mesh, dropped = clean_mesh(vertices, triangles)
    return mesh, dropped


def save_mesh(mesh, path, format=None, binary=False, with_normals=False):
    """Write OBJ or ASCII/binary-little-endian PLY.

    Coordinates are serialized with 9 significant digits in text formats and
    as float64 in binary PLY.
    """
    if mesh.n_triangles == 0:
        raise MeshError("refusing to save a mesh with no triangles")
    fmt = _format_from_path(path, format)
    if fmt == "obj":
        _write_obj(mesh, path, with_normals=with_normals)
    elif fmt == "ply":
        _write_ply(mesh, path, binary=binary, with_normals=with_normals)
    else:
        raise MeshError(f"unsupported format: {fmt}")


def _read_obj(path):
    vertices, triangles, normals = [], [], []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            try:
                if tag == "v":
                    vertices.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face with fewer than 3 vertices")
                    # 1-based; negative indices are relative to current count
                    idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                    for k in range(1, len(idx) - 1):  # fan-triangulate
                        triangles.append([idx[0], idx[k], idx[k + 1]])
            except (ValueError, IndexError) as exc:
                raise MeshFormatError(str(exc), line=lineno) from exc
    verts = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(verts).all():
        raise MeshFormatError("non-finite vertex coordinate")
    return verts, np.array(triangles, dtype=np.int64).reshape(-1, 3), normals


def _write_obj(mesh, path, with_normals=False):
    with open(path, "w") as fh:
        fh.write("# torsofit mesh, units: millimeters\n")
        for v in mesh.vertices:
            fh.write("v %.9g %.9g %.9g\n" % (v[0], v[1], v[2]))
        if with_normals:
            for n in mesh.vertex_normals:
                fh.write("vn %.9g %.9g %.9g\n" % (n[0], n[1], n[2]))
            for t in mesh.triangles:
                fh.write("f %d//%d %d//%d %d//%d\n"
                         % (t[0] + 1, t[0] + 1, t[1] + 1, t[1] + 1, t[2] + 1, t[2] + 1))
        else:
            for t in mesh.triangles:
                fh.write("f %d %d %d\n" % (t[0] + 1, t[1] + 1, t[2] + 1))


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def _read_ply(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"ply"):
        raise MeshFormatError("missing ply magic", line=1)
    header_end = data.find(b"end_header")
    if header_end < 0:
        raise MeshFormatError("missing end_header")
    body_start = data.find(b"\n", header_end) + 1
    header_lines = data[:header_end].decode("ascii", "replace").splitlines()

    fmt = None
    elements = []  # (name, count, [(proptype, name) or ('list', ctype, itype, name)])
    for lineno, line in enumerate(header_lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFormatError("property before element", line=lineno)
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append((parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFormatError(f"unsupported ply format: {fmt}")

    vertices, normals, faces = [], [], []
    if fmt == "ascii":
        tokens = data[body_start:].decode("ascii", "replace").split()
        pos = 0
        for name, count, props in elements:
            for _ in range(count):
                row = {}
                for p in props:
                    if p[0] == "list":
                        n = int(float(tokens[pos])); pos += 1
                        row[p[3]] = [int(float(tokens[pos + k])) for k in range(n)]
                        pos += n
                    else:
                        row[p[1]] = float(tokens[pos]); pos += 1
                _ply_collect(name, row, vertices, normals, faces)
    else:
        pos = body_start
        for name, count, props in elements:
            for _ in range(count):
                row = {}
                for p in props:
                    if p[0] == "list":
                        cfmt = _PLY_TYPES[p[1]]
                        n = struct.unpack_from("<" + cfmt, data, pos)[0]
                        pos += struct.calcsize(cfmt)
                        ifmt = _PLY_TYPES[p[2]]
                        vals = struct.unpack_from("<%d%s" % (n, ifmt), data, pos)
                        pos += n * struct.calcsize(ifmt)
                        row[p[3]] = list(vals)
                    else:
                        vfmt = _PLY_TYPES[p[0]]
                        row[p[1]] = struct.unpack_from("<" + vfmt, data, pos)[0]
                        pos += struct.calcsize(vfmt)
                _ply_collect(name, row, vertices, normals, faces)

    verts = np.array(vertices, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(verts).all():
        raise MeshFormatError("non-finite vertex coordinate")
    tris = []
    for f in faces:
        for k in range(1, len(f) - 1):
            tris.append([f[0], f[k], f[k +  1]])
    return verts, np.array(tris, dtype=np.int64).reshape(-1, 3), normals


def _ply_collect(elem_name, row, vertices, normals, faces):
    if elem_name == "vertex":
        vertices.append([row["x"], row["y"], row["z"]])
        if "nx" in row:
            normals.append([row["nx"], row["ny"], row["nz"]])
    elif elem_name == "face":
        key = "vertex_indices" if "vertex_indices" in row else "vertex_index"
        faces.append(row[key])


def _write_ply(mesh, path, binary=False, with_normals=False):
    n, t = mesh.n_vertices, mesh.n_triangles
    header = ["ply",
              "format %s 1.0" % ("binary_little_endian" if binary else "ascii"),
              "comment torsofit mesh, units: millimeters",
              "element vertex %d" % n]
    vtype = "double" if binary else "float"
    # text coordinates use %.9g regardless of the declared float width
    header += ["property %s x" % vtype, "property %s y" % vtype,
               "property %s z" % vtype]
    if with_normals:
        header += ["property %s nx" % vtype, "property %s ny" % vtype,
                   "property %s nz" % vtype]
    header += ["element face %d" % t,
               "property list uchar int vertex_indices",
               "end_header"]
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            vs = mesh.vertices
            ns = mesh.vertex_normals if with_normals else None
            for i in range(n):
                fh.write(struct.pack("<3d", *vs[i]))
                if ns is not None:
                    fh.write(struct.pack("<3d", *ns[i]))
            for tri in mesh.triangles:
                fh.write(struct.pack("<B3i", 3, *tri))
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            ns = mesh.vertex_normals if with_normals else None
            for i in range(n):
                row = "%.9g %.9g %.9g" % tuple(mesh.vertices[i])
                if ns is not None:
                    row += " %.9g %.9g %.9g" % tuple(ns[i])
                fh.write(row + "\n")
            for tri in mesh.triangles:
                fh.write("3 %d %d %d\n" % tuple(tri))


# ---------------------------------------------------------------------------
# Point-to-triangle projection
# ---------------------------------------------------------------------------

@dataclass
class ClosestPointResult:
    point: np.ndarray      # (3,)
    feature: str           # 'face' | 'edge' | 'vertex'
    barycentric: np.ndarray  # (3,)
    distance: float


def closest_points_on_triangles(queries, a, b, c):
    """Vectorized exact closest point on closed triangles.

    queries, a, b, c: (M, 3). Returns (points (M,3), barycentric (M,3)).
    Barycentric components on the boundary are exact zeros, so features can
    be classified by counting them.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))

    e0 = b - a
    e1 = c - a
    normal = _cross(e0, e1)
    nn = np.einsum("ij,ij->i", normal, normal)
    nn = np.where(nn > 0.0, nn, 1.0)

    # interior candidate: project onto the plane, barycentric via cross ratios
    d = queries - a
    proj = queries - normal * (np.einsum("ij,ij->i", d, normal) / nn)[:, None]
    vp = proj - a
    d00 = np.einsum("ij,ij->i", e0, e0)
    d01 = np.einsum("ij,ij->i", e0, e1)
    d11 = np.einsum("ij,ij->i", e1, e1)
    d20 = np.einsum("ij,ij->i", vp, e0)
    d21 = np.einsum("ij,ij->i", vp, e1)
    det = d00 * d11 - d01 * d01
    det = np.where(np.abs(det) > 0.0, det, 1.0)
    v = (d11 * d20 - d01 * d21) / det
    w = (d00 * d21 - d01 * d20) / det
    u = 1.0 - v - w
    inside = (u >= 0.0) & (v >= 0.0) & (w >= 0.0)

    # edge candidates
    def _segment(p, s0, s1):
        dseg = s1 - s0
        denom = np.einsum("ij,ij->i", dseg, dseg)
        denom = np.where(denom > 0.0, denom, 1.0)
        t = np.einsum("ij,ij->i", p - s0, dseg) / denom
        t = np.clip(t, 0.0, 1.0)
        pt = s0 + t[:, None] * dseg
        d2 = np.einsum("ij,ij->i", p - pt, p - pt)
        return pt, t, d2

    pt_ab, t_ab, d2_ab = _segment(queries, a, b)
    pt_bc, t_bc, d2_bc = _segment(queries, b, c)
    pt_ca, t_ca, d2_ca = _segment(queries, c, a)

    d2_edges = np.stack([d2_ab, d2_bc, d2_ca], axis=1)
    best = np.argmin(d2_edges, axis=1)

    m = len(queries)
    points = np.empty((m, 3))
    bary = np.empty((m, 3))

    sel = best == 0
    points[sel] = pt_ab[sel]
    bary[sel, 0] = 1.0 - t_ab[sel]
    bary[sel, 1] = t_ab[sel]
    bary[sel, 2] = 0.0
    sel = best == 1
    points[sel] = pt_bc[sel]
    bary[sel, 0] = 0.0
    bary[sel, 1] = 1.0 - t_bc[sel]
    bary[sel, 2] = t_bc[sel]
    sel = best == 2
    points[sel] = pt_ca[sel]
    bary[sel, 0] = t_ca[sel]
    bary[sel, 1] = 0.0
    bary[sel, 2] = 1.0 - t_ca[sel]

    points[inside] = proj[inside]
    bary[inside, 0] = u[inside]
    bary[inside, 1] = v[inside]
    bary[inside, 2] = w[inside]
    return points, bary


def classify_feature(barycentric, tol=0.0):
    zeros = int(np.sum(np.asarray(barycentric) <= tol))
    return {0: "face", 1: "edge", 2: "vertex"}[min(zeros, 2)]


def closest_point_on_triangle(query, a, b, c):
    """Exact Euclidean minimizer of a single query over one closed triangle."""
    query = np.asarray(query, dtype=np.float64)
    pts, bary = closest_points_on_triangles(query[None, :], [a], [b], [c])
    point = pts[0]
    return ClosestPointResult(
        point=point,
        feature=classify_feature(bary[0]),
        barycentric=bary[0],
        distance=float(np.linalg.norm(query - point)),
    )


# ---------------------------------------------------------------------------
# Surface anchors and pattern curves
# ---------------------------------------------------------------------------

@dataclass
class SurfaceAnchor:
    """A point pinned to a mesh surface: triangle + barycentric weights."""

    triangle_index: int
    barycentric: np.ndarray  # (3,), >= 0, sums to 1

    def __post_init__(self):
        self.barycentric = np.asarray(self.barycentric, dtype=np.float64)
        if self.barycentric.shape != (3,):
            raise MeshError("barycentric must have 3 components")
        if (self.barycentric < -1e-12).any():
            raise MeshError("negative barycentric component")
        if abs(self.barycentric.sum() - 1.0) > 1e-12:
            raise MeshError("barycentric components must sum to 1")


@dataclass
class PatternCurve:
    """Ordered surface-anchored polyline; `oriented` marks arrow-style curves."""

    name: str
    anchors: list
    oriented: bool = False

    def __post_init__(self):
        if len(self.anchors) < 2:
            raise MeshError("pattern curve needs at least 2 anchors")


def anchor_point(mesh: TriangleMesh, point) -> SurfaceAnchor:
    """Anchor at the globally closest surface point (brute force over faces)."""
    if mesh.n_triangles == 0:
        raise MeshError("cannot anchor on a mesh with no triangles")
    point = np.asarray(point, dtype=np.float64)
    tris = mesh.triangles
    q = np.broadcast_to(point, (len(tris), 3))
    pts, bary = closest_points_on_triangles(
        q, mesh.vertices[tris[:, 0]], mesh.vertices[tris[:, 1]],
        mesh.vertices[tris[:, 2]])
    d2 = np.einsum("ij,ij->i", pts - point, pts - point)
    ti = int(np.argmin(d2))
    return SurfaceAnchor(triangle_index=ti, barycentric=bary[ti])


def evaluate_anchor(vertices_or_mesh, anchor: SurfaceAnchor, triangles=None):
    """Barycentric combination of the (possibly deformed) anchor triangle."""
    if isinstance(vertices_or_mesh, TriangleMesh):
        vertices = vertices_or_mesh.vertices
        triangles = vertices_or_mesh.triangles
    else:
        vertices = np.asarray(vertices_or_mesh, dtype=np.float64)
        if triangles is None:
            raise MeshError("triangles required when passing raw vertices")
    if anchor.triangle_index >= len(triangles) or anchor.triangle_index < 0:
        raise MeshError("anchor triangle index out of range for this topology")
    tri = triangles[anchor.triangle_index]
    return anchor.barycentric @ vertices[tri]


def evaluate_anchors(vertices, triangles, anchors):
    """Evaluate many anchors against deformed vertices. Returns (M, 3)."""
    if not anchors:
        return np.zeros((0, 3))
    tri_idx = np.array([a.triangle_index for a in anchors])
    bary = np.array([a.barycentric for a in anchors])
    tris = np.asarray(triangles)[tri_idx]
    v = np.asarray(vertices)
    return np.einsum("mk,mkj->mj", bary, v[tris])
