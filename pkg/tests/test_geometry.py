import numpy as np
import pytest

from torsofit.geometry import (MeshError, MeshFormatError, PatternCurve,
                               SurfaceAnchor, TriangleMesh, anchor_point,
                               classify_feature, closest_point_on_triangle,
                               closest_points_on_triangles, evaluate_anchor,
                               evaluate_anchors, load_mesh, save_mesh)
from conftest import grid_mesh

TRI = (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]),
       np.array([0.0, 1.0, 0.0]))


def test_minimal_obj_roundtrip(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    mesh, dropped = load_mesh(path)
    assert mesh.n_vertices == 3 and mesh.n_triangles == 1
    assert dropped == 0


def test_zero_area_face_dropped(tmp_path):
    path = tmp_path / "deg.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n"
                    "f 1 2 3\nf 1 1 2\n")
    mesh, dropped = load_mesh(path)
    assert mesh.n_triangles == 1
    assert dropped == 1


def test_save_load_bit_identical(tmp_path):
    rng = np.random.default_rng(3)
    mesh = grid_mesh(4, 4)
    mesh = mesh.with_vertices(mesh.vertices + rng.normal(size=(16, 3)))
    for fmt in ("obj", "ply"):
        path = tmp_path / f"m.{fmt}"
        save_mesh(mesh, path)
        back, _ = load_mesh(path)
        np.testing.assert_array_equal(back.triangles, mesh.triangles)
        np.testing.assert_allclose(back.vertices, mesh.vertices,
                                   rtol=1e-8, atol=1e-9)


def test_save_empty_mesh_errors(tmp_path):
    mesh = TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(MeshError):
        save_mesh(mesh, tmp_path / "empty.obj")


def test_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.obj"
    path.write_text("v 0 0 0\nv oops 0 0\n")
    with pytest.raises(MeshFormatError, match="line 2"):
        load_mesh(path)


def test_ply_binary_roundtrip(tmp_path):
    mesh = grid_mesh(3, 3)
    path = tmp_path / "m.ply"
    save_mesh(mesh, path, binary=True, with_normals=True)
    back, _ = load_mesh(path)
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-9)


def test_face_normal_ccw():
    mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]],
                                 dtype=float), np.array([[0, 1, 2]]))
    np.testing.assert_allclose(mesh.face_normals[0], [0, 0, 1], atol=1e-15)


def test_flat_square_vertex_normals():
    mesh = grid_mesh(2, 2)
    np.testing.assert_allclose(mesh.vertex_normals,
                               np.tile([0, 0, 1.0], (4, 1)), atol=1e-15)


def test_sphere_vertex_normals_radial():
    # icosphere-ish tessellation via lat-long grid
    nt, nph = 24, 12
    th = np.linspace(0.2, np.pi - 0.2, nph)
    ph = np.linspace(0.0, 2 * np.pi, nt, endpoint=False)
    T, P = np.meshgrid(th, ph, indexing="ij")
    verts = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P),
                      np.cos(T)], axis=-1).reshape(-1, 3)
    tris = []
    for i in range(nph - 1):
        for j in range(nt):
            a = i * nt + j
            b = i * nt + (j + 1) % nt
            tris.append([a, a + nt, b])
            tris.append([b, a + nt, b + nt])
    mesh = TriangleMesh(verts, np.array(tris))
    cosang = np.einsum("ij,ij->i", mesh.vertex_normals, verts)
    interior = np.ones(len(verts), dtype=bool)
    interior[:nt] = interior[-nt:] = False  # open-cap rims tilt one-sidedly
    assert (cosang[interior] > np.cos(np.deg2rad(5.0))).all()


def test_closest_point_face_edge_vertex():
    a, b, c = TRI
    r = closest_point_on_triangle([0.25, 0.25, 1.0], a, b, c)
    np.testing.assert_allclose(r.point, [0.25, 0.25, 0.0], atol=1e-15)
    assert r.feature == "face" and abs(r.distance - 1.0) < 1e-15

    r = closest_point_on_triangle([2.0, 0.0, 0.0], a, b, c)
    np.testing.assert_allclose(r.point, [1, 0, 0], atol=1e-15)
    assert r.feature == "vertex"

    r = closest_point_on_triangle([0.5, -1.0, 0.0], a, b, c)
    np.testing.assert_allclose(r.point, [0.5, 0, 0], atol=1e-15)
    assert r.feature == "edge"


def test_closest_point_minimality_spot_check():
    rng = np.random.default_rng(11)
    for _ in range(200):
        a, b, c = rng.normal(size=(3, 3))
        q = rng.normal(size=3) * 2.0
        r = closest_point_on_triangle(q, a, b, c)
        cands = [a, b, c, (a + b) / 2, (b + c) / 2, (a + c) / 2]
        for p in cands:
            assert r.distance <= np.linalg.norm(q - p) + 1e-12


def test_closest_point_vs_dense_sampling():
    rng = np.random.default_rng(12)
    u = rng.uniform(size=(300, 2))
    flip = u.sum(axis=1) > 1.0
    u[flip] = 1.0 - u[flip]
    bary = np.stack([1.0 - u.sum(axis=1), u[:, 0], u[:, 1]], axis=1)
    for _ in range(50):
        a, b, c = rng.normal(size=(3, 3))
        q = rng.normal(size=3)
        r = closest_point_on_triangle(q, a, b, c)
        samples = bary @ np.stack([a, b, c])
        d = np.linalg.norm(samples - q, axis=1).min()
        assert r.distance <= d + 1e-9


def test_classify_feature():
    assert classify_feature([0.2, 0.3, 0.5]) == "face"
    assert classify_feature([0.0, 0.4, 0.6]) == "edge"
    assert classify_feature([0.0, 0.0, 1.0]) == "vertex"


def test_anchor_point_on_vertex_and_centroid():
    mesh = grid_mesh(3, 3)
    a = anchor_point(mesh, mesh.vertices[4])
    assert np.isclose(a.barycentric.max(), 1.0)
    tri = mesh.triangles[0]
    centroid = mesh.vertices[tri].mean(axis=0)
    a = anchor_point(mesh, centroid)
    np.testing.assert_allclose(np.sort(a.barycentric), [1 / 3] * 3, atol=1e-9)


def test_anchor_point_matches_brute_force():
    rng = np.random.default_rng(5)
    mesh = grid_mesh(5, 5)
    tris = mesh.triangles
    for _ in range(20):
        q = rng.normal(0.0, 20.0, size=3)
        a = anchor_point(mesh, q)
        best = min(
            closest_point_on_triangle(q, *(mesh.vertices[t] for t in tri))
            .distance for tri in tris)
        got = np.linalg.norm(evaluate_anchor(mesh, a) - q)
        assert abs(got - best) < 1e-9


def test_evaluate_anchor_inverse_and_translation():
    mesh = grid_mesh(4, 4)
    p = np.array([12.0, 7.0, 0.0])
    a = anchor_point(mesh, p)
    np.testing.assert_allclose(evaluate_anchor(mesh, a), p, atol=1e-9)
    moved = mesh.with_vertices(mesh.vertices + [1.0, 2.0, 3.0])
    np.testing.assert_allclose(evaluate_anchor(moved, a), p + [1, 2, 3],
                               atol=1e-9)


def test_evaluate_anchor_topology_mismatch():
    mesh = grid_mesh(3, 3)
    bad = SurfaceAnchor(triangle_index=999, barycentric=[1.0, 0.0, 0.0])
    with pytest.raises(MeshError):
        evaluate_anchor(mesh, bad)


def test_evaluate_anchors_batch():
    mesh = grid_mesh(4, 4)
    anchors = [anchor_point(mesh, v) for v in mesh.vertices[:5]]
    pos = evaluate_anchors(mesh.vertices, mesh.triangles, anchors)
    np.testing.assert_allclose(pos, mesh.vertices[:5], atol=1e-9)


def test_pattern_curve_needs_two_anchors():
    mesh = grid_mesh(3, 3)
    a = anchor_point(mesh, mesh.vertices[0])
    with pytest.raises(MeshError):
        PatternCurve("bad", [a])


def test_closest_points_on_triangles_vectorized_consistency():
    rng = np.random.default_rng(8)
    a, b, c = rng.normal(size=(3, 40, 3))
    q = rng.normal(size=(40, 3))
    pts, bary = closest_points_on_triangles(q, a, b, c)
    for i in range(40):
        r = closest_point_on_triangle(q[i], a[i], b[i], c[i])
        np.testing.assert_allclose(pts[i], r.point, atol=1e-12)
