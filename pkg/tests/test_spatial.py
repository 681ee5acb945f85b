import numpy as np
import pytest

from torsofit.geometry import TriangleMesh
from torsofit.spatial import (FilterConfig, Octree, ScanIndex, SpatialError,
                              build_index, find_correspondences,
                              project_points)
from conftest import grid_mesh


def brute_nn(points, queries):
    d = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
    return d.argmin(axis=1), d.min(axis=1)


def test_single_vertex_tree():
    tree = build_index(np.array([[1.0, 2.0, 3.0]]))
    idx, dist = tree.closest_vertices(np.array([[1.0, 2.0, 4.0]]))
    assert idx[0] == 0 and np.isclose(dist[0], 1.0)


def test_split_rule():
    pts = np.array([[i, i, i] for i in range(9)], dtype=float)
    tree = Octree(pts, max_leaf=8)
    idx, dist = tree.closest_vertices(pts)
    np.testing.assert_array_equal(idx, np.arange(9))
    np.testing.assert_allclose(dist, 0.0, atol=1e-12)


def test_self_query_large():
    rng = np.random.default_rng(2)
    pts = rng.normal(0.0, 50.0, size=(10_000, 3))
    tree = build_index(pts)
    idx, dist = tree.closest_vertices(pts[::37])
    np.testing.assert_allclose(dist, 0.0, atol=1e-12)


def test_two_point_example():
    tree = build_index(np.array([[0.0, 0, 0], [10.0, 0, 0]]))
    idx, dist = tree.closest_vertices(np.array([[1.0, 0, 0]]))
    assert idx[0] == 0 and np.isclose(dist[0], 1.0)


def test_empty_input_errors():
    with pytest.raises(SpatialError):
        build_index(np.zeros((0, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_octree_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0.0, 30.0, size=(500, 3))
    queries = rng.normal(0.0, 40.0, size=(300, 3))
    tree = build_index(pts)
    idx, dist = tree.closest_vertices(queries)
    bi, bd = brute_nn(pts, queries)
    np.testing.assert_allclose(dist, bd, atol=1e-9)
    np.testing.assert_array_equal(idx, bi)


def test_octree_warm_start_exact():
    rng = np.random.default_rng(9)
    pts = rng.normal(0.0, 30.0, size=(800, 3))
    queries = rng.normal(0.0, 30.0, size=(400, 3))
    tree = build_index(pts)
    cold_i, cold_d = tree.closest_vertices(queries)
    guess = np.roll(cold_i, 13)  # a stale-but-plausible warm start
    warm_i, warm_d = tree.closest_vertices(queries, guess=guess)
    np.testing.assert_array_equal(warm_i, cold_i)
    np.testing.assert_allclose(warm_d, cold_d, atol=1e-12)


def test_scan_index_boundary_detection():
    mesh = grid_mesh(4, 4)  # open grid: every rim edge is a boundary edge
    index = ScanIndex(mesh)
    assert index.boundary_vertex.sum() == 12  # 4x4 grid rim
    assert index.boundary_edge.any()


def make_offset_source(mesh, dz):
    src = mesh.vertices + [0.0, 0.0, dz]
    normals = np.tile([0.0, 0.0, 1.0], (len(src), 1))
    return src, normals


def test_correspondences_on_surface_retained():
    mesh = grid_mesh(6, 6)
    index = ScanIndex(mesh)
    src, normals = make_offset_source(mesh, 0.0)
    corr = find_correspondences(src, normals, index,
                                FilterConfig(reject_boundary=False))
    assert corr.n_pairs == len(src)
    np.testing.assert_allclose(corr.distances, 0.0, atol=1e-12)


def test_distance_filter_rejects():
    mesh = grid_mesh(6, 6)
    index = ScanIndex(mesh)
    src, normals = make_offset_source(mesh, 600.0)
    corr = find_correspondences(src, normals, index, FilterConfig())
    assert corr.n_pairs == 0
    assert corr.rejected_count_distance == len(src)


def test_normal_filter_rejects_backfaces():
    mesh = grid_mesh(6, 6)
    index = ScanIndex(mesh)
    src, normals = make_offset_source(mesh, 1.0)
    corr = find_correspondences(src, -normals, index,
                                FilterConfig(reject_boundary=False))
    assert corr.n_pairs == 0
    assert corr.rejected_count_normal == len(src)


def test_boundary_filter_rejects_rim_matches():
    mesh = grid_mesh(6, 6)
    index = ScanIndex(mesh)
    # source points beyond the x-extent of the grid snap to the rim
    src = np.array([[80.0, 25.0, 0.0], [90.0, 20.0, 0.0]])
    normals = np.tile([0.0, 0.0, 1.0], (2, 1))
    keep = find_correspondences(src, normals, index,
                                FilterConfig(reject_boundary=False))
    drop = find_correspondences(src, normals, index,
                                FilterConfig(reject_boundary=True))
    assert keep.n_pairs == 2
    assert drop.n_pairs == 0
    assert drop.rejected_count_boundary == 2


def test_filters_monotone():
    rng = np.random.default_rng(4)
    mesh = grid_mesh(6, 6)
    index = ScanIndex(mesh)
    src = mesh.vertices + rng.normal(0.0, 3.0, size=mesh.vertices.shape)
    normals = mesh.vertex_normals
    base = find_correspondences(src, normals, index,
                                FilterConfig(max_distance=2.0,
                                             max_normal_angle=30.0))
    wider = find_correspondences(src, normals, index,
                                 FilterConfig(max_distance=10.0,
                                              max_normal_angle=80.0))
    assert set(base.source_indices) <= set(wider.source_indices)


def test_projection_improves_on_closest_vertex():
    rng = np.random.default_rng(6)
    mesh = grid_mesh(8, 8)
    index = ScanIndex(mesh)
    src = mesh.vertices + rng.normal(0.0, 4.0, size=mesh.vertices.shape)
    _, vdist = index.octree.closest_vertices(src)
    _, pdist, _, _, _ = project_points(index, src)
    assert (pdist <= vdist + 1e-9).all()


def test_correspondences_deterministic():
    rng = np.random.default_rng(7)
    mesh = grid_mesh(7, 7)
    index = ScanIndex(mesh)
    src = mesh.vertices + rng.normal(0.0, 2.0, size=mesh.vertices.shape)
    normals = mesh.vertex_normals
    a = find_correspondences(src, normals, index, FilterConfig())
    b = find_correspondences(src, normals, index, FilterConfig())
    np.testing.assert_array_equal(a.source_indices, b.source_indices)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(a.triangle_indices, b.triangle_indices)


def test_project_points_warm_start_consistency():
    rng = np.random.default_rng(13)
    mesh = grid_mesh(8, 8)
    index = ScanIndex(mesh)
    src = mesh.vertices + rng.normal(0.0, 3.0, size=mesh.vertices.shape)
    p1, d1, t1, b1, local = project_points(index, src)
    p2, d2, t2, b2, _ = project_points(index, src, guess=local)
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    np.testing.assert_array_equal(t1, t2)


def test_scan_index_requires_triangles():
    mesh = TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(SpatialError):
        ScanIndex(mesh)


def test_filter_config_validation():
    with pytest.raises(Exception):
        FilterConfig(max_distance=-1.0)
