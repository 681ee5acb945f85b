"""Shared fixtures: the canonical procedural model plus small randomized
models for gradient and solver checks."""

import numpy as np
import pytest

from torsofit.geometry import TriangleMesh, anchor_point
from torsofit.rig import BlendWeights, Bone, Skeleton
from torsofit.shape import BlendshapeSet, DeformableModel
from torsofit.synth import generate_template


@pytest.fixture(scope="session")
def model():
    """The canonical shipped template (~2200 vertices, 9 bones, 55 shapes)."""
    return generate_template()


def grid_mesh(nx=5, ny=4, scale=10.0, z=0.0):
    """Flat rectangular grid mesh, nx*ny vertices."""
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny))
    verts = np.stack([xs.ravel() * scale, ys.ravel() * scale,
                      np.full(nx * ny, z)], axis=1).astype(np.float64)
    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            tris.append([a, a + 1, a + nx])
            tris.append([a + 1, a + nx + 1, a + nx])
    return TriangleMesh(verts, np.array(tris))


def small_model(rng, n_bones=2, n_shapes=3, nx=5, ny=4):
    """Random small deformable model (default K=2, N=20, A=3)."""
    mesh = grid_mesh(nx, ny)
    n = mesh.n_vertices
    bones = []
    for j in range(n_bones):
        anchor = np.array([10.0 * j, 5.0, 0.0])
        bones.append(Bone(id=j, name=f"b{j}", parent=None if j == 0 else j - 1,
                          joint_anchor=anchor))
    skeleton = Skeleton.from_chain_links(bones)
    w = rng.uniform(0.05, 1.0, size=(n_bones, n))
    w /= w.sum(axis=0, keepdims=True)
    disp = rng.normal(0.0, 1.0, size=(n_shapes, n, 3))
    shapes = BlendshapeSet(disp, [f"s{k}" for k in range(n_shapes)])
    landmarks = [(f"lm{i}", anchor_point(mesh, mesh.vertices[i * 3]))
                 for i in range(4)]
    return DeformableModel(template=mesh, skeleton=skeleton,
                           weights=BlendWeights(w), blendshapes=shapes,
                           landmarks=landmarks)


def random_pose(model, rng, rot=0.3, trans=3.0):
    """Random valid pose within moderate bounds."""
    from torsofit.rig import PoseParams, quat_from_rotvec
    k = model.skeleton.n_bones
    pose = PoseParams.rest(k)
    for j in range(k):
        pose.rotations[j] = quat_from_rotvec(rng.normal(0.0, rot, size=3))
        pose.scales[j] = rng.uniform(0.85, 1.15, size=3)
        pose.translations[j] = rng.normal(0.0, trans, size=3)
    return pose
