"""Blendshape basis and the full deformable model (skinning over shaped vertices)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import TriangleMesh
from .rig import BlendWeights, PoseParams, RigError, Skeleton, skin


@dataclass
class BlendshapeSet:
    """A displacement matrices of shape (A, N, 3), mm, with shape names."""

    displacements: np.ndarray
    names: list

    def __post_init__(self):
        self.displacements = np.asarray(self.displacements, dtype=np.float64)
        if self.displacements.ndim != 3 or self.displacements.shape[2] != 3:
            raise RigError("blendshape displacements must be (A, N, 3)")
        if not np.isfinite(self.displacements).all():
            raise RigError("non-finite blendshape displacement")
        if len(self.names) != len(self.displacements):
            raise RigError("blendshape name count mismatch")

    @property
    def n_shapes(self):
        return len(self.displacements)

    @classmethod
    def empty(cls, n_vertices):
        return cls(np.zeros((0, n_vertices, 3)), [])


def apply_blendshapes(vertices, shapes: BlendshapeSet, alpha):
    """B(alpha) = v + sum_k alpha_k b_k. alpha = 0 returns v bit-identically."""
    vertices = np.asarray(vertices, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (shapes.n_shapes,):
        raise RigError("alpha length does not match blendshape count")
    if shapes.n_shapes and shapes.displacements.shape[1] != len(vertices):
        raise RigError("blendshape vertex count does not match template")
    if shapes.n_shapes == 0 or not alpha.any():
        return vertices.copy()
    return vertices + np.einsum("k,knj->nj", alpha, shapes.displacements)


@dataclass
class DeformableModel:
    """Template mesh + skeleton + blend weights + blendshapes + anchored
    landmarks and pattern curves."""

    template: TriangleMesh
    skeleton: Skeleton
    weights: BlendWeights
    blendshapes: BlendshapeSet
    landmarks: list = field(default_factory=list)  # (name, SurfaceAnchor)
    patterns: list = field(default_factory=list)   # PatternCurve

    def __post_init__(self):
        n = self.template.n_vertices
        if self.weights.w.shape != (self.skeleton.n_bones, n):
            raise RigError("blend weight shape does not match model")
        if self.blendshapes.n_shapes and self.blendshapes.displacements.shape[1] != n:
            raise RigError("blendshape vertex count does not match template")

    @property
    def n_shapes(self):
        return self.blendshapes.n_shapes

    @property
    def landmark_names(self):
        return [name for name, _ in self.landmarks]

    @property
    def landmark_anchors(self):
        return [anchor for _, anchor in self.landmarks]

    def rest_pose(self):
        return PoseParams.rest(self.skeleton.n_bones)

    def zero_alpha(self):
        return np.zeros(self.n_shapes)


def deform_vertices(model: DeformableModel, pose: PoseParams, alpha):
    """Deformed vertex positions: skin(B(alpha))."""
    shaped = apply_blendshapes(model.template.vertices, model.blendshapes, alpha)
    return skin(shaped, model.skeleton, model.weights, pose)


def deform(model: DeformableModel, pose: PoseParams, alpha) -> TriangleMesh:
    """Deformed mesh; topology is identical to the template."""
    return model.template.with_vertices(deform_vertices(model, pose, alpha))


def truncate_blendshapes(model: DeformableModel, count: int) -> DeformableModel:
    """Model restricted to the first `count` blendshapes (authored order)."""
    if not (0 <= count <= model.n_shapes):
        raise RigError(f"blendshape count {count} out of range")
    shapes = BlendshapeSet(model.blendshapes.displacements[:count],
                           model.blendshapes.names[:count])
    return replace(model, blendshapes=shapes)
