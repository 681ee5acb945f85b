"""Skeleton of rigid-scalable bones, quaternion algebra, and linear blend skinning.

Quaternions are stored as (w, x, y, z) arrays. Each bone carries 9 degrees of
freedom: a rotation quaternion, a per-axis scale triple, and a translation
triple. Pose transforms are stored relative to the rest pose and act about the
bone's joint anchor, so the identity parameter set reproduces the template
exactly and regularizers pull toward identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RigError(Exception):
    """Inconsistent skeleton, weights, or pose parameters."""


# ---------------------------------------------------------------------------
# Quaternion / SO(3) algebra
# ---------------------------------------------------------------------------

def quat_identity():
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise RigError("zero quaternion")
    return q / n


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion (orthonormal, det +1)."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rotvec(v):
    """Unit quaternion for a rotation vector (axis * angle, radians)."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        # first-order expansion, exact enough below double precision
        return quat_normalize(np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]))
    axis = v / angle
    s = np.sin(0.5 * angle)
    return np.array([np.cos(0.5 * angle), s * axis[0], s * axis[1], s * axis[2]])


def quat_to_rotvec(q):
    """Rotation vector (angle in [0, pi]) of a unit quaternion."""
    q = quat_normalize(q)
    if q[0] < 0.0:
        q = -q
    sin_half = np.linalg.norm(q[1:])
    if sin_half < 1e-12:
        return 2.0 * q[1:]  # small-angle: v ~ 2 * im(q)
    angle = 2.0 * np.arctan2(sin_half, q[0])
    return q[1:] / sin_half * angle


def quat_angle(q):
    return float(np.linalg.norm(quat_to_rotvec(q)))


def skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rotation_exp(v):
    """Matrix exponential of a rotation vector (Rodrigues)."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        k = skew(v)
        return np.eye(3) + k + 0.5 * (k @ k)
    k = skew(v / angle)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_log(r):
    """SO(3) logarithm: rotation vector with norm = angle in [0, pi].

    The angle = pi branch goes through the trace-based axis extraction, so no
    NaN appears at half-turns.
    """
    r = np.asarray(r, dtype=np.float64)
    trace = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    if angle < 1e-7:
        # R ~ I + skew(v): antisymmetric part recovers v to O(angle^3)
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0],
                               r[1, 0] - r[0, 1]])
    if angle > np.pi - 1e-5:
        # near pi the antisymmetric part vanishes; use R + I column structure
        m = 0.5 * (r + np.eye(3))
        axis = np.sqrt(np.clip(np.diagonal(m), 0.0, None))
        k = int(np.argmax(axis))
        axis = m[:, k] / max(axis[k], 1e-12)
        axis = axis / np.linalg.norm(axis)
        # fix the sign using the (possibly tiny) antisymmetric part
        w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if w @ axis < 0.0:
            axis = -axis
        return axis * angle
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return w * (0.5 * angle / np.sin(angle))


def so3_left_jacobian_inverse(phi):
    """Inverse left Jacobian of SO(3) at rotation vector phi.

    d/du log(exp(u) exp(phi)) at u = 0. Used to differentiate rotation-log
    residuals for Gauss-Newton.
    """
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    k = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * k + coef * (k @ k)


# ---------------------------------------------------------------------------
# Skeleton
# ---------------------------------------------------------------------------

@dataclass
class Bone:
    id: int
    name: str
    parent: int | None
    rest_rotation: np.ndarray = field(default_factory=quat_identity)
    rest_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    joint_anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rest_rotation = quat_normalize(self.rest_rotation)
        self.rest_translation = np.asarray(self.rest_translation, dtype=np.float64)
        self.joint_anchor = np.asarray(self.joint_anchor, dtype=np.float64)


@dataclass
class Skeleton:
    bones: list  # topologically sorted, bones[i].id == i
    joints: list = field(default_factory=list)  # (parent_id, child_id, anchor)

    def __post_init__(self):
        if not self.bones:
            raise RigError("skeleton needs at least one bone")
        roots = 0
        for i, bone in enumerate(self.bones):
            if bone.id != i:
                raise RigError("bone ids must be 0..K-1 in order")
            if bone.parent is None:
                roots += 1
            elif not (0 <= bone.parent < i):
                raise RigError("parent index must precede the bone")
        if roots != 1:
            raise RigError("skeleton must have exactly one root")
        self.joints = [(int(p), int(c), np.asarray(a, dtype=np.float64))
                       for p, c, a in self.joints]
        for p, c, _ in self.joints:
            if not (0 <= p < len(self.bones) and 0 <= c < len(self.bones)):
                raise RigError("joint references an unknown bone")

    @property
    def n_bones(self):
        return len(self.bones)

    @classmethod
    def from_chain_links(cls, bones):
        """Build the joint list from each bone's parent and joint anchor."""
        joints = [(b.parent, b.id, b.joint_anchor)
                  for b in bones if b.parent is not None]
        return cls(bones=bones, joints=joints)


@dataclass
class BlendWeights:
    """K x N per-bone vertex influences; each column sums to 1."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise RigError("blend weights must be a K x N matrix")
        if (self.w < -1e-12).any() or (self.w > 1.0 + 1e-12).any():
            raise RigError("blend weights must lie in [0, 1]")
        col = self.w.sum(axis=0)
        if np.abs(col - 1.0).max() > 1e-6:
            raise RigError("blend weight columns must sum to 1")


@dataclass
class PoseParams:
    """Per-bone pose: unit rotation quaternions, positive per-axis scales,
    translations in mm. All are offsets from the rest configuration."""

    rotations: np.ndarray    # (K, 4) quaternions
    scales: np.ndarray       # (K, 3)
    translations: np.ndarray  # (K, 3)

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        if self.rotations.shape[1:] != (4,) or self.scales.shape[1:] != (3,) \
                or self.translations.shape[1:] != (3,):
            raise RigError("bad pose parameter shapes")
        if not (len(self.rotations) == len(self.scales) == len(self.translations)):
            raise RigError("pose parameter bone counts disagree")
        if (self.scales <= 0.0).any():
            raise RigError("scale components must be positive")

    @classmethod
    def rest(cls, n_bones):
        return cls(
            rotations=np.tile(quat_identity(), (n_bones, 1)),
            scales=np.ones((n_bones, 3)),
            translations=np.zeros((n_bones, 3)),
        )

    @property
    def n_bones(self):
        return len(self.rotations)

    def copy(self):
        return PoseParams(self.rotations.copy(), self.scales.copy(),
                          self.translations.copy())

    def rotation_matrices(self):
        return np.stack([quat_to_matrix(q) for q in self.rotations])


def bone_transforms(skeleton: Skeleton, pose: PoseParams):
    """Per-bone affine maps x -> A_j x + t_j acting on rest-space points.

    Each bone rotates and scales about its own joint anchor, then translates.
    Identity pose gives the identity map for every bone.
    """
    if pose.n_bones != skeleton.n_bones:
        raise RigError("pose bone count does not match skeleton")
    k = skeleton.n_bones
    a = np.empty((k, 3, 3))
    t = np.empty((k, 3))
    for j, bone in enumerate(skeleton.bones):
        r = quat_to_matrix(pose.rotations[j])
        rs = r * pose.scales[j][None, :]  # R @ diag(S)
        a[j] = rs
        t[j] = bone.joint_anchor - rs @ bone.joint_anchor + pose.translations[j]
    return a, t


def skin(vertices, skeleton: Skeleton, weights: BlendWeights, pose: PoseParams):
    """Linear blend skinning: M_i = sum_j w_ji (A_j v_i + t_j)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if weights.w.shape != (skeleton.n_bones, len(vertices)):
        raise RigError("blend weight shape does not match skeleton/vertices")
    a, t = bone_transforms(skeleton, pose)
    # (K, N, 3) per-bone transformed vertices, blended by weights
    per_bone = np.einsum("kab,nb->kna", a, vertices) + t[:, None, :]
    return np.einsum("kn,kna->na", weights.w, per_bone)


def joint_residual(skeleton: Skeleton, pose: PoseParams, joint):
    """Parent-minus-child world position mismatch of a joint anchor (mm)."""
    p, c, anchor = joint[0], joint[1], np.asarray(joint[2], dtype=np.float64)
    a, t = bone_transforms(skeleton, pose)
    return (a[p] @ anchor + t[p]) - (a[c] @ anchor + t[c])


def joint_residuals(skeleton: Skeleton, pose: PoseParams):
    """All joint residuals as a (J, 3) array."""
    a, t = bone_transforms(skeleton, pose)
    out = np.zeros((len(skeleton.joints), 3))
    for i, (p, c, anchor) in enumerate(skeleton.joints):
        out[i] = (a[p] @ anchor + t[p]) - (a[c] @ anchor + t[c])
    return out


def relative_joint_rotation(pose: PoseParams, joint):
    """q_parent^-1 * q_child for the joint's bones."""
    p, c = joint[0], joint[1]
    return quat_multiply(quat_conjugate(quat_normalize(pose.rotations[p])),
                         quat_normalize(pose.rotations[c]))


def auto_blend_weights(vertices, segments, n_influences=2, eps=1e-6):
    """Inverse-distance weights to the nearest bone segments.

    segments: (K, 2, 3) endpoints per bone. Each vertex is influenced by its
    `n_influences` nearest segments, weights proportional to 1/distance and
    normalized to sum to 1.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    segments = np.asarray(segments, dtype=np.float64)
    k = len(segments)
    n = len(vertices)
    dist = np.empty((k, n))
    for j in range(k):
        s0, s1 = segments[j]
        d = s1 - s0
        denom = float(d @ d)
        if denom < 1e-18:
            dist[j] = np.linalg.norm(vertices - s0, axis=1)
            continue
        t = np.clip((vertices - s0) @ d / denom, 0.0, 1.0)
        closest = s0 + t[:, None] * d
        dist[j] = np.linalg.norm(vertices - closest, axis=1)
    w = np.zeros((k, n))
    m = min(n_influences, k)
    order = np.argsort(dist, axis=0, kind="stable")[:m]  # (m, N)
    cols = np.arange(n)
    inv = 1.0 / (dist[order, cols[None, :]] + eps)
    inv /= inv.sum(axis=0, keepdims=True)
    for r in range(m):
        w[order[r], cols] = inv[r]
    return BlendWeights(w)
