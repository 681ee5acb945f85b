"""Energy terms of the registration objective and their analytic derivatives.

The packed parameter vector has 9 DOFs per bone (rotation tangent, scale,
translation) followed by the blendshape weights: length 9K + A. Rotation DOFs
are tangent components about the current quaternion; steps are applied by
quaternion retraction (see `apply_step`), so gradients below are taken with
respect to a left perturbation exp(skew(delta)) R.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import evaluate_anchors
from .rig import (PoseParams, quat_from_rotvec, quat_multiply, quat_normalize,
                  quat_to_matrix, rotation_log, skew, so3_left_jacobian_inverse)
from .shape import DeformableModel, apply_blendshapes

SCALE_FLOOR = 1e-3
BS_NORM_FLOOR = 1e-8


class EnergyError(Exception):
    pass


class NoCorrespondencesError(EnergyError):
    """The correspondence set is empty; the data term is undefined."""


@dataclass
class EnergyWeights:
    """Penalization coefficients; each term enters as (1/lambda) * E."""

    lambda_d: float = 1e-3
    lambda_s: float = 1e-2
    lambda_bs: float = 1e-3
    lambda_j: float = 1e-2
    lambda_l: float = 1e-4

    def __post_init__(self):
        for name in ("lambda_d", "lambda_s", "lambda_bs", "lambda_j", "lambda_l"):
            if getattr(self, name) <= 0.0:
                raise EnergyError(f"{name} must be positive")

    def as_dict(self):
        return {"lambda_d": self.lambda_d, "lambda_s": self.lambda_s,
                "lambda_bs": self.lambda_bs, "lambda_j": self.lambda_j,
                "lambda_l": self.lambda_l}


@dataclass
class EnergyBreakdown:
    e_data: float
    e_scale: float
    e_blendshape: float
    e_joint: float
    e_landmark: float
    e_total: float
    gradient: np.ndarray | None = None
    gauss_newton_hessian: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Parameter vector
# ---------------------------------------------------------------------------

def param_dim(n_bones, n_shapes):
    return 9 * n_bones + n_shapes


def rot_cols(j):
    return slice(9 * j, 9 * j + 3)


def scale_cols(j):
    return slice(9 * j + 3, 9 * j + 6)


def trans_cols(j):
    return slice(9 * j + 6, 9 * j + 9)


def alpha_cols(n_bones):
    return slice(9 * n_bones, None)


def apply_step(pose: PoseParams, alpha, delta):
    """Retract a packed tangent step onto the parameters.

    Rotations update by left quaternion multiplication with exp(delta_rot),
    scales are clamped to stay positive, alpha and translations add.
    """
    k = pose.n_bones
    delta = np.asarray(delta, dtype=np.float64)
    rotations = pose.rotations.copy()
    scales = pose.scales.copy()
    translations = pose.translations.copy()
    for j in range(k):
        dr = delta[rot_cols(j)]
        if dr.any():
            rotations[j] = quat_normalize(
                quat_multiply(quat_from_rotvec(dr), rotations[j]))
        scales[j] = np.maximum(scales[j] + delta[scale_cols(j)], SCALE_FLOOR)
        translations[j] = translations[j] + delta[trans_cols(j)]
    new_alpha = np.asarray(alpha, dtype=np.float64) + delta[alpha_cols(k)]
    return PoseParams(rotations, scales, translations), new_alpha


# ---------------------------------------------------------------------------
# Pose context: everything derived from (pose, alpha) needed by the terms
# ---------------------------------------------------------------------------

@dataclass
class PoseContext:
    model: DeformableModel
    pose: PoseParams
    alpha: np.ndarray
    rot: np.ndarray      # (K, 3, 3) rotation matrices
    affine: np.ndarray   # (K, 3, 3) R_j diag(S_j)
    anchors: np.ndarray  # (K, 3) bone pivots
    shaped: np.ndarray   # (N, 3) template + blendshapes
    deformed: np.ndarray  # (N, 3) skinned vertices
    _vertex_jac_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_bones(self):
        return self.model.skeleton.n_bones

    @property
    def n_shapes(self):
        return self.model.n_shapes

    @property
    def dim(self):
        return param_dim(self.n_bones, self.n_shapes)


def make_context(model: DeformableModel, pose: PoseParams, alpha) -> PoseContext:
    alpha = np.asarray(alpha, dtype=np.float64)
    k = model.skeleton.n_bones
    rot = np.stack([quat_to_matrix(q) for q in pose.rotations])
    affine = rot * pose.scales[:, None, :]
    anchors = np.stack([b.joint_anchor for b in model.skeleton.bones])
    shaped = apply_blendshapes(model.template.vertices, model.blendshapes, alpha)
    trans = np.empty((k, 3))
    for j in range(k):
        trans[j] = anchors[j] - affine[j] @ anchors[j] + pose.translations[j]
    per_bone = np.einsum("kab,nb->kna", affine, shaped) + trans[:, None, :]
    deformed = np.einsum("kn,kna->na", model.weights.w, per_bone)
    return PoseContext(model=model, pose=pose, alpha=alpha, rot=rot,
                       affine=affine, anchors=anchors, shaped=shaped,
                       deformed=deformed)


def _skew_batch(u):
    m = len(u)
    s = np.zeros((m, 3, 3))
    s[:, 0, 1] = -u[:, 2]
    s[:, 0, 2] = u[:, 1]
    s[:, 1, 0] = u[:, 2]
    s[:, 1, 2] = -u[:, 0]
    s[:, 2, 0] = -u[:, 1]
    s[:, 2, 1] = u[:, 0]
    return s


def vertex_jacobians(ctx: PoseContext, vert_ids):
    """d(deformed vertex)/d(packed params) for the given vertices: (M, 3, D)."""
    vert_ids = np.asarray(vert_ids, dtype=np.int64)
    m = len(vert_ids)
    k = ctx.n_bones
    jac = np.zeros((m, 3, ctx.dim))
    w = ctx.model.weights.w[:, vert_ids]  # (K, M)
    v = ctx.shaped[vert_ids]              # (M, 3)
    eye = np.eye(3)
    for j in range(k):
        nz = np.flatnonzero(w[j])
        if len(nz) == 0:
            continue
        wj = w[j, nz][:, None, None]                       # (m_j, 1, 1)
        rel = v[nz] - ctx.anchors[j]
        u = rel @ ctx.affine[j].T
        su = np.zeros((len(nz), 3, 3))
        su[:, 0, 1] = u[:, 2]
        su[:, 0, 2] = -u[:, 1]
        su[:, 1, 0] = -u[:, 2]
        su[:, 1, 2] = u[:, 0]
        su[:, 2, 0] = u[:, 1]
        su[:, 2, 1] = -u[:, 0]
        block = np.empty((len(nz), 3, 9))
        block[:, :, 0:3] = wj * su
        block[:, :, 3:6] = wj * (rel[:, None, :] * ctx.rot[j][None, :, :])
        block[:, :, 6:9] = wj * eye
        jac[nz, :, 9 * j:9 * j + 9] = block
    if ctx.n_shapes:
        blend_rot = np.einsum("km,kab->mab", w, ctx.affine)  # (M, 3, 3)
        disp = ctx.model.blendshapes.displacements[:, vert_ids, :]  # (A, M, 3)
        jac[:, :, alpha_cols(ctx.n_bones)] = np.einsum(
            "mab,kmb->mak", blend_rot, disp)
    return jac


def point_bone_jacobian(ctx: PoseContext, point, j):
    """d(bone j transform of a fixed rest-space point)/d(params): (3, D)."""
    jac = np.zeros((3, ctx.dim))
    rel = np.asarray(point, dtype=np.float64) - ctx.anchors[j]
    u = ctx.affine[j] @ rel
    jac[:, rot_cols(j)] = -skew(u)
    for axis in range(3):
        jac[:, 9 * j + 3 + axis] = ctx.rot[j][:, axis] * rel[axis]
    for axis in range(3):
        jac[axis, 9 * j + 6 + axis] = 1.0
    return jac


def transform_point(ctx: PoseContext, point, j):
    rel = np.asarray(point, dtype=np.float64) - ctx.anchors[j]
    return ctx.affine[j] @ rel + ctx.anchors[j] + ctx.pose.translations[j]


# ---------------------------------------------------------------------------
# Residual blocks (unweighted)
# ---------------------------------------------------------------------------

def data_residuals(ctx: PoseContext, correspondences):
    """(M, 3) residuals M_i - V_j and their Jacobians for retained pairs."""
    if correspondences.n_pairs == 0:
        raise NoCorrespondencesError("empty correspondence set")
    ids = correspondences.source_indices
    res = ctx.deformed[ids] - correspondences.points
    jac = vertex_jacobians(ctx, ids)
    return res, jac


def scale_residuals(ctx: PoseContext):
    """Per-bone S_j - 1 residuals, (K, 3)."""
    res = ctx.pose.scales - 1.0
    jac = np.zeros((ctx.n_bones, 3, ctx.dim))
    for j in range(ctx.n_bones):
        for axis in range(3):
            jac[j, axis, 9 * j + 3 + axis] = 1.0
    return res, jac


def joint_rotation_residuals(ctx: PoseContext):
    """Per-joint log of the relative rotation's deviation from rest, (J, 3)."""
    joints = ctx.model.skeleton.joints
    nj = len(joints)
    par = np.array([p for p, _, _ in joints])
    chi = np.array([c for _, c, _ in joints])
    rel = np.einsum("jba,jbc->jac", ctx.rot[par], ctx.rot[chi])

    # batched rotation log; fall back to the scalar routine near 0 and pi
    w = 0.5 * np.stack([rel[:, 2, 1] - rel[:, 1, 2],
                        rel[:, 0, 2] - rel[:, 2, 0],
                        rel[:, 1, 0] - rel[:, 0, 1]], axis=1)
    tr = np.clip((np.trace(rel, axis1=1, axis2=2) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(tr)
    generic = (angle >= 1e-7) & (angle <= np.pi - 1e-5)
    scale = np.ones(nj)
    scale[generic] = angle[generic] / np.sin(angle[generic])
    res = w * scale[:, None]
    for i in np.flatnonzero(~generic & (angle > 1e-7)):
        res[i] = rotation_log(rel[i])

    jac = np.zeros((nj, 3, ctx.dim))
    for i in range(nj):
        block = so3_left_jacobian_inverse(res[i]) @ ctx.rot[par[i]].T
        jac[i, :, rot_cols(chi[i])] = block
        jac[i, :, rot_cols(par[i])] = -block
    return res, jac


def joint_translation_residuals(ctx: PoseContext):
    """Per-joint relative translation deviations from rest, (J, 3).

    A joint's relative translation is the mismatch of the shared anchor under
    the parent and child transforms; at rest (and for any articulated pose
    with closed joints) it is zero. This is the joint-local reading of the
    translation regularizer; the root bone's global translation is free.
    """
    return joint_closure_residuals(ctx)


def landmark_residuals(ctx: PoseContext, scan_landmarks, active_count=None):
    """Deformed model landmarks minus scan landmarks, first `active_count`."""
    anchors = ctx.model.landmark_anchors
    scan_landmarks = np.asarray(scan_landmarks, dtype=np.float64)
    n = len(anchors) if active_count is None else int(active_count)
    if n == 0:
        return np.zeros((0, 3)), np.zeros((0, 3, ctx.dim))
    anchors = anchors[:n]
    tri = ctx.model.template.triangles
    pos = evaluate_anchors(ctx.deformed, tri, anchors)
    res = pos - scan_landmarks[:n]
    corners = np.array([tri[a.triangle_index] for a in anchors])  # (n, 3)
    bary = np.array([a.barycentric for a in anchors])             # (n, 3)
    corner_jac = vertex_jacobians(ctx, corners.reshape(-1)).reshape(
        n, 3, 3, ctx.dim)
    jac = np.einsum("mk,mkad->mad", bary, corner_jac)
    return res, jac


def joint_closure_residuals(ctx: PoseContext):
    """Parent-minus-child anchor positions per joint, (J, 3)."""
    joints = ctx.model.skeleton.joints
    res = np.zeros((len(joints), 3))
    jac = np.zeros((len(joints), 3, ctx.dim))
    for i, (p, c, anchor) in enumerate(joints):
        res[i] = transform_point(ctx, anchor, p) - transform_point(ctx, anchor, c)
        jac[i] = point_bone_jacobian(ctx, anchor, p) \
            - point_bone_jacobian(ctx, anchor, c)
    return res, jac


# ---------------------------------------------------------------------------
# Energy terms: value + gradient of the unweighted term
# ---------------------------------------------------------------------------

def _sq(res):
    return float(np.sum(res * res))


def _grad_sq(res, jac):
    return 2.0 * np.einsum("maj,ma->j", jac, res)


def e_data(model, pose, alpha, correspondences, ctx=None):
    ctx = ctx or make_context(model, pose, alpha)
    res, jac = data_residuals(ctx, correspondences)
    return _sq(res), _grad_sq(res, jac)


def e_scale(model, pose, alpha, ctx=None):
    ctx = ctx or make_context(model, pose, alpha)
    res, jac = scale_residuals(ctx)
    return _sq(res), _grad_sq(res, jac)


def e_blendshape(model, pose, alpha, ctx=None):
    """||alpha|| (unsquared); the alpha = 0 subgradient is taken as 0."""
    ctx = ctx or make_context(model, pose, alpha)
    norm = float(np.linalg.norm(ctx.alpha))
    grad = np.zeros(ctx.dim)
    if norm > 0.0:
        grad[alpha_cols(ctx.n_bones)] = ctx.alpha / norm
    return norm, grad


def e_joint(model, pose, alpha, ctx=None):
    ctx = ctx or make_context(model, pose, alpha)
    res_r, jac_r = joint_rotation_residuals(ctx)
    res_t, jac_t = joint_translation_residuals(ctx)
    value = _sq(res_r) + _sq(res_t)
    return value, _grad_sq(res_r, jac_r) + _grad_sq(res_t, jac_t)


def e_landmark(model, pose, alpha, scan_landmarks, active_count=None, ctx=None):
    ctx = ctx or make_context(model, pose, alpha)
    res, jac = landmark_residuals(ctx, scan_landmarks, active_count)
    if len(res) == 0:
        return 0.0, np.zeros(ctx.dim)
    return _sq(res), _grad_sq(res, jac)


def e_total(model, pose, alpha, correspondences, weights: EnergyWeights,
            scan_landmarks=None, active_landmarks=None,
            ctx=None) -> EnergyBreakdown:
    """Full weighted energy with gradient and Gauss-Newton Hessian.

    E = (1/l_D) E_D + (1/l_S) E_S + (1/l_BS) E_BS + (1/l_J) E_J [+ (1/l_L) E_L]
    """
    ctx = ctx or make_context(model, pose, alpha)
    dim = ctx.dim
    grad = np.zeros(dim)
    hess = np.zeros((dim, dim))

    def add_squared(res, jac, inv_lambda):
        flat_r = res.reshape(-1)
        flat_j = jac.reshape(-1, dim)
        nonlocal grad, hess
        grad += 2.0 * inv_lambda * (flat_j.T @ flat_r)
        hess += 2.0 * inv_lambda * (flat_j.T @ flat_j)
        return float(flat_r @ flat_r)

    ed = 0.0
    if correspondences is not None:
        res, jac = data_residuals(ctx, correspondences)
        ed = add_squared(res, jac, 1.0 / weights.lambda_d)
    res, jac = scale_residuals(ctx)
    es = add_squared(res, jac, 1.0 / weights.lambda_s)
    res_r, jac_r = joint_rotation_residuals(ctx)
    res_t, jac_t = joint_translation_residuals(ctx)
    ej = add_squared(res_r, jac_r, 1.0 / weights.lambda_j)
    ej += add_squared(res_t, jac_t, 1.0 / weights.lambda_j)

    ebs, g_bs = e_blendshape(model, pose, alpha, ctx=ctx)
    grad += g_bs / weights.lambda_bs
    cols = np.arange(9 * ctx.n_bones, dim)
    hess[cols, cols] += 1.0 / (weights.lambda_bs
                               * max(float(np.linalg.norm(ctx.alpha)),
                                     BS_NORM_FLOOR))

    el = 0.0
    if scan_landmarks is not None:
        res, jac = landmark_residuals(ctx, scan_landmarks, active_landmarks)
        if len(res):
            el = add_squared(res, jac, 1.0 / weights.lambda_l)

    total = (ed / weights.lambda_d + es / weights.lambda_s
             + ebs / weights.lambda_bs + ej / weights.lambda_j
             + el / weights.lambda_l)
    return EnergyBreakdown(e_data=ed, e_scale=es, e_blendshape=ebs, e_joint=ej,
                           e_landmark=el, e_total=total, gradient=grad,
                           gauss_newton_hessian=hess)
