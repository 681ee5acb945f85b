"""Outer closest-point loop and inner regularized Newton minimization.

Joint closure enters the linear system as stiff compliance-weighted residual
rows (weight 1/compliance), which coincides with the Lagrange-multiplier
treatment in the small-compliance limit and keeps the system positive
definite. The step-acceptance objective therefore includes the closure
penalty on top of the five energy terms.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import (EnergyBreakdown, EnergyWeights, apply_step,
                     joint_closure_residuals, make_context, transform_point,
                     e_total)
from .geometry import TriangleMesh, evaluate_anchors
from .rig import PoseParams, quat_multiply, quat_normalize, rotation_log
from .shape import DeformableModel
from .spatial import (CorrespondenceSet, FilterConfig, ScanIndex,
                      find_correspondences)


class SolverError(Exception):
    pass


class NoOverlapError(SolverError):
    """No correspondences survived filtering on the first iteration."""


class SolverStallError(SolverError):
    """The damped system failed to produce a descent step."""


class InitializationError(SolverError):
    """Landmark set too degenerate for rigid initialization."""


@dataclass
class SolverConfig:
    max_outer_iterations: int = 100
    max_inner_iterations: int = 5
    newton_regularization: float = 1e-6  # Levenberg damping
    convergence_threshold: float = 1e-2  # mm, on mean correspondence distance
    joint_compliance: float = 1e-6
    max_damping_escalations: int = 30
    anderson_depth: int = 5  # outer-loop extrapolation window; 0 disables
    landmark_warmup_steps: int = 60  # data-free articulation steps at start
    max_seconds: float | None = None  # wall-clock budget; None = unlimited

    def __post_init__(self):
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            raise SolverError("iteration caps must be >= 1")
        if self.anderson_depth < 0:
            raise SolverError("anderson_depth must be >= 0")
        if self.newton_regularization < 0.0:
            raise SolverError("newton_regularization must be >= 0")
        if self.convergence_threshold <= 0.0 or self.joint_compliance <= 0.0:
            raise SolverError("thresholds must be positive")
        if self.max_seconds is not None and self.max_seconds <= 0.0:
            raise SolverError("max_seconds must be positive")


@dataclass
class IterationRecord:
    iteration: int
    e_data: float
    e_scale: float
    e_blendshape: float
    e_joint: float
    e_landmark: float
    e_total: float
    mean_distance: float
    n_pairs: int
    millis: float


@dataclass
class RegistrationResult:
    pose: PoseParams
    alpha: np.ndarray
    trace: list
    converged: bool
    total_seconds: float
    correspondences: CorrespondenceSet | None
    breakdown: EnergyBreakdown | None = None


def _pack(pose: PoseParams, alpha):
    """Flatten pose (quaternions, scales, translations) and alpha."""
    return np.concatenate([pose.rotations.reshape(-1),
                           pose.scales.reshape(-1),
                           pose.translations.reshape(-1),
                           np.asarray(alpha, dtype=np.float64).reshape(-1)])


def _unpack(vec, model):
    k = model.skeleton.n_bones
    q = vec[:4 * k].reshape(k, 4).copy()
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    q /= np.where(norms > 0.0, norms, 1.0)
    scales = np.maximum(vec[4 * k:7 * k].reshape(k, 3).copy(), 1e-3)
    trans = vec[7 * k:10 * k].reshape(k, 3).copy()
    alpha = vec[10 * k:].copy()
    return PoseParams(rotations=q, scales=scales, translations=trans), alpha


def _objective(model, pose, alpha, correspondences, weights, scan_landmarks,
               active_landmarks, compliance, ctx=None):
    """Acceptance objective: E_fin plus the stiff joint-closure penalty.

    Residual values only; no Jacobians are assembled.
    """
    ctx = ctx or make_context(model, pose, alpha)
    ed = 0.0
    if correspondences is not None:
        res_d = (ctx.deformed[correspondences.source_indices]
                 - correspondences.points)
        ed = float(np.sum(res_d * res_d))
    es = float(np.sum((pose.scales - 1.0) ** 2))
    rot = ctx.rot
    er = 0.0
    ec = 0.0
    for p, c, anchor in model.skeleton.joints:
        phi = rotation_log(rot[p].T @ rot[c])
        er += float(phi @ phi)
        gap = transform_point(ctx, anchor, p) - transform_point(ctx, anchor, c)
        ec += float(gap @ gap)
    ej = er + ec
    ebs = float(np.linalg.norm(alpha))
    el = 0.0
    if scan_landmarks is not None:
        n_l = len(model.landmark_anchors) if active_landmarks is None \
            else int(active_landmarks)
        if n_l:
            pos = evaluate_anchors(ctx.deformed, model.template.triangles,
                                   model.landmark_anchors[:n_l])
            res_l = pos - np.asarray(scan_landmarks)[:n_l]
            el = float(np.sum(res_l * res_l))
    total = (ed / weights.lambda_d + es / weights.lambda_s
             + ebs / weights.lambda_bs + ej / weights.lambda_j
             + el / weights.lambda_l)
    breakdown = EnergyBreakdown(e_data=ed, e_scale=es, e_blendshape=ebs,
                                e_joint=ej, e_landmark=el, e_total=total)
    return total + ec / compliance, breakdown


def newton_step(model, pose, alpha, correspondences, weights: EnergyWeights,
                scan_landmarks=None, active_landmarks=None,
                damping=1e-6, compliance=1e-6, max_escalations=10, ctx=None,
                rot_step_cap=None, trans_step_cap=None, scale_bounds=None):
    """One damped Gauss-Newton step with step rejection.

    Returns (pose, alpha, step_norm, objective_after, damping, breakdown,
    accepted_ctx). Raises SolverStallError after `max_escalations` failed
    damping increases.
    The optional caps clamp per-step rotation (radians) and translation (mm)
    components, trust-region style; underdetermined solves otherwise take
    huge leaps into the wrong basin.
    """
    ctx = ctx or make_context(model, pose, alpha)
    bd = e_total(model, pose, alpha, correspondences, weights,
                 scan_landmarks=scan_landmarks,
                 active_landmarks=active_landmarks, ctx=ctx)
    grad = bd.gradient.copy()
    hess = bd.gauss_newton_hessian.copy()
    res_c, jac_c = joint_closure_residuals(ctx)
    flat_r = res_c.reshape(-1)
    flat_j = jac_c.reshape(-1, ctx.dim)
    grad += (2.0 / compliance) * (flat_j.T @ flat_r)
    hess += (2.0 / compliance) * (flat_j.T @ flat_j)
    obj_before = bd.e_total + float(flat_r @ flat_r) / compliance

    if not np.any(grad):
        return pose, alpha, 0.0, obj_before, damping, bd, ctx

    eye = np.eye(ctx.dim)
    for _ in range(max_escalations + 1):
        try:
            delta = np.linalg.solve(hess + damping * eye, -grad)
        except np.linalg.LinAlgError:
            damping = max(damping, 1e-12) * 10.0
            continue
        if rot_step_cap is not None or trans_step_cap is not None:
            dd = delta[:9 * ctx.n_bones].reshape(ctx.n_bones, 9)
            s = 1.0
            if rot_step_cap is not None:
                mr = np.abs(dd[:, :3]).max()
                if mr > rot_step_cap:
                    s = min(s, rot_step_cap / mr)
            if trans_step_cap is not None:
                mt = np.abs(dd[:, 6:]).max()
                if mt > trans_step_cap:
                    s = min(s, trans_step_cap / mt)
            delta = delta * s
        new_pose, new_alpha = apply_step(pose, alpha, delta)
        if scale_bounds is not None:
            # landmarks alone cannot identify per-bone scale; keep it in
            # the model's sane deformation range while data is absent
            new_pose = replace(
                new_pose, scales=np.clip(new_pose.scales, *scale_bounds))
        new_ctx = make_context(model, new_pose, new_alpha)
        obj_after, new_bd = _objective(model, new_pose, new_alpha,
                                       correspondences, weights,
                                       scan_landmarks, active_landmarks,
                                       compliance, ctx=new_ctx)
        if obj_after <= obj_before * (1.0 + 1e-12) + 1e-12:
            damping = max(damping * 0.1, 1e-12)
            return (new_pose, new_alpha, float(np.linalg.norm(delta)),
                    obj_after, damping, new_bd, new_ctx)
        damping = max(damping, 1e-12) * 10.0
    raise SolverStallError(
        f"no descent step after {max_escalations} damping escalations "
        f"(damping={damping:g}, objective={obj_before:g})")


def initialize_from_landmarks(model: DeformableModel, scan_landmarks):
    """Rigid initialization from >= 3 non-collinear landmark pairs.

    Closed-form orthogonal Procrustes (no scale) aligns the model's rest
    landmark positions to the scan landmarks; the resulting rigid motion is
    applied to every bone so the skinned mesh moves rigidly.
    """
    scan_landmarks = np.asarray(scan_landmarks, dtype=np.float64)
    anchors = model.landmark_anchors[:len(scan_landmarks)]
    if len(anchors) < 3 or len(scan_landmarks) < 3:
        raise InitializationError("need at least 3 landmark pairs")
    src = evaluate_anchors(model.template.vertices, model.template.triangles,
                           anchors)
    dst = scan_landmarks[:len(anchors)]
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    h = (src - src_mean).T @ (dst - dst_mean)
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-9 * max(s[0], 1e-30):
        raise InitializationError("landmarks are collinear or degenerate")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = dst_mean - rot @ src_mean

    pose = PoseParams.rest(model.skeleton.n_bones)
    q = _matrix_to_quat(rot)
    for j, bone in enumerate(model.skeleton.bones):
        pose.rotations[j] = q
        pose.translations[j] = t + (rot - np.eye(3)) @ bone.joint_anchor
    return pose


def _matrix_to_quat(r):
    """Unit quaternion (w, x, y, z) of a proper rotation matrix."""
    tr = np.trace(r)
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s,
                      (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    else:
        i = int(np.argmax(np.diagonal(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + r[i, i] - r[j, j] - r[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return quat_normalize(q)


def register(model: DeformableModel, scan: TriangleMesh, scan_landmarks=None,
             weights: EnergyWeights | None = None,
             filters: FilterConfig | None = None,
             solver_config: SolverConfig | None = None,
             initial_pose: PoseParams | None = None, initial_alpha=None,
             active_landmarks=None,
             scan_index: ScanIndex | None = None) -> RegistrationResult:
    """Fit the deformable model to the scan.

    Alternates correspondence search on the currently deformed model with up
    to `max_inner_iterations` Newton steps against frozen targets; stops when
    the mean retained correspondence distance changes by less than the
    convergence threshold between outer iterations.
    """
    weights = weights or EnergyWeights()
    filters = filters or FilterConfig()
    cfg = solver_config or SolverConfig()
    t0 = time.perf_counter()

    if scan_index is None:
        scan_index = ScanIndex(scan)

    lm = None
    if scan_landmarks is not None:
        lm = np.asarray(scan_landmarks, dtype=np.float64)
        if lm.ndim != 2 or lm.shape[1] != 3:
            raise SolverError("scan landmarks must be (L, 3)")

    if initial_pose is not None:
        pose = initial_pose.copy()
    elif lm is not None and len(lm) >= 3:
        pose = initialize_from_landmarks(model, lm)
    else:
        pose = model.rest_pose()
    alpha = (np.asarray(initial_alpha, dtype=np.float64).copy()
             if initial_alpha is not None else model.zero_alpha())

    if initial_pose is None and lm is not None and len(lm) >= 3:
        # articulate toward the landmarks before any closest-point matching;
        # the rigid initialization leaves chained bones far off for large
        # relative rotations and plain ICP then stalls in a wrong basin.
        # Blendshapes stay pinned at zero: 12 points cannot determine shape.
        warm_weights = replace(weights, lambda_bs=1e-9)
        warm_damping = cfg.newton_regularization
        prev_obj = None
        for _ in range(cfg.landmark_warmup_steps):
            try:
                pose, alpha, step_norm, obj, warm_damping, _, _ = newton_step(
                    model, pose, alpha, None, warm_weights, scan_landmarks=lm,
                    active_landmarks=active_landmarks, damping=warm_damping,
                    compliance=cfg.joint_compliance,
                    max_escalations=cfg.max_damping_escalations,
                    rot_step_cap=0.12, trans_step_cap=12.0,
                    scale_bounds=(0.8, 1.25))
            except SolverStallError:
                break
            if step_norm < 1e-8:
                break
            if prev_obj is not None and obj > prev_obj * (1.0 - 1e-9):
                break
            prev_obj = obj

    trace = []
    converged = False
    damping = cfg.newton_regularization
    prev_mean = None
    prev2_mean = None
    corr = None
    breakdown = None

    # Anderson acceleration state over the outer fixed-point iteration
    aa_x, aa_g = [], []          # parameter vectors and their plain updates
    aa_pending = None            # plain iterate to fall back to
    aa_depth = cfg.anderson_depth
    ctx_cache = None             # context of the current (pose, alpha)

    for it in range(1, cfg.max_outer_iterations + 1):
        it_start = time.perf_counter()
        if cfg.max_seconds is not None \
                and it_start - t0 > cfg.max_seconds:
            break
        ctx = ctx_cache if ctx_cache is not None \
            else make_context(model, pose, alpha)
        ctx_cache = None
        deformed = model.template.with_vertices(ctx.deformed)
        corr = find_correspondences(ctx.deformed, deformed.vertex_normals,
                                    scan_index, filters,
                                    guess=corr.nn_local if corr else None)
        if corr.n_pairs == 0:
            if it == 1:
                raise NoOverlapError(
                    "no correspondences survived filtering; initialize from "
                    "landmarks or relax the filters")
            converged = False
            break
        mean_dist = corr.mean_distance()

        if aa_pending is not None and prev_mean is not None \
                and mean_dist > prev_mean - cfg.convergence_threshold:
            # extrapolation made no real progress: back out to the plain
            # iterate so the stopping rule only ever sees plain ICP progress
            pose, alpha = _unpack(aa_pending, model)
            aa_x.clear()
            aa_g.clear()
            aa_pending = None
            ctx = make_context(model, pose, alpha)
            deformed = model.template.with_vertices(ctx.deformed)
            corr = find_correspondences(ctx.deformed, deformed.vertex_normals,
                                        scan_index, filters, guess=corr.nn_local)
            mean_dist = corr.mean_distance()
        aa_pending = None

        if mean_dist < cfg.convergence_threshold or (
                prev_mean is not None
                and abs(mean_dist - prev_mean) < cfg.convergence_threshold):
            converged = True
            _, breakdown = _objective(model, pose, alpha, corr, weights, lm,
                                      active_landmarks, cfg.joint_compliance,
                                      ctx=ctx)
            trace.append(IterationRecord(
                iteration=it, e_data=breakdown.e_data,
                e_scale=breakdown.e_scale,
                e_blendshape=breakdown.e_blendshape,
                e_joint=breakdown.e_joint, e_landmark=breakdown.e_landmark,
                e_total=breakdown.e_total, mean_distance=mean_dist,
                n_pairs=corr.n_pairs,
                millis=(time.perf_counter() - it_start) * 1e3))
            break
        prev2_mean = prev_mean
        prev_mean = mean_dist

        x_vec = _pack(pose, alpha)
        inner_ctx = ctx
        for _ in range(cfg.max_inner_iterations):
            try:
                (pose, alpha, step_norm, _, damping, breakdown,
                 inner_ctx) = newton_step(
                    model, pose, alpha, corr, weights,
                    scan_landmarks=lm, active_landmarks=active_landmarks,
                    damping=damping, compliance=cfg.joint_compliance,
                    max_escalations=cfg.max_damping_escalations,
                    ctx=inner_ctx)
            except SolverStallError:
                break
            ctx_cache = inner_ctx
            if step_norm < 1e-10:
                break

        # extrapolate only while plain progress is still well above the
        # stopping threshold; near convergence the revert churn just costs
        # extra correspondence searches
        aa_active = aa_depth > 0 and (
            prev2_mean is None
            or prev_mean < prev2_mean - cfg.convergence_threshold)
        if aa_active:
            g_vec = _pack(pose, alpha)
            aa_x.append(x_vec)
            aa_g.append(g_vec)
            if len(aa_x) > aa_depth + 1:
                aa_x.pop(0)
                aa_g.pop(0)
            if len(aa_x) >= 2:
                f = np.stack([g - x for g, x in zip(aa_g, aa_x)], axis=1)
                df = np.diff(f, axis=1)
                dg = np.diff(np.stack(aa_g, axis=1), axis=1)
                gamma, *_ = np.linalg.lstsq(df, f[:, -1], rcond=None)
                x_acc = g_vec - dg @ gamma
                if np.isfinite(x_acc).all():
                    pose, alpha = _unpack(x_acc, model)
                    aa_pending = g_vec
                    ctx_cache = None

        if breakdown is None:
            _, breakdown = _objective(model, pose, alpha, corr, weights, lm,
                                      active_landmarks, cfg.joint_compliance)
        trace.append(IterationRecord(
            iteration=it, e_data=breakdown.e_data, e_scale=breakdown.e_scale,
            e_blendshape=breakdown.e_blendshape, e_joint=breakdown.e_joint,
            e_landmark=breakdown.e_landmark, e_total=breakdown.e_total,
            mean_distance=mean_dist, n_pairs=corr.n_pairs,
            millis=(time.perf_counter() - it_start) * 1e3))

    return RegistrationResult(
        pose=pose, alpha=alpha, trace=trace, converged=converged,
        total_seconds=time.perf_counter() - t0, correspondences=corr,
        breakdown=breakdown)
