"""Procedural stand-ins for non-distributable assets.

Generates a parametric torso template with a 9-bone skeleton, 55 procedural
blendshapes, 12 landmarks, 4 pattern curves, and seeded synthetic scan targets
with known ground truth. Blend weights and blendshape displacements are smooth
fields of rest position, so a template regenerated at a different resolution
carries the same deformation model (used to build dense scans).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (PatternCurve, TriangleMesh, anchor_point, clean_mesh,
                       evaluate_anchors)
from .rig import (Bone, PoseParams, Skeleton, auto_blend_weights,
                  quat_angle, quat_from_rotvec, quat_multiply, quat_normalize,
                  quat_to_matrix, quat_to_rotvec, quat_conjugate)
from .shape import BlendshapeSet, DeformableModel, deform_vertices
from .spatial import FilterConfig, ScanIndex, find_correspondences

N_BONES = 9
N_SHAPES = 55
N_LANDMARKS = 12
MAX_BUMP_AMPLITUDE = 40.0  # mm


class SynthError(Exception):
    pass


@dataclass
class TorsoSpec:
    """Parameters of the procedural torso. `resolution` scales the vertex
    grid; 1.0 gives the canonical ~2200-vertex template."""

    resolution: float = 1.0
    height: float = 700.0           # mm, pelvis base to head top
    chest_half_width: float = 170.0
    chest_half_depth: float = 110.0
    breast_protrusion: float = 45.0  # mm
    breast_spread_deg: float = 28.0  # nipple offset from the front midline
    seed: int = 0

    def __post_init__(self):
        if self.height <= 0 or self.chest_half_width <= 0 \
                or self.chest_half_depth <= 0:
            raise SynthError("torso dimensions must be positive")
        # upper bound admits the ~20k-vertex scan meshes used in timing runs
        n = self.grid_shape()[0] * self.grid_shape()[1] + 2
        if not (500 <= n <= 25_000):
            raise SynthError(f"resolution gives N={n}, outside [500, 25000]")

    def grid_shape(self):
        n_theta = max(int(round(44 * np.sqrt(self.resolution))), 8)
        n_rings = max(int(round(50 * np.sqrt(self.resolution))), 8)
        return n_rings, n_theta


# piecewise radius profile, as fractions of height / chest half-axes
_PROFILE_F = np.array([0.00, 0.18, 0.30, 0.45, 0.55, 0.66, 0.72, 0.76,
                       0.80, 0.86, 0.90, 0.95, 1.00])
_PROFILE_RX = np.array([0.90, 0.88, 0.82, 0.92, 1.00, 1.00, 0.97, 0.45,
                        0.30, 0.30, 0.42, 0.40, 0.10])
_PROFILE_RY = np.array([0.95, 0.92, 0.88, 0.95, 1.00, 1.00, 0.90, 0.60,
                        0.45, 0.45, 0.62, 0.58, 0.15])


def _torso_surface(spec: TorsoSpec, f, theta):
    """Surface point for ring fraction f in [0,1] and azimuth theta.

    theta = pi/2 is the front midline (+y).
    """
    rx = np.interp(f, _PROFILE_F, _PROFILE_RX) * spec.chest_half_width
    ry = np.interp(f, _PROFILE_F, _PROFILE_RY) * spec.chest_half_depth
    x = rx * np.cos(theta)
    y = ry * np.sin(theta)
    z = f * spec.height

    out = np.stack([np.cos(theta) * spec.chest_half_width,
                    np.sin(theta) * spec.chest_half_depth], axis=-1)
    out = out / np.linalg.norm(out, axis=-1, keepdims=True)

    # vertebral ridge along the full back midline; without it the nearly
    # circular sections at the poles leave bone twist unobservable
    back = -np.pi / 2
    dtb = np.arctan2(np.sin(theta - back), np.cos(theta - back))
    ridge = 8.0 * np.exp(-0.5 * (dtb / 0.35) ** 2)
    x = x + ridge * out[..., 0]
    y = y + ridge * out[..., 1]

    # two breast mounds on the front at chest height
    spread = np.deg2rad(spec.breast_spread_deg)
    zc = 0.52
    for side in (-1.0, 1.0):
        tc = np.pi / 2 + side * spread
        dt = np.arctan2(np.sin(theta - tc), np.cos(theta - tc))
        bump = spec.breast_protrusion * np.exp(
            -0.5 * ((dt / 0.42) ** 2 + ((f - zc) / 0.085) ** 2))
        x = x + bump * out[..., 0]
        y = y + bump * out[..., 1]
    return np.stack([x, y, z], axis=-1)


def _torso_mesh(spec: TorsoSpec) -> TriangleMesh:
    n_rings, n_theta = spec.grid_shape()
    f = np.linspace(0.0, 1.0, n_rings)
    theta = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    ff, tt = np.meshgrid(f, theta, indexing="ij")
    ring_verts = _torso_surface(spec, ff, tt).reshape(-1, 3)

    tris = []
    for r in range(n_rings - 1):
        for t in range(n_theta):
            a = r * n_theta + t
            b = r * n_theta + (t + 1) % n_theta
            c = a + n_theta
            d = b + n_theta
            tris.append([a, b, d])
            tris.append([a, d, c])
    # pole caps keep the mesh watertight
    bottom = len(ring_verts)
    top = bottom + 1
    verts = np.vstack([ring_verts,
                       [0.0, 0.0, -0.02 * spec.height],
                       [0.0, 0.0, 1.02 * spec.height]])
    for t in range(n_theta):
        tris.append([bottom, (t + 1) % n_theta, t])
        base = (n_rings - 1) * n_theta
        tris.append([top, base + t, base + (t + 1) % n_theta])
    mesh, _ = clean_mesh(verts, np.array(tris))
    return mesh


def _skeleton(spec: TorsoSpec):
    h = spec.height
    w = spec.chest_half_width

    def p(x, z):
        return np.array([x, 0.0, z * h])

    bones = [
        Bone(0, "pelvis", None, joint_anchor=p(0.0, 0.05)),
        Bone(1, "spine_lower", 0, joint_anchor=p(0.0, 0.22)),
        Bone(2, "spine_upper", 1, joint_anchor=p(0.0, 0.42)),
        Bone(3, "neck", 2, joint_anchor=p(0.0, 0.74)),
        Bone(4, "head", 3, joint_anchor=p(0.0, 0.86)),
        Bone(5, "clavicle_left", 2, joint_anchor=p(0.12 * w, 0.70)),
        Bone(6, "clavicle_right", 2, joint_anchor=p(-0.12 * w, 0.70)),
        Bone(7, "upper_arm_left", 5, joint_anchor=p(0.62 * w, 0.705)),
        Bone(8, "upper_arm_right", 6, joint_anchor=p(-0.62 * w, 0.705)),
    ]
    segments = np.array([
        [p(0.0, 0.02), p(0.0, 0.22)],
        [p(0.0, 0.22), p(0.0, 0.42)],
        [p(0.0, 0.42), p(0.0, 0.70)],
        [p(0.0, 0.74), p(0.0, 0.86)],
        [p(0.0, 0.86), p(0.0, 1.0)],
        [p(0.12 * w, 0.70), p(0.62 * w, 0.705)],
        [p(-0.12 * w, 0.70), p(-0.62 * w, 0.705)],
        [p(0.62 * w, 0.705), p(1.05 * w, 0.70)],
        [p(-0.62 * w, 0.705), p(-1.05 * w, 0.70)],
    ])
    return Skeleton.from_chain_links(bones), segments


@dataclass
class Bump:
    """Compactly supported displacement bump in (azimuth, height) coordinates."""

    theta_c: float
    f_c: float       # height fraction
    w_theta: float   # support half-width, radians
    w_f: float       # support half-width, height fraction
    amplitude: float  # mm, along the outward direction


def _bump_field(spec: TorsoSpec, vertices, bumps):
    """Sum of cos^2 bumps, zero outside each bump's elliptical support."""
    v = np.asarray(vertices)
    theta = np.arctan2(v[:, 1] / spec.chest_half_depth,
                       v[:, 0] / spec.chest_half_width)
    f = v[:, 2] / spec.height
    lateral = np.linalg.norm(v[:, :2], axis=1)
    out = np.zeros_like(v)
    direction = np.zeros_like(v)
    ok = lateral > 1e-9
    direction[ok] = np.column_stack([
        np.cos(theta[ok]) * spec.chest_half_width,
        np.sin(theta[ok]) * spec.chest_half_depth,
        np.zeros(ok.sum())])
    norms = np.linalg.norm(direction, axis=1, keepdims=True)
    direction = direction / np.where(norms > 0.0, norms, 1.0)
    for bump in bumps:
        dt = np.arctan2(np.sin(theta - bump.theta_c),
                        np.cos(theta - bump.theta_c))
        d2 = (dt / bump.w_theta) ** 2 + ((f - bump.f_c) / bump.w_f) ** 2
        w = np.where(d2 < 1.0, np.cos(0.5 * np.pi * np.sqrt(d2)) ** 2, 0.0)
        out += (bump.amplitude * w)[:, None] * direction
    return out


def blendshape_blueprint(spec: TorsoSpec):
    """Seed-deterministic bump definitions for the 55 shapes.

    Returns a list of (name, [Bump, ...]).
    """
    rng = np.random.default_rng(spec.seed + 101)
    front = np.pi / 2
    spread = np.deg2rad(spec.breast_spread_deg)
    shapes = [
        ("breast_size", [Bump(front - spread, 0.52, 0.55, 0.14, 30.0),
                         Bump(front + spread, 0.52, 0.55, 0.14, 30.0)]),
        ("shoulder_width", [Bump(0.0, 0.70, 0.5, 0.10, 25.0),
                            Bump(np.pi, 0.70, 0.5, 0.10, 25.0)]),
        ("belly", [Bump(front, 0.22, 0.9, 0.16, 30.0)]),
        ("breast_left_size", [Bump(front - spread, 0.52, 0.5, 0.13, 28.0)]),
        ("breast_right_size", [Bump(front + spread, 0.52, 0.5, 0.13, 28.0)]),
        ("nipple_left", [Bump(front - spread, 0.53, 0.18, 0.045, 10.0)]),
        ("nipple_right", [Bump(front + spread, 0.53, 0.18, 0.045, 10.0)]),
        ("upper_chest", [Bump(front, 0.64, 0.7, 0.09, 20.0)]),
    ]
    while len(shapes) < N_SHAPES:
        theta_c = rng.uniform(-np.pi, np.pi)
        f_c = rng.uniform(0.12, 0.78)
        w_theta = rng.uniform(0.25, 0.8)
        w_f = rng.uniform(0.05, 0.16)
        amp = rng.uniform(6.0, 32.0) * rng.choice([-1.0, 1.0])
        shapes.append((f"bump_{len(shapes):02d}",
                       [Bump(theta_c, f_c, w_theta, w_f, amp)]))
    return shapes


def _landmark_sites(spec: TorsoSpec):
    """Query points near the 12 canonical landmark sites, listing order:
    four midline points top to bottom, then 4 left/right pairs. The cricoid
    and umbilicus sit on the head and pelvis skin regions so every bone in
    the chain is constrained by at least one nearby landmark."""
    h = spec.height
    w = spec.chest_half_width
    d = spec.chest_half_depth
    spread = np.deg2rad(spec.breast_spread_deg)
    front = np.pi / 2

    def breast(side, fz):
        t = front - side * spread
        return [2.0 * w * np.cos(t), 2.0 * d * np.sin(t), fz * h]

    return [
        ("cricoid", [0.0, 2.0 * d, 0.93 * h]),
        ("sternal_notch", [0.0, 2.0 * d, 0.72 * h]),
        ("xiphoid", [0.0, 2.0 * d, 0.46 * h]),
        ("umbilicus", [0.0, 2.0 * d, 0.16 * h]),
        ("clavicle_acromial_left", [2.0 * w, 0.2 * d, 0.73 * h]),
        ("clavicle_acromial_right", [-2.0 * w, 0.2 * d, 0.73 * h]),
        ("mid_axillary_left", [2.0 * w, 0.0, 0.56 * h]),
        ("mid_axillary_right", [-2.0 * w, 0.0, 0.56 * h]),
        ("nipple_left", breast(1, 0.53)),
        ("nipple_right", breast(-1, 0.53)),
        ("breast_lowest_left", breast(1, 0.42)),
        ("breast_lowest_right", breast(-1, 0.42)),
    ]


def _pattern_curves(spec: TorsoSpec, mesh: TriangleMesh):
    h = spec.height
    d = spec.chest_half_depth
    w = spec.chest_half_width
    spread = np.deg2rad(spec.breast_spread_deg)
    front = np.pi / 2
    curves = []

    def anchor_line(points):
        return [anchor_point(mesh, p) for p in points]

    z = np.linspace(0.70, 0.60, 8)
    curves.append(PatternCurve("sternum_upper_arrow", anchor_line(
        [[0.0, 2.0 * d, fz * h] for fz in z]), oriented=True))
    z = np.linspace(0.50, 0.40, 8)
    curves.append(PatternCurve("sternum_lower_arrow", anchor_line(
        [[0.0, 2.0 * d, fz * h] for fz in z]), oriented=True))
    for side, name in ((1, "breast_outline_left"), (-1, "breast_outline_right")):
        tc = front - side * spread
        pts = []
        for u in np.linspace(0.0, 2.0 * np.pi, 24, endpoint=False):
            t = tc + 0.5 * np.cos(u)
            fz = 0.52 + 0.10 * np.sin(u)
            pts.append([2.0 * w * np.cos(t), 2.0 * d * np.sin(t), fz * h])
        curves.append(PatternCurve(name, anchor_line(pts)))
    return curves


def generate_template(spec: TorsoSpec | None = None) -> DeformableModel:
    """Build the full procedural deformable model for a TorsoSpec."""
    spec = spec or TorsoSpec()
    mesh = _torso_mesh(spec)
    skeleton, segments = _skeleton(spec)
    weights = auto_blend_weights(mesh.vertices, segments)
    blueprint = blendshape_blueprint(spec)
    disp = np.stack([_bump_field(spec, mesh.vertices, bumps)
                     for _, bumps in blueprint])
    shapes = BlendshapeSet(disp, [name for name, _ in blueprint])
    landmarks = [(name, anchor_point(mesh, q)) for name, q in
                 _landmark_sites(spec)]
    patterns = _pattern_curves(spec, mesh)
    return DeformableModel(template=mesh, skeleton=skeleton, weights=weights,
                           blendshapes=shapes, landmarks=landmarks,
                           patterns=patterns)


# ---------------------------------------------------------------------------
# Synthetic targets
# ---------------------------------------------------------------------------

@dataclass
class PoseRange:
    """Sampling bounds for ground-truth poses. Rotations are per-joint local
    rotations (degrees); scales per-axis; root translation in mm."""

    max_rotation_deg: float = 45.0
    scale_range: tuple = (0.9, 1.1)
    max_root_translation: float = 30.0

    def __post_init__(self):
        if not (0.0 <= self.max_rotation_deg <= 45.0):
            raise SynthError("rotations must stay within +/-45 degrees")
        lo, hi = self.scale_range
        if not (0.8 <= lo <= hi <= 1.25):
            raise SynthError("scales must stay within [0.8, 1.25]")


@dataclass
class SyntheticTarget:
    scan: TriangleMesh
    clean_scan: TriangleMesh
    pose: PoseParams
    alpha: np.ndarray
    scan_landmarks: np.ndarray  # (12, 3), evaluated pre-corruption
    landmark_names: list
    noise_sigma: float
    hole_fraction: float
    seed: int


def sample_ground_truth(model: DeformableModel, pose_range: PoseRange,
                        alpha_range, rng):
    """Articulated pose with exactly closed joints, plus blendshape weights."""
    k = model.skeleton.n_bones
    pose = PoseParams.rest(k)
    max_rot = np.deg2rad(pose_range.max_rotation_deg)
    lo, hi = pose_range.scale_range

    local_vecs = np.empty((k, 3))
    for j in range(k):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0.0, max_rot)
        local_vecs[j] = axis * angle
        pose.scales[j] = rng.uniform(lo, hi, size=3)

    # composed rotations must also stay within the range: shrink all local
    # rotations until no bone's absolute rotation exceeds max_rotation_deg
    parents = [b.parent for b in model.skeleton.bones]
    for _ in range(64):
        local_rot = [quat_from_rotvec(v) for v in local_vecs]
        absolute = [None] * k
        worst = 0.0
        for j in range(k):
            p = parents[j]
            absolute[j] = local_rot[j] if p is None else quat_normalize(
                quat_multiply(absolute[p], local_rot[j]))
            worst = max(worst, quat_angle(absolute[j]))
        if worst <= max_rot + 1e-12:
            break
        local_vecs *= 0.8

    # forward pass: children compose the parent rotation and close the joint
    affine = [None] * k
    trans = [None] * k
    for j, bone in enumerate(model.skeleton.bones):
        if bone.parent is None:
            pose.rotations[j] = local_rot[j]
            pose.translations[j] = rng.uniform(
                -pose_range.max_root_translation,
                pose_range.max_root_translation, size=3)
        else:
            p = bone.parent
            pose.rotations[j] = quat_normalize(
                quat_multiply(pose.rotations[p], local_rot[j]))
            a = bone.joint_anchor
            parent_image = affine[p] @ a + trans[p]
            pose.translations[j] = parent_image - a
        r = quat_to_matrix(pose.rotations[j])
        affine[j] = r * pose.scales[j][None, :]
        trans[j] = bone.joint_anchor - affine[j] @ bone.joint_anchor \
            + pose.translations[j]

    a_lo, a_hi = alpha_range
    alpha = rng.uniform(a_lo, a_hi, size=model.n_shapes)
    return pose, alpha


def _grow_holes(mesh: TriangleMesh, fraction, protected, rng):
    """Remove contiguous triangle patches totaling `fraction` of area.

    Protected triangles (landmark carriers) are never removed; growth flows
    around them. Returns the kept-triangle mask, or None when the target
    area cannot be reached.
    """
    tris = mesh.triangles
    areas = mesh.face_areas()
    target = fraction * areas.sum()

    # face adjacency over shared edges
    nv = mesh.n_vertices
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    keys = (np.minimum(edges[:, 0], edges[:, 1]) * nv
            + np.maximum(edges[:, 0], edges[:, 1]))
    face_ids = np.tile(np.arange(len(tris)), 3)
    order = np.argsort(keys, kind="stable")
    keys_s, faces_s = keys[order], face_ids[order]
    neighbors = [[] for _ in range(len(tris))]
    i = 0
    while i < len(keys_s):
        j = i + 1
        while j < len(keys_s) and keys_s[j] == keys_s[i]:
            j += 1
        group = faces_s[i:j]
        for x in group:
            for y in group:
                if x != y:
                    neighbors[x].append(int(y))
        i = j

    removed = np.zeros(len(tris), dtype=bool)
    removed_area = 0.0
    patch_target = target / 3.0
    guard = 0
    while removed_area < target and guard < 200:
        guard += 1
        candidates = np.flatnonzero(~removed & ~protected)
        if len(candidates) == 0:
            break
        seed_tri = int(rng.choice(candidates))
        frontier = [seed_tri]
        patch_area = 0.0
        while frontier and patch_area < patch_target \
                and removed_area < target:
            t = frontier.pop(0)
            if removed[t] or protected[t]:
                continue
            removed[t] = True
            patch_area += areas[t]
            removed_area += areas[t]
            for nb in neighbors[t]:
                if not removed[nb] and not protected[nb]:
                    frontier.append(nb)
    if removed_area < target * 0.95:
        return None
    return ~removed


def _compact(mesh: TriangleMesh, keep_tris):
    tris = mesh.triangles[keep_tris]
    used = np.unique(tris.reshape(-1))
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(mesh.vertices[used], remap[tris])


def generate_target(model: DeformableModel, pose_range: PoseRange | None = None,
                    alpha_range=(-1.0, 1.0), noise_sigma=0.0,
                    hole_fraction=0.0, seed=0,
                    scan_model: DeformableModel | None = None,
                    max_retries=10) -> SyntheticTarget:
    """Deform the model with a sampled ground truth and corrupt the result.

    `scan_model` may be a higher-resolution template generated from the same
    TorsoSpec seed; its surface carries the same deformation fields, giving a
    dense scan of the identical ground-truth surface.
    """
    pose_range = pose_range or PoseRange()
    if not (0.0 <= hole_fraction < 1.0):
        raise SynthError("hole_fraction must be in [0, 1)")
    rng = np.random.default_rng(seed)
    pose, alpha = sample_ground_truth(model, pose_range, alpha_range, rng)

    surface = scan_model if scan_model is not None else model
    clean = surface.template.with_vertices(deform_vertices(surface, pose, alpha))
    landmarks = evaluate_anchors(
        deform_vertices(model, pose, alpha), model.template.triangles,
        model.landmark_anchors)

    scan = clean
    if hole_fraction > 0.0:
        protected = np.zeros(clean.n_triangles, dtype=bool)
        for lm in landmarks:
            protected[anchor_point(clean, lm).triangle_index] = True
        keep = None
        for attempt in range(max_retries):
            keep = _grow_holes(clean, hole_fraction,
                               protected, np.random.default_rng(seed + 7 * attempt + 1))
            if keep is not None:
                break
        if keep is None:
            raise SynthError("hole growth kept hitting landmark triangles")
        scan = _compact(clean, keep)
    if noise_sigma > 0.0:
        normals = scan.vertex_normals
        offsets = rng.normal(0.0, noise_sigma, size=scan.n_vertices)
        scan = scan.with_vertices(scan.vertices + offsets[:, None] * normals)

    return SyntheticTarget(scan=scan, clean_scan=clean, pose=pose, alpha=alpha,
                           scan_landmarks=landmarks,
                           landmark_names=model.landmark_names,
                           noise_sigma=noise_sigma,
                           hole_fraction=hole_fraction, seed=seed)


# ---------------------------------------------------------------------------
# Recovery evaluation
# ---------------------------------------------------------------------------

@dataclass
class RecoveryReport:
    surface_mae: float        # vs the uncorrupted surface, mm
    landmark_mae: float       # vs the pre-noise landmarks, mm
    rotation_errors_deg: np.ndarray  # (K,) geodesic angles
    translation_errors: np.ndarray   # (K,) mm
    scale_errors: np.ndarray         # (K,) max per-axis |ratio - 1|
    alpha_error: float               # euclidean norm

    def max_rotation_error_deg(self):
        return float(self.rotation_errors_deg.max())


def evaluate_recovery(model: DeformableModel, pose: PoseParams, alpha,
                      target: SyntheticTarget) -> RecoveryReport:
    """Errors of a recovered parameter set against the target's ground truth."""
    recovered = deform_vertices(model, pose, alpha)
    mesh = model.template.with_vertices(recovered)
    index = ScanIndex(target.clean_scan)
    corr = find_correspondences(
        recovered, mesh.vertex_normals, index,
        FilterConfig(max_distance=1e9, max_normal_angle=180.0))
    surface_mae = float(np.abs(corr.distances).mean())

    lm = evaluate_anchors(recovered, model.template.triangles,
                          model.landmark_anchors)
    landmark_mae = float(
        np.linalg.norm(lm - target.scan_landmarks, axis=1).mean())

    k = model.skeleton.n_bones
    rot_err = np.zeros(k)
    for j in range(k):
        dq = quat_multiply(quat_conjugate(quat_normalize(pose.rotations[j])),
                           quat_normalize(target.pose.rotations[j]))
        rot_err[j] = np.rad2deg(np.linalg.norm(quat_to_rotvec(dq)))
    trans_err = np.linalg.norm(pose.translations - target.pose.translations,
                               axis=1)
    scale_err = np.abs(pose.scales / target.pose.scales - 1.0).max(axis=1)
    alpha_err = float(np.linalg.norm(np.asarray(alpha) - target.alpha))
    return RecoveryReport(surface_mae=surface_mae, landmark_mae=landmark_mae,
                          rotation_errors_deg=rot_err,
                          translation_errors=trans_err,
                          scale_errors=scale_err, alpha_error=alpha_err)
