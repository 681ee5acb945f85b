import numpy as np
import pytest

from torsofit.rig import (BlendWeights, Bone, PoseParams, RigError, Skeleton,
                          auto_blend_weights, bone_transforms, joint_residual,
                          joint_residuals, quat_from_rotvec, quat_identity,
                          quat_multiply, quat_normalize, quat_to_matrix,
                          relative_joint_rotation, rotation_exp, rotation_log,
                          skin)
from conftest import random_pose, small_model


def rand_quat(rng):
    return quat_normalize(rng.normal(size=4))


def test_quat_identity_matrix():
    np.testing.assert_allclose(quat_to_matrix(quat_identity()), np.eye(3),
                               atol=1e-15)


def test_quat_90_about_z():
    q = quat_from_rotvec([0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(quat_to_matrix(q) @ [1, 0, 0], [0, 1, 0],
                               atol=1e-12)


def test_quat_matrix_orthogonal():
    rng = np.random.default_rng(1)
    for _ in range(20):
        r = quat_to_matrix(rand_quat(rng))
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_rotation_log_examples():
    np.testing.assert_allclose(rotation_log(np.eye(3)), 0.0, atol=1e-15)
    r = quat_to_matrix(quat_from_rotvec([0.0, 0.0, np.pi / 2]))
    v = rotation_log(r)
    np.testing.assert_allclose(v, [0, 0, np.pi / 2], atol=1e-12)


def test_rotation_log_exp_roundtrip():
    rng = np.random.default_rng(2)
    for _ in range(50):
        r = quat_to_matrix(rand_quat(rng))
        np.testing.assert_allclose(rotation_exp(rotation_log(r)), r,
                                   atol=1e-9)


def test_rotation_log_numeric_exponential():
    rng = np.random.default_rng(3)
    for _ in range(20):
        r = quat_to_matrix(rand_quat(rng))
        w = rotation_log(r)
        # matrix exponential via scaling-and-squaring on the Taylor series
        k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        m = k / 2 ** 20
        e = np.eye(3) + m + m @ m / 2 + m @ m @ m / 6
        for _ in range(20):
            e = e @ e
        np.testing.assert_allclose(e, r, atol=1e-8)


def test_rotation_log_near_pi_stable():
    r = quat_to_matrix(quat_from_rotvec([np.pi - 1e-9, 0.0, 0.0]))
    v = rotation_log(r)
    assert np.isfinite(v).all()
    assert abs(np.linalg.norm(v) - (np.pi - 1e-9)) < 1e-6


def chain_skeleton():
    bones = [Bone(id=0, name="a", parent=None),
             Bone(id=1, name="b", parent=0, joint_anchor=[1.0, 0.0, 0.0])]
    return Skeleton.from_chain_links(bones)


def test_skin_pure_translation():
    sk = Skeleton(bones=[Bone(id=0, name="a", parent=None)])
    pose = PoseParams.rest(1)
    pose.translations[0] = [1.0, 0.0, 0.0]
    out = skin(np.zeros((1, 3)), sk, BlendWeights(np.ones((1, 1))), pose)
    np.testing.assert_allclose(out, [[1, 0, 0]], atol=1e-15)


def test_skin_convex_blend():
    sk = chain_skeleton()
    pose = PoseParams.rest(2)
    pose.translations[1] = [2.0, 0.0, 0.0]
    w = BlendWeights(np.array([[0.5], [0.5]]))
    out = skin(np.zeros((1, 3)), sk, w, pose)
    np.testing.assert_allclose(out, [[1, 0, 0]], atol=1e-15)


def test_skin_anisotropic_scale():
    sk = Skeleton(bones=[Bone(id=0, name="a", parent=None)])
    pose = PoseParams.rest(1)
    pose.scales[0] = [2.0, 1.0, 1.0]
    out = skin(np.array([[1.0, 0.0, 0.0]]), sk,
               BlendWeights(np.ones((1, 1))), pose)
    np.testing.assert_allclose(out, [[2, 0, 0]], atol=1e-15)


def test_skin_rest_identity():
    rng = np.random.default_rng(4)
    m = small_model(rng)
    out = skin(m.template.vertices, m.skeleton, m.weights,
               PoseParams.rest(m.skeleton.n_bones))
    np.testing.assert_allclose(out, m.template.vertices, atol=1e-9)


def test_skin_linear_in_vertices():
    rng = np.random.default_rng(5)
    m = small_model(rng)
    pose = random_pose(m, rng)
    pose.translations[:] = 0.0
    # subtract the affine offset so that the map is linear, then check
    v1 = rng.normal(size=m.template.vertices.shape)
    v2 = rng.normal(size=m.template.vertices.shape)
    z = skin(np.zeros_like(v1), m.skeleton, m.weights, pose)
    f = lambda v: skin(v, m.skeleton, m.weights, pose) - z
    np.testing.assert_allclose(f(2.0 * v1 + 3.0 * v2),
                               2.0 * f(v1) + 3.0 * f(v2), atol=1e-9)


def test_skin_common_rigid_transform():
    rng = np.random.default_rng(6)
    m = small_model(rng)
    q = rand_quat(rng)
    r = quat_to_matrix(q)
    t = rng.normal(size=3) * 10.0
    k = m.skeleton.n_bones
    pose = PoseParams.rest(k)
    for j in range(k):
        anchor = m.skeleton.bones[j].joint_anchor
        pose.rotations[j] = q
        # rotation acts about the joint anchor; compensate to get x -> Rx + t
        pose.translations[j] = r @ anchor - anchor + t
    out = skin(m.template.vertices, m.skeleton, m.weights, pose)
    expect = m.template.vertices @ r.T + t
    np.testing.assert_allclose(out, expect, atol=1e-9)


def test_joint_residual_rest_zero():
    sk = chain_skeleton()
    res = joint_residual(sk, PoseParams.rest(2), sk.joints[0])
    np.testing.assert_allclose(res, 0.0, atol=1e-15)


def test_joint_residual_sign_convention():
    sk = chain_skeleton()
    pose = PoseParams.rest(2)
    pose.translations[1] = [1.0, 0.0, 0.0]
    res = joint_residual(sk, pose, sk.joints[0])
    np.testing.assert_allclose(res, [-1, 0, 0], atol=1e-15)


def test_joint_residual_rigid_invariance():
    rng = np.random.default_rng(7)
    sk = chain_skeleton()
    pose = PoseParams.rest(2)
    pose.rotations[1] = rand_quat(rng)
    pose.translations[1] = rng.normal(size=3)
    base = joint_residual(sk, pose, sk.joints[0])
    # apply a common rigid motion to both bones
    q = rand_quat(rng)
    r = quat_to_matrix(q)
    t = rng.normal(size=3) * 5.0
    moved = PoseParams.rest(2)
    a0, t0 = bone_transforms(sk, pose)
    for j in range(2):
        moved.rotations[j] = quat_normalize(
            quat_multiply(q, pose.rotations[j]))
        moved.scales[j] = pose.scales[j]
        anchor = sk.bones[j].joint_anchor
        image = r @ (a0[j] @ anchor + t0[j]) + t
        # pick the translation that maps the anchor to its rigidly moved image
        a_new = quat_to_matrix(moved.rotations[j]) * moved.scales[j][None, :]
        moved.translations[j] = image - (anchor - a_new @ anchor) \
            - a_new @ anchor
    got = joint_residual(sk, moved, sk.joints[0])
    np.testing.assert_allclose(np.linalg.norm(got), np.linalg.norm(base),
                               atol=1e-9)


def test_relative_joint_rotation():
    sk = chain_skeleton()
    pose = PoseParams.rest(2)
    rel = relative_joint_rotation(pose, sk.joints[0])
    np.testing.assert_allclose(np.abs(rel[0]), 1.0, atol=1e-12)

    q = quat_from_rotvec([0.0, 0.0, np.deg2rad(30.0)])
    pose.rotations[0] = q
    pose.rotations[1] = q
    rel = relative_joint_rotation(pose, sk.joints[0])
    np.testing.assert_allclose(np.abs(rel[0]), 1.0, atol=1e-12)


def test_relative_rotation_definition():
    rng = np.random.default_rng(8)
    sk = chain_skeleton()
    pose = PoseParams.rest(2)
    pose.rotations[0] = rand_quat(rng)
    pose.rotations[1] = rand_quat(rng)
    rel = relative_joint_rotation(pose, sk.joints[0])
    rp = quat_to_matrix(pose.rotations[0])
    rc = quat_to_matrix(pose.rotations[1])
    np.testing.assert_allclose(quat_to_matrix(rel), rp.T @ rc, atol=1e-12)


def test_skeleton_validation():
    with pytest.raises(RigError):
        Skeleton(bones=[])
    with pytest.raises(RigError):
        Skeleton(bones=[Bone(id=0, name="a", parent=None),
                        Bone(id=1, name="b", parent=None)])


def test_blend_weights_partition_of_unity():
    with pytest.raises(RigError):
        BlendWeights(np.array([[0.5], [0.3]]))


def test_pose_params_positive_scale():
    pose = PoseParams.rest(1)
    with pytest.raises(RigError):
        PoseParams(pose.rotations, np.array([[0.0, 1.0, 1.0]]),
                   pose.translations)


def test_auto_blend_weights_normalized():
    rng = np.random.default_rng(9)
    verts = rng.normal(0.0, 20.0, size=(50, 3))
    segments = np.array([[[0, 0, 0], [0, 0, 10]],
                         [[0, 0, 10], [0, 0, 20]],
                         [[0, 0, 20], [0, 0, 30]]], dtype=float)
    w = auto_blend_weights(verts, segments).w
    np.testing.assert_allclose(w.sum(axis=0), 1.0, atol=1e-9)
    assert (w >= 0.0).all()


def test_shipped_skeleton_joints_closed(model):
    res = joint_residuals(model.skeleton,
                          PoseParams.rest(model.skeleton.n_bones))
    np.testing.assert_allclose(res, 0.0, atol=1e-9)
