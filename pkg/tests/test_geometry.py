import numpy as np
import pytest

from hierhand.geometry import (
    CANONICAL_BONE_AXIS,
    bone_angles,
    bone_direction,
    quat_canonical,
    quat_from_matrix,
    quat_from_rotvec,
    quat_multiply,
    quat_normalize,
    quat_rotation_angle,
    quat_to_matrix,
    random_unit_quaternion,
    rot_x,
    rot_y,
    rot_z,
    rotation_between,
    wrap_angle,
)


def test_wrap_angle_boundaries():
    assert wrap_angle(np.pi) == pytest.approx(np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(np.pi)
    assert wrap_angle(3 * np.pi) == pytest.approx(np.pi)
    assert wrap_angle(0.3) == pytest.approx(0.3)
    np.testing.assert_allclose(wrap_angle(np.array([2 * np.pi + 0.1, -2 * np.pi - 0.1])), [0.1, -0.1])


def test_quat_matrix_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        q = random_unit_quaternion(rng)
        m = quat_to_matrix(q)
        assert np.linalg.det(m) == pytest.approx(1.0, abs=1e-12)
        q2 = quat_from_matrix(m)
        assert quat_rotation_angle(q, q2) < 1e-9


def test_quat_multiply_matches_matrix_product():
    rng = np.random.default_rng(1)
    a = random_unit_quaternion(rng)
    b = random_unit_quaternion(rng)
    np.testing.assert_allclose(
        quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12
    )


def test_quat_from_rotvec_small_angle_stable():
    v = np.array([1e-12, 0.0, 0.0])
    q = quat_from_rotvec(v)
    assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-15)
    assert quat_rotation_angle(q, np.array([1.0, 0, 0, 0])) == pytest.approx(1e-12, rel=1e-3)


def test_quat_canonical_fixes_sign():
    q = np.array([-0.5, 0.5, 0.5, 0.5])
    np.testing.assert_allclose(quat_canonical(q), [0.5, -0.5, -0.5, -0.5])
    zero_w = quat_normalize(np.array([0.0, -1.0, 0.3, 0.2]))
    assert quat_canonical(zero_w)[1] > 0


def test_rotation_between_general_and_antiparallel():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a = rng.standard_normal(3)
        a /= np.linalg.norm(a)
        b = rng.standard_normal(3)
        b /= np.linalg.norm(b)
        r = rotation_between(a, b)
        np.testing.assert_allclose(r @ a, b, atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)
    a = np.array([0.0, -1.0, 0.0])
    r = rotation_between(a, -a)
    np.testing.assert_allclose(r @ a, -a, atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_elementary_rotations_are_proper():
    for rot in (rot_x, rot_y, rot_z):
        m = rot(0.37)
        np.testing.assert_allclose(m @ m.T, np.eye(3), atol=1e-15)
        assert np.linalg.det(m) == pytest.approx(1.0)


def test_bone_direction_rest_is_canonical():
    np.testing.assert_allclose(bone_direction(np.zeros(3)), CANONICAL_BONE_AXIS, atol=1e-15)


def test_bone_direction_ignores_twist():
    angles = np.array([0.3, -0.5, 0.0])
    twisted = np.array([0.3, -0.5, 1.2])
    np.testing.assert_allclose(bone_direction(angles), bone_direction(twisted), atol=1e-15)


def test_bone_angles_roundtrip():
    rng = np.random.default_rng(3)
    alphas = rng.uniform(-np.pi + 1e-6, np.pi, 300)
    betas = rng.uniform(-np.pi / 2 + 1e-6, np.pi / 2 - 1e-6, 300)
    triples = np.stack([alphas, betas, np.zeros(300)], axis=1)
    recovered = bone_angles(bone_direction(triples))
    np.testing.assert_allclose(recovered, triples, atol=1e-9)
