import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from scenemotion.kinematics import (
    DegenerateRotationError,
    MotionSequence,
    Skeleton,
    angular_velocity,
    default_skeleton,
    finite_difference_velocity,
    fk_positions,
    forward_kinematics,
    geometric_loss,
    matrix_to_rot6d,
    rot6d_to_matrix,
)


def gram_schmidt_oracle(r):
    """Independent 3-step orthonormalization + cross product, in numpy."""
    a1, a2 = np.asarray(r[:3], dtype=np.float64), np.asarray(r[3:], dtype=np.float64)
    b1 = a1 / np.linalg.norm(a1)
    u2 = a2 - np.dot(b1, a2) * b1
    b2 = u2 / np.linalg.norm(u2)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def fk_oracle(parents, offsets, rot_mats, root):
    """Naive per-frame, per-joint recursive chain multiplication in numpy."""
    n, j = rot_mats.shape[0], rot_mats.shape[1]
    pos = np.zeros((n, j, 3))
    for t in range(n):
        world = [None] * j
        for i in range(j):
            p = parents[i]
            if p < 0:
                world[i] = rot_mats[t, i]
                pos[t, i] = root[t]
            else:
                pos[t, i] = pos[t, p] + world[p] @ offsets[i]
                world[i] = world[p] @ rot_mats[t, i]
    return pos


def random_motion(n=8, joints=22, fps=30.0, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    rots = Rotation.random(n * joints, random_state=rng).as_matrix().reshape(n, joints, 3, 3)
    rot6d = torch.tensor(rots[..., :, :2].transpose(0, 1, 3, 2).reshape(n, joints, 6), dtype=dtype)
    root = torch.tensor(rng.normal(size=(n, 3)), dtype=dtype)
    return MotionSequence(root, rot6d, fps=fps)


class TestRot6d:
    def test_canonical_identity(self):
        r = torch.tensor([1.0, 0, 0, 0, 1, 0])
        assert torch.allclose(rot6d_to_matrix(r), torch.eye(3))

    def test_normalization_invariance(self):
        r = torch.tensor([2.0, 0, 0, 0, 3, 0])
        assert torch.allclose(rot6d_to_matrix(r), torch.eye(3))

    def test_matches_gram_schmidt_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            r = rng.normal(size=6)
            got = rot6d_to_matrix(torch.tensor(r)).numpy()
            assert np.abs(got - gram_schmidt_oracle(r)).max() < 1e-6

    def test_first_column_is_normalized_first_vector(self):
        r = torch.tensor([0.0, 2.0, 0, 1, 0, 0], dtype=torch.float64)
        mat = rot6d_to_matrix(r)
        assert torch.allclose(mat[:, 0], torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64))

    @pytest.mark.parametrize(
        "bad",
        [
            [0.0, 0, 0, 0, 1, 0],  # zero first vector
            [1.0, 0, 0, 2, 0, 0],  # parallel
            [1.0, 0, 0, -3, 0, 0],  # anti-parallel
        ],
    )
    def test_degenerate_raises(self, bad):
        with pytest.raises(DegenerateRotationError):
            rot6d_to_matrix(torch.tensor(bad))

    @given(st.lists(st.floats(-3, 3), min_size=6, max_size=6))
    @settings(max_examples=120, deadline=None)
    def test_output_is_rotation(self, vals):
        r = np.array(vals)
        a1, a2 = r[:3], r[3:]
        n1 = np.linalg.norm(a1)
        if n1 < 1e-3:
            return
        perp = a2 - np.dot(a1 / n1, a2) * (a1 / n1)
        if np.linalg.norm(perp) < 1e-3:
            return
        mat = rot6d_to_matrix(torch.tensor(r, dtype=torch.float64))
        eye = torch.eye(3, dtype=torch.float64)
        assert (mat.T @ mat - eye).abs().max() < 1e-6
        assert abs(torch.linalg.det(mat).item() - 1.0) < 1e-6

    @given(st.floats(0.1, 10.0), st.floats(0.1, 10.0))
    @settings(max_examples=40, deadline=None)
    def test_positive_scaling_invariance(self, s1, s2):
        r = torch.tensor([0.3, -1.2, 0.5, 0.9, 0.1, -0.7], dtype=torch.float64)
        scaled = torch.cat([r[:3] * s1, r[3:] * s2])
        assert (rot6d_to_matrix(r) - rot6d_to_matrix(scaled)).abs().max() < 1e-9


class TestMatrixToRot6d:
    def test_identity(self):
        got = matrix_to_rot6d(torch.eye(3))
        assert torch.allclose(got, torch.tensor([1.0, 0, 0, 0, 1, 0]))

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            mat = torch.tensor(Rotation.random(random_state=rng).as_matrix())
            back = rot6d_to_matrix(matrix_to_rot6d(mat))
            assert (back - mat).abs().max() < 1e-6

    def test_z_quarter_turn_is_column_truncation(self):
        mat = torch.tensor(Rotation.from_euler("z", 90, degrees=True).as_matrix())
        got = matrix_to_rot6d(mat)
        expected = torch.cat([mat[:, 0], mat[:, 1]])
        assert torch.allclose(got, expected)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            matrix_to_rot6d(torch.eye(3) * 2.0)
        with pytest.raises(ValueError):
            matrix_to_rot6d(torch.diag(torch.tensor([1.0, 1.0, -1.0])))  # det -1


class TestForwardKinematics:
    def test_identity_pose_sums_offsets(self):
        skel = default_skeleton(torch.float64)
        n = 3
        rot6d = torch.zeros(n, 22, 6, dtype=torch.float64)
        rot6d[..., 0] = 1.0
        rot6d[..., 4] = 1.0
        motion = MotionSequence(torch.zeros(n, 3, dtype=torch.float64), rot6d)
        pos = forward_kinematics(skel, motion).positions
        # chain sums
        expected = torch.zeros(22, 3, dtype=torch.float64)
        for j in range(1, 22):
            expected[j] = expected[skel.parent_index[j]] + skel.offsets[j]
        assert (pos - expected.unsqueeze(0)).abs().max() < 1e-12

    def test_rotated_root_moves_child(self):
        # two-joint chain, root rotated 90 deg about z, child offset (1,0,0)
        skel = Skeleton((-1, 0), torch.tensor([[0.0, 0, 0], [1.0, 0, 0]], dtype=torch.float64))
        rz = Rotation.from_euler("z", 90, degrees=True).as_matrix()
        expected_child = rz @ np.array([1.0, 0, 0])  # oracle: explicit matrix chain
        rot6d = torch.zeros(2, 2, 6, dtype=torch.float64)
        rot6d[:, :, 0] = 1.0
        rot6d[:, :, 4] = 1.0
        rot6d[:, 0] = matrix_to_rot6d(torch.tensor(rz))
        motion = MotionSequence(torch.zeros(2, 3, dtype=torch.float64), rot6d)
        pos = forward_kinematics(skel, motion).positions
        assert np.abs(pos[0, 1].numpy() - expected_child).max() < 1e-12
        assert np.abs(expected_child - np.array([0.0, 1.0, 0])).max() < 1e-12

    def test_matches_recursive_oracle(self):
        skel = default_skeleton(torch.float64)
        motion = random_motion(n=6, seed=11)
        pos = forward_kinematics(skel, motion).positions.numpy()
        mats = rot6d_to_matrix(motion.local_rotations).numpy()
        expected = fk_oracle(
            skel.parent_index, skel.offsets.numpy(), mats, motion.root_translation.numpy()
        )
        assert np.abs(pos - expected).max() < 1e-6

    def test_joint_count_mismatch(self):
        skel = default_skeleton()
        motion = random_motion(n=4, joints=5, dtype=torch.float32)
        with pytest.raises(ValueError):
            forward_kinematics(skel, motion)

    def test_rigid_equivariance(self):
        skel = default_skeleton(torch.float64)
        motion = random_motion(n=5, seed=23)
        base = forward_kinematics(skel, motion).positions

        rig = torch.tensor(Rotation.from_euler("zyx", [40, 10, -25], degrees=True).as_matrix())
        shift = torch.tensor([0.4, -1.1, 0.25], dtype=torch.float64)
        rot6d = motion.local_rotations.clone()
        root_mats = rot6d_to_matrix(rot6d[:, 0])
        rot6d[:, 0] = matrix_to_rot6d(rig.unsqueeze(0) @ root_mats)
        moved = MotionSequence(
            motion.root_translation @ rig.T + shift, rot6d, fps=motion.fps
        )
        got = forward_kinematics(skel, moved).positions
        expected = base @ rig.T + shift
        assert (got - expected).abs().max() < 1e-6


class TestVelocities:
    def test_constant_series_zero(self):
        series = torch.full((10, 4), 2.5)
        assert finite_difference_velocity(series, 30.0).abs().max() == 0

    def test_unit_slope(self):
        fps = 30.0
        t = torch.arange(12, dtype=torch.float64) / fps
        v = finite_difference_velocity(t.unsqueeze(-1), fps)
        assert (v - 1.0).abs().max() < 1e-12

    def test_matches_difference_oracle(self):
        rng = np.random.default_rng(5)
        series = torch.tensor(rng.normal(size=(9, 7)))
        v = finite_difference_velocity(series, 30.0).numpy()
        expected = np.empty_like(series.numpy())
        expected[1:] = (series[1:].numpy() - series[:-1].numpy()) * 30.0
        expected[0] = expected[1]
        assert np.array_equal(v, expected)

    def test_too_short(self):
        with pytest.raises(ValueError):
            finite_difference_velocity(torch.zeros(1, 3), 30.0)

    def test_angular_velocity_constant_rotation(self):
        mat = torch.tensor(Rotation.from_euler("y", 35, degrees=True).as_matrix())
        rots = matrix_to_rot6d(mat).unsqueeze(0).repeat(8, 1)
        assert angular_velocity(rots, 30.0).abs().max() < 1e-7

    def test_angular_velocity_constant_z_spin(self):
        fps = 30.0
        angles = np.arange(10) * 1.0  # one degree per frame
        mats = Rotation.from_euler("z", angles, degrees=True).as_matrix()
        rots = matrix_to_rot6d(torch.tensor(mats))
        w = angular_velocity(rots, fps)
        expected = torch.tensor([0.0, 0.0, fps * math.pi / 180.0], dtype=torch.float64)
        assert (w - expected).abs().max() < 1e-9

    def test_angular_velocity_matches_quaternion_oracle(self):
        fps = 30.0
        rng = np.random.default_rng(19)
        steps = Rotation.from_rotvec(rng.normal(scale=0.05, size=(15, 3)))
        seq = [Rotation.random(random_state=rng)]
        for s in steps:
            seq.append(seq[-1] * s)
        seq = Rotation.concatenate(seq)
        rots = matrix_to_rot6d(torch.tensor(seq.as_matrix()))
        got = angular_velocity(rots, fps).numpy()
        rel = seq[:-1].inv() * seq[1:]
        expected = rel.as_rotvec() * fps
        expected = np.concatenate([expected[:1], expected], axis=0)
        assert np.abs(got - expected).max() < 1e-5


class TestGeometricLoss:
    def test_identical_is_zero(self):
        skel = default_skeleton(torch.float64)
        motion = random_motion(n=4, seed=2)
        assert geometric_loss(motion, motion, skel).item() == 0

    def test_rigid_shift(self):
        skel = default_skeleton(torch.float64)
        motion = random_motion(n=4, seed=3)
        shifted = MotionSequence(
            motion.root_translation + torch.tensor([0.01, 0.0, 0.0], dtype=torch.float64),
            motion.local_rotations,
            fps=motion.fps,
        )
        assert abs(geometric_loss(shifted, motion, skel).item() - 0.01) < 1e-12

    def test_matches_naive_oracle(self):
        skel = default_skeleton(torch.float64)
        a, b = random_motion(n=5, seed=4), random_motion(n=5, seed=5)
        got = geometric_loss(a, b, skel).item()
        pa = fk_positions(skel, a.local_rotations, a.root_translation).numpy()
        pb = fk_positions(skel, b.local_rotations, b.root_translation).numpy()
        expected = np.linalg.norm(pa - pb, axis=-1).mean()
        assert abs(got - expected) < 1e-6

    def test_symmetric_nonnegative(self):
        skel = default_skeleton(torch.float64)
        a, b = random_motion(n=3, seed=8), random_motion(n=3, seed=9)
        lab, lba = geometric_loss(a, b, skel).item(), geometric_loss(b, a, skel).item()
        assert lab >= 0 and abs(lab - lba) < 1e-12

    def test_shape_mismatch(self):
        skel = default_skeleton(torch.float64)
        with pytest.raises(ValueError):
            geometric_loss(random_motion(n=3), random_motion(n=4), skel)


class TestTensorRoundTrip:
    def test_motion_tensor_round_trip(self):
        motion = random_motion(n=6, seed=13)
        back = MotionSequence.from_tensor(motion.as_tensor(), fps=motion.fps)
        assert torch.equal(back.root_translation, motion.root_translation)
        assert torch.equal(back.local_rotations, motion.local_rotations)

    def test_bad_width(self):
        with pytest.raises(ValueError):
            MotionSequence.from_tensor(torch.zeros(4, 10))
