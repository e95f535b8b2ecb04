"""Evaluation metrics for estimated motion.

MPJRE (deg), MPJPE (mm), MPJVE (mm/s), Jitter (10^2 m/s^3), foot skate
(cm/frame) and per-part position errors. All metrics are plain functions of
two motion windows (or one, for smoothness) and return python floats.
"""

from __future__ import annotations

import math

import torch

from .kinematics import (
    L_FOOT,
    R_FOOT,
    MotionSequence,
    Skeleton,
    finite_difference_velocity,
    fk_positions,
    rot6d_to_matrix,
)

HAND_JOINTS = (20, 21)
UPPER_JOINTS = (3, 6, 9, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21)
LOWER_JOINTS = (0, 1, 2, 4, 5, 7, 8, 10, 11)
FOOT_JOINTS = (L_FOOT, R_FOOT)
PART_JOINTS = {"hands": HAND_JOINTS, "upper": UPPER_JOINTS, "lower": LOWER_JOINTS}


def _check_pair(pred: MotionSequence, gt: MotionSequence):
    if pred.local_rotations.shape != gt.local_rotations.shape:
        raise ValueError("pred and gt shapes differ")


def mpjre(pred: MotionSequence, gt: MotionSequence, convention: str = "geodesic") -> float:
    """Mean per-joint rotation error in degrees.

    The default is the geodesic angle of the relative rotation; the "euler"
    convention instead sums absolute XYZ euler angles of the relative rotation
    (exposed for comparison with papers that report that quantity).
    """
    _check_pair(pred, gt)
    with torch.no_grad():
        rp = rot6d_to_matrix(pred.local_rotations.double())
        rg = rot6d_to_matrix(gt.local_rotations.double())
        rel = rg.transpose(-1, -2) @ rp
        if convention == "geodesic":
            # atan2 form: exact zero for identical inputs, stable for small angles
            w = 0.5 * torch.stack(
                [
                    rel[..., 2, 1] - rel[..., 1, 2],
                    rel[..., 0, 2] - rel[..., 2, 0],
                    rel[..., 1, 0] - rel[..., 0, 1],
                ],
                dim=-1,
            )
            s = torch.linalg.norm(w, dim=-1)
            c = 0.5 * (rel.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0)
            ang = torch.atan2(s, c)
            return math.degrees(ang.mean().item())
        if convention == "euler":
            from scipy.spatial.transform import Rotation

            eul = Rotation.from_matrix(rel.reshape(-1, 3, 3).numpy()).as_euler("xyz", degrees=True)
            return float(abs(eul).sum(axis=-1).mean())
        raise ValueError(f"unknown convention {convention!r}")


def mpjpe(pred: MotionSequence, gt: MotionSequence, skeleton: Skeleton) -> float:
    """Mean per-joint position error in millimeters."""
    return per_part_pe(pred, gt, skeleton, None)


def per_part_pe(pred: MotionSequence, gt: MotionSequence, skeleton: Skeleton, part) -> float:
    """MPJPE restricted to a joint subset; part is a name, index tuple, or None."""
    _check_pair(pred, gt)
    if isinstance(part, str):
        part = PART_JOINTS[part.lower()]
    with torch.no_grad():
        pp = fk_positions(skeleton, pred.local_rotations.double(), pred.root_translation.double())
        pg = fk_positions(skeleton, gt.local_rotations.double(), gt.root_translation.double())
        if part is not None:
            pp, pg = pp[:, list(part)], pg[:, list(part)]
        return 1000.0 * torch.linalg.norm(pp - pg, dim=-1).mean().item()


def mpjve(pred: MotionSequence, gt: MotionSequence, skeleton: Skeleton, fps: float) -> float:
    """Mean per-joint velocity error in mm/s."""
    _check_pair(pred, gt)
    with torch.no_grad():
        pp = fk_positions(skeleton, pred.local_rotations.double(), pred.root_translation.double())
        pg = fk_positions(skeleton, gt.local_rotations.double(), gt.root_translation.double())
        vp = finite_difference_velocity(pp.reshape(pp.shape[0], -1), fps).reshape(pp.shape)
        vg = finite_difference_velocity(pg.reshape(pg.shape[0], -1), fps).reshape(pg.shape)
        return 1000.0 * torch.linalg.norm(vp - vg, dim=-1).mean().item()


def jitter(motion: MotionSequence, skeleton: Skeleton, fps: float) -> float:
    """Mean jerk magnitude of all joints, reported in 10^2 m/s^3."""
    if motion.num_frames < 4:
        raise ValueError("jitter needs at least 4 frames")
    with torch.no_grad():
        pos = fk_positions(skeleton, motion.local_rotations.double(), motion.root_translation.double())
        d3 = pos[3:] - 3 * pos[2:-1] + 3 * pos[1:-2] - pos[:-3]
        jerk = d3 * fps**3
        return torch.linalg.norm(jerk, dim=-1).mean().item() / 100.0


def foot_skate(
    motion: MotionSequence,
    skeleton: Skeleton,
    fps: float,
    contact_height: float = 0.05,
    contact_speed: float = 0.3,
    floor_z: float = 0.0,
) -> float:
    """Mean horizontal (xy) drift of grounded feet between adjacent frames, cm/frame.

    A foot counts as grounded at a frame when it is below floor_z +
    contact_height and slower than contact_speed; a frame pair contributes
    when both of its frames are grounded. Returns 0 without contact.
    """
    with torch.no_grad():
        pos = fk_positions(skeleton, motion.local_rotations.double(), motion.root_translation.double())
        feet = pos[:, list(FOOT_JOINTS)]  # (N, 2, 3)
        speed = torch.linalg.norm(
            finite_difference_velocity(feet.reshape(feet.shape[0], -1), fps).reshape(feet.shape),
            dim=-1,
        )
        grounded = (feet[..., 2] < floor_z + contact_height) & (speed < contact_speed)
        pair_mask = grounded[1:] & grounded[:-1]  # (N-1, 2)
        if not pair_mask.any():
            return 0.0
        drift = torch.linalg.norm(feet[1:, :, :2] - feet[:-1, :, :2], dim=-1)
        return 100.0 * drift[pair_mask].mean().item()
