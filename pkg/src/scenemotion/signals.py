"""Sparse tracking signals simulated from full-body motion.

At inference time the only observation is the head + two hand trackers; in
training we synthesize that observation from ground-truth motion. Layout of a
signal row (width 54): world rotation (6D) and world position (3) for each
tracker -> 9 state channels x 3 trackers = 27, followed by the backward finite
differences of those same 27 channels (per-second units). Lower-body anchor
signals reuse the layout with pelvis/ankle trackers.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .kinematics import (
    HEAD,
    L_ANKLE,
    L_WRIST,
    PELVIS,
    R_ANKLE,
    R_WRIST,
    MotionSequence,
    Skeleton,
    finite_difference_velocity,
    fk_transforms,
    matrix_to_rot6d,
    rot6d_to_matrix,
)

SIGNAL_WIDTH = 54  # (6 + 3) channels x 3 trackers x 2 (state, velocity)
UPPER_TRACKERS = (HEAD, L_WRIST, R_WRIST)
LOWER_TRACKERS = (PELVIS, L_ANKLE, R_ANKLE)


@dataclass
class SparseSignals:
    """Head/hand tracker observation p, (N, 54)."""

    values: torch.Tensor

    def __post_init__(self):
        _check_width(self.values)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


@dataclass
class AnchorSignals:
    """Pelvis/ankle signals used by the phase-matching guidance, (N, 54)."""

    values: torch.Tensor

    def __post_init__(self):
        _check_width(self.values)


def _check_width(values):
    if values.ndim != 2 or values.shape[-1] != SIGNAL_WIDTH:
        raise ValueError(f"signals must be (N, {SIGNAL_WIDTH}), got {tuple(values.shape)}")


def _tracker_values(skeleton, motion, joints) -> torch.Tensor:
    all_pos, all_rot = fk_transforms(skeleton, motion.local_rotations, motion.root_translation)
    idx = list(joints)
    rot, pos = all_rot[:, idx], all_pos[:, idx]
    n = motion.num_frames
    # 6D of each world rotation: first two columns flattened
    rot6d = rot[..., :, :2].transpose(-1, -2).reshape(n, len(joints), 6)
    state = torch.cat([rot6d, pos], dim=-1).reshape(n, -1)  # (N, 27)
    vel = finite_difference_velocity(state, motion.fps)
    return torch.cat([state, vel], dim=-1)


def extract_sparse_signals(skeleton: Skeleton, motion: MotionSequence) -> SparseSignals:
    """Simulate HMD + controller signals from the head and left/right wrists."""
    return SparseSignals(_tracker_values(skeleton, motion, UPPER_TRACKERS))


def extract_anchor_signals(skeleton: Skeleton, motion: MotionSequence) -> AnchorSignals:
    """Same layout from pelvis and left/right ankles; differentiable w.r.t. motion."""
    return AnchorSignals(_tracker_values(skeleton, motion, LOWER_TRACKERS))


@dataclass
class SignalStats:
    """Per-channel normalization statistics, std floored at 1e-6."""

    mean: torch.Tensor  # (54,)
    std: torch.Tensor  # (54,)

    @classmethod
    def fit(cls, stacked: torch.Tensor) -> "SignalStats":
        """Fit from (num_rows, 54) frames pooled over a corpus."""
        _check_width(stacked)
        return cls(stacked.mean(dim=0), stacked.std(dim=0, unbiased=False).clamp_min(1e-6))


def normalize(values: torch.Tensor, stats: SignalStats) -> torch.Tensor:
    if values.shape[-1] != stats.mean.shape[0]:
        raise ValueError("stats width does not match signals")
    return (values - stats.mean) / stats.std


def denormalize(values: torch.Tensor, stats: SignalStats) -> torch.Tensor:
    if values.shape[-1] != stats.mean.shape[0]:
        raise ValueError("stats width does not match signals")
    return values * stats.std + stats.mean


def yaw_canonical_transform(signals: SparseSignals):
    """Rigid transform (rot_z, offset) that centers the head at frame 0.

    Moves the head's frame-0 position to the z-axis (x = y = 0, height kept)
    and removes its yaw. Used only when signal canonicalization is enabled.
    """
    head_rot = rot6d_to_matrix(signals.values[0, 0:6])
    # yaw of the head's forward (first column) projected to the ground plane
    fwd = head_rot[:, 0]
    yaw = torch.atan2(fwd[1], fwd[0])
    c, s = torch.cos(-yaw), torch.sin(-yaw)
    rot = torch.stack(
        [
            torch.stack([c, -s, torch.zeros_like(c)]),
            torch.stack([s, c, torch.zeros_like(c)]),
            torch.tensor([0.0, 0.0, 1.0], dtype=c.dtype),
        ]
    )
    head_pos = signals.values[0, 6:9]
    offset = -head_pos.clone()
    offset[2] = 0.0  # keep absolute height
    return rot, offset


def apply_rigid_to_signals(signals, rot: torch.Tensor, offset: torch.Tensor, fps: float):
    """Apply p' = rot @ (p + offset) to states; velocities recomputed by FD."""
    values = signals.values
    n = values.shape[0]
    state = values[:, :27].reshape(n, 3, 9)
    rot6d = rot6d_to_matrix(state[..., :6].reshape(-1, 6)).reshape(n, 3, 3, 3)
    new_rot = rot @ rot6d
    new_rot6d = new_rot[..., :, :2].transpose(-1, -2).reshape(n, 3, 6)
    new_pos = (state[..., 6:9] + offset) @ rot.T
    new_state = torch.cat([new_rot6d, new_pos], dim=-1).reshape(n, -1)
    vel = finite_difference_velocity(new_state, fps)
    return type(signals)(torch.cat([new_state, vel], dim=-1))


def apply_rigid_to_motion(motion: MotionSequence, rot, offset) -> MotionSequence:
    root_mats = rot6d_to_matrix(motion.local_rotations[:, 0])
    rots = motion.local_rotations.clone()
    rots[:, 0] = matrix_to_rot6d(rot @ root_mats)
    return MotionSequence((motion.root_translation + offset) @ rot.T, rots, fps=motion.fps)
