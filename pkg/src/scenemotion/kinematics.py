"""Skeleton, rotation algebra and forward kinematics.

World frame is z-up, meters. Rotations use the 6D representation (first two
columns of the rotation matrix, decoded by Gram-Schmidt), which is continuous
and learning-friendly. All ops are pure torch functions and keep autograd
graphs intact, so losses built on top of FK are differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

NUM_JOINTS = 22
MOTION_DIM = 3 + NUM_JOINTS * 6  # root translation + per-joint 6D rotation

# Joint indices of the 22-joint body (SMPL ordering, first 22 joints).
PELVIS, HEAD = 0, 15
L_WRIST, R_WRIST = 20, 21
L_KNEE, R_KNEE = 4, 5
L_ANKLE, R_ANKLE = 7, 8
L_FOOT, R_FOOT = 10, 11


class DegenerateRotationError(ValueError):
    """6D input whose component vectors are zero or parallel."""


@dataclass(frozen=True)
class Skeleton:
    """Fixed kinematic tree: parent indices and bone offsets (parent frame, m)."""

    parent_index: tuple  # length J, root entry is -1
    offsets: torch.Tensor  # (J, 3)

    def __post_init__(self):
        parents = self.parent_index
        if len(parents) != self.offsets.shape[0] or self.offsets.shape[-1] != 3:
            raise ValueError("offsets must be (J, 3) matching parent_index")
        roots = [j for j, p in enumerate(parents) if p < 0]
        if roots != [0]:
            raise ValueError("exactly one root joint, at index 0")
        if any(p >= j for j, p in enumerate(parents) if j > 0):
            raise ValueError("parents must be topologically ordered (parent < child)")
        if not torch.isfinite(self.offsets).all():
            raise ValueError("offsets must be finite")

    @property
    def joint_count(self) -> int:
        return len(self.parent_index)


# Parents of the 22 body joints.
_BODY_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# Rest-pose bone offsets, z-up, +y = subject's left, +x = forward. T-pose arms
# extend along +/-y. Proportions approximate an adult body.
_BODY_OFFSETS = [
    [0.00, 0.00, 0.00],    # 0  pelvis
    [0.00, 0.09, -0.07],   # 1  left hip
    [0.00, -0.09, -0.07],  # 2  right hip
    [0.00, 0.00, 0.11],    # 3  spine1
    [0.00, 0.02, -0.38],   # 4  left knee
    [0.00, -0.02, -0.38],  # 5  right knee
    [0.00, 0.00, 0.14],    # 6  spine2
    [0.00, 0.00, -0.40],   # 7  left ankle
    [0.00, 0.00, -0.40],   # 8  right ankle
    [0.00, 0.00, 0.06],    # 9  spine3
    [0.12, 0.00, -0.06],   # 10 left foot
    [0.12, 0.00, -0.06],   # 11 right foot
    [0.00, 0.00, 0.22],    # 12 neck
    [0.00, 0.07, 0.12],    # 13 left collar
    [0.00, -0.07, 0.12],   # 14 right collar
    [0.00, 0.00, 0.15],    # 15 head
    [0.00, 0.10, 0.02],    # 16 left shoulder
    [0.00, -0.10, 0.02],   # 17 right shoulder
    [0.00, 0.26, 0.00],    # 18 left elbow
    [0.00, -0.26, 0.00],   # 19 right elbow
    [0.00, 0.25, 0.00],    # 20 left wrist
    [0.00, -0.25, 0.00],   # 21 right wrist
]


def default_skeleton(dtype=torch.float32) -> Skeleton:
    """The 22-joint body used throughout."""
    return Skeleton(_BODY_PARENTS, torch.tensor(_BODY_OFFSETS, dtype=dtype))


@dataclass
class MotionSequence:
    """A motion window: per-frame root translation + 22 local joint rotations."""

    root_translation: torch.Tensor  # (N, 3) meters
    local_rotations: torch.Tensor  # (N, 22, 6)
    fps: float = 30.0

    def __post_init__(self):
        t, r = self.root_translation, self.local_rotations
        if t.ndim != 2 or t.shape[-1] != 3:
            raise ValueError(f"root_translation must be (N, 3), got {tuple(t.shape)}")
        if r.ndim != 3 or r.shape[0] != t.shape[0] or r.shape[-1] != 6:
            raise ValueError(f"local_rotations must be (N, J, 6), got {tuple(r.shape)}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def num_frames(self) -> int:
        return self.root_translation.shape[0]

    @property
    def joint_count(self) -> int:
        return self.local_rotations.shape[1]

    def as_tensor(self) -> torch.Tensor:
        """Flatten to (N, 3 + J*6), root translation first."""
        n = self.num_frames
        return torch.cat([self.root_translation, self.local_rotations.reshape(n, -1)], dim=-1)

    @classmethod
    def from_tensor(cls, x: torch.Tensor, fps: float = 30.0) -> "MotionSequence":
        n, d = x.shape
        joints = (d - 3) // 6
        if 3 + joints * 6 != d:
            raise ValueError(f"cannot split width {d} into translation + 6D rotations")
        return cls(x[:, :3], x[:, 3:].reshape(n, joints, 6), fps=fps)


@dataclass
class JointPositions:
    """World-frame joint positions from FK."""

    positions: torch.Tensor  # (N, J, 3)


def rot6d_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Decode 6D rotations (..., 6) to matrices (..., 3, 3) by Gram-Schmidt.

    Columns of the result are the orthonormalized first vector, the
    orthogonalized second vector, and their cross product.
    """
    if r.shape[-1] != 6:
        raise ValueError(f"expected trailing dim 6, got {r.shape[-1]}")
    a1, a2 = r[..., :3], r[..., 3:]
    n1 = torch.linalg.norm(a1, dim=-1, keepdim=True)
    if (n1.detach() < 1e-8).any():
        raise DegenerateRotationError("first 6D vector is (near) zero")
    b1 = a1 / n1
    a2_perp = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = torch.linalg.norm(a2_perp, dim=-1, keepdim=True)
    if (n2.detach() < 1e-8).any():
        raise DegenerateRotationError("6D component vectors are (near) parallel")
    b2 = a2_perp / n2
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


def matrix_to_rot6d(mat: torch.Tensor) -> torch.Tensor:
    """Encode rotation matrices (..., 3, 3) to 6D: first two columns, flattened."""
    if mat.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3), got {tuple(mat.shape)}")
    eye = torch.eye(3, dtype=mat.dtype, device=mat.device)
    err = (mat.transpose(-1, -2) @ mat - eye).abs().max()
    if err > 1e-4 or (torch.linalg.det(mat) - 1).abs().max() > 1e-4:
        raise ValueError("input is not a rotation matrix (orthonormal, det +1)")
    return mat[..., :, :2].transpose(-1, -2).reshape(*mat.shape[:-2], 6)


def fk_transforms(skeleton: Skeleton, rot6d: torch.Tensor, root: torch.Tensor):
    """Forward kinematics on raw tensors.

    rot6d: (..., J, 6) local rotations; root: (..., 3) translation. Returns
    world joint positions (..., J, 3) and world rotations (..., J, 3, 3).
    Differentiable.
    """
    j = skeleton.joint_count
    if rot6d.shape[-2] != j:
        raise ValueError(f"motion has {rot6d.shape[-2]} joints, skeleton has {j}")
    mats = rot6d_to_matrix(rot6d)  # (..., J, 3, 3)
    offsets = skeleton.offsets.to(dtype=rot6d.dtype, device=rot6d.device)
    world_rot = [mats[..., 0, :, :]]
    pos = [root]
    for i in range(1, j):
        p = skeleton.parent_index[i]
        pos.append(pos[p] + (world_rot[p] @ offsets[i].unsqueeze(-1)).squeeze(-1))
        world_rot.append(world_rot[p] @ mats[..., i, :, :])
    return torch.stack(pos, dim=-2), torch.stack(world_rot, dim=-3)


def fk_positions(skeleton: Skeleton, rot6d: torch.Tensor, root: torch.Tensor) -> torch.Tensor:
    """World joint positions (..., J, 3); see fk_transforms."""
    return fk_transforms(skeleton, rot6d, root)[0]


def forward_kinematics(skeleton: Skeleton, motion: MotionSequence) -> JointPositions:
    """Convert local joint rotations + root translation to world positions."""
    return JointPositions(fk_positions(skeleton, motion.local_rotations, motion.root_translation))


def finite_difference_velocity(series: torch.Tensor, fps: float) -> torch.Tensor:
    """Backward differences scaled to per-second units; first frame copies second."""
    if series.shape[0] < 2:
        raise ValueError("need at least 2 frames for velocities")
    v = (series[1:] - series[:-1]) * fps
    return torch.cat([v[:1], v], dim=0)


def angular_velocity(rotations: torch.Tensor, fps: float) -> torch.Tensor:
    """Axis-angle of the frame-to-frame relative rotation, in rad/s.

    rotations: (N, 6); returns (N, 3) with the first frame copying the second.
    """
    mats = rot6d_to_matrix(rotations)  # (N, 3, 3)
    rel = mats[:-1].transpose(-1, -2) @ mats[1:]
    # vee(R - R^T)/2 = sin(theta) * axis
    w = 0.5 * torch.stack(
        [rel[:, 2, 1] - rel[:, 1, 2], rel[:, 0, 2] - rel[:, 2, 0], rel[:, 1, 0] - rel[:, 0, 1]],
        dim=-1,
    )
    s = torch.linalg.norm(w, dim=-1)
    c = 0.5 * (rel.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0)
    theta = torch.atan2(s, c)
    # theta/sin(theta) -> 1 as theta -> 0
    scale = torch.where(s > 1e-12, theta / s.clamp_min(1e-12), torch.ones_like(s))
    v = w * scale.unsqueeze(-1) * fps
    return torch.cat([v[:1], v], dim=0)


def geometric_loss(pred: MotionSequence, gt: MotionSequence, skeleton: Skeleton) -> torch.Tensor:
    """Mean L2 distance (meters) between FK joint positions of two motions."""
    if pred.local_rotations.shape != gt.local_rotations.shape:
        raise ValueError("pred/gt shapes differ")
    p = fk_positions(skeleton, pred.local_rotations, pred.root_translation)
    g = fk_positions(skeleton, gt.local_rotations, gt.root_translation)
    return torch.linalg.norm(p - g, dim=-1).mean()
