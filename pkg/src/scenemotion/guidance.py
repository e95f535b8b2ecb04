"""Sampling-time guidance losses and the gradient correction step.

Both losses are functions of the predicted clean motion only: the penetration
potential pushes lower-body joints out of the scene, and the phase-matching
potential pulls the lower body's periodic feature toward the upper body's.
Their weighted sum is differentiated w.r.t. the prediction and one explicit
gradient step is applied per denoising step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .kinematics import L_ANKLE, L_KNEE, R_ANKLE, R_KNEE, MotionSequence, Skeleton, fk_positions
from .pae import PeriodicAutoencoder, batch_frequency_params, phase_feature_from_tensors, phase_shift_from_components
from .scene import ScenePointCloud
from .signals import SparseSignals, extract_anchor_signals

CONTACT_JOINTS = (L_ANKLE, R_ANKLE, L_KNEE, R_KNEE)


@dataclass(frozen=True)
class GuidanceConfig:
    alpha: float = 0.1  # penetration weight
    beta: float = 0.01  # phase weight
    eta: float = 1.0  # gradient step size
    contact_radius_m: float = 0.02
    knn_neighbors: int = 4
    contact_joints: tuple = CONTACT_JOINTS

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.eta < 0:
            raise ValueError("weights and step size must be nonnegative")
        if self.contact_radius_m <= 0:
            raise ValueError("contact radius must be positive")
        if self.knn_neighbors < 1:
            raise ValueError("need at least one neighbor")
        if len(self.contact_joints) == 0:
            raise ValueError("contact joint set must be nonempty")


def penetration_loss(
    x0: MotionSequence, skeleton: Skeleton, cloud: ScenePointCloud, cfg: GuidanceConfig
) -> torch.Tensor:
    """Hinge potential sum_{frames, i in C, b in kNN(i)} max(r - |pos_i - b|, 0).

    Neighbor assignment is held constant within the call (subgradient choice at
    reassignment boundaries), so the value is differentiable w.r.t. x0 through
    FK almost everywhere.
    """
    pos = fk_positions(skeleton, x0.local_rotations, x0.root_translation)
    joints = pos[:, list(cfg.contact_joints)]  # (N, C, 3)
    k = min(cfg.knn_neighbors, cloud.num_points)
    q = joints.detach().cpu().numpy().reshape(-1, 3)
    _, idx = cloud.kdtree().query(q, k=k)
    idx = torch.as_tensor(idx.reshape(-1), dtype=torch.long)
    neighbors = cloud.points.to(joints.dtype)[idx].reshape(*joints.shape[:2], k, 3)
    dist = torch.linalg.norm(joints.unsqueeze(-2) - neighbors, dim=-1)
    return torch.relu(cfg.contact_radius_m - dist).sum()


def upper_phase_feature(pae: PeriodicAutoencoder, signals: SparseSignals, stats) -> torch.Tensor:
    """Observed upper-body phase feature [sin 2piS, cos 2piS, A], width 3h."""
    values = signals.values
    if stats is not None:
        values = (values - stats.mean.to(values.dtype)) / stats.std.to(values.dtype)
    latents = pae.encode(values)
    amp, _, _ = batch_frequency_params(latents, pae.fps)
    shift, _ = phase_shift_from_components(pae.phase_components(latents))
    return phase_feature_from_tensors(amp, shift)


def phase_matching_loss(
    x0: MotionSequence,
    upper_pae: PeriodicAutoencoder,
    anchor_pae: PeriodicAutoencoder,
    skeleton: Skeleton,
    upper_signals: SparseSignals,
    stats=None,
    upper_feature: torch.Tensor | None = None,
) -> torch.Tensor:
    """| P_upper - P_lower |, differentiable w.r.t. x0 through FK and the PAE.

    Anchor signals reuse the upper-signal normalization stats. P_upper can be
    passed precomputed (it does not depend on x0).
    """
    if upper_feature is None:
        upper_feature = upper_phase_feature(upper_pae, upper_signals, stats).detach()
    anchors = extract_anchor_signals(skeleton, x0).values
    if stats is not None:
        anchors = (anchors - stats.mean.to(anchors.dtype)) / stats.std.to(anchors.dtype)
    latents = anchor_pae.encode(anchors)
    amp, _, _ = batch_frequency_params(latents, anchor_pae.fps)
    shift, _ = phase_shift_from_components(anchor_pae.phase_components(latents))
    lower_feature = phase_feature_from_tensors(amp, shift)
    return torch.linalg.norm(upper_feature.to(lower_feature.dtype) - lower_feature)


@dataclass
class GuidanceContext:
    """Everything the sampling losses need besides the motion itself."""

    skeleton: Skeleton
    cloud: ScenePointCloud
    upper_pae: PeriodicAutoencoder = None
    anchor_pae: PeriodicAutoencoder = None
    upper_signals: SparseSignals = None
    stats: object = None
    upper_feature: torch.Tensor = None  # cached P_upper, filled lazily

    def observed_feature(self) -> torch.Tensor:
        if self.upper_feature is None:
            self.upper_feature = upper_phase_feature(
                self.upper_pae, self.upper_signals, self.stats
            ).detach()
        return self.upper_feature


def sample_loss(x0: MotionSequence, context: GuidanceContext, cfg: GuidanceConfig) -> torch.Tensor:
    """alpha * penetration + beta * phase; a zero weight disables its term."""
    total = x0.root_translation.new_zeros(())
    if cfg.alpha > 0:
        total = total + cfg.alpha * penetration_loss(x0, context.skeleton, context.cloud, cfg)
    if cfg.beta > 0:
        total = total + cfg.beta * phase_matching_loss(
            x0, context.upper_pae, context.anchor_pae, context.skeleton,
            context.upper_signals, stats=context.stats, upper_feature=context.observed_feature(),
        )
    return total


def sample_loss_gradient(x0: torch.Tensor, context: GuidanceContext, cfg: GuidanceConfig, fps: float) -> torch.Tensor:
    """Gradient of the sampling loss w.r.t. the flat (N, 135) prediction."""
    if cfg.alpha == 0 and cfg.beta == 0:
        return torch.zeros_like(x0)
    x = x0.detach().clone().requires_grad_(True)
    loss = sample_loss(MotionSequence.from_tensor(x, fps=fps), context, cfg)
    if not loss.requires_grad:  # both hinges inactive: flat region, zero gradient
        return torch.zeros_like(x0)
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def guided_correction(x0_hat, grad, eta: float):
    """One explicit descent step on the prediction: x0_hat - eta * grad."""
    x, wrap = (x0_hat.as_tensor(), lambda t: MotionSequence.from_tensor(t, fps=x0_hat.fps)) \
        if isinstance(x0_hat, MotionSequence) else (x0_hat, lambda t: t)
    g = grad.as_tensor() if isinstance(grad, MotionSequence) else grad
    if g.shape != x.shape:
        raise ValueError("gradient shape must match the prediction")
    return wrap(x - eta * g)
