"""End-to-end estimation: condition assembly and prior-seeded guided sampling.

One estimation run draws the initial window from the motion prior, then walks
the reverse diffusion chain t = T..1, applying exactly one guidance-gradient
correction to each clean-motion prediction before re-noising. All randomness
flows through a single seeded generator, so runs are exactly reproducible.
Longer inputs are handled by stride-N/2 sliding windows blended with a linear
cross-fade (slerp for rotations).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import ConditionBundle, Denoiser, DiffusionSchedule, ddpm_step, q_sample
from .guidance import GuidanceConfig, GuidanceContext, guided_correction, sample_loss_gradient
from .kinematics import MotionSequence, Skeleton, rot6d_to_matrix
from .pae import PeriodicAutoencoder, PeriodicFeatureCurve, reconstruct_periodic_feature, window_periodic_params
from .prior import MotionPrior, sample_initial_motion
from .scene import ScenePointCloud, ScenePointEncoder, SceneFeature, crop_bounding_box, encode_scene
from .signals import (
    SignalStats,
    SparseSignals,
    apply_rigid_to_motion,
    apply_rigid_to_signals,
    normalize,
    yaw_canonical_transform,
)


@dataclass
class ModelBundle:
    """Trained components shared (immutably) by estimation runs."""

    skeleton: Skeleton
    prior: MotionPrior
    denoiser: Denoiser
    scene_encoder: ScenePointEncoder
    upper_pae: PeriodicAutoencoder
    anchor_pae: PeriodicAutoencoder
    stats: SignalStats
    fps: float = 30.0
    canonicalize: bool = False  # must match how the training windows were built


def crop_center(signals: SparseSignals) -> torch.Tensor:
    """Head world position at the window's first frame (one crop per window)."""
    return signals.values[0, 6:9].detach()


def assemble_condition(
    signals: SparseSignals,
    cloud: ScenePointCloud,
    pae: PeriodicAutoencoder,
    scene_encoder: ScenePointEncoder,
    stats: SignalStats,
    fps: float,
) -> ConditionBundle:
    """Build c = (p, f, E_S) from one observation window and the scene."""
    n = signals.num_frames
    with torch.no_grad():
        params = window_periodic_params(pae, normalize(signals.values, stats))
        periodic = reconstruct_periodic_feature(params, n, fps)
    center = crop_center(signals)
    cropped = crop_bounding_box(cloud, center)
    local = ScenePointCloud(cropped.points - center, empty_crop=cropped.empty_crop)
    feature = encode_scene(scene_encoder, local) if scene_encoder is not None else SceneFeature(
        torch.zeros(256, dtype=signals.values.dtype)
    )
    return ConditionBundle(signals, periodic, feature)


def _estimate_window(
    signals: SparseSignals,
    cloud: ScenePointCloud,
    bundle: ModelBundle,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig,
    generator: torch.Generator,
    noise_prior_sample: bool = False,
    use_prior: bool = True,
) -> MotionSequence:
    n = signals.num_frames
    if n != bundle.denoiser.window_frames:
        raise ValueError(f"denoiser expects {bundle.denoiser.window_frames}-frame windows, got {n}")
    canon = None
    if bundle.canonicalize:
        canon = yaw_canonical_transform(signals)
        signals = apply_rigid_to_signals(signals, *canon, bundle.fps)
        cloud = ScenePointCloud((cloud.points + canon[1]) @ canon[0].T)
    cond = assemble_condition(
        signals, cloud, bundle.upper_pae, bundle.scene_encoder, bundle.stats, bundle.fps
    )
    guided = cfg.eta > 0 and (cfg.alpha > 0 or cfg.beta > 0)
    ctx = None
    if guided:
        ctx = GuidanceContext(
            skeleton=bundle.skeleton,
            cloud=crop_bounding_box(cloud, crop_center(signals)),
            upper_pae=bundle.upper_pae,
            anchor_pae=bundle.anchor_pae,
            upper_signals=signals,
            stats=bundle.stats,
        )

    if use_prior:
        x_t = sample_initial_motion(bundle.prior, signals, generator, fps=bundle.fps).as_tensor()
        if noise_prior_sample:
            eps = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
            x_t = q_sample(schedule, x_t, schedule.num_steps, eps)
    else:
        # motion-prior ablation: plain Gaussian endpoint
        dtype = bundle.prior.sig_mean.dtype if bundle.prior is not None else signals.values.dtype
        x_t = torch.randn(n, bundle.prior.motion_dim, generator=generator, dtype=dtype)

    sig_b = signals.values.unsqueeze(0)
    per_b = cond.periodic.values.to(x_t.dtype).unsqueeze(0)
    scn_b = cond.scene.vector.to(x_t.dtype).unsqueeze(0)
    for t in range(schedule.num_steps, 0, -1):
        with torch.no_grad():
            x0_hat = bundle.denoiser(
                x_t.unsqueeze(0), torch.tensor([t]), sig_b, periodic=per_b, scene=scn_b
            ).squeeze(0)
        if guided:
            grad = sample_loss_gradient(x0_hat, ctx, cfg, bundle.fps)
            x0_hat = guided_correction(x0_hat, grad, cfg.eta)
        x_t = ddpm_step(schedule, x0_hat, t, generator)
    result = MotionSequence.from_tensor(x_t, fps=bundle.fps)
    if canon is not None:
        rot, offset = canon
        result = apply_rigid_to_motion(result, rot.T, -(rot @ offset))
    return result


def estimate_motion(
    signals: SparseSignals,
    cloud: ScenePointCloud,
    bundle: ModelBundle,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig,
    seed: int,
    noise_prior_sample: bool = False,
    use_prior: bool = True,
) -> MotionSequence:
    """Estimate one full window from sparse signals and the scene."""
    gen = torch.Generator().manual_seed(seed)
    return _estimate_window(signals, cloud, bundle, schedule, cfg, gen, noise_prior_sample, use_prior)


def _slerp(q1: np.ndarray, q2: np.ndarray, w: float) -> np.ndarray:
    """Spherical interpolation between unit quaternion arrays (..., 4)."""
    dot = (q1 * q2).sum(axis=-1, keepdims=True)
    q2 = np.where(dot < 0, -q2, q2)
    dot = np.abs(np.clip(dot, -1.0, 1.0))
    theta = np.arccos(dot)
    sin_theta = np.sin(theta)
    small = sin_theta < 1e-8
    c1 = np.where(small, 1.0 - w, np.sin((1.0 - w) * theta) / np.where(small, 1.0, sin_theta))
    c2 = np.where(small, w, np.sin(w * theta) / np.where(small, 1.0, sin_theta))
    out = c1 * q1 + c2 * q2
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def _blend_windows(base: MotionSequence, incoming: MotionSequence, overlap: int) -> MotionSequence:
    """Cross-fade the incoming window onto the tail of the running estimate."""
    from scipy.spatial.transform import Rotation

    if overlap <= 0:
        return MotionSequence(
            torch.cat([base.root_translation, incoming.root_translation]),
            torch.cat([base.local_rotations, incoming.local_rotations]),
            fps=base.fps,
        )
    w = blend_weights(overlap).to(base.root_translation.dtype)  # incoming weight, 0 -> 1
    old_t = base.root_translation[-overlap:]
    new_t = incoming.root_translation[:overlap]
    mixed_t = (1 - w.unsqueeze(-1)) * old_t + w.unsqueeze(-1) * new_t

    old_r = base.local_rotations[-overlap:]
    new_r = incoming.local_rotations[:overlap]
    q_old = Rotation.from_matrix(rot6d_to_matrix(old_r).numpy().reshape(-1, 3, 3)).as_quat()
    q_new = Rotation.from_matrix(rot6d_to_matrix(new_r).numpy().reshape(-1, 3, 3)).as_quat()
    shape = (overlap, old_r.shape[1], 4)
    w_np = w.numpy().reshape(overlap, 1, 1)
    q_mix = _slerp(q_old.reshape(shape), q_new.reshape(shape), w_np)
    mats = Rotation.from_quat(q_mix.reshape(-1, 4)).as_matrix().reshape(overlap, old_r.shape[1], 3, 3)
    mixed_r = torch.as_tensor(
        mats[..., :, :2].swapaxes(-1, -2).reshape(overlap, old_r.shape[1], 6),
        dtype=old_r.dtype,
    )
    return MotionSequence(
        torch.cat([base.root_translation[:-overlap], mixed_t, incoming.root_translation[overlap:]]),
        torch.cat([base.local_rotations[:-overlap], mixed_r, incoming.local_rotations[overlap:]]),
        fps=base.fps,
    )


def blend_weights(overlap: int) -> torch.Tensor:
    """Incoming-window weights across an overlap region, ramping 0 -> 1."""
    return torch.arange(1, overlap + 1, dtype=torch.float64) / (overlap + 1)


def estimate_long_sequence(
    signals: SparseSignals,
    cloud: ScenePointCloud,
    bundle: ModelBundle,
    schedule: DiffusionSchedule,
    cfg: GuidanceConfig,
    seed: int,
    noise_prior_sample: bool = False,
    use_prior: bool = True,
) -> MotionSequence:
    """Estimate a sequence longer than one window via stride-N/2 sliding windows."""
    n = bundle.denoiser.window_frames
    m = signals.num_frames
    if m < n:
        raise ValueError(f"sequence of {m} frames is shorter than one {n}-frame window")
    gen = torch.Generator().manual_seed(seed)
    starts = list(range(0, m - n + 1, n // 2))
    if starts[-1] != m - n:
        starts.append(m - n)
    result = None
    covered = 0
    for s in starts:
        window = SparseSignals(signals.values[s : s + n])
        est = _estimate_window(window, cloud, bundle, schedule, cfg, gen, noise_prior_sample, use_prior)
        if result is None:
            result, covered = est, n
        else:
            result = _blend_windows(result, est, overlap=covered - s)
            covered = s + n
    return result
