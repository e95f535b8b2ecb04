"""DDPM machinery around an x0-predicting conditional denoiser.

The forward process follows the standard Gaussian corruption with a linear
beta ramp; the denoiser predicts the clean window directly, and one reverse
step re-noises the (guidance-corrected) prediction to the previous timestep's
marginal. Sampling jump-starts from the motion prior, so the default chain is
short (T = 50).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .kinematics import MOTION_DIM, MotionSequence, Skeleton, fk_positions
from .pae import PHASE_CHANNELS, PeriodicFeatureCurve
from .prior import TimestepEmbedding, _encoder_stack
from .scene import SCENE_FEATURE_DIM, SceneFeature, ScenePointEncoder
from .signals import SIGNAL_WIDTH, SparseSignals


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule beta_t and its running product alpha_bar.

    alpha_bar has T + 1 entries with alpha_bar[0] = 1, so index t matches the
    timestep directly.
    """

    beta: torch.Tensor  # (T,)
    alpha_bar: torch.Tensor  # (T + 1,)

    def __post_init__(self):
        if self.beta.ndim != 1 or self.alpha_bar.shape != (self.beta.shape[0] + 1,):
            raise ValueError("alpha_bar must have one more entry than beta")
        if ((self.beta <= 0) | (self.beta >= 1)).any():
            raise ValueError("beta must lie in (0, 1)")
        if self.alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must be 1")
        if (self.alpha_bar[1:] >= self.alpha_bar[:-1]).any() or (self.alpha_bar <= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing in (0, 1]")

    @property
    def num_steps(self) -> int:
        return self.beta.shape[0]


def make_schedule(num_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    """Linear beta ramp; alpha_bar[t] is the product of (1 - beta_i) up to t."""
    if num_steps < 1:
        raise ValueError("need at least one step")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - beta, dim=0)])
    return DiffusionSchedule(beta, alpha_bar)


def _split(x):
    if isinstance(x, MotionSequence):
        return x.as_tensor(), lambda t: MotionSequence.from_tensor(t, fps=x.fps)
    return x, lambda t: t


def q_sample(schedule: DiffusionSchedule, x0, t, noise):
    """Closed-form forward marginal sqrt(ab_t) x0 + sqrt(1 - ab_t) noise.

    t may be an int in [0, T] (0 returns x0 exactly) or a per-sample long
    tensor for batched training.
    """
    x, wrap = _split(x0)
    tt = torch.as_tensor(t)
    if (tt.min() < 0) or (tt.max() > schedule.num_steps):
        raise ValueError(f"t out of range [0, {schedule.num_steps}]")
    ab = schedule.alpha_bar.to(x.dtype)[tt]
    while ab.ndim < x.ndim:
        ab = ab.unsqueeze(-1)
    return wrap(ab.sqrt() * x + (1 - ab).sqrt() * noise)


def ddpm_step(schedule: DiffusionSchedule, x0_corrected, t: int, generator: torch.Generator):
    """One reverse step: re-noise the corrected prediction to level t - 1.

    At t = 1, alpha_bar[0] = 1, so the prediction is returned exactly and no
    noise is drawn (the RNG stream is untouched).
    """
    if not (1 <= t <= schedule.num_steps):
        raise ValueError(f"t out of range [1, {schedule.num_steps}]")
    x, wrap = _split(x0_corrected)
    if t == 1:
        return wrap(x.clone())
    ab = float(schedule.alpha_bar[t - 1])
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    return wrap(ab**0.5 * x + (1 - ab) ** 0.5 * eps)


@dataclass
class ConditionBundle:
    """Conditioning input c: raw signals, periodic feature curve, scene feature."""

    signals: SparseSignals
    periodic: PeriodicFeatureCurve
    scene: SceneFeature

    def __post_init__(self):
        if self.periodic.values.shape[0] != self.signals.num_frames:
            raise ValueError("periodic features and signals must cover the same frames")


class Denoiser(nn.Module):
    """x0-predicting transformer over motion windows with prefix condition tokens."""

    def __init__(
        self,
        motion_dim: int = MOTION_DIM,
        signal_dim: int = SIGNAL_WIDTH,
        pae_channels: int = PHASE_CHANNELS,
        scene_dim: int = SCENE_FEATURE_DIM,
        d_model: int = 256,
        layers: int = 8,
        heads: int = 4,
        window_frames: int = 120,
        use_scene: bool = True,
        use_pae: bool = True,
    ):
        super().__init__()
        self.use_scene = use_scene
        self.use_pae = use_pae
        self.motion_dim = motion_dim
        self.window_frames = window_frames
        in_dim = motion_dim + signal_dim + (pae_channels if use_pae else 0)
        self.in_proj = nn.Linear(in_dim, d_model)
        self.pos_emb = nn.Parameter(torch.randn(1, window_frames, d_model) * 0.02)
        self.time_emb = TimestepEmbedding(64, d_model)
        self.scene_proj = nn.Linear(scene_dim, d_model) if use_scene else None
        self.backbone = _encoder_stack(d_model, layers, heads)
        self.out_proj = nn.Linear(d_model, motion_dim)
        self.register_buffer("sig_mean", torch.zeros(signal_dim))
        self.register_buffer("sig_std", torch.ones(signal_dim))

    def set_signal_stats(self, stats):
        self.sig_mean.copy_(stats.mean.to(self.sig_mean.dtype))
        self.sig_std.copy_(stats.std.to(self.sig_std.dtype))

    def forward(self, x_t, t, signals, periodic=None, scene=None):
        """x_t (B, N, D), t (B,) or int, raw signals (B, N, 54) -> x0_hat (B, N, D)."""
        b = x_t.shape[0]
        tt = torch.as_tensor(t, device=x_t.device).reshape(-1).expand(b)
        feats = [x_t, (signals - self.sig_mean) / self.sig_std]
        if self.use_pae:
            if periodic is None:
                raise ValueError("denoiser was built with PAE conditioning; periodic is required")
            feats.append(periodic)
        tok = self.in_proj(torch.cat(feats, dim=-1)) + self.pos_emb
        prefix = [self.time_emb(tt).unsqueeze(1)]
        if self.use_scene:
            if scene is None:
                raise ValueError("denoiser was built with scene conditioning; scene is required")
            prefix.append(self.scene_proj(scene).unsqueeze(1))
        tok = torch.cat(prefix + [tok], dim=1)
        out = self.backbone(tok)[:, len(prefix):]
        return self.out_proj(out)


def denoise(denoiser: Denoiser, x_t: MotionSequence, t: int, cond: ConditionBundle) -> MotionSequence:
    """Predict the clean window for one noisy window at timestep t."""
    scene = cond.scene.vector.unsqueeze(0) if cond.scene is not None else None
    with torch.no_grad():
        out = denoiser(
            x_t.as_tensor().unsqueeze(0),
            torch.tensor([t]),
            cond.signals.values.unsqueeze(0),
            periodic=cond.periodic.values.unsqueeze(0),
            scene=scene,
        )
    return MotionSequence.from_tensor(out.squeeze(0), fps=x_t.fps)


def train_denoiser(
    motions: torch.Tensor,
    signal_windows: torch.Tensor,
    periodic_windows: torch.Tensor,
    crop_points: list,
    skeleton: Skeleton,
    schedule: DiffusionSchedule,
    *,
    stats=None,
    d_model: int = 256,
    layers: int = 8,
    heads: int = 4,
    window_frames: int = 120,
    use_scene: bool = True,
    use_pae: bool = True,
    lr: float = 1e-3,
    batch_size: int = 64,
    steps: int = 1000,
    seed: int = 0,
):
    """Train the denoiser (and the scene encoder, jointly) on paired windows.

    crop_points: per-window cropped cloud tensors (P_i, 3), already centered.
    Returns (denoiser, scene_encoder or None, loss history).
    """
    w = motions.shape[0]
    if w == 0:
        raise ValueError("corpus is empty")
    if not (w == signal_windows.shape[0] == periodic_windows.shape[0] == len(crop_points)):
        raise ValueError("corpus member counts differ")
    torch.manual_seed(seed)
    denoiser = Denoiser(
        motion_dim=motions.shape[-1], d_model=d_model, layers=layers, heads=heads,
        window_frames=window_frames, use_scene=use_scene, use_pae=use_pae,
    ).to(motions.dtype)
    if stats is not None:
        denoiser.set_signal_stats(stats)
    params = list(denoiser.parameters())
    scene_encoder = None
    padded = mask = None
    if use_scene:
        scene_encoder = ScenePointEncoder().to(motions.dtype)
        params += list(scene_encoder.parameters())
        max_p = max(p.shape[0] for p in crop_points)
        padded = torch.zeros(w, max_p, 3, dtype=motions.dtype)
        mask = torch.zeros(w, max_p, dtype=torch.bool)
        for i, p in enumerate(crop_points):
            padded[i, : p.shape[0]] = p
            mask[i, : p.shape[0]] = True

    opt = torch.optim.AdamW(params, lr=lr)
    gen = torch.Generator().manual_seed(seed)
    joints = (motions.shape[-1] - 3) // 6
    history = {"total": [], "simple": [], "geometric": []}
    for _ in range(steps):
        idx = torch.randint(0, w, (min(batch_size, w),), generator=gen)
        x0, p = motions[idx], signal_windows[idx]
        t = torch.randint(1, schedule.num_steps + 1, (x0.shape[0],), generator=gen)
        noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        x_t = q_sample(schedule, x0, t, noise)
        scene = scene_encoder(padded[idx], mask=mask[idx]) if use_scene else None
        pred = denoiser(x_t, t, p, periodic=periodic_windows[idx] if use_pae else None, scene=scene)

        simple = torch.linalg.norm((pred - x0).flatten(1), dim=1).mean()
        pos_hat = fk_positions(skeleton, pred[..., 3:].reshape(*pred.shape[:2], joints, 6), pred[..., :3])
        pos_gt = fk_positions(skeleton, x0[..., 3:].reshape(*x0.shape[:2], joints, 6), x0[..., :3])
        geo = torch.linalg.norm(pos_hat - pos_gt, dim=-1).mean()
        loss = simple + geo

        opt.zero_grad()
        loss.backward()
        opt.step()
        history["total"].append(loss.item())
        history["simple"].append(simple.item())
        history["geometric"].append(geo.item())
    return denoiser, scene_encoder, history
