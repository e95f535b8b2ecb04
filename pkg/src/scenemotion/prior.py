"""Conditional VAE motion prior.

Trained on (motion, signals) windows from a generic corpus; at sampling time
only the decoder is used, drawing z ~ N(0, I) to produce the initial noisy
motion that jump-starts the reverse diffusion instead of pure Gaussian noise.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .kinematics import MOTION_DIM, MotionSequence, Skeleton, fk_positions
from .signals import SIGNAL_WIDTH, SparseSignals

LATENT_DIM = 256


class TimestepEmbedding(nn.Module):
    """Sinusoidal embedding followed by a small MLP (shared with the denoiser)."""

    def __init__(self, dim, out_dim):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.GELU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        w = next(self.mlp.parameters())
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=w.dtype, device=t.device) / (half - 1)
        )
        ang = t.to(w.dtype).unsqueeze(-1) * freqs
        return self.mlp(torch.cat([ang.sin(), ang.cos()], dim=-1))


def _encoder_stack(d_model, layers, heads, dropout=0.0):
    layer = nn.TransformerEncoderLayer(
        d_model, heads, dim_feedforward=4 * d_model, dropout=dropout,
        activation="gelu", batch_first=True, norm_first=True,
    )
    return nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)


class MotionPrior(nn.Module):
    def __init__(
        self,
        motion_dim: int = MOTION_DIM,
        signal_dim: int = SIGNAL_WIDTH,
        d_model: int = 256,
        layers: int = 9,
        heads: int = 4,
        latent_dim: int | None = None,
        window_frames: int = 120,
    ):
        super().__init__()
        self.latent_dim = latent_dim or d_model
        self.window_frames = window_frames
        self.motion_dim = motion_dim
        self.pos_emb = nn.Parameter(torch.randn(1, window_frames, d_model) * 0.02)

        self.enc_in = nn.Linear(motion_dim + signal_dim, d_model)
        self.encoder = _encoder_stack(d_model, layers, heads)
        self.enc_out = nn.Linear(d_model, 2 * self.latent_dim)

        self.dec_in = nn.Linear(signal_dim, d_model)
        self.z_proj = nn.Linear(self.latent_dim, d_model)
        self.decoder = _encoder_stack(d_model, layers, heads)
        self.dec_out = nn.Linear(d_model, motion_dim)

        # normalization stats travel with the checkpoint
        self.register_buffer("sig_mean", torch.zeros(signal_dim))
        self.register_buffer("sig_std", torch.ones(signal_dim))

    def set_signal_stats(self, stats):
        self.sig_mean.copy_(stats.mean.to(self.sig_mean.dtype))
        self.sig_std.copy_(stats.std.to(self.sig_std.dtype))

    def _norm(self, signals):
        return (signals - self.sig_mean) / self.sig_std

    def encode(self, motion: torch.Tensor, signals: torch.Tensor):
        """(B, N, 135) + raw (B, N, 54) -> posterior mu, logvar of shape (B, latent)."""
        tok = self.enc_in(torch.cat([motion, self._norm(signals)], dim=-1)) + self.pos_emb
        pooled = self.encoder(tok).mean(dim=1)
        mu, logvar = self.enc_out(pooled).chunk(2, dim=-1)
        return mu, logvar

    def decode(self, z: torch.Tensor, signals: torch.Tensor) -> torch.Tensor:
        """Latent (B, latent) + raw signals (B, N, 54) -> motion (B, N, 135)."""
        tok = self.dec_in(self._norm(signals)) + self.pos_emb
        zt = self.z_proj(z)
        tok = tok + zt.unsqueeze(1)
        tok = torch.cat([zt.unsqueeze(1), tok], dim=1)  # z also as a prefix token
        out = self.decoder(tok)[:, 1:]
        return self.dec_out(out)


def prior_encode(prior: MotionPrior, motion: MotionSequence, signals: SparseSignals):
    """Posterior (mu, logvar) for one window."""
    mu, logvar = prior.encode(motion.as_tensor().unsqueeze(0), signals.values.unsqueeze(0))
    return mu.squeeze(0), logvar.squeeze(0)


def sample_initial_motion(
    prior: MotionPrior, signals: SparseSignals, generator: torch.Generator, fps: float = 30.0
) -> MotionSequence:
    """Draw z ~ N(0, I) and decode the initial noisy motion window."""
    dtype = prior.sig_mean.dtype
    z = torch.randn(1, prior.latent_dim, generator=generator, dtype=dtype)
    with torch.no_grad():
        x = prior.decode(z, signals.values.to(dtype).unsqueeze(0)).squeeze(0)
    return MotionSequence.from_tensor(x, fps=fps)


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over dimensions."""
    return 0.5 * (logvar.exp() + mu**2 - 1.0 - logvar).sum(dim=-1).mean()


def train_prior(
    motions: torch.Tensor,
    signal_windows: torch.Tensor,
    skeleton: Skeleton,
    *,
    stats=None,
    d_model: int = 256,
    layers: int = 9,
    heads: int = 4,
    window_frames: int = 120,
    lr: float = 1e-3,
    batch_size: int = 64,
    steps: int = 1000,
    kl_weight: float = 0.002,
    recon_weight: float = 1.0,
    geometric_weight: float = 0.5,
    seed: int = 0,
):
    """Train the VAE prior on (W, N, 135) motions and (W, N, 54) signals.

    Loss is kl_weight * KL + recon_weight * ||x_hat - x||^2 + geometric_weight
    * mean FK distance. Returns the module and per-term loss curves.
    """
    if motions.ndim != 3 or motions.shape[0] == 0:
        raise ValueError("corpus must be a nonempty (W, N, 135) tensor")
    if motions.shape[0] != signal_windows.shape[0]:
        raise ValueError("motion and signal window counts differ")
    torch.manual_seed(seed)
    prior = MotionPrior(
        motion_dim=motions.shape[-1], d_model=d_model, layers=layers, heads=heads,
        window_frames=window_frames,
    ).to(motions.dtype)
    if stats is not None:
        prior.set_signal_stats(stats)
    opt = torch.optim.AdamW(prior.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = {"total": [], "recon": [], "kl": [], "geometric": []}
    joints = (motions.shape[-1] - 3) // 6
    for _ in range(steps):
        idx = torch.randint(0, motions.shape[0], (min(batch_size, motions.shape[0]),), generator=gen)
        x, p = motions[idx], signal_windows[idx]
        mu, logvar = prior.encode(x, p)
        eps = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
        z = mu + (0.5 * logvar).exp() * eps
        x_hat = prior.decode(z, p)

        recon = ((x_hat - x) ** 2).sum(dim=(1, 2)).mean()
        kl = kl_divergence(mu, logvar)
        pos_hat = fk_positions(skeleton, x_hat[..., 3:].reshape(*x_hat.shape[:2], joints, 6), x_hat[..., :3])
        pos_gt = fk_positions(skeleton, x[..., 3:].reshape(*x.shape[:2], joints, 6), x[..., :3])
        geo = torch.linalg.norm(pos_hat - pos_gt, dim=-1).mean()
        loss = kl_weight * kl + recon_weight * recon + geometric_weight * geo

        opt.zero_grad()
        loss.backward()
        opt.step()
        history["total"].append(loss.item())
        history["recon"].append(recon.item())
        history["kl"].append(kl.item())
        history["geometric"].append(geo.item())
    return prior, history
