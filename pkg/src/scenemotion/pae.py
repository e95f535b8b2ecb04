"""Periodic autoencoder over sparse tracking signals.

Signals are projected to a few latent curves by a 1D conv encoder; each curve
is parameterized in the frequency domain as a single sinusoid (amplitude,
frequency, offset from the real DFT; phase shift from a small per-channel FC
head). The sinusoidal reconstruction is the temporal alignment feature fed to
the denoiser, and a deconv decoder maps it back to signal space for training.
Every step is differentiable, so phase features can guide sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .signals import SIGNAL_WIDTH

PHASE_CHANNELS = 6


@dataclass
class PeriodicParams:
    """Per-window sinusoid parameters, one set per latent channel."""

    amplitude: torch.Tensor  # (h,) >= 0
    frequency: torch.Tensor  # (h,) cycles/second, >= 0
    offset: torch.Tensor  # (h,)
    phase_shift: torch.Tensor  # (h,) cycles in [-0.5, 0.5)

    def __post_init__(self):
        h = self.amplitude.shape[0]
        for name in ("frequency", "offset", "phase_shift"):
            if getattr(self, name).shape != (h,):
                raise ValueError("parameter vectors must share one length")
        if (self.amplitude < 0).any() or (self.frequency < 0).any():
            raise ValueError("amplitude and frequency must be nonnegative")
        s = self.phase_shift
        if ((s < -0.5) | (s >= 0.5)).any():
            raise ValueError("phase shift must lie in [-0.5, 0.5)")

    @property
    def channels(self) -> int:
        return self.amplitude.shape[0]


@dataclass
class PeriodicFeatureCurve:
    """Sinusoidal alignment feature f, (N, h)."""

    values: torch.Tensor


@dataclass
class PhaseFeature:
    """[sin 2piS, cos 2piS, A] stacked per channel, width 3h."""

    vector: torch.Tensor


class _TimeNorm(nn.Module):
    """Layer norm over the time axis of (B, C, N) feature maps."""

    def __init__(self, length, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.alpha = nn.Parameter(torch.ones(1, 1, length))
        self.beta = nn.Parameter(torch.zeros(1, 1, length))

    def forward(self, x):
        mean = x.mean(dim=-1, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
        return (x - mean) / (var + self.eps).sqrt() * self.alpha + self.beta


class PeriodicAutoencoder(nn.Module):
    def __init__(
        self,
        in_channels: int = SIGNAL_WIDTH,
        channels: int = PHASE_CHANNELS,
        window_frames: int = 120,
        kernel: int = 25,
        fps: float = 30.0,
        linear_harness: bool = False,
    ):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel must be odd for same-length padding")
        inter = in_channels // 2
        pad = (kernel - 1) // 2
        self.channels = channels
        self.window_frames = window_frames
        self.fps = fps

        def block(cin, cout):
            layers = [nn.Conv1d(cin, cout, kernel, padding=pad)]
            if not linear_harness:
                layers += [_TimeNorm(window_frames), nn.ELU()]
            return layers

        self.enc = nn.Sequential(*block(in_channels, inter), nn.Conv1d(inter, channels, kernel, padding=pad))
        self.phase_fc = nn.ModuleList(nn.Linear(window_frames, 2) for _ in range(channels))
        self.dec = nn.Sequential(
            nn.ConvTranspose1d(channels, inter, kernel, padding=pad),
            *([] if linear_harness else [_TimeNorm(window_frames), nn.ELU()]),
            nn.ConvTranspose1d(inter, in_channels, kernel, padding=pad),
        )

    def encode(self, signals: torch.Tensor) -> torch.Tensor:
        """(B, N, 54) or (N, 54) -> latent curves of the same leading shape, h wide."""
        squeeze = signals.ndim == 2
        if squeeze:
            signals = signals.unsqueeze(0)
        out = self.enc(signals.transpose(1, 2)).transpose(1, 2)
        return out.squeeze(0) if squeeze else out

    def phase_components(self, latents: torch.Tensor) -> torch.Tensor:
        """Per-channel (s_x, s_y) from the FC head; latents (B, N, h) -> (B, h, 2)."""
        squeeze = latents.ndim == 2
        if squeeze:
            latents = latents.unsqueeze(0)
        if latents.shape[1] != self.window_frames:
            raise ValueError(f"phase head expects {self.window_frames} frames")
        comps = torch.stack(
            [self.phase_fc[i](latents[:, :, i]) for i in range(self.channels)], dim=1
        )
        return comps.squeeze(0) if squeeze else comps

    def decode(self, curve: torch.Tensor) -> torch.Tensor:
        """(B, N, h) or (N, h) sinusoidal curves -> reconstructed signals, 54 wide."""
        squeeze = curve.ndim == 2
        if squeeze:
            curve = curve.unsqueeze(0)
        if curve.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} latent channels")
        out = self.dec(curve.transpose(1, 2)).transpose(1, 2)
        return out.squeeze(0) if squeeze else out

    def forward(self, signals: torch.Tensor):
        """Full training path: signals -> latents -> sinusoid params -> f -> signals."""
        squeeze = signals.ndim == 2
        if squeeze:
            signals = signals.unsqueeze(0)
        latents = self.encode(signals)
        amp, freq, off = batch_frequency_params(latents, self.fps)
        shift, _ = phase_shift_from_components(self.phase_components(latents))
        curve = batch_periodic_curve(amp, freq, off, shift, signals.shape[1], self.fps)
        recon = self.decode(curve)
        if squeeze:
            return recon.squeeze(0), latents.squeeze(0), curve.squeeze(0)
        return recon, latents, curve


def batch_frequency_params(latents: torch.Tensor, fps: float):
    """(A, F, B) per channel from the real DFT; latents (..., N, h), differentiable.

    B is the DC bin / N; F the power-weighted mean of the non-DC bin
    frequencies j*fps/N (zero when the spectrum is empty); A = (2/N) sqrt of
    the total non-DC power.
    """
    n = latents.shape[-2]
    if n < 4:
        raise ValueError("need at least 4 frames for frequency extraction")
    spec = torch.fft.rfft(latents, dim=-2)
    offset = spec[..., 0, :].real / n
    power = spec[..., 1:, :].abs() ** 2  # (..., N//2, h)
    freqs = torch.arange(1, power.shape[-2] + 1, dtype=latents.dtype, device=latents.device)
    freqs = freqs * fps / n
    total = power.sum(dim=-2)
    weighted = (power * freqs.unsqueeze(-1)).sum(dim=-2)
    frequency = torch.where(total > 0, weighted / total.clamp_min(1e-300), torch.zeros_like(total))
    amplitude = 2.0 / n * total.sqrt()
    return amplitude, frequency, offset


def extract_frequency_params(latents: torch.Tensor, fps: float):
    """Single-window (N, h) convenience wrapper around batch_frequency_params."""
    if latents.ndim != 2:
        raise ValueError("expected (N, h) latents")
    return batch_frequency_params(latents, fps)


def phase_shift_from_components(components: torch.Tensor):
    """Map (..., 2) FC outputs (s_x, s_y) to phase shifts in [-0.5, 0.5) cycles.

    Returns (shift, degenerate) where degenerate marks (0, 0) inputs, for
    which the shift is defined as 0.
    """
    s_x, s_y = components[..., 0], components[..., 1]
    degenerate = (s_x == 0) & (s_y == 0)
    shift = torch.atan2(s_y, s_x) / (2 * math.pi)
    shift = torch.where(shift >= 0.5, shift - 1.0, shift)
    return torch.where(degenerate, torch.zeros_like(shift), shift), degenerate


def extract_phase_shift(pae: PeriodicAutoencoder, latents: torch.Tensor):
    """Phase shifts (h,) for one window of latents, plus the degeneracy flags."""
    return phase_shift_from_components(pae.phase_components(latents))


def batch_periodic_curve(amp, freq, off, shift, num_frames: int, fps: float) -> torch.Tensor:
    """Evaluate A*sin(2pi*(F*t - S)) + B at frame times t/fps; params (..., h)."""
    t = torch.arange(num_frames, dtype=amp.dtype, device=amp.device) / fps
    phase = 2 * math.pi * (freq.unsqueeze(-2) * t.unsqueeze(-1) - shift.unsqueeze(-2))
    return amp.unsqueeze(-2) * torch.sin(phase) + off.unsqueeze(-2)


def reconstruct_periodic_feature(p: PeriodicParams, num_frames: int, fps: float) -> PeriodicFeatureCurve:
    return PeriodicFeatureCurve(
        batch_periodic_curve(p.amplitude, p.frequency, p.offset, p.phase_shift, num_frames, fps)
    )


def phase_feature_vector(p: PeriodicParams) -> PhaseFeature:
    return PhaseFeature(phase_feature_from_tensors(p.amplitude, p.phase_shift))


def phase_feature_from_tensors(amplitude: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    two_pi_s = 2 * math.pi * shift
    return torch.cat([torch.sin(two_pi_s), torch.cos(two_pi_s), amplitude], dim=-1)


def window_periodic_params(pae: PeriodicAutoencoder, signals: torch.Tensor) -> PeriodicParams:
    """Run the trained encoder on one window (N, 54) and collect its params."""
    latents = pae.encode(signals)
    amp, freq, off = extract_frequency_params(latents, pae.fps)
    shift, _ = extract_phase_shift(pae, latents)
    return PeriodicParams(amp.clamp_min(0), freq, off, shift)


def train_pae(
    windows: torch.Tensor,
    *,
    window_frames: int = 120,
    channels: int = PHASE_CHANNELS,
    kernel: int = 25,
    lr: float = 1e-3,
    batch_size: int = 64,
    steps: int = 500,
    seed: int = 0,
):
    """Train on (W, N, 54) signal windows with the plain reconstruction loss.

    Returns the trained module and the per-step loss history.
    """
    if windows.ndim != 3 or windows.shape[0] == 0:
        raise ValueError("corpus must be a nonempty (W, N, 54) tensor")
    torch.manual_seed(seed)
    pae = PeriodicAutoencoder(
        in_channels=windows.shape[-1], channels=channels, window_frames=window_frames, kernel=kernel
    ).to(windows.dtype)
    opt = torch.optim.Adam(pae.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    history = []
    for _ in range(steps):
        idx = torch.randint(0, windows.shape[0], (min(batch_size, windows.shape[0]),), generator=gen)
        batch = windows[idx]
        recon, _, _ = pae(batch)
        loss = torch.linalg.norm((recon - batch).flatten(1), dim=1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return pae, history
