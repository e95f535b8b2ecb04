"""Run configuration: every hyperparameter with its default, plus the flat
key = value config file format (units spelled out in key names)."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    # window / feature sizes
    window_frames: int = 120
    phase_channels: int = 6
    d_model: int = 256
    prior_layers: int = 9
    denoiser_layers: int = 8
    attention_heads: int = 4
    pae_kernel: int = 25
    # training
    batch_size: int = 64
    learning_rate: float = 0.001
    pae_train_steps: int = 2000
    prior_train_steps: int = 2000
    denoiser_train_steps: int = 2000
    kl_weight: float = 0.002
    recon_weight: float = 1.0
    geometric_weight: float = 0.5
    # diffusion
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    noise_prior_sample: bool = False
    # guidance
    penetration_weight: float = 0.1
    phase_weight: float = 0.01
    guidance_step_size: float = 1.0
    contact_radius_m: float = 0.02
    knn_neighbors: int = 4
    # scene
    crop_size_m: float = 2.0
    # signals
    canonicalize_signals: bool = False
    share_anchor_pae: bool = False
    # evaluation
    contact_height_m: float = 0.05
    contact_speed_mps: float = 0.3
    # misc
    fps: float = 30.0
    seed: int = 0

    def __post_init__(self):
        positive = (
            "window_frames", "phase_channels", "d_model", "prior_layers", "denoiser_layers",
            "attention_heads", "pae_kernel", "batch_size", "learning_rate", "pae_train_steps",
            "prior_train_steps", "denoiser_train_steps", "recon_weight", "diffusion_steps",
            "contact_radius_m", "knn_neighbors", "crop_size_m", "contact_height_m",
            "contact_speed_mps", "fps",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        nonnegative = (
            "kl_weight", "geometric_weight", "penetration_weight", "phase_weight",
            "guidance_step_size", "seed",
        )
        for name in nonnegative:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not (0 < self.beta_start <= self.beta_end < 1):
            raise ValueError("need 0 < beta_start <= beta_end < 1")
        if self.window_frames % 2 != 0:
            raise ValueError("window_frames must be even (stride N/2 stitching)")


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path):
    Path(path).write_text(config_to_text(cfg))


def _parse_value(kind, raw: str):
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a flat key = value file; '#' starts a comment. Unknown keys fail."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    # dataclass field types arrive as strings under future annotations
    named = {"int": int, "float": float, "bool": bool}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        kind = named.get(kinds[key], kinds[key]) if isinstance(kinds[key], str) else kinds[key]
        values[key] = _parse_value(kind, raw)
    if overrides:
        values.update(overrides)
    return RunConfig(**values)
