"""Dataset loading and window preparation for training and evaluation.

Sequences on disk are sliced into fixed-length windows (stride N/2). Signals
are extracted per window, so the first-frame velocity replication matches what
inference sees. Each window carries the scene crop around its first-frame head
position, already centered, ready for the scene encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .io import DataFileError, load_motion, load_scene
from .kinematics import MotionSequence, Skeleton
from .pae import PeriodicAutoencoder, batch_frequency_params, batch_periodic_curve, phase_shift_from_components
from .scene import ScenePointCloud, crop_bounding_box
from .signals import (
    SignalStats,
    SparseSignals,
    apply_rigid_to_motion,
    extract_anchor_signals,
    extract_sparse_signals,
    normalize,
    yaw_canonical_transform,
)


@dataclass
class Dataset:
    root: Path
    manifest: dict
    skeleton: Skeleton

    @property
    def fps(self) -> float:
        return float(self.manifest["fps"])

    def scene_for(self, motion_file: str):
        for entry in self.manifest["scenes"]:
            if motion_file in entry["sequences"]:
                return entry["scene_file"]
        raise DataFileError(f"{motion_file} not listed in the manifest")

    def split(self, name: str):
        return list(self.manifest["split"][name])


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataFileError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    first = manifest["scenes"][0]["sequences"][0]
    _, skeleton = load_motion(root / first)
    return Dataset(root, manifest, skeleton)


@dataclass
class WindowSet:
    motions: torch.Tensor  # (W, N, 135)
    signals: torch.Tensor  # (W, N, 54)
    anchors: torch.Tensor  # (W, N, 54)
    crops: list  # per-window centered crop points (P_i, 3)
    source: list  # motion file per window
    start: list  # first frame index per window
    fps: float

    def __len__(self):
        return self.motions.shape[0]


def build_windows(
    ds: Dataset,
    files,
    window_frames: int,
    crop_size_m: float = 2.0,
    stride: int | None = None,
    canonicalize: bool = False,
) -> WindowSet:
    stride = stride or window_frames // 2
    motions, signals, anchors, crops, source, start = [], [], [], [], [], []
    scene_cache = {}
    for name in files:
        motion, _ = load_motion(ds.root / name)
        scene_file = ds.scene_for(name)
        if scene_file not in scene_cache:
            scene_cache[scene_file], _ = load_scene(ds.root / scene_file)
        cloud = scene_cache[scene_file]
        n = motion.num_frames
        if n < window_frames:
            continue
        starts = list(range(0, n - window_frames + 1, stride))
        for s in starts:
            window = MotionSequence(
                motion.root_translation[s : s + window_frames],
                motion.local_rotations[s : s + window_frames],
                fps=motion.fps,
            )
            sig = extract_sparse_signals(ds.skeleton, window)
            scene_pts = cloud
            if canonicalize:
                rot, offset = yaw_canonical_transform(sig)
                window = apply_rigid_to_motion(window, rot, offset)
                sig = extract_sparse_signals(ds.skeleton, window)
                scene_pts = ScenePointCloud((cloud.points + offset) @ rot.T)
            anc = extract_anchor_signals(ds.skeleton, window)
            center = sig.values[0, 6:9]
            crop = crop_bounding_box(scene_pts, center, size_m=crop_size_m)
            motions.append(window.as_tensor())
            signals.append(sig.values)
            anchors.append(anc.values)
            crops.append(crop.points - center)
            source.append(name)
            start.append(s)
    if not motions:
        raise DataFileError("no windows could be built (sequences shorter than a window?)")
    return WindowSet(
        torch.stack(motions), torch.stack(signals), torch.stack(anchors),
        crops, source, start, fps=ds.fps,
    )


def fit_stats(windows: WindowSet) -> SignalStats:
    return SignalStats.fit(windows.signals.reshape(-1, windows.signals.shape[-1]))


def periodic_feature_windows(
    pae: PeriodicAutoencoder, signal_windows: torch.Tensor, stats: SignalStats
) -> torch.Tensor:
    """(W, N, 54) raw signal windows -> (W, N, h) alignment feature curves."""
    with torch.no_grad():
        latents = pae.encode(normalize(signal_windows, stats))
        amp, freq, off = batch_frequency_params(latents, pae.fps)
        shift, _ = phase_shift_from_components(pae.phase_components(latents))
        return batch_periodic_curve(amp, freq, off, shift, signal_windows.shape[1], pae.fps)
