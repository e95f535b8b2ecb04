"""Synthetic desk-scale corpus: procedural scenes and walking motions.

Scenes are a flat floor plus axis-aligned box obstacles sampled as surface
point clouds. Walkers follow smooth waypoint paths with a sinusoidal gait;
legs and arms swing in antiphase, and the knee lift grows with the scene's
clutter density (people step higher in cluttered rooms), which is what makes
the scene condition informative for the lower body. Obstacles keep a safety
margin from every contact joint trajectory, so ground-truth motions carry
exactly zero penetration loss by construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .kinematics import L_ANKLE, L_KNEE, R_ANKLE, R_KNEE, MotionSequence, Skeleton, default_skeleton, fk_positions
from .io import save_motion, save_scene
from .scene import ScenePointCloud

CONTACT_TRAJECTORY_JOINTS = (L_ANKLE, R_ANKLE, L_KNEE, R_KNEE)
FURNITURE_CLEARANCE_M = 0.12
CLUTTER_CLEARANCE_M = 0.05  # 2.5x the 0.02 contact radius


@dataclass
class CorpusSpec:
    num_scenes: int = 25
    sequences_per_scene: int = 16
    frames_per_sequence: int = 360
    obstacles_per_meter: float = 0.9  # at density 1.0
    floor_grid_m: float = 0.10
    obstacle_points: int = 180

    def __post_init__(self):
        if self.num_scenes < 1 or self.sequences_per_scene < 1:
            raise ValueError("need at least one scene and one sequence per scene")
        if self.frames_per_sequence < 2:
            raise ValueError("sequences need at least 2 frames")
        if self.floor_grid_m <= 0 or self.obstacle_points < 1 or self.obstacles_per_meter < 0:
            raise ValueError("invalid scene parameters")


def _yaw(theta):
    c, s = np.cos(theta), np.sin(theta)
    m = np.zeros(theta.shape + (3, 3)) if np.ndim(theta) else np.zeros((3, 3))
    m[..., 0, 0] = c
    m[..., 0, 1] = -s
    m[..., 1, 0] = s
    m[..., 1, 1] = c
    m[..., 2, 2] = 1.0
    return m


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    m = np.zeros(np.shape(a) + (3, 3)) if np.ndim(a) else np.zeros((3, 3))
    m[..., 0, 0] = 1.0
    m[..., 1, 1] = c
    m[..., 1, 2] = -s
    m[..., 2, 1] = s
    m[..., 2, 2] = c
    return m


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    m = np.zeros(np.shape(a) + (3, 3)) if np.ndim(a) else np.zeros((3, 3))
    m[..., 0, 0] = c
    m[..., 0, 2] = s
    m[..., 1, 1] = 1.0
    m[..., 2, 0] = -s
    m[..., 2, 2] = c
    return m


def _to_rot6d(mats):
    return mats[..., :, :2].swapaxes(-1, -2).reshape(*mats.shape[:-2], 6)


def knee_lift_for_density(density: float) -> float:
    """Knee flexion amplitude in radians; the scene-dependent gait trait."""
    return 0.25 + 0.55 * float(np.clip(density, 0.0, 1.0))


def walker_sequence(rng: np.random.Generator, frames: int, fps: float, density: float) -> MotionSequence:
    """One procedural walking clip; deterministic given the generator state."""
    t = np.arange(frames) / fps
    speed = rng.uniform(0.9, 1.3)
    gait_hz = rng.uniform(0.85, 1.1)
    phi0 = rng.uniform(0, 2 * math.pi)
    phi = 2 * math.pi * gait_hz * t + phi0

    # smooth heading: constant start + a couple of slow sinusoidal turn modes
    theta0 = rng.uniform(0, 2 * math.pi)
    turn = sum(
        rng.uniform(-0.5, 0.5) * np.sin(2 * math.pi * rng.uniform(0.03, 0.1) * t + rng.uniform(0, 2 * math.pi))
        for _ in range(2)
    )
    theta = theta0 + turn
    xy = np.cumsum(np.stack([np.cos(theta), np.sin(theta)], axis=-1) * speed / fps, axis=0)
    xy -= xy[0] - rng.uniform(-1, 1, size=2)

    root_z = rng.uniform(0.93, 0.96) + 0.015 * np.sin(2 * phi)
    root = np.concatenate([xy, root_z[:, None]], axis=-1)

    swing = rng.uniform(0.5, 0.65)
    lift = knee_lift_for_density(density)
    arm = rng.uniform(0.25, 0.4)
    hang = math.radians(82.0)

    rots = np.zeros((frames, 22, 3, 3))
    rots[...] = np.eye(3)
    rots[:, 0] = _yaw(theta) @ _rot_x(0.03 * np.sin(phi))
    rots[:, 1] = _rot_y(swing * np.sin(phi))  # left hip
    rots[:, 2] = _rot_y(swing * np.sin(phi + math.pi))  # right hip
    knee_l = lift * 0.5 * (1 + np.sin(phi + 0.7 * math.pi))
    knee_r = lift * 0.5 * (1 + np.sin(phi + 1.7 * math.pi))
    rots[:, 4] = _rot_y(knee_l)
    rots[:, 5] = _rot_y(knee_r)
    rots[:, 7] = _rot_y(-0.4 * knee_l)  # ankles level the feet a little
    rots[:, 8] = _rot_y(-0.4 * knee_r)
    # arms hang down and swing against the same-side leg
    rots[:, 16] = _rot_y(arm * np.sin(phi + math.pi)) @ _rot_x(-hang)
    rots[:, 17] = _rot_y(arm * np.sin(phi)) @ _rot_x(hang)

    return MotionSequence(
        torch.tensor(root, dtype=torch.float32),
        torch.tensor(_to_rot6d(rots), dtype=torch.float32),
        fps=fps,
    )


def _box_surface_points(rng, center_xy, size_xyz, count):
    """Points on the five visible faces of a floor-standing box."""
    sx, sy, sz = size_xyz
    cx, cy = center_xy
    pts = []
    areas = np.array([sx * sy, sx * sz, sx * sz, sy * sz, sy * sz], dtype=np.float64)
    counts = np.maximum(1, (areas / areas.sum() * count).astype(int))
    # top
    u = rng.uniform(-0.5, 0.5, size=(counts[0], 2))
    pts.append(np.stack([cx + u[:, 0] * sx, cy + u[:, 1] * sy, np.full(counts[0], sz)], axis=-1))
    for sign, c in ((1, counts[1]), (-1, counts[2])):  # +/- y faces
        u = rng.uniform(-0.5, 0.5, size=(c, 2))
        pts.append(np.stack([cx + u[:, 0] * sx, np.full(c, cy + sign * sy / 2), (u[:, 1] + 0.5) * sz], axis=-1))
    for sign, c in ((1, counts[3]), (-1, counts[4])):  # +/- x faces
        u = rng.uniform(-0.5, 0.5, size=(c, 2))
        pts.append(np.stack([np.full(c, cx + sign * sx / 2), cy + u[:, 0] * sy, (u[:, 1] + 0.5) * sz], axis=-1))
    return np.concatenate(pts, axis=0)


def build_scene(rng, motions, skeleton, density, spec: CorpusSpec):
    """Floor grid + obstacles scattered beside the paths, clear of contact joints."""
    from scipy.spatial import cKDTree

    contact = []
    path_pts = []
    for m in motions:
        pos = fk_positions(skeleton, m.local_rotations.double(), m.root_translation.double())
        contact.append(pos[:, list(CONTACT_TRAJECTORY_JOINTS)].reshape(-1, 3).numpy())
        path_pts.append(m.root_translation.numpy()[:, :2])
    contact_tree = cKDTree(np.concatenate(contact))
    path = np.concatenate(path_pts)

    lo = path.min(axis=0) - 1.6
    hi = path.max(axis=0) + 1.6
    gx = np.arange(lo[0], hi[0], spec.floor_grid_m)
    gy = np.arange(lo[1], hi[1], spec.floor_grid_m)
    floor = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1).reshape(-1, 2)
    floor = np.concatenate([floor, np.zeros((len(floor), 1))], axis=-1)

    total_len = sum(
        np.linalg.norm(np.diff(p, axis=0), axis=1).sum() for p in path_pts
    )
    boxes = []

    def scatter(target, offset_range, size_lo, size_hi, clearance):
        placed, attempts = 0, 0
        while placed < target and attempts < target * 20 + 20:
            attempts += 1
            anchor = path[rng.integers(0, len(path))]
            ang = rng.uniform(0, 2 * math.pi)
            offset = rng.uniform(*offset_range)
            center = anchor + offset * np.array([math.cos(ang), math.sin(ang)])
            size = rng.uniform(size_lo, size_hi)
            pts = _box_surface_points(rng, center, size, spec.obstacle_points)
            d, _ = contact_tree.query(pts, k=1)
            if d.min() >= clearance:
                boxes.append(pts)
                placed += 1

    per_meter = spec.obstacles_per_meter * density * total_len
    # furniture beside the walkway, and low clutter hugging the swing corridor
    # (the clutter is what makes people in dense scenes lift their feet)
    scatter(int(round(0.4 * per_meter)), (0.30, 0.85), [0.15, 0.15, 0.2], [0.45, 0.45, 0.6],
            FURNITURE_CLEARANCE_M)
    scatter(int(round(0.6 * per_meter)), (0.12, 0.45), [0.08, 0.08, 0.03], [0.22, 0.22, 0.10],
            CLUTTER_CLEARANCE_M)
    cloud = np.concatenate([floor] + boxes, axis=0) if boxes else floor
    return ScenePointCloud(torch.tensor(cloud, dtype=torch.float32))


def generate_synthetic_corpus(out_dir, spec: CorpusSpec, seed: int, fps: float = 30.0) -> dict:
    """Write scenes, motions and the 70:30 split manifest; fully seeded."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    skeleton = default_skeleton()
    root_rng = np.random.default_rng(seed)
    scene_seeds = root_rng.integers(0, 2**31 - 1, size=spec.num_scenes)
    manifest = {"version": 1, "seed": seed, "fps": fps, "scenes": []}
    all_motion_files = []
    for s in range(spec.num_scenes):
        rng = np.random.default_rng(scene_seeds[s])
        density = (s / max(spec.num_scenes - 1, 1)) * 0.9 + rng.uniform(0, 0.1)
        motions = [
            walker_sequence(rng, spec.frames_per_sequence, fps, density)
            for _ in range(spec.sequences_per_scene)
        ]
        cloud = build_scene(rng, motions, skeleton, density, spec)
        scene_file = f"scene_{s:03d}.scn"
        save_scene(out_dir / scene_file, cloud, floor_z=0.0)
        entries = []
        for i, m in enumerate(motions):
            name = f"seq_{s:03d}_{i:03d}.mot"
            save_motion(out_dir / name, m, skeleton)
            entries.append(name)
            all_motion_files.append(name)
        manifest["scenes"].append(
            {"scene_file": scene_file, "density": float(density), "sequences": entries}
        )
    order = root_rng.permutation(len(all_motion_files))
    cut = int(round(0.7 * len(all_motion_files)))
    manifest["split"] = {
        "train": sorted(all_motion_files[i] for i in order[:cut]),
        "test": sorted(all_motion_files[i] for i in order[cut:]),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
