"""Scene point-cloud handling and the fixed-width scene condition vector.

The scene enters the pipeline as a raw point cloud. Around the subject we keep
a 2m cube crop, query exact k-nearest neighbors for the penetration potential,
and encode the crop into a 256-dim feature with a permutation-invariant set
encoder (shared per-point MLP -> max-pool -> MLP).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

SCENE_FEATURE_DIM = 256
CROP_SIZE_M = 2.0
MAX_CROP_POINTS = 65536
# Sentinel for an empty crop: below the subject, outside any contact radius.
EMPTY_CROP_OFFSET = (0.0, 0.0, -1.1)


@dataclass
class ScenePointCloud:
    """World-frame scene points (P, 3), immutable after construction."""

    points: torch.Tensor
    empty_crop: bool = False  # set when a crop found nothing and fell back to the sentinel
    _tree: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[-1] != 3:
            raise ValueError(f"points must be (P, 3), got {tuple(self.points.shape)}")
        if self.points.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not torch.isfinite(self.points).all():
            raise ValueError("points must be finite")

    @property
    def num_points(self) -> int:
        return self.points.shape[0]

    def kdtree(self) -> cKDTree:
        if self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.points.detach().cpu().numpy()))
        return self._tree


@dataclass
class SceneFeature:
    """Encoded scene condition vector, width 256."""

    vector: torch.Tensor

    def __post_init__(self):
        if self.vector.shape != (SCENE_FEATURE_DIM,):
            raise ValueError(f"scene feature must be ({SCENE_FEATURE_DIM},)")
        if not torch.isfinite(self.vector).all():
            raise ValueError("scene feature must be finite")


def crop_bounding_box(
    cloud: ScenePointCloud, center, size_m: float = CROP_SIZE_M
) -> ScenePointCloud:
    """Keep points within the axis-aligned cube of the given size around center.

    An empty crop returns a single sentinel point 1.1m below the center (outside
    any interaction radius) with the empty_crop flag set.
    """
    center = torch.as_tensor(center, dtype=cloud.points.dtype)
    if not torch.isfinite(center).all():
        raise ValueError("crop center must be finite")
    half = size_m / 2.0
    mask = ((cloud.points - center).abs() <= half).all(dim=-1)
    kept = cloud.points[mask]
    if kept.shape[0] == 0:
        sentinel = center + torch.tensor(EMPTY_CROP_OFFSET, dtype=center.dtype)
        return ScenePointCloud(sentinel.unsqueeze(0), empty_crop=True)
    if kept.shape[0] > MAX_CROP_POINTS:
        idx = torch.linspace(0, kept.shape[0] - 1, MAX_CROP_POINTS).round().long()
        kept = kept[idx]
    return ScenePointCloud(kept)


def knn_query(cloud: ScenePointCloud, query, k: int):
    """The k nearest cloud points to the query, sorted by distance.

    Exact, with ties broken by lower point index. Returns fewer than k points
    only when the cloud holds fewer than k.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(torch.as_tensor(query).detach().cpu(), dtype=np.float64).reshape(3)
    pts = cloud.points.detach().cpu().numpy()
    k_eff = min(k, cloud.num_points)
    dist, _ = cloud.kdtree().query(q, k=k_eff)
    dmax = float(np.max(dist))
    # Re-rank every candidate at distance <= d_k so exact ties resolve by index.
    cand = cloud.kdtree().query_ball_point(q, dmax * (1 + 1e-12) + 1e-300)
    cand = sorted(cand, key=lambda i: (np.linalg.norm(pts[i] - q), i))[:k_eff]
    return cloud.points[list(cand)]


class ScenePointEncoder(nn.Module):
    """Permutation-invariant set encoder: shared point MLP -> max-pool -> MLP."""

    def __init__(self, hidden: int = 128, out_dim: int = SCENE_FEATURE_DIM):
        super().__init__()
        self.point_mlp = nn.Sequential(
            nn.Linear(3, hidden // 2),
            nn.ReLU(),
            nn.Linear(hidden // 2, hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )
        self.global_mlp = nn.Sequential(
            nn.Linear(out_dim, out_dim),
            nn.ReLU(),
            nn.Linear(out_dim, out_dim),
        )
        self.out_dim = out_dim

    def forward(self, points: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """points: (P, 3) or (B, P, 3); mask: optional (B, P) bool of valid points."""
        squeeze = points.ndim == 2
        if squeeze:
            points = points.unsqueeze(0)
        feat = self.point_mlp(points)  # (B, P, D)
        if mask is not None:
            feat = feat.masked_fill(~mask.unsqueeze(-1), float("-inf"))
        pooled = feat.amax(dim=1)
        out = self.global_mlp(pooled)
        return out.squeeze(0) if squeeze else out


def encode_scene(encoder: ScenePointEncoder, cloud: ScenePointCloud) -> SceneFeature:
    """Encode a (cropped) cloud into the 256-dim condition vector."""
    with torch.no_grad():
        pts = cloud.points.to(next(encoder.parameters()).dtype)
        return SceneFeature(encoder(pts))
