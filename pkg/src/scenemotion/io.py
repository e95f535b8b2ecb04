"""File formats and checkpoints.

Motion and scene files are a short ASCII manifest followed by a little-endian
float32 binary payload; sizes declared in the header are enforced so
truncation, header damage and version drift each fail with their own error.
Checkpoints are torch archives carrying a format version and the hash of the
config they were trained under; loading under a different config is refused.
All writes go through a temp file + rename so readers never see partial files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_to_text
from .kinematics import MotionSequence, Skeleton
from .scene import ScenePointCloud

MOTION_MAGIC = "MOTION"
SCENE_MAGIC = "SCENE"
FORMAT_VERSION = 1
CHECKPOINT_VERSION = 1


class DataFileError(Exception):
    """Base for motion/scene file problems."""


class HeaderError(DataFileError):
    """Malformed or inconsistent manifest."""


class VersionError(DataFileError):
    """File written by an unsupported format version."""


class TruncationError(DataFileError):
    """Payload shorter than the manifest declares."""


class CheckpointError(Exception):
    """Checkpoint refused: wrong kind, version, or config hash."""


def _atomic_write(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_header(blob: bytes, magic: str, path):
    """Split the ASCII manifest (terminated by a 'data' line) from the payload."""
    end = blob.find(b"\ndata\n")
    if end < 0:
        raise HeaderError(f"{path}: missing 'data' marker")
    head_lines = blob[:end].decode("ascii", errors="replace").splitlines()
    payload = blob[end + len(b"\ndata\n"):]
    if not head_lines:
        raise HeaderError(f"{path}: empty header")
    tag = head_lines[0].split()
    if len(tag) != 2 or tag[0] != magic:
        raise HeaderError(f"{path}: expected '{magic} v<version>' first line")
    if tag[1] != f"v{FORMAT_VERSION}":
        raise VersionError(f"{path}: unsupported version {tag[1]}")
    kv = {}
    for line in head_lines[1:]:
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        kv[key] = rest.strip()
    return kv, payload


def save_motion(path, motion: MotionSequence, skeleton: Skeleton):
    n, j = motion.num_frames, motion.joint_count
    header = [
        f"{MOTION_MAGIC} v{FORMAT_VERSION}",
        f"fps {motion.fps!r}",
        f"joints {j}",
        f"frames {n}",
        "parents " + " ".join(str(p) for p in skeleton.parent_index),
        "offsets " + " ".join(repr(float(v)) for v in skeleton.offsets.flatten().tolist()),
        "data",
        "",
    ]
    root = motion.root_translation.detach().cpu().numpy().astype("<f4")
    rots = motion.local_rotations.detach().cpu().numpy().astype("<f4")
    _atomic_write(path, "\n".join(header).encode("ascii") + root.tobytes() + rots.tobytes())


def load_motion(path):
    """Returns (MotionSequence float32, Skeleton)."""
    blob = Path(path).read_bytes()
    kv, payload = _parse_header(blob, MOTION_MAGIC, path)
    try:
        fps = float(kv["fps"])
        joints = int(kv["joints"])
        frames = int(kv["frames"])
        parents = tuple(int(p) for p in kv["parents"].split())
        offsets = np.array([float(v) for v in kv["offsets"].split()], dtype=np.float64)
    except (KeyError, ValueError) as exc:
        raise HeaderError(f"{path}: bad manifest field ({exc})") from exc
    if len(parents) != joints or offsets.size != joints * 3:
        raise HeaderError(f"{path}: parents/offsets do not match joint count")
    need = frames * 3 * 4 + frames * joints * 6 * 4
    if len(payload) < need:
        raise TruncationError(f"{path}: payload {len(payload)} bytes, need {need}")
    root = np.frombuffer(payload[: frames * 12], dtype="<f4").reshape(frames, 3)
    rots = np.frombuffer(payload[frames * 12 : need], dtype="<f4").reshape(frames, joints, 6)
    skeleton = Skeleton(parents, torch.tensor(offsets.reshape(joints, 3), dtype=torch.float32))
    motion = MotionSequence(
        torch.tensor(root.copy()), torch.tensor(rots.copy()), fps=fps
    )
    return motion, skeleton


def save_scene(path, cloud: ScenePointCloud, floor_z: float = 0.0):
    header = [
        f"{SCENE_MAGIC} v{FORMAT_VERSION}",
        f"points {cloud.num_points}",
        f"floor_z {floor_z!r}",
        "data",
        "",
    ]
    pts = cloud.points.detach().cpu().numpy().astype("<f4")
    _atomic_write(path, "\n".join(header).encode("ascii") + pts.tobytes())


def load_scene(path):
    """Returns (ScenePointCloud float32, floor_z)."""
    blob = Path(path).read_bytes()
    kv, payload = _parse_header(blob, SCENE_MAGIC, path)
    try:
        count = int(kv["points"])
        floor_z = float(kv["floor_z"])
    except (KeyError, ValueError) as exc:
        raise HeaderError(f"{path}: bad manifest field ({exc})") from exc
    if count < 1:
        raise HeaderError(f"{path}: point count must be >= 1")
    need = count * 12
    if len(payload) < need:
        raise TruncationError(f"{path}: payload {len(payload)} bytes, need {need}")
    pts = np.frombuffer(payload[:need], dtype="<f4").reshape(count, 3)
    return ScenePointCloud(torch.tensor(pts.copy())), floor_z


def config_hash(cfg: RunConfig) -> str:
    """Hash of the config minus the seed (checkpoints are reused across run seeds)."""
    lines = [l for l in config_to_text(cfg).splitlines() if not l.startswith("seed ")]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def save_checkpoint(path, kind: str, cfg: RunConfig, state: dict):
    """state: picklable payload (state dicts, arch kwargs, stats tensors)."""
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config_hash": config_hash(cfg),
        "config_text": config_to_text(cfg),
        "state": state,
    }
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, kind: str, cfg: RunConfig | None = None) -> dict:
    """Load and verify a checkpoint; cfg (when given) must hash-match."""
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "checkpoint_version" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if payload["checkpoint_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version")
    if payload["kind"] != kind:
        raise CheckpointError(f"{path}: kind {payload['kind']!r}, expected {kind!r}")
    if cfg is not None and payload["config_hash"] != config_hash(cfg):
        raise CheckpointError(f"{path}: config hash mismatch (trained under a different config)")
    return payload["state"]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_record(out_dir, cfg: RunConfig, seed: int, checkpoints: dict, extra: dict | None = None):
    """Reproducibility record: config, seed, and the hash of every checkpoint used."""
    record = {
        "config": config_to_text(cfg),
        "seed": seed,
        "checkpoints": {name: file_sha256(p) for name, p in checkpoints.items() if p},
    }
    if extra:
        record.update(extra)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / "run_record.json", json.dumps(record, indent=2).encode())
