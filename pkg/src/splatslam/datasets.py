"""RGB-D frames, trajectories and the TUM-RGBD directory format."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, CameraPose

log = logging.getLogger(__name__)

TUM_DEPTH_SCALE = 5000.0
MAX_ASSOCIATION_DT = 0.02

# Freiburg-1 intrinsics from the TUM benchmark page (640x480).
TUM_FR1 = CameraIntrinsics(517.3, 516.5, 318.6, 255.3, 640, 480, TUM_DEPTH_SCALE)
TUM_FR2 = CameraIntrinsics(520.9, 521.0, 325.1, 249.7, 640, 480, TUM_DEPTH_SCALE)
TUM_FR3 = CameraIntrinsics(535.4, 539.2, 320.1, 247.6, 640, 480, TUM_DEPTH_SCALE)


class DatasetFormatError(Exception):
    pass


class DatasetEmptyError(Exception):
    pass


@dataclass
class FrameObservation:
    rgb: np.ndarray     # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W) meters, 0 = invalid
    timestamp: float
    index: int

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth resolutions differ")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")

    def downscaled(self, factor):
        """Block-average RGB; depth takes the mean of valid samples per block."""
        if factor == 1:
            return self
        H, W = self.depth.shape
        h, w = H // factor, W // factor
        rgb = self.rgb[: h * factor, : w * factor].reshape(h, factor, w, factor, 3).mean(axis=(1, 3))
        d = self.depth[: h * factor, : w * factor].reshape(h, factor, w, factor)
        valid = d > 0
        cnt = valid.sum(axis=(1, 3))
        depth = np.where(cnt > 0, d.sum(axis=(1, 3)) / np.maximum(cnt, 1), 0.0)
        return FrameObservation(rgb, depth, self.timestamp, self.index)


@dataclass
class Trajectory:
    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64)
        if len(ts) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def append(self, timestamp, pose):
        if self.timestamps and timestamp <= self.timestamps[-1]:
            raise ValueError("trajectory timestamps must be strictly increasing")
        self.timestamps.append(float(timestamp))
        self.poses.append(pose)

    def positions(self):
        return np.array([p.t for p in self.poses]).reshape(-1, 3)

    def length(self):
        p = self.positions()
        return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum()) if len(p) > 1 else 0.0

    def save_tum(self, path):
        """``timestamp tx ty tz qx qy qz qw`` per line."""
        with open(path, "w") as f:
            for ts, p in zip(self.timestamps, self.poses):
                w, x, y, z = p.q
                f.write(f"{ts:.6f} {p.t[0]:.9f} {p.t[1]:.9f} {p.t[2]:.9f} "
                        f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")

    @classmethod
    def load_tum(cls, path):
        rows = _read_index(path)
        traj = cls()
        for row in rows:
            vals = [float(v) for v in row[:8]]
            traj.append(vals[0], CameraPose(vals[1:4], [vals[7], vals[4], vals[5], vals[6]]))
        return traj


def _read_index(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append(line.replace(",", " ").split())
    return rows


def associate(first, second, max_dt=MAX_ASSOCIATION_DT):
    """Greedy one-to-one matching of two timestamp lists, closest pairs first.

    Returns a list of ``(i, j)`` index pairs sorted by ``i``.
    """
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return []
    diff = np.abs(a[:, None] - b[None, :])
    ii, jj = np.nonzero(diff < max_dt)
    order = np.lexsort((jj, ii, diff[ii, jj]))
    used_a, used_b, pairs = set(), set(), []
    for k in order:
        i, j = int(ii[k]), int(jj[k])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def read_depth_png(path, depth_scale=TUM_DEPTH_SCALE):
    raw = np.array(Image.open(path), dtype=np.float64)
    return raw / depth_scale


def read_rgb_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


@dataclass
class TumSequence:
    root: Path
    rgb_files: list
    depth_files: list
    timestamps: list
    groundtruth: Trajectory | None
    dropped: int
    depth_scale: float = TUM_DEPTH_SCALE

    def __len__(self):
        return len(self.rgb_files)

    def frame(self, i, downscale=1):
        f = FrameObservation(
            read_rgb_png(self.root / self.rgb_files[i]),
            read_depth_png(self.root / self.depth_files[i], self.depth_scale),
            self.timestamps[i], i,
        )
        return f.downscaled(downscale)

    def __iter__(self):
        for i in range(len(self)):
            yield self.frame(i)


def load_tum_rgbd(root, depth_scale=TUM_DEPTH_SCALE, max_dt=MAX_ASSOCIATION_DT):
    """Index a TUM-RGBD directory; images are read lazily.

    RGB, depth and (if present) ground truth are associated by nearest
    timestamp within ``max_dt`` seconds; unassociated RGB frames are dropped
    and counted in ``TumSequence.dropped``.
    """
    root = Path(root)
    for name in ("rgb.txt", "depth.txt"):
        if not (root / name).is_file():
            raise DatasetFormatError(f"{root}: missing {name}")
    rgb = _read_index(root / "rgb.txt")
    depth = _read_index(root / "depth.txt")
    rgb_ts = [float(r[0]) for r in rgb]
    depth_ts = [float(r[0]) for r in depth]
    pairs = associate(rgb_ts, depth_ts, max_dt)

    gt_traj = None
    gt_path = root / "groundtruth.txt"
    if gt_path.is_file():
        gt = Trajectory.load_tum(gt_path)
        gt_pairs = dict(associate([rgb_ts[i] for i, _ in pairs], gt.timestamps, max_dt))
        kept = [(k, pairs[k]) for k in range(len(pairs)) if k in gt_pairs]
        gt_traj = Trajectory()
        for k, (i, _) in kept:
            gt_traj.append(rgb_ts[i], gt.poses[gt_pairs[k]])
        pairs = [p for _, p in kept]
    else:
        log.warning("%s: no groundtruth.txt, trajectory evaluation disabled", root)

    if not pairs:
        raise DatasetEmptyError(f"{root}: no associated frames")
    seq = TumSequence(
        root,
        [rgb[i][1] for i, _ in pairs],
        [depth[j][1] for _, j in pairs],
        [rgb_ts[i] for i, _ in pairs],
        gt_traj,
        dropped=len(rgb) - len(pairs),
        depth_scale=depth_scale,
    )
    log.info("%s: %d frames associated, %d dropped", root, len(seq), seq.dropped)
    return seq


def write_tum_rgbd(root, frames, groundtruth=None, depth_scale=TUM_DEPTH_SCALE):
    """Write frames in TUM layout (8-bit RGB PNG, 16-bit depth PNG)."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth maps", "# timestamp filename"]
    for f in frames:
        name = f"{f.timestamp:.6f}.png"
        rgb8 = np.clip(np.round(f.rgb * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8).save(root / "rgb" / name)
        d16 = np.clip(np.round(f.depth * depth_scale), 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(root / "depth" / name)
        rgb_lines.append(f"{f.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{f.timestamp:.6f} depth/{name}")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    if groundtruth is not None:
        groundtruth.save_tum(root / "groundtruth.txt")
