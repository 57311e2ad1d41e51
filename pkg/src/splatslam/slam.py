"""Frame loop: bootstrap the map on frame 0, then track and map each new frame.

Output directory layout (all optional, written only when ``config.output`` is
set)::

    config.yaml              effective configuration
    frames.csv               one row per processed frame, flushed every frame
    trajectory.txt           estimated poses, TUM text format
    groundtruth.txt          reference poses, when the dataset has them
    map.gsmp                 final map checkpoint
    checkpoints/map_NNNNN.gsmp
    renders/frame_NNNNN_{color,depth,opacity}.png
    metrics.txt              ``key = value`` lines, see :data:`METRIC_KEYS`
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import TUM_FR1, TUM_FR2, TUM_FR3, Trajectory, load_tum_rgbd
from .gaussian_map import GaussianMap
from .geometry import CameraIntrinsics, CameraPose
from .mapper import map_frame
from .metrics import EvaluationError, ate_rmse, depth_l1, image_metrics
from .renderer import render, save_debug_images
from .synthetic import generate_synthetic
from .tracker import TrackerState, track_frame

log = logging.getLogger(__name__)

CAMERAS = {"fr1": TUM_FR1, "fr2": TUM_FR2, "fr3": TUM_FR3}

METRIC_KEYS = (
    "n_frames", "n_gaussians", "trajectory_length_m", "ate_rmse_cm", "ate_percent",
    "psnr_db", "ssim", "depth_l1_cm", "seconds",
)

FRAME_COLUMNS = (
    "index", "timestamp", "track_iterations", "track_loss_initial", "track_loss_final",
    "track_seconds", "added", "n_gaussians", "map_loss_final", "map_psnr", "map_seconds",
)


class SlamError(RuntimeError):
    """A failure inside the frame loop, tagged with the frame index."""

    def __init__(self, frame_index, cause):
        super().__init__(f"frame {frame_index}: {cause}")
        self.frame_index = frame_index
        self.cause = cause


def parse_camera(spec):
    if spec in CAMERAS:
        return CAMERAS[spec]
    try:
        fx, fy, cx, cy, w, h = (float(v) for v in spec.split(","))
    except ValueError:
        raise ValueError(f"camera must be one of {sorted(CAMERAS)} or 'fx,fy,cx,cy,width,height'") from None
    return CameraIntrinsics(fx, fy, cx, cy, int(w), int(h))


@dataclass
class FrameSource:
    """Random access to the frames of a sequence at the working resolution."""

    name: str
    K: CameraIntrinsics
    timestamps: list
    groundtruth: Trajectory | None
    _get: object = field(repr=False)
    gt_map: GaussianMap | None = None

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i):
        if not 0 <= i < len(self):
            raise IndexError(i)
        return self._get(i)


def open_dataset(config):
    """Frame source for ``config.dataset``, with downscale and frame limit applied."""
    ds = config.dataset
    factor = ds.downscale
    if ds.kind == "synthetic":
        seq = generate_synthetic(config.synthetic.scene, config.synthetic.trajectory, config.seed)
        frames = [f.downscaled(factor) for f in seq.frames]
        src = FrameSource("synthetic", seq.K.scaled(factor) if factor > 1 else seq.K,
                          list(seq.trajectory.timestamps), seq.trajectory, frames.__getitem__,
                          seq.gt_map)
    else:
        if ds.path is None:
            raise ValueError("dataset.path is required for TUM datasets")
        seq = load_tum_rgbd(ds.path)
        K = parse_camera(ds.camera)
        src = FrameSource(Path(ds.path).name, K.scaled(factor) if factor > 1 else K,
                          list(seq.timestamps), seq.groundtruth,
                          lambda i: seq.frame(i, factor))
    if ds.max_frames is not None and ds.max_frames < len(src):
        n = ds.max_frames
        src.timestamps = src.timestamps[:n]
        if src.groundtruth is not None:
            src.groundtruth = Trajectory(src.groundtruth.timestamps[:n], src.groundtruth.poses[:n])
    return src


@dataclass
class SlamResult:
    trajectory: Trajectory
    gmap: GaussianMap
    mapping_reports: list
    tracking_reports: list
    K: CameraIntrinsics
    seconds: float
    extent: float = 1.0


def scene_extent(frame):
    """Median valid depth of a frame, used to scale the mean learning rate."""
    d = frame.depth[frame.depth > 0]
    return float(np.median(d)) if d.size else 1.0


def anchor_pose(source):
    """First-frame pose: the reference pose when known, otherwise the identity."""
    if source.groundtruth is not None and len(source.groundtruth):
        return source.groundtruth.poses[0].copy()
    return CameraPose.identity()


class _Writer:
    def __init__(self, root, config, K):
        self.root = Path(root) if root is not None else None
        self.config = config
        self.K = K
        self._csv = None
        if self.root is None:
            return
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "config.yaml").write_text(config.dump())
        self._fh = open(self.root / "frames.csv", "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(FRAME_COLUMNS)
        self._fh.flush()

    def frame(self, idx, frame, track, mapping, gmap, pose):
        if self.root is None:
            return
        tr = (track.iterations, track.initial_loss, track.final_loss, track.seconds) if track else (0, "", "", 0.0)
        self._csv.writerow([idx, f"{frame.timestamp:.6f}", *tr, mapping.added, mapping.n_gaussians,
                            mapping.final_loss, mapping.psnr, mapping.seconds])
        self._fh.flush()
        cfg = self.config
        if cfg.checkpoint_every and idx % cfg.checkpoint_every == 0:
            (self.root / "checkpoints").mkdir(exist_ok=True)
            gmap.save(self.root / "checkpoints" / f"map_{idx:05d}.gsmp")
        if cfg.dump_every and idx % cfg.dump_every == 0:
            (self.root / "renders").mkdir(exist_ok=True)
            out = render(gmap, pose, self.K, cfg.render)
            save_debug_images(out, self.root / "renders" / f"frame_{idx:05d}")

    def finish(self, result, source):
        if self.root is None:
            return
        self._fh.close()
        result.trajectory.save_tum(self.root / "trajectory.txt")
        if source.groundtruth is not None:
            source.groundtruth.save_tum(self.root / "groundtruth.txt")
        result.gmap.save(self.root / "map.gsmp")


def run_slam(config, source=None, on_frame=None):
    """Process the configured sequence and return a :class:`SlamResult`.

    ``source`` overrides the dataset named in ``config`` (handy for tests);
    ``on_frame(index, pose, mapping_report)`` is called after every frame.
    """
    source = source if source is not None else open_dataset(config)
    if len(source) == 0:
        raise ValueError("sequence has no frames")
    writer = _Writer(config.output, config, source.K)
    t0 = time.perf_counter()
    gmap = GaussianMap()
    traj = Trajectory()
    state = TrackerState()
    mapping_reports, tracking_reports = [], []
    extent = 1.0
    for idx in range(len(source)):
        frame = source[idx]
        try:
            if idx == 0:
                pose = anchor_pose(source)
                extent = scene_extent(frame)
                track = None
            else:
                pose, track = track_frame(gmap, frame, state, source.K, config.tracker,
                                          settings=config.render)
                tracking_reports.append(track)
            report = map_frame(gmap, frame, pose, source.K, config.mapper, first=idx == 0,
                               extent=extent, settings=config.render)
        except Exception as exc:
            raise SlamError(idx, exc) from exc
        mapping_reports.append(report)
        state.push(pose)
        traj.append(frame.timestamp, pose.copy())
        writer.frame(idx, frame, track, report, gmap, pose)
        log.info("frame %d: %d gaussians (+%d), map psnr %.2f dB", idx, len(gmap), report.added, report.psnr)
        if on_frame is not None:
            on_frame(idx, pose, report)
    result = SlamResult(traj, gmap, mapping_reports, tracking_reports, source.K,
                        time.perf_counter() - t0, extent)
    writer.finish(result, source)
    return result


def evaluate(gmap, trajectory, source, settings=None, groundtruth=None):
    """Metrics for a map and trajectory against the frames of ``source``.

    Images are rendered at the estimated poses. ATE is computed when a
    reference trajectory is available (``groundtruth`` or the source's).
    """
    from .renderer import DEFAULT_SETTINGS

    settings = settings or DEFAULT_SETTINGS
    n = min(len(trajectory), len(source))
    if n == 0:
        raise EvaluationError("nothing to evaluate")
    rendered, reference, r_depth, f_depth = [], [], [], []
    for i in range(n):
        frame = source[i]
        out = render(gmap, trajectory.poses[i], source.K, settings)
        rendered.append(out.color)
        reference.append(frame.rgb)
        # composited depth is coverage-weighted; compare surfaces where covered
        covered = out.opacity > 0.5
        r_depth.append(np.where(covered, out.depth / np.where(covered, out.opacity, 1.0), 0.0))
        f_depth.append(frame.depth)
    p, s = image_metrics(rendered, reference)
    metrics = {"n_frames": n, "n_gaussians": len(gmap), "psnr_db": p, "ssim": s}
    try:
        metrics["depth_l1_cm"] = depth_l1(r_depth, f_depth)
    except EvaluationError:
        metrics["depth_l1_cm"] = float("nan")
    gt = groundtruth if groundtruth is not None else source.groundtruth
    if gt is not None and n >= 3:
        gt_sub = Trajectory(gt.timestamps[:n], gt.poses[:n])
        est = Trajectory(trajectory.timestamps[:n], trajectory.poses[:n])
        ate, _ = ate_rmse(est, gt_sub, align=True)
        length = gt_sub.length()
        metrics["trajectory_length_m"] = length
        metrics["ate_rmse_cm"] = ate
        metrics["ate_percent"] = ate / (100.0 * length) * 100.0 if length > 0 else float("nan")
    return metrics


def write_metrics(path, metrics):
    """``key = value`` per line, in :data:`METRIC_KEYS` order, then any extras."""
    keys = [k for k in METRIC_KEYS if k in metrics] + sorted(set(metrics) - set(METRIC_KEYS))
    lines = []
    for k in keys:
        v = metrics[k]
        lines.append(f"{k} = {v:.6g}" if isinstance(v, float) else f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = int(v) if v.lstrip("-").isdigit() else float(v)
    return out
