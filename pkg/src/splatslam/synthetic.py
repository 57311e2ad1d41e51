"""Procedural RGB-D test scenes rendered with the package's own renderer.

A scene is a box-shaped room whose walls, floor, ceiling and a few interior
boxes are tiled with flat textured Gaussians. Because the frames are rendered
from a Gaussian map, they are exactly representable by the model class, which
makes reconstruction and tracking errors attributable to the algorithms
rather than to model mismatch.

Splats overlap enough that every surface renders with coverage above
0.9999, so the composited depth equals the surface depth to within a few
parts per million, as a depth sensor would report it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datasets import FrameObservation, Trajectory
from .gaussian_map import GaussianMap
from .geometry import CameraIntrinsics, CameraPose, axis_angle_to_quat, quat_mul, rotmat_to_quat
from .renderer import RenderSettings, render

# Frames are always rendered with these settings so that generated datasets do
# not change when renderer defaults are tuned.
REFERENCE_SETTINGS = RenderSettings(alpha_max=0.99, transmittance_cutoff=1e-6, tile_size=16,
                                    cov_floor=0.3, near=0.01, footprint_sigma=3.0)


@dataclass(frozen=True)
class SceneSpec:
    n_gaussians: int = 20000
    room_half_extent: tuple = (1.5, 1.0, 1.8)
    n_boxes: int = 3
    opacity: float = 0.99
    splat_size: tuple = (1.0, 1.4)   # in-plane scale range, in units of the grid spacing
    texture_contrast: float = 0.35
    noise: float = 0.12
    width: int = 64
    height: int = 64
    fov_deg: float = 60.0


@dataclass(frozen=True)
class TrajectorySpec:
    n_frames: int = 50
    kind: str = "sweep"          # "sweep" or "two_segment"
    step: float = 0.015          # meters per frame
    yaw_amplitude_deg: float = 4.0
    segment_yaw_deg: float = 1.0  # per-frame turn in the second two_segment leg
    fps: float = 30.0


@dataclass
class SyntheticSequence:
    frames: list
    gt_map: GaussianMap
    trajectory: Trajectory
    K: CameraIntrinsics
    scene: SceneSpec = field(default_factory=SceneSpec)

    def __len__(self):
        return len(self.frames)


def intrinsics_for(spec):
    f = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2)
    return CameraIntrinsics(f, f, (spec.width - 1) / 2, (spec.height - 1) / 2,
                            spec.width, spec.height)


def _face_rotation(normal):
    """Quaternion turning local +z onto ``normal``."""
    n = np.asarray(normal, dtype=np.float64)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, n)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        return np.array([1.0, 0, 0, 0]) if n[2] > 0 else np.array([0.0, 1, 0, 0])
    return axis_angle_to_quat(axis, np.arctan2(s, z @ n))


def _box_faces(center, half, inward):
    """Six rectangles (origin, u, v, normal) of an axis-aligned box."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)
    faces = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            normal = np.zeros(3)
            normal[axis] = -sign if inward else sign
            origin = c.copy()
            origin[axis] += sign * h[axis]
            u = np.zeros(3)
            u[u_ax] = h[u_ax]
            v = np.zeros(3)
            v[v_ax] = h[v_ax]
            faces.append((origin, u, v, normal))
    return faces


def _texture(points, rng, contrast):
    """Smooth multi-frequency color field evaluated at world points."""
    out = np.full((len(points), 3), 0.5)
    for _ in range(4):
        k = rng.normal(size=3) * rng.uniform(1.5, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(-1, 1, 3)
        out += contrast / 2 * np.sin(points @ k + phase)[:, None] * amp
    return out


def build_room(spec, rng):
    faces = _box_faces(np.zeros(3), spec.room_half_extent, inward=True)
    for _ in range(spec.n_boxes):
        half = rng.uniform(0.15, 0.35, 3)
        hx, hy, hz = spec.room_half_extent
        # boxes rest on the floor (+y is down) in the far part of the room
        center = np.array([rng.uniform(-0.8 * hx, 0.8 * hx), hy - half[1], rng.uniform(0.3, hz - 0.2)])
        faces += _box_faces(center, half, inward=False)
    areas = np.array([4 * np.linalg.norm(u) * np.linalg.norm(v) for _, u, v, _ in faces])
    spacing = np.sqrt(areas.sum() / spec.n_gaussians)

    means, scales, rots, colors = [], [], [], []
    for (origin, u, v, normal), area in zip(faces, areas):
        nu = max(1, int(round(2 * np.linalg.norm(u) / spacing)))
        nv = max(1, int(round(2 * np.linalg.norm(v) / spacing)))
        a = (np.arange(nu) + 0.5) / nu * 2 - 1
        b = (np.arange(nv) + 0.5) / nv * 2 - 1
        A, B = np.meshgrid(a, b, indexing="ij")
        pts = origin + A.reshape(-1, 1) * u + B.reshape(-1, 1) * v
        pts += normal * rng.normal(scale=0.002, size=(len(pts), 1))
        base = rng.uniform(0.25, 0.75, 3)
        col = base + _texture(pts, rng, spec.texture_contrast) - 0.5
        col += rng.normal(scale=spec.noise, size=col.shape)
        q = _face_rotation(normal)
        # random in-plane spin so footprints are anisotropic in varied directions
        spins = rng.uniform(0, np.pi, len(pts))
        qs = quat_mul(q, np.stack([np.cos(spins / 2), 0 * spins, 0 * spins, np.sin(spins / 2)], 1))
        su = 2 * np.linalg.norm(u) / nu * rng.uniform(*spec.splat_size, len(pts))
        sv = 2 * np.linalg.norm(v) / nv * rng.uniform(*spec.splat_size, len(pts))
        means.append(pts)
        scales.append(np.stack([su, sv, np.full(len(pts), 0.004)], 1))
        rots.append(qs)
        colors.append(np.clip(col, 0.02, 0.98))

    gmap = GaussianMap()
    means = np.concatenate(means)
    gmap.insert_arrays(means, np.concatenate(scales), np.concatenate(rots),
                       np.concatenate(colors), np.full(len(means), spec.opacity))
    return gmap


def _look_rotation(forward, down=(0.0, 1.0, 0.0)):
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    x = np.cross(np.asarray(down), f)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    return np.stack([x, y, f], axis=1)


def make_trajectory(spec, rng):
    """Smooth camera path; ``two_segment`` sweeps right, then advances and turns."""
    n = spec.n_frames
    s = np.arange(n) * spec.step
    phase = rng.uniform(0, 2 * np.pi)
    start = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.15, 0.15), rng.uniform(-0.6, -0.3)])
    yaw_amp = np.radians(spec.yaw_amplitude_deg)
    poses = []
    for i in range(n):
        if spec.kind == "two_segment":
            half = n // 2
            if i < half:
                pos = start + np.array([s[i], 0.0, 0.0])
                yaw = 0.0
            else:
                k = i - half
                pos = start + np.array([s[half - 1], 0.0, 0.0]) + np.array([0.0, 0.0, (k + 1) * spec.step])
                yaw = np.radians(spec.segment_yaw_deg) * (k + 1)
            pitch = 0.0
        else:
            pos = start + np.array([s[i], 0.02 * np.sin(2 * np.pi * i / n + phase), 0.3 * s[i]])
            yaw = yaw_amp * np.sin(2 * np.pi * i / n + phase)
            pitch = 0.5 * yaw_amp * np.sin(4 * np.pi * i / n)
        fwd = np.array([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
        poses.append(CameraPose(pos, rotmat_to_quat(_look_rotation(fwd))))
    ts = [i / spec.fps for i in range(n)]
    return Trajectory(ts, poses)


def render_frame(gmap, pose, K, timestamp, index):
    out = render(gmap, pose, K, REFERENCE_SETTINGS)
    return FrameObservation(out.color, out.depth, timestamp, index)


def generate_synthetic(scene=None, trajectory=None, seed=0):
    """Room scene, camera path and noiseless RGB-D frames for ``seed``."""
    scene = scene or SceneSpec()
    trajectory = trajectory or TrajectorySpec()
    rng = np.random.default_rng(seed)
    gmap = build_room(scene, rng)
    traj = make_trajectory(trajectory, rng)
    K = intrinsics_for(scene)
    frames = [render_frame(gmap, p, K, ts, i)
              for i, (ts, p) in enumerate(zip(traj.timestamps, traj.poses))]
    return SyntheticSequence(frames, gmap, traj, K, scene)
