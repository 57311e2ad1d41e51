"""Per-frame map update: error-guided densification and regularized fitting."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .gaussian_map import Gaussian
from .geometry import camera_to_world, quat_mul
from .losses import LossWeights, mapping_loss, regularization_loss
from .metrics import psnr
from .optim import Adam
from .renderer import DEFAULT_SETTINGS, render, render_backward

NONE, HOLE, COLOR_ERROR, DEPTH_ERROR = 0, 1, 2, 3


@dataclass(frozen=True)
class DensifyThresholds:
    tau_opa: float = 0.7
    tau_color: float = 0.25
    tau_depth: float = 0.05

    def __post_init__(self):
        if not 0 < self.tau_opa < 1:
            raise ValueError("tau_opa must lie in (0, 1)")
        if not 0 < self.tau_color <= 1:
            raise ValueError("tau_color must lie in (0, 1]")
        if not self.tau_depth > 0:
            raise ValueError("tau_depth must be positive")


@dataclass
class DensifyMask:
    mask: np.ndarray    # (H, W) bool
    reason: np.ndarray  # (H, W) uint8: NONE, HOLE, COLOR_ERROR or DEPTH_ERROR


@dataclass(frozen=True)
class MapperConfig:
    thresholds: DensifyThresholds = field(default_factory=DensifyThresholds)
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 60
    first_frame_factor: int = 3
    stride: int = 2
    first_stride: int = 1
    init_opacity: float = 0.5
    seed_shape: str = "surfel"    # or "isotropic"
    seed_thickness: float = 0.1   # surfel normal scale, in footprints
    lr_means: float = 1.6e-4      # multiplied by the scene extent
    lr_log_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_colors: float = 2.5e-3
    lr_opacity_logits: float = 5e-2
    regularize: bool = True
    reg_extended: bool = True     # also anchor opacity, rotation, camera-plane position
    error_densify: bool = True
    touched_threshold: float = 1e-6

    def learning_rates(self, extent):
        return {
            "means": self.lr_means * extent,
            "log_scales": self.lr_log_scales,
            "rotations": self.lr_rotations,
            "colors": self.lr_colors,
            "opacity_logits": self.lr_opacity_logits,
        }


@dataclass
class MappingReport:
    frame_index: int
    added: int
    n_gaussians: int
    initial_loss: float
    final_loss: float
    reg_loss: float
    psnr: float
    iterations: int
    seconds: float
    mask_fraction: float


def densify_mask(render_out, frame, thr, error_guided=True):
    """Pixels needing new Gaussians: holes, and optionally large color/depth errors.

    ``reason`` records the first condition that fires, in the order hole,
    color error, depth error.
    """
    if render_out.color.shape != frame.rgb.shape:
        raise ValueError("render and frame resolutions differ")
    hole = render_out.opacity < thr.tau_opa
    reason = np.where(hole, HOLE, NONE).astype(np.uint8)
    mask = hole.copy()
    if error_guided:
        e_color = np.abs(render_out.color - frame.rgb).max(axis=-1)
        color_bad = e_color > thr.tau_color
        # compare the opacity-normalised depth: raw depth is coverage-weighted
        valid = (frame.depth > 0) & (render_out.opacity > 0)
        d_hat = render_out.depth[valid] / render_out.opacity[valid]
        e_depth = np.zeros_like(frame.depth)
        e_depth[valid] = np.abs(d_hat - frame.depth[valid]) / frame.depth[valid]
        depth_bad = valid & (e_depth > thr.tau_depth)
        reason[~mask & color_bad] = COLOR_ERROR
        mask |= color_bad
        reason[~mask & depth_bad] = DEPTH_ERROR
        mask |= depth_bad
    return DensifyMask(mask, reason)


def _sample_pixels(mask, depth, stride, offset):
    vv, uu = np.nonzero(mask & (depth > 0))
    keep = ((vv - offset[0]) % stride == 0) & ((uu - offset[1]) % stride == 0)
    return vv[keep], uu[keep]


def _neighbor_step(P, z, vv, uu, axis):
    """Surface step to the adjacent pixel along ``axis``, choosing the side
    with the smaller depth jump; ``nan`` where neither neighbor is valid."""
    H, W = z.shape
    best = np.full((len(vv), 3), np.nan)
    best_jump = np.full(len(vv), np.inf)
    for sign in (1, -1):
        v2 = vv + sign * (axis == 0)
        u2 = uu + sign * (axis == 1)
        ok = (v2 >= 0) & (v2 < H) & (u2 >= 0) & (u2 < W)
        v2c, u2c = np.clip(v2, 0, H - 1), np.clip(u2, 0, W - 1)
        ok &= z[v2c, u2c] > 0
        jump = np.where(ok, np.abs(z[v2c, u2c] - z[vv, uu]), np.inf)
        better = jump < best_jump
        step = sign * (P[v2c, u2c] - P[vv, uu])
        best[better] = step[better]
        best_jump[better] = jump[better]
    return best, best_jump


def surfel_frames(depth, K, vv, uu, stride=1, thickness=0.1, max_stretch=3.0, max_jump=0.05):
    """Camera-frame rotations and scales of flat seeds tangent to the depth surface.

    The tangent plane comes from neighboring back-projected pixels. In-plane
    scales equal the sampling spacing on the surface, capped at
    ``max_stretch`` footprints; the normal scale is ``thickness`` footprints.
    Pixels on depth edges (relative jump above ``max_jump``) or without
    neighbors fall back to isotropic footprint-sized seeds.
    """
    from scipy.spatial.transform import Rotation

    H, W = depth.shape
    v, u = np.mgrid[0:H, 0:W]
    P = np.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], axis=-1)
    z = depth[vv, uu]
    foot = z * stride / K.fx
    du, jump_u = _neighbor_step(P, depth, vv, uu, 1)
    dv, jump_v = _neighbor_step(P, depth, vv, uu, 0)
    flat = (jump_u < max_jump * z) & (jump_v < max_jump * z)
    n = np.cross(du, dv)
    n_len = np.linalg.norm(n, axis=1)
    flat &= n_len > 0
    rots = np.tile([1.0, 0.0, 0.0, 0.0], (len(z), 1))
    scales = np.repeat(foot[:, None], 3, axis=1)
    if flat.any():
        i = np.flatnonzero(flat)
        n = n[i] / n_len[i, None]
        n *= -np.sign(np.einsum("ij,ij->i", n, P[vv[i], uu[i]]))[:, None]
        t1 = du[i] / np.linalg.norm(du[i], axis=1, keepdims=True)
        t2 = np.cross(n, t1)
        R = np.stack([t1, t2, n], axis=2)
        q = Rotation.from_matrix(R).as_quat()
        rots[i] = np.c_[q[:, 3], q[:, :3]]
        cap = max_stretch * foot[i]
        scales[i, 0] = np.minimum(np.linalg.norm(du[i], axis=1) * stride, cap)
        scales[i, 1] = np.minimum(np.abs(np.einsum("ij,ij->i", dv[i], t2)) * stride, cap)
        scales[i, 2] = thickness * foot[i]
    return rots, scales


def seed_arrays(mask, frame, pose, K, stride=1, offset=(0, 0), shape="isotropic", thickness=0.1):
    """Back-project sampled masked pixels.

    Returns ``(means, scales, rotations, colors, pixels)``. ``shape`` is
    ``"isotropic"`` (footprint-sized spheres, identity rotation) or
    ``"surfel"`` (see :func:`surfel_frames`).
    """
    m = mask.mask if isinstance(mask, DensifyMask) else np.asarray(mask, dtype=bool)
    vv, uu = _sample_pixels(m, frame.depth, stride, offset)
    z = frame.depth[vv, uu]
    p_cam = np.stack([(uu - K.cx) / K.fx * z, (vv - K.cy) / K.fy * z, z], axis=1)
    means = camera_to_world(pose, p_cam) if len(z) else np.zeros((0, 3))
    if shape == "surfel" and len(z):
        rots_cam, scales = surfel_frames(frame.depth, K, vv, uu, stride, thickness)
        rots = quat_mul(np.broadcast_to(pose.q, rots_cam.shape), rots_cam)
    elif shape in ("isotropic", "surfel"):
        scales = np.repeat((z * stride / K.fx)[:, None], 3, axis=1)
        rots = np.tile([1.0, 0.0, 0.0, 0.0], (len(z), 1))
    else:
        raise ValueError(f"unknown seed shape {shape!r}")
    colors = frame.rgb[vv, uu]
    return means, scales, rots, colors, np.stack([vv, uu], axis=1)


def seed_from_depth(mask, frame, pose, K, stride=1, offset=(0, 0), init_opacity=0.5,
                    shape="isotropic", thickness=0.1):
    """New Gaussians at the depth back-projection of masked pixels.

    Pixels are taken on a ``stride`` grid shifted by ``offset`` (row, col);
    pixels without valid depth are skipped.
    """
    means, scales, rots, colors, _ = seed_arrays(mask, frame, pose, K, stride, offset, shape, thickness)
    return [Gaussian(m, s, r, c, init_opacity) for m, s, r, c in zip(means, scales, rots, colors)]


def _grid_offset(index, stride):
    return (index // stride) % stride, index % stride


def map_frame(gmap, frame, pose, K, config=None, *, first=False, extent=1.0,
              settings=DEFAULT_SETTINGS):
    """Densify the map for ``frame`` at ``pose`` and fit it for N iterations.

    With ``config.regularize`` the objective is the mapping loss plus the
    importance-weighted anchor penalty; importance statistics are updated
    once, from the last iteration's mapping-loss gradients.
    """
    config = config or MapperConfig()
    t0 = time.perf_counter()
    out = render(gmap, pose, K, settings)
    dmask = densify_mask(out, frame, config.thresholds, config.error_densify)
    stride = config.first_stride if first else config.stride
    means, scales, rots, colors, _ = seed_arrays(dmask, frame, pose, K, stride,
                                                 _grid_offset(frame.index, stride),
                                                 config.seed_shape, config.seed_thickness)
    n_new = len(means)
    if n_new:
        gmap.insert_arrays(means, scales, rots, colors, np.full(n_new, config.init_opacity))
    gmap.snapshot_anchors(pose)

    n_iter = config.iterations * (config.first_frame_factor if first else 1)
    opt = Adam(config.learning_rates(extent), unit_norm=("rotations",), clamp01=("colors",))
    params = gmap.params()
    initial_loss = final_loss = reg = float("nan")
    last_grads = last_touched = None
    for it in range(n_iter):
        out = render(gmap, pose, K, settings)
        loss, d_color, d_depth, d_opac, _ = mapping_loss(out, frame, config.weights)
        grads = render_backward(gmap, pose, K, d_color, d_depth, d_opac, forward=out, settings=settings)
        touched = out.touched(config.touched_threshold)
        total = grads.as_dict()
        reg = 0.0
        if config.regularize:
            reg, reg_grads = regularization_loss(gmap, touched, pose, config.reg_extended)
            for k, g in reg_grads.items():
                total[k] = total[k] + g
        if it == 0:
            initial_loss = loss + reg
        final_loss = loss + reg
        last_grads, last_touched = grads, touched
        opt.step(params, total)

    final = render(gmap, pose, K, settings)
    if last_grads is None:
        loss, d_color, d_depth, d_opac, _ = mapping_loss(final, frame, config.weights)
        last_grads = render_backward(gmap, pose, K, d_color, d_depth, d_opac, forward=final,
                                     settings=settings)
        last_touched = final.touched(config.touched_threshold)
        initial_loss = final_loss = loss
    if len(last_touched):
        s = gmap.scales[last_touched]
        gmap.update_importance(
            last_touched,
            last_grads.d_log_scale[last_touched] / s,
            last_grads.d_color[last_touched],
            last_grads.d_pcam[last_touched, 2],
            grad_o=last_grads.d_opacity[last_touched],
            grad_r=last_grads.d_rot[last_touched],
            grad_xy=last_grads.d_pcam[last_touched, :2],
        )
    return MappingReport(
        frame.index, n_new, len(gmap), float(initial_loss), float(final_loss), float(reg),
        psnr(final.color, frame.rgb), n_iter, time.perf_counter() - t0,
        float(dmask.mask.mean()),
    )
