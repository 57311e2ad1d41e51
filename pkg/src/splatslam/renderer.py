"""Differentiable splat renderer: color, depth and opacity in one traversal.

The forward pass bins projected Gaussians into square tiles, then walks each
pixel's depth-sorted list front to back accumulating

    C = Σ c_i α_i T_i,   D = Σ z_i α_i T_i,   O = Σ α_i T_i,   T_i = Π_{j<i} (1 - α_j)

with ``α_i = min(α_max, o_i exp(-½ dᵀ Σ'⁻¹ d))``. The backward pass walks
the same list back to front, recovering ``T_i`` by division, and produces
per-Gaussian 2D gradients which :func:`geometry.project_backward` lifts to
3D parameters and the camera pose.

Everything runs in float64 on one core; compositing order and gradient
accumulation order are fixed, so results are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .gaussian_map import sigmoid
from .geometry import (
    COV2D_FLOOR,
    FOOTPRINT_SIGMA,
    NEAR_PLANE,
    InvalidInputError,
    ProjectionBatch,
    project_backward,
    project_gaussians,
)

ALPHA_MAX = 0.99
TRANSMITTANCE_CUTOFF = 1e-6


@dataclass(frozen=True)
class RenderSettings:
    alpha_max: float = ALPHA_MAX
    transmittance_cutoff: float = TRANSMITTANCE_CUTOFF
    tile_size: int = 16
    cov_floor: float = COV2D_FLOOR
    near: float = NEAR_PLANE
    footprint_sigma: float = FOOTPRINT_SIGMA


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class RenderOutput:
    color: np.ndarray               # (H, W, 3)
    depth: np.ndarray               # (H, W)
    opacity: np.ndarray             # (H, W)
    contrib_count: np.ndarray       # (H, W) int
    per_gaussian_weight: np.ndarray  # (N,) accumulated α·T over all pixels
    # auxiliary buffers for the backward pass
    final_T: np.ndarray = None
    last: np.ndarray = None
    proj: ProjectionBatch = None
    tile_offsets: np.ndarray = None
    tile_ids: np.ndarray = None
    opacities: np.ndarray = None

    def touched(self, threshold=1e-6):
        return np.flatnonzero(self.per_gaussian_weight > threshold)


@dataclass
class RenderGradients:
    """Gradients of a scalar loss w.r.t. the map's internal parameters.

    ``d_mu``, ``d_log_scale``, ``d_rot`` (unnormalized quaternion),
    ``d_color`` and ``d_opacity_logit`` match :class:`GaussianMap` storage.
    ``d_pcam`` is the gradient w.r.t. each mean in camera coordinates.
    """

    d_mu: np.ndarray
    d_log_scale: np.ndarray
    d_rot: np.ndarray
    d_color: np.ndarray
    d_opacity_logit: np.ndarray
    d_pcam: np.ndarray
    d_opacity: np.ndarray
    d_t: np.ndarray = None
    d_q: np.ndarray = None

    def as_dict(self):
        return {
            "means": self.d_mu,
            "log_scales": self.d_log_scale,
            "rotations": self.d_rot,
            "colors": self.d_color,
            "opacity_logits": self.d_opacity_logit,
        }


# ---------------------------------------------------------------------------
# reference pieces (scalar, readable)
# ---------------------------------------------------------------------------

def sort_by_depth(z):
    """Stable ascending permutation of depths."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidInputError("depths must be finite")
    return np.argsort(z, kind="stable")


def eval_alpha(g, o, x, alpha_max=ALPHA_MAX):
    """Blend weight of projected Gaussian ``g`` with opacity ``o`` at pixel ``x``.

    Returns 0 outside the footprint circle of radius ``g.radius_px``.
    """
    d = np.asarray(x, dtype=np.float64) - g.mu2d
    if d @ d > g.radius_px**2:
        return 0.0
    power = -0.5 * d @ np.linalg.solve(g.cov2d, d)
    return min(alpha_max, o * math.exp(power))


def composite_pixel(ordered, transmittance_cutoff=TRANSMITTANCE_CUTOFF, check_sorted=False):
    """Front-to-back blend of ``(alpha, color, z)`` triples sorted by ``z``."""
    if check_sorted:
        zs = [z for _, _, z in ordered]
        if any(b < a for a, b in zip(zs, zs[1:])):
            raise ValueError("composite_pixel expects entries sorted by depth")
    C = np.zeros(3)
    D = 0.0
    T = 1.0
    for alpha, c, z in ordered:
        w = alpha * T
        C = C + w * np.asarray(c, dtype=np.float64)
        D += w * z
        T *= 1.0 - alpha
        if T < transmittance_cutoff:
            break
    return C, D, 1.0 - T


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _bin_tiles(order, mu2d, radius, width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    counts = np.zeros(ntx * nty + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(0, int(math.floor((mu2d[g, 0] - radius[g]) / tile)))
        x1 = min(ntx - 1, int(math.floor((mu2d[g, 0] + radius[g]) / tile)))
        y0 = max(0, int(math.floor((mu2d[g, 1] - radius[g]) / tile)))
        y1 = min(nty - 1, int(math.floor((mu2d[g, 1] + radius[g]) / tile)))
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        x0 = max(0, int(math.floor((mu2d[g, 0] - radius[g]) / tile)))
        x1 = min(ntx - 1, int(math.floor((mu2d[g, 0] + radius[g]) / tile)))
        y0 = max(0, int(math.floor((mu2d[g, 1] - radius[g]) / tile)))
        y1 = min(nty - 1, int(math.floor((mu2d[g, 1] + radius[g]) / tile)))
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                t = ty * ntx + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@numba.njit(cache=True)
def _forward(mu2d, conic, opac, color, z, radius, offsets, ids, width, height, tile,
             alpha_max, t_cutoff):
    n = mu2d.shape[0]
    out_c = np.zeros((height, width, 3))
    out_d = np.zeros((height, width))
    out_o = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    final_T = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    weight = np.zeros(n)
    ntx = (width + tile - 1) // tile
    for v in range(height):
        for u in range(width):
            t = (v // tile) * ntx + (u // tile)
            start, end = offsets[t], offsets[t + 1]
            T = 1.0
            stop = end
            for k in range(start, end):
                g = ids[k]
                dx = u - mu2d[g, 0]
                dy = v - mu2d[g, 1]
                if dx * dx + dy * dy > radius[g] * radius[g]:
                    continue
                power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                + conic[g, 2] * dy * dy)
                alpha = min(alpha_max, opac[g] * math.exp(power))
                w = alpha * T
                out_c[v, u, 0] += w * color[g, 0]
                out_c[v, u, 1] += w * color[g, 1]
                out_c[v, u, 2] += w * color[g, 2]
                out_d[v, u] += w * z[g]
                out_o[v, u] += w
                weight[g] += w
                count[v, u] += 1
                T *= 1.0 - alpha
                if T < t_cutoff:
                    stop = k + 1
                    break
            final_T[v, u] = T
            last[v, u] = stop
    return out_c, out_d, out_o, count, final_T, last, weight


@numba.njit(cache=True)
def _backward(mu2d, conic, opac, color, z, radius, offsets, ids, width, height, tile,
              alpha_max, final_T, last, g_c, g_d, g_o):
    n = mu2d.shape[0]
    d_mu2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_z = np.zeros(n)
    ntx = (width + tile - 1) // tile
    for v in range(height):
        for u in range(width):
            t = (v // tile) * ntx + (u // tile)
            start = offsets[t]
            gc0 = g_c[v, u, 0]
            gc1 = g_c[v, u, 1]
            gc2 = g_c[v, u, 2]
            gd = g_d[v, u]
            go = g_o[v, u]
            if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and go == 0.0:
                continue
            T = final_T[v, u]
            acc = 0.0  # Σ_{j>i} w_j α_j T_j
            for k in range(last[v, u] - 1, start - 1, -1):
                g = ids[k]
                dx = u - mu2d[g, 0]
                dy = v - mu2d[g, 1]
                if dx * dx + dy * dy > radius[g] * radius[g]:
                    continue
                power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy
                                + conic[g, 2] * dy * dy)
                gauss = math.exp(power)
                raw = opac[g] * gauss
                alpha = min(alpha_max, raw)
                T = T / (1.0 - alpha)
                wt = alpha * T
                wgt = color[g, 0] * gc0 + color[g, 1] * gc1 + color[g, 2] * gc2 + z[g] * gd + go
                d_color[g, 0] += wt * gc0
                d_color[g, 1] += wt * gc1
                d_color[g, 2] += wt * gc2
                d_z[g] += wt * gd
                d_alpha = T * wgt - acc / (1.0 - alpha)
                acc += wgt * wt
                if raw >= alpha_max:
                    continue
                d_opac[g] += d_alpha * gauss
                d_power = d_alpha * raw
                d_mu2d[g, 0] += d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                d_mu2d[g, 1] += d_power * (conic[g, 1] * dx + conic[g, 2] * dy)
                d_conic[g, 0] += -0.5 * d_power * dx * dx
                d_conic[g, 1] += -d_power * dx * dy
                d_conic[g, 2] += -0.5 * d_power * dy * dy
    return d_mu2d, d_conic, d_opac, d_color, d_z


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _project(gmap, pose, K, settings):
    return project_gaussians(
        gmap.means, gmap.log_scales, gmap.rotations, pose, K,
        cov_floor=settings.cov_floor, near=settings.near,
        footprint_sigma=settings.footprint_sigma,
    )


def render(gmap, pose, K, settings=DEFAULT_SETTINGS):
    """Render color, depth and opacity images of ``gmap`` seen from ``pose``."""
    n = len(gmap)
    H, W = K.height, K.width
    if n == 0:
        return RenderOutput(
            np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)),
            np.zeros((H, W), dtype=np.int64), np.zeros(0),
            np.ones((H, W)), np.zeros((H, W), dtype=np.int64), None,
            np.zeros(1, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0),
        )
    proj = _project(gmap, pose, K, settings)
    visible = np.flatnonzero(proj.visible)
    order = visible[sort_by_depth(proj.z[visible])]
    radius = np.where(proj.visible, proj.radius, 0.0)
    offsets, ids = _bin_tiles(order, proj.mu2d, radius, W, H, settings.tile_size)
    opac = gmap.opacities
    color, depth, opacity, count, final_T, last, weight = _forward(
        proj.mu2d, proj.conic, opac, gmap.colors, proj.z, radius, offsets, ids,
        W, H, settings.tile_size, settings.alpha_max, settings.transmittance_cutoff,
    )
    return RenderOutput(color, depth, opacity, count, weight, final_T, last, proj,
                        offsets, ids, opac)


def render_backward(gmap, pose, K, d_color, d_depth, d_opacity=None, want_pose_grads=False,
                    forward=None, settings=DEFAULT_SETTINGS):
    """Analytic gradients of a scalar loss given its image-space gradients.

    ``forward`` should be the :class:`RenderOutput` of the same map and pose;
    it is recomputed when omitted.
    """
    H, W = K.height, K.width
    d_color = np.asarray(d_color, dtype=np.float64)
    d_depth = np.asarray(d_depth, dtype=np.float64)
    d_opacity = np.zeros((H, W)) if d_opacity is None else np.asarray(d_opacity, dtype=np.float64)
    if d_color.shape != (H, W, 3) or d_depth.shape != (H, W) or d_opacity.shape != (H, W):
        raise InvalidInputError("upstream gradient images do not match the camera resolution")
    n = len(gmap)
    if n == 0:
        z3, z1 = np.zeros((0, 3)), np.zeros(0)
        return RenderGradients(z3, z3, np.zeros((0, 4)), z3, z1, z3, z1,
                               np.zeros(3) if want_pose_grads else None,
                               np.zeros(4) if want_pose_grads else None)
    fwd = forward if forward is not None else render(gmap, pose, K, settings)
    proj = fwd.proj
    radius = np.where(proj.visible, proj.radius, 0.0)
    d_mu2d, d_conic, d_opac, d_col, d_z = _backward(
        proj.mu2d, proj.conic, fwd.opacities, gmap.colors, proj.z, radius,
        fwd.tile_offsets, fwd.tile_ids, W, H, settings.tile_size, settings.alpha_max,
        fwd.final_T, fwd.last, np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth),
        np.ascontiguousarray(d_opacity),
    )
    # culled Gaussians receive no gradient, so only lift the visible ones
    idx = np.flatnonzero(proj.visible)
    n = len(proj.visible)
    sub = project_backward(proj.take(idx), pose, K, gmap.rotations[idx], d_mu2d[idx],
                           d_conic[idx], d_z[idx], want_pose_grads)
    d_means, d_ls, d_rot, d_pcam = (_scatter(a, idx, n) for a in sub[:4])
    d_t, d_q = sub[4], sub[5]
    o = fwd.opacities
    return RenderGradients(d_means, d_ls, d_rot, d_col, d_opac * o * (1 - o), d_pcam,
                           d_opac, d_t, d_q)


def _scatter(values, idx, n):
    out = np.zeros((n,) + values.shape[1:])
    out[idx] = values
    return out


def render_bruteforce(gmap, pose, K, settings=DEFAULT_SETTINGS):
    """Exhaustive per-pixel compositor used as a test oracle.

    No tiling and no early termination: every projected Gaussian is tested
    against every pixel, in depth order.
    """
    H, W = K.height, K.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    T = np.ones((H, W))
    if len(gmap) == 0:
        return color, depth, 1.0 - T
    proj = _project(gmap, pose, K, settings)
    vv, uu = np.mgrid[0:H, 0:W].astype(np.float64)
    opac = sigmoid(gmap.opacity_logits)
    for g in sort_by_depth(proj.z):
        if not proj.visible[g]:
            continue
        dx = uu - proj.mu2d[g, 0]
        dy = vv - proj.mu2d[g, 1]
        inv = np.linalg.inv(proj.cov2d[g])
        power = -0.5 * (inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy)
        alpha = np.minimum(settings.alpha_max, opac[g] * np.exp(power))
        alpha[dx * dx + dy * dy > proj.radius[g] ** 2] = 0.0
        w = alpha * T
        color += w[..., None] * gmap.colors[g]
        depth += w * proj.z[g]
        T = T * (1.0 - alpha)
    return color, depth, 1.0 - T


def save_debug_images(out, prefix, depth_max=5.0):
    """Write ``<prefix>_color.png``, ``_depth.png`` and ``_opacity.png``.

    Depth is mapped linearly from ``[0, depth_max]`` meters to ``[0, 255]``.
    """
    from PIL import Image

    to8 = lambda a: np.clip(np.round(a * 255), 0, 255).astype(np.uint8)  # noqa: E731
    Image.fromarray(to8(out.color)).save(f"{prefix}_color.png")
    Image.fromarray(to8(out.depth / depth_max)).save(f"{prefix}_depth.png")
    Image.fromarray(to8(out.opacity)).save(f"{prefix}_opacity.png")
