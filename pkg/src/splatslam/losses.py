"""Image losses with analytic gradients: L1, SSIM, LAB chroma, mapping and tracking.

Every loss returns its scalar value together with the gradient w.r.t. the
rendered image(s), ready to feed :func:`renderer.render_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .gaussian_map import sigmoid
from .geometry import world_to_camera

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEPTH_MASK_OPACITY = 0.5


@dataclass(frozen=True)
class LossWeights:
    lambda_color: float = 0.8
    lambda_depth: float = 1.0
    lambda_ssim: float = 0.2
    lambda_color_track: float = 0.5
    lambda_depth_track: float = 100.0
    # compare D̂ with Ô·D instead of D, see depth_residual
    depth_coverage: bool = True

    def __post_init__(self):
        for k, v in vars(self).items():
            if not isinstance(v, bool) and v < 0:
                raise ValueError(f"{k} must be non-negative, got {v}")


def l1_image(a, b, mask=None):
    """Mean ``|a - b|`` over masked entries and its subgradient w.r.t. ``a``.

    ``mask`` is an ``(H, W)`` boolean image broadcast over trailing channels.
    An empty mask yields zero loss and zero gradient.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    if mask is None:
        m = np.ones(a.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != a.shape:
            m = np.broadcast_to(m.reshape(m.shape + (1,) * (a.ndim - m.ndim)), a.shape)
    n = int(m.sum())
    if n == 0:
        return 0.0, np.zeros_like(a)
    loss = float(np.abs(diff[m]).sum() / n)
    grad = np.where(m, np.sign(diff), 0.0) / n
    return loss, grad


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(img, kernel):
    # zero padding; the kernel is symmetric so this operator is self-adjoint
    out = correlate1d(img, kernel, axis=0, mode="constant")
    return correlate1d(out, kernel, axis=1, mode="constant")


def ssim(a, b, return_map=False):
    """Mean SSIM of ``a`` against ``b`` and its gradient w.r.t. ``a``.

    Gaussian 11x11 window (σ=1.5), zero padding, C1=0.01², C2=0.03².
    Works on ``(H, W)`` or ``(H, W, C)`` images; channels are averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    k = _gaussian_kernel()
    mu_a, mu_b = _blur(a, k), _blur(b, k)
    e_aa, e_bb, e_ab = _blur(a * a, k), _blur(b * b, k), _blur(a * b, k)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    smap = A1 * A2 / (B1 * B2)
    value = float(smap.mean())

    scale = 1.0 / smap.size
    dS_dA1 = A2 / (B1 * B2)
    dS_dA2 = A1 / (B1 * B2)
    dS_dB1 = -smap / B1
    dS_dB2 = -smap / B2
    d_mu_a = (2 * mu_b * dS_dA1 - 2 * mu_b * dS_dA2 + 2 * mu_a * dS_dB1 - 2 * mu_a * dS_dB2) * scale
    d_e_aa = dS_dB2 * scale
    d_e_ab = 2 * dS_dA2 * scale
    grad = _blur(d_mu_a, k) + 2 * a * _blur(d_e_aa, k) + b * _blur(d_e_ab, k)
    if return_map:
        return value, grad, smap
    return value, grad


# ---------------------------------------------------------------------------
# sRGB -> CIE-LAB (D65)
# ---------------------------------------------------------------------------

_RGB_TO_XYZ = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])
_EPS = (6 / 29) ** 3
_KAPPA = 1 / (3 * (6 / 29) ** 2)


def _srgb_to_linear(c):
    c = np.clip(c, 0.0, 1.0)
    low = c <= 0.04045
    lin = np.where(low, c / 12.92, ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 2.4)
    dlin = np.where(low, 1 / 12.92, 2.4 / 1.055 * ((np.maximum(c, 0.04045) + 0.055) / 1.055) ** 1.4)
    return lin, dlin


def _lab_f(t):
    hi = t > _EPS
    tc = np.cbrt(np.maximum(t, _EPS))
    f = np.where(hi, tc, t * _KAPPA + 4 / 29)
    df = np.where(hi, 1 / (3 * tc * tc), _KAPPA)
    return f, df


def rgb_to_lab(img):
    img = np.asarray(img, dtype=np.float64)
    lin, _ = _srgb_to_linear(img)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    f, _ = _lab_f(xyz)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab):
    """Inverse of :func:`rgb_to_lab` (no gamut clipping)."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    f = np.stack([fx, fy, fz], axis=-1)
    t = np.where(f > 6 / 29, f**3, (f - 4 / 29) / _KAPPA)
    lin = (t * _WHITE_D65) @ np.linalg.inv(_RGB_TO_XYZ).T
    return np.where(lin <= 0.0031308, 12.92 * lin, 1.055 * np.abs(lin) ** (1 / 2.4) - 0.055)


def rgb_to_ab(img, return_vjp=False):
    """Chroma channels ``(a, b)`` of CIE-LAB; lightness is discarded.

    With ``return_vjp`` also returns a function mapping ``dL/d(ab)`` to
    ``dL/d(rgb)``.
    """
    img = np.asarray(img, dtype=np.float64)
    lin, dlin = _srgb_to_linear(img)
    xyz = lin @ _RGB_TO_XYZ.T / _WHITE_D65
    f, df = _lab_f(xyz)
    ab = np.stack([500 * (f[..., 0] - f[..., 1]), 200 * (f[..., 1] - f[..., 2])], axis=-1)
    if not return_vjp:
        return ab

    def vjp(g_ab):
        g_f = np.stack([500 * g_ab[..., 0], -500 * g_ab[..., 0] + 200 * g_ab[..., 1],
                        -200 * g_ab[..., 1]], axis=-1)
        g_xyz = g_f * df / _WHITE_D65
        return (g_xyz @ _RGB_TO_XYZ) * dlin

    return ab, vjp


# ---------------------------------------------------------------------------
# SLAM losses
# ---------------------------------------------------------------------------

def depth_mask(render, frame):
    return (frame.depth > 0) & (render.opacity > DEPTH_MASK_OPACITY)


def depth_residual(render, frame, coverage=True):
    """Masked L1 depth term and its gradients ``(loss, d_depth, d_opacity)``.

    With ``coverage`` the rendered depth ``D̂ = Σ z_i α_i T_i`` is compared
    with ``Ô·D``, so the residual is ``Σ α_i T_i (z_i - D)``. Unlike
    ``D̂ - D`` it does not confuse slightly incomplete coverage with
    geometry that is too close.
    """
    mask = depth_mask(render, frame)
    if not coverage:
        loss, g = l1_image(render.depth, frame.depth, mask)
        return loss, g, np.zeros_like(g)
    loss, g = l1_image(render.depth, render.opacity * frame.depth, mask)
    return loss, g, -g * frame.depth


def mapping_loss(render, frame, weights):
    """``λc·|Ĉ-C| + λd·|D̂-D|_mask + λs·(1 - SSIM(Ĉ, C))``.

    Returns ``(loss, d_color, d_depth, d_opacity, terms)``.
    """
    if render.color.shape != frame.rgb.shape:
        raise ValueError("render and frame resolutions differ")
    l_c, g_c = l1_image(render.color, frame.rgb)
    l_d, g_d, g_o = depth_residual(render, frame, weights.depth_coverage)
    terms = {"color": l_c, "depth": l_d, "ssim": 0.0}
    loss = weights.lambda_color * l_c + weights.lambda_depth * l_d
    d_color = weights.lambda_color * g_c
    if weights.lambda_ssim > 0:
        s, g_s = ssim(render.color, frame.rgb)
        terms["ssim"] = s
        loss += weights.lambda_ssim * (1.0 - s)
        d_color = d_color - weights.lambda_ssim * g_s
    return loss, d_color, weights.lambda_depth * g_d, weights.lambda_depth * g_o, terms


def tracking_loss(render, frame, weights):
    """``λc·|ab(Ĉ) - ab(C)| + λd·|D̂-D|_mask``; color is left unmasked.

    Returns ``(loss, d_color, d_depth, d_opacity, terms)``.
    """
    if render.color.shape != frame.rgb.shape:
        raise ValueError("render and frame resolutions differ")
    ab_r, vjp = rgb_to_ab(render.color, return_vjp=True)
    ab_f = rgb_to_ab(frame.rgb)
    l_c, g_ab = l1_image(ab_r, ab_f)
    l_d, g_d, g_o = depth_residual(render, frame, weights.depth_coverage)
    loss = weights.lambda_color_track * l_c + weights.lambda_depth_track * l_d
    d_color = weights.lambda_color_track * vjp(g_ab)
    return (loss, d_color, weights.lambda_depth_track * g_d, weights.lambda_depth_track * g_o,
            {"color": l_c, "depth": l_d})


def regularization_loss(gmap, touched, pose, extended=False):
    """Importance-weighted L1 pull of scale, color and camera depth to anchors.

    Only Gaussians in ``touched`` contribute. With ``extended`` the same pull
    also acts on opacity, rotation and the camera-plane position, which
    otherwise let later frames rewrite what earlier ones fit. Returns
    ``(loss, grads)`` where ``grads`` maps parameter names to full-size
    gradient arrays.
    """
    idx = np.asarray(touched, dtype=np.int64).reshape(-1)
    grads = {
        "means": np.zeros_like(gmap.means),
        "log_scales": np.zeros_like(gmap.log_scales),
        "colors": np.zeros_like(gmap.colors),
    }
    if extended:
        grads["rotations"] = np.zeros_like(gmap.rotations)
        grads["opacity_logits"] = np.zeros_like(gmap.opacity_logits)
    if idx.size == 0:
        return 0.0, grads
    om_s, om_c, om_d = gmap.importance_weights(idx)
    s = np.exp(gmap.log_scales[idx])
    ds = s - gmap.s_star[idx]
    dc = gmap.colors[idx] - gmap.c_star[idx]
    p_cam = world_to_camera(pose, gmap.means[idx])
    dz = p_cam[:, 2] - gmap.z_star[idx]
    loss = float(np.sum(om_s * np.abs(ds)) + np.sum(om_c * np.abs(dc)) + np.sum(om_d * np.abs(dz)))
    grads["log_scales"][idx] = om_s * np.sign(ds) * s
    grads["colors"][idx] = om_c * np.sign(dc)
    # p_cam = Rᵀ(μ - t), so d p_cam_k / dμ = R[:, k]
    g_cam = np.zeros_like(p_cam)
    g_cam[:, 2] = om_d * np.sign(dz)
    if extended:
        om_o, om_r, om_xy = gmap.extra_importance_weights(idx)
        o = sigmoid(gmap.opacity_logits[idx])
        do = o - gmap.o_star[idx]
        dr = gmap.rotations[idx] - gmap.r_star[idx]
        dxy = p_cam[:, :2] - gmap.xy_star[idx]
        loss += float(np.sum(om_o * np.abs(do)) + np.sum(om_r * np.abs(dr)) + np.sum(om_xy * np.abs(dxy)))
        grads["opacity_logits"][idx] = om_o * np.sign(do) * o * (1 - o)
        grads["rotations"][idx] = om_r * np.sign(dr)
        g_cam[:, :2] = om_xy * np.sign(dxy)
    grads["means"][idx] = g_cam @ pose.rotation.T
    return loss, grads
