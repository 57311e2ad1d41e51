"""Poses, quaternions, intrinsics and the 3D -> 2D Gaussian projection.

Conventions used across the package:

* quaternions are scalar-first ``(w, x, y, z)``;
* a :class:`CameraPose` stores the *world-from-camera* transform, so a point
  maps as ``p_world = R(q) @ p_cam + t`` and ``p_cam = R(q).T @ (p_world - t)``;
* pixel ``(u, v)`` has its center at integer coordinates, ``u`` along the
  image width and ``v`` along the height;
* the camera looks down ``+z`` with ``x`` right and ``y`` down.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

COV2D_FLOOR = 0.3
NEAR_PLANE = 0.01
FOOTPRINT_SIGMA = 3.0


class InvalidInputError(ValueError):
    """Raised for non-finite or otherwise malformed numeric input."""


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_mul(a, b):
    """Hamilton product ``a * b`` (broadcasts over leading axes)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_rotmat(q):
    """Rotation matrix of a unit quaternion.

    Accepts a single ``(4,)`` quaternion or a batch ``(..., 4)``. The input is
    normalized before use, so slightly denormalized optimizer iterates are
    fine; inputs further than 1e-6 from unit norm are still accepted by the
    batched path used inside the renderer.
    """
    q = np.asarray(q, dtype=np.float64)
    _check_finite("quaternion", q)
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_vjp(q, dR):
    """Pull a gradient ``dL/dR`` back to the *unnormalized* quaternion ``q``.

    The normalization Jacobian ``(I - q̂ q̂ᵀ) / |q|`` is included, so for a unit
    ``q`` the result is the gradient projected onto the sphere's tangent.
    """
    q = np.asarray(q, dtype=np.float64)
    dR = np.asarray(dR, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = lambda i, j: dR[..., i, j]  # noqa: E731
    gw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    gx = 2 * (
        y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
        + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2)
    )
    gy = 2 * (
        -2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
        - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2)
    )
    gz = 2 * (
        -2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
        + y * g(1, 2) + x * g(2, 0) + y * g(2, 1)
    )
    gq = np.stack([gw, gx, gy, gz], axis=-1)
    radial = np.sum(gq * qn, axis=-1, keepdims=True)
    return (gq - radial * qn) / norm


def rotmat_to_quat(R):
    """Scalar-first unit quaternion of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def axis_angle_to_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_angle(q1, q2):
    """Geodesic angle in radians between two rotations."""
    d = abs(float(np.dot(quat_normalize(q1), quat_normalize(q2))))
    return 2.0 * np.arccos(min(1.0, d))


# ---------------------------------------------------------------------------
# poses and intrinsics
# ---------------------------------------------------------------------------

@dataclass
class CameraPose:
    """World-from-camera rigid transform ``T = (t, q)``."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.t = np.array(self.t, dtype=np.float64).reshape(3)
        self.q = np.array(self.q, dtype=np.float64).reshape(4)
        _check_finite("translation", self.t)
        _check_finite("quaternion", self.q)
        n = np.linalg.norm(self.q)
        if n == 0:
            raise InvalidInputError("zero quaternion")
        self.q = self.q / n

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, 3], rotmat_to_quat(T[:3, :3]))

    @property
    def rotation(self):
        return quat_to_rotmat(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T

    def inverse(self):
        R = self.rotation
        return CameraPose(-R.T @ self.t, quat_conj(self.q))

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return CameraPose(self.rotation @ other.t + self.t, quat_mul(self.q, other.q))

    def __matmul__(self, other):
        return self.compose(other)

    def copy(self):
        return CameraPose(self.t.copy(), self.q.copy())


def world_to_camera(pose, p_world):
    """``R(q)ᵀ (p - t)``; accepts a single point or an ``(N, 3)`` array."""
    p = np.asarray(p_world, dtype=np.float64)
    _check_finite("point", p)
    return (p - pose.t) @ pose.rotation


def camera_to_world(pose, p_cam):
    p = np.asarray(p_cam, dtype=np.float64)
    _check_finite("point", p)
    return p @ pose.rotation.T + pose.t


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")

    def scaled(self, factor):
        """Intrinsics for an image downscaled by an integer ``factor``."""
        w, h = self.width // factor, self.height // factor
        return CameraIntrinsics(
            self.fx / factor, self.fy / factor,
            (self.cx + 0.5) / factor - 0.5, (self.cy + 0.5) / factor - 0.5,
            w, h, self.depth_scale,
        )

    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


# ---------------------------------------------------------------------------
# EWA projection
# ---------------------------------------------------------------------------

class Projected2DGaussian(NamedTuple):
    mu2d: np.ndarray
    cov2d: np.ndarray
    z: float
    radius_px: float


@dataclass
class ProjectionBatch:
    """Projection of every Gaussian of a map, plus what the backward pass needs."""

    mu2d: np.ndarray      # (N, 2)
    cov2d: np.ndarray     # (N, 2, 2), floor applied
    conic: np.ndarray     # (N, 3) -> inverse covariance entries (a, b, c)
    z: np.ndarray         # (N,)
    radius: np.ndarray    # (N,)
    visible: np.ndarray   # (N,) bool
    p_cam: np.ndarray
    J: np.ndarray         # (N, 2, 3)
    cov_cam: np.ndarray   # (N, 3, 3)
    cov_world: np.ndarray
    M: np.ndarray         # R_gauss @ diag(s), Σ_world = M Mᵀ
    R_g: np.ndarray
    scales: np.ndarray
    tx: np.ndarray        # clamped x, y used by the Jacobian
    ty: np.ndarray
    x_free: np.ndarray    # True where the clamp is inactive
    y_free: np.ndarray

    def take(self, idx):
        return ProjectionBatch(*(getattr(self, f.name)[idx] for f in dataclasses.fields(self)))


def project_gaussians(means, log_scales, rotations, pose, K, *, cov_floor=COV2D_FLOOR,
                      near=NEAR_PLANE, footprint_sigma=FOOTPRINT_SIGMA):
    """Project a batch of 3D Gaussians into ``pose``'s image plane.

    ``Σ_world = R diag(s)² Rᵀ`` and ``Σ' = J W Σ_world Wᵀ Jᵀ + floor·I`` with
    ``W`` the world-to-camera rotation and ``J`` the pinhole Jacobian at the
    Gaussian center. Gaussians that a conservative footprint bound already
    places behind the near plane or off-screen are marked invisible without
    computing their covariances.
    """
    means = np.asarray(means, dtype=np.float64)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    n = len(means)
    p_cam = (means - pose.t) @ pose.rotation
    z = p_cam[:, 2]
    cand = np.flatnonzero(_maybe_visible(p_cam, log_scales, K, near, cov_floor, footprint_sigma))
    if len(cand) == n:
        return _project(p_cam, log_scales, rotations, pose, K, cov_floor, near, footprint_sigma)
    sub = _project(p_cam[cand], log_scales[cand], np.asarray(rotations)[cand], pose, K,
                   cov_floor, near, footprint_sigma)
    full = ProjectionBatch(
        mu2d=np.zeros((n, 2)), cov2d=np.zeros((n, 2, 2)), conic=np.zeros((n, 3)), z=z.copy(),
        radius=np.zeros(n), visible=np.zeros(n, dtype=bool), p_cam=p_cam, J=np.zeros((n, 2, 3)),
        cov_cam=np.zeros((n, 3, 3)), cov_world=np.zeros((n, 3, 3)), M=np.zeros((n, 3, 3)),
        R_g=np.zeros((n, 3, 3)), scales=np.exp(log_scales), tx=np.zeros(n), ty=np.zeros(n),
        x_free=np.ones(n, dtype=bool), y_free=np.ones(n, dtype=bool),
    )
    for f in dataclasses.fields(full):
        if f.name not in ("p_cam", "z", "scales"):
            getattr(full, f.name)[cand] = getattr(sub, f.name)
    return full


def _maybe_visible(p_cam, log_scales, K, near, cov_floor, footprint_sigma):
    """Superset of the Gaussians :func:`_project` can mark visible.

    Uses ``sqrt(λmax(J Σ Jᵀ)) <= |J|_F · max(s)`` for the footprint radius.
    """
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    front = z > near
    zs = np.where(front, z, 1.0)
    lim_x = 1.3 * 0.5 * K.width / K.fx
    lim_y = 1.3 * 0.5 * K.height / K.fy
    tx = np.clip(x / zs, -lim_x, lim_x)
    ty = np.clip(y / zs, -lim_y, lim_y)
    jf2 = (K.fx**2 * (1 + tx**2) + K.fy**2 * (1 + ty**2)) / zs**2
    smax = np.exp(log_scales.max(axis=1))
    r = footprint_sigma * np.sqrt(jf2 * smax**2 + cov_floor) * 1.01 + 1.0
    u = K.fx * x / zs + K.cx
    v = K.fy * y / zs + K.cy
    return front & (u + r >= 0) & (u - r <= K.width - 1) & (v + r >= 0) & (v - r <= K.height - 1)


def _project(p_cam, log_scales, rotations, pose, K, cov_floor, near, footprint_sigma):
    W = pose.rotation.T
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)

    scales = np.exp(log_scales)
    R_g = quat_to_rotmat(rotations)
    M = R_g * scales[:, None, :]
    cov_world = M @ np.swapaxes(M, 1, 2)
    cov_cam = W @ cov_world @ W.T

    # Jacobian evaluated at the center clamped to 1.3x the field of view, so
    # Gaussians grazing the image plane off-screen do not explode.
    lim_x = 1.3 * 0.5 * K.width / K.fx
    lim_y = 1.3 * 0.5 * K.height / K.fy
    x_free = np.abs(x / zs) <= lim_x
    y_free = np.abs(y / zs) <= lim_y
    tx = np.where(x_free, x, np.clip(x / zs, -lim_x, lim_x) * zs)
    ty = np.where(y_free, y, np.clip(y / zs, -lim_y, lim_y) * zs)
    J = np.zeros((len(p_cam), 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * tx / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * ty / zs**2
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += cov_floor
    cov2d[:, 1, 1] += cov_floor

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    det = np.where(det <= 0, 1e-12, det)
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = footprint_sigma * np.sqrt(lam_max)

    mu2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)
    inside = (
        (mu2d[:, 0] + radius >= 0) & (mu2d[:, 0] - radius <= K.width - 1)
        & (mu2d[:, 1] + radius >= 0) & (mu2d[:, 1] - radius <= K.height - 1)
    )
    visible = (z > near) & inside & np.all(np.isfinite(mu2d), axis=1)
    return ProjectionBatch(mu2d, cov2d, conic, z, radius, visible, p_cam, J,
                           cov_cam, cov_world, M, R_g, scales, tx, ty, x_free, y_free)


def project_gaussian(mean, scale, rot, pose, K, **kwargs):
    """Project a single Gaussian; returns ``None`` when it is culled."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise InvalidInputError("scales must be positive")
    batch = project_gaussians(np.reshape(mean, (1, 3)), np.log(scale).reshape(1, 3),
                              np.reshape(rot, (1, 4)), pose, K, **kwargs)
    if not batch.visible[0]:
        return None
    return Projected2DGaussian(batch.mu2d[0], batch.cov2d[0], float(batch.z[0]),
                               float(batch.radius[0]))


def project_backward(proj, pose, K, rotations, d_mu2d, d_conic, d_z, want_pose_grads=False):
    """Chain 2D-level gradients back to 3D Gaussian parameters and the pose.

    ``d_conic`` holds derivatives w.r.t. the three distinct conic entries
    ``(a, b, c)`` as used in ``a dx² + 2 b dx dy + c dy²``. ``d_z`` is the
    gradient w.r.t. the camera depth that enters depth compositing.

    Returns ``(d_means, d_log_scales, d_rotations, d_pcam, d_t, d_q)``; the
    last two are ``None`` unless pose gradients are requested.
    """
    p = proj.p_cam
    x, y = p[:, 0], p[:, 1]
    z = np.where(proj.visible, p[:, 2], 1.0)
    fx, fy = K.fx, K.fy

    # conic = inverse(cov2d)  ->  dΣ' = -A G A
    A = np.empty((len(z), 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 1] = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    A[:, 1, 0] = A[:, 0, 1]
    G = np.empty_like(A)
    G[:, 0, 0], G[:, 1, 1] = d_conic[:, 0], d_conic[:, 2]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * d_conic[:, 1]
    d_cov2d = -A @ G @ A

    J = proj.J
    Jt = np.swapaxes(J, 1, 2)
    d_cov_cam = Jt @ d_cov2d @ J
    d_J = 2.0 * d_cov2d @ J @ proj.cov_cam

    Rc = pose.rotation
    W = Rc.T
    d_cov_world = W.T @ d_cov_cam @ W
    d_M = 2.0 * d_cov_world @ proj.M
    d_scales = np.einsum("nak,nak->nk", proj.R_g, d_M)
    d_log_scales = d_scales * proj.scales
    d_Rg = d_M * proj.scales[:, None, :]
    d_rot = quat_to_rotmat_vjp(rotations, d_Rg)

    tx, ty = proj.tx, proj.ty
    d_tx = -d_J[:, 0, 2] * fx / z**2
    d_ty = -d_J[:, 1, 2] * fy / z**2
    d_pcam = np.zeros_like(p)
    d_pcam[:, 0] = d_mu2d[:, 0] * fx / z + np.where(proj.x_free, d_tx, 0.0)
    d_pcam[:, 1] = d_mu2d[:, 1] * fy / z + np.where(proj.y_free, d_ty, 0.0)
    d_pcam[:, 2] = (
        -d_mu2d[:, 0] * fx * x / z**2 - d_mu2d[:, 1] * fy * y / z**2
        - d_J[:, 0, 0] * fx / z**2 + d_J[:, 0, 2] * 2 * fx * tx / z**3
        - d_J[:, 1, 1] * fy / z**2 + d_J[:, 1, 2] * 2 * fy * ty / z**3
        + np.where(proj.x_free, 0.0, d_tx * tx / z)
        + np.where(proj.y_free, 0.0, d_ty * ty / z)
        + d_z
    )
    d_means = d_pcam @ W

    d_t = d_q = None
    if want_pose_grads:
        d_t = -d_means.sum(axis=0)
        rel = proj.p_cam @ W  # = means - t
        Y = W @ proj.cov_world
        d_W = d_pcam.T @ rel + 2.0 * (
            d_cov_cam.transpose(1, 0, 2).reshape(3, -1) @ Y.reshape(-1, 3)
        )
        d_q = quat_to_rotmat_vjp(pose.q, d_W.T)
    return d_means, d_log_scales, d_rot, d_pcam, d_t, d_q
