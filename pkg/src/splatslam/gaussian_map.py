"""Growable Gaussian map with importance accumulators and regularization anchors.

Parameters are stored in their optimization parametrization: log-scales,
unnormalized rotation quaternions, raw RGB colors and opacity logits. The
public accessors (:attr:`GaussianMap.scales`, :attr:`GaussianMap.opacities`)
return the exposed, post-activation values.

Checkpoint layout (little-endian, version 2)::

    magic    4 bytes   b"GSMP"
    version  uint32    2
    count    uint64    number of Gaussians
    records  count x RECORD_DTYPE

Each record holds mean[3], log_scale[3], rotation[4] (w, x, y, z),
color[3], opacity_logit, n_seen (int64), grad_sum_s[3], grad_sum_c[3],
grad_sum_d, s_star[3], c_star[3], z_star, then grad_sum_o, grad_sum_r[4],
grad_sum_xy[2], o_star, r_star[4], xy_star[2]; all floats are float64.
Version 1 files lack the trailing six fields and load with them zeroed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import world_to_camera

MAGIC = b"GSMP"
VERSION = 2

_V1_FIELDS = [
        ("mean", "<f8", 3),
        ("log_scale", "<f8", 3),
        ("rotation", "<f8", 4),
        ("color", "<f8", 3),
        ("opacity_logit", "<f8"),
        ("n_seen", "<i8"),
        ("grad_sum_s", "<f8", 3),
        ("grad_sum_c", "<f8", 3),
        ("grad_sum_d", "<f8"),
        ("s_star", "<f8", 3),
        ("c_star", "<f8", 3),
        ("z_star", "<f8"),
]
RECORD_DTYPE_V1 = np.dtype(_V1_FIELDS)
RECORD_DTYPE = np.dtype(_V1_FIELDS + [
    ("grad_sum_o", "<f8"),
    ("grad_sum_r", "<f8", 4),
    ("grad_sum_xy", "<f8", 2),
    ("o_star", "<f8"),
    ("r_star", "<f8", 4),
    ("xy_star", "<f8", 2),
])

# record field -> (attribute, trailing shape) for everything besides the parameters
_STATE = {
    "grad_sum_s": ("grad_sum_s", (3,)), "grad_sum_c": ("grad_sum_c", (3,)),
    "grad_sum_d": ("grad_sum_d", ()), "s_star": ("s_star", (3,)),
    "c_star": ("c_star", (3,)), "z_star": ("z_star", ()),
    "grad_sum_o": ("grad_sum_o", ()), "grad_sum_r": ("grad_sum_r", (4,)),
    "grad_sum_xy": ("grad_sum_xy", (2,)), "o_star": ("o_star", ()),
    "r_star": ("r_star", (4,)), "xy_star": ("xy_star", (2,)),
}


class InvalidParameterError(ValueError):
    pass


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian:
    """One splat primitive in exposed units."""

    mu: np.ndarray
    s: np.ndarray
    r: np.ndarray
    c: np.ndarray
    o: float

    def validate(self):
        mu, s, r, c = (np.asarray(v, dtype=np.float64) for v in (self.mu, self.s, self.r, self.c))
        if mu.shape != (3,) or s.shape != (3,) or r.shape != (4,) or c.shape != (3,):
            raise InvalidParameterError("Gaussian fields have wrong shapes")
        if not all(np.all(np.isfinite(v)) for v in (mu, s, r, c)) or not np.isfinite(self.o):
            raise InvalidParameterError("Gaussian has non-finite fields")
        if np.any(s <= 0):
            raise InvalidParameterError(f"scale must be positive, got {s}")
        if not 0.0 < self.o < 1.0:
            raise InvalidParameterError(f"opacity must lie in (0, 1), got {self.o}")
        if abs(np.linalg.norm(r) - 1.0) > 1e-6:
            raise InvalidParameterError("rotation must be a unit quaternion")
        if np.any(c < 0) or np.any(c > 1):
            raise InvalidParameterError("color must lie in [0, 1]")


class GaussianMap:
    """Structure-of-arrays store; all per-Gaussian arrays share the first axis."""

    PARAM_NAMES = ("means", "log_scales", "rotations", "colors", "opacity_logits")

    def __init__(self):
        self.means = np.zeros((0, 3))
        self.log_scales = np.zeros((0, 3))
        self.rotations = np.zeros((0, 4))
        self.colors = np.zeros((0, 3))
        self.opacity_logits = np.zeros(0)
        self.n_seen = np.zeros(0, dtype=np.int64)
        for attr, shape in _STATE.values():
            setattr(self, attr, np.zeros((0,) + shape))

    def __len__(self):
        return len(self.means)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def params(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def gaussian(self, i):
        return Gaussian(self.means[i].copy(), self.scales[i], self.rotations[i].copy(),
                        self.colors[i].copy(), float(self.opacities[i]))

    def copy(self):
        new = GaussianMap()
        for k, v in vars(self).items():
            setattr(new, k, v.copy())
        return new

    # -- growth -----------------------------------------------------------

    def insert(self, seeds):
        """Append ``seeds`` and return the ``range`` of their new indices."""
        seeds = list(seeds)
        start = len(self)
        if not seeds:
            return range(start, start)
        for g in seeds:
            g.validate()
        self.insert_arrays(
            np.array([g.mu for g in seeds], dtype=np.float64),
            np.array([g.s for g in seeds], dtype=np.float64),
            np.array([g.r for g in seeds], dtype=np.float64),
            np.array([g.c for g in seeds], dtype=np.float64),
            np.array([g.o for g in seeds], dtype=np.float64),
        )
        return range(start, len(self))

    def insert_arrays(self, means, scales, rotations, colors, opacities):
        """Bulk append in exposed units (no per-row validation beyond ranges)."""
        n = len(means)
        start = len(self)
        if n == 0:
            return range(start, start)
        if np.any(scales <= 0) or np.any((opacities <= 0) | (opacities >= 1)):
            raise InvalidParameterError("scale must be positive and opacity in (0, 1)")
        rotations = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
        self.means = np.concatenate([self.means, means])
        self.log_scales = np.concatenate([self.log_scales, np.log(scales)])
        self.rotations = np.concatenate([self.rotations, rotations])
        self.colors = np.concatenate([self.colors, np.clip(colors, 0.0, 1.0)])
        self.opacity_logits = np.concatenate([self.opacity_logits, logit(opacities)])
        self.n_seen = np.concatenate([self.n_seen, np.zeros(n, dtype=np.int64)])
        anchors = {"s_star": scales, "c_star": self.colors[start:], "o_star": opacities,
                   "r_star": rotations}
        for attr, shape in _STATE.values():
            new = anchors.get(attr, np.zeros((n,) + shape))
            setattr(self, attr, np.concatenate([getattr(self, attr), new]))
        return range(start, start + n)

    # -- importance weights ----------------------------------------------

    def update_importance(self, touched, grad_s, grad_c, grad_d, grad_o=None, grad_r=None,
                          grad_xy=None):
        """Accumulate absolute gradients for the ``touched`` Gaussians.

        ``grad_*`` are indexed like ``touched`` (one row per touched index).
        The opacity, rotation and camera-plane position gradients are optional.
        """
        idx = np.asarray(touched, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            return
        if idx.min() < 0 or idx.max() >= len(self):
            raise IndexError("touched index out of range")
        if len(np.unique(idx)) != len(idx):
            raise IndexError("touched indices must be unique")
        self.n_seen[idx] += 1
        self.grad_sum_s[idx] += np.abs(np.reshape(grad_s, (-1, 3)))
        self.grad_sum_c[idx] += np.abs(np.reshape(grad_c, (-1, 3)))
        self.grad_sum_d[idx] += np.abs(np.reshape(grad_d, -1))
        if grad_o is not None:
            self.grad_sum_o[idx] += np.abs(np.reshape(grad_o, -1))
        if grad_r is not None:
            self.grad_sum_r[idx] += np.abs(np.reshape(grad_r, (-1, 4)))
        if grad_xy is not None:
            self.grad_sum_xy[idx] += np.abs(np.reshape(grad_xy, (-1, 2)))

    def _mean_grad(self, sums, sel):
        n = self.n_seen[sel]
        denom = np.maximum(n, 1).astype(np.float64)
        if sums.ndim == 2:
            return np.where((n > 0)[:, None], sums[sel] / denom[:, None], 0.0)
        return np.where(n > 0, sums[sel] / denom, 0.0)

    def importance_weights(self, idx=None):
        """``(Ω^s, Ω^c, Ω^d)`` as accumulated-gradient means; zero when never seen."""
        sel = slice(None) if idx is None else idx
        return tuple(self._mean_grad(a, sel) for a in (self.grad_sum_s, self.grad_sum_c, self.grad_sum_d))

    def extra_importance_weights(self, idx=None):
        """``(Ω^o, Ω^r, Ω^xy)`` for opacity, rotation and camera-plane position."""
        sel = slice(None) if idx is None else idx
        return tuple(self._mean_grad(a, sel) for a in (self.grad_sum_o, self.grad_sum_r, self.grad_sum_xy))

    def snapshot_anchors(self, pose):
        """Freeze the current exposed values and camera-space position as anchors."""
        self.s_star = self.scales.copy()
        self.c_star = self.colors.copy()
        self.o_star = self.opacities.copy()
        self.r_star = self.rotations.copy()
        p_cam = world_to_camera(pose, self.means) if len(self) else np.zeros((0, 3))
        self.z_star = p_cam[:, 2].copy()
        self.xy_star = p_cam[:, :2].copy()

    # -- persistence -------------------------------------------------------

    def to_records(self):
        rec = np.zeros(len(self), dtype=RECORD_DTYPE)
        rec["mean"] = self.means
        rec["log_scale"] = self.log_scales
        rec["rotation"] = self.rotations
        rec["color"] = self.colors
        rec["opacity_logit"] = self.opacity_logits
        rec["n_seen"] = self.n_seen
        for name, (attr, _) in _STATE.items():
            rec[name] = getattr(self, attr)
        return rec

    @classmethod
    def from_records(cls, rec):
        m = cls()
        m.means = rec["mean"].astype(np.float64).reshape(-1, 3)
        m.log_scales = rec["log_scale"].astype(np.float64).reshape(-1, 3)
        m.rotations = rec["rotation"].astype(np.float64).reshape(-1, 4)
        m.colors = rec["color"].astype(np.float64).reshape(-1, 3)
        m.opacity_logits = rec["opacity_logit"].astype(np.float64).reshape(-1)
        m.n_seen = rec["n_seen"].astype(np.int64).reshape(-1)
        names = rec.dtype.names
        for name, (attr, shape) in _STATE.items():
            if name in names:
                value = rec[name].astype(np.float64).reshape((-1,) + shape)
            elif attr == "o_star":
                value = m.opacities.copy()
            elif attr == "r_star":
                value = m.rotations.copy()
            else:
                value = np.zeros((len(rec),) + shape)
            setattr(m, attr, value)
        return m

    def save(self, path):
        path = Path(path)
        with path.open("wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<IQ", VERSION, len(self)))
            f.write(self.to_records().tobytes())

    @classmethod
    def load(cls, path):
        data = Path(path).read_bytes()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not a Gaussian map checkpoint")
        version, count = struct.unpack_from("<IQ", data, 4)
        dtypes = {1: RECORD_DTYPE_V1, VERSION: RECORD_DTYPE}
        if version not in dtypes:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        rec = np.frombuffer(data, dtype=dtypes[version], count=count, offset=16)
        return cls.from_records(rec)

    def export_ply(self, path):
        """ASCII point cloud (positions + 8-bit colors) for external viewers."""
        rgb = np.round(self.colors * 255).astype(np.int64)
        lines = [
            "ply", "format ascii 1.0", f"element vertex {len(self)}",
            "property float x", "property float y", "property float z",
            "property uchar red", "property uchar green", "property uchar blue",
            "end_header",
        ]
        lines += [f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}"
                  for p, c in zip(self.means, rgb)]
        Path(path).write_text("\n".join(lines) + "\n")

    def state_hash(self):
        import hashlib

        return hashlib.sha256(self.to_records().tobytes()).hexdigest()


def insert_gaussians(gmap, seeds):
    return gmap.insert(seeds)


def update_importance(gmap, touched, grad_s, grad_c, grad_d, **extra):
    gmap.update_importance(touched, grad_s, grad_c, grad_d, **extra)


def importance_weights(gmap, idx=None):
    return gmap.importance_weights(idx)


def snapshot_anchors(gmap, pose):
    gmap.snapshot_anchors(pose)
