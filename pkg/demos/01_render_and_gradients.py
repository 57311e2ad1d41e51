"""Render a handful of Gaussians, then check the analytic backward pass.

Run with ``python demos/01_render_and_gradients.py``. Writes a few debug PNGs
into ``demo_out/`` and prints how closely the analytic pose gradient agrees
with central differences.
"""

from pathlib import Path

import numpy as np

from splatslam import CameraIntrinsics, CameraPose, GaussianMap, RenderSettings, render, render_backward
from splatslam.renderer import save_debug_images

rng = np.random.default_rng(0)
K = CameraIntrinsics(30.0, 30.0, 15.5, 15.5, 32, 32)

# Ten random blobs two to four meters in front of the camera.
gmap = GaussianMap()
n = 10
q = rng.normal(size=(n, 4))
gmap.insert_arrays(
    np.c_[rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(2, 4, n)],
    rng.uniform(0.05, 0.3, (n, 3)),
    q / np.linalg.norm(q, axis=1, keepdims=True),
    rng.uniform(0, 1, (n, 3)),
    rng.uniform(0.2, 0.9, n),
)
pose = CameraPose.identity()

out = render(gmap, pose, K)
print(f"coverage: mean opacity {out.opacity.mean():.3f}, max depth {out.depth.max():.2f} m")
Path("demo_out").mkdir(exist_ok=True)
save_debug_images(out, "demo_out/blobs")

# A toy loss: squared distance of the image to mid-gray. Its image-space
# gradient goes into render_backward, which returns parameter and pose gradients.
# Footprint truncation and early termination are switched off so that the
# finite differences see a smooth function.
smooth = RenderSettings(footprint_sigma=12.0, transmittance_cutoff=0.0)


def loss(p):
    return float(((render(gmap, p, K, smooth).color - 0.5) ** 2).sum())


out = render(gmap, pose, K, smooth)
g = render_backward(gmap, pose, K, 2 * (out.color - 0.5), np.zeros_like(out.depth),
                    want_pose_grads=True, forward=out, settings=smooth)

h = 1e-5
fd = np.zeros(3)
for i in range(3):
    dt = np.zeros(3)
    dt[i] = h
    fd[i] = (loss(CameraPose(pose.t + dt, pose.q)) - loss(CameraPose(pose.t - dt, pose.q))) / (2 * h)
print("d loss / d t  analytic:", np.round(g.d_t, 6))
print("              central :", np.round(fd, 6))
print(f"relative error {np.linalg.norm(g.d_t - fd) / np.linalg.norm(fd):.2e}")
