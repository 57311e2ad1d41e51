"""End-to-end SLAM on a short synthetic sequence, with and without the
error-guided densification and the anti-forgetting regularizer.

A 12-frame run takes a couple of minutes on one core. The full 50-frame
benchmark lives in ``tests/test_acceptance.py``.
"""

import dataclasses

from splatslam import RunConfig, evaluate, open_dataset, run_slam

base = RunConfig()
base = base.replace(dataset=dataclasses.replace(base.dataset, max_frames=12))
source = open_dataset(base)

variants = {
    "full": base,
    "holes only": base.replace(mapper=dataclasses.replace(base.mapper, error_densify=False)),
    "no regularizer": base.replace(mapper=dataclasses.replace(base.mapper, regularize=False)),
}
print(f"{'variant':>15s} {'gaussians':>10s} {'PSNR dB':>8s} {'ATE cm':>7s} {'seconds':>8s}")
for name, cfg in variants.items():
    result = run_slam(cfg, source)
    m = evaluate(result.gmap, result.trajectory, source, cfg.render)
    print(f"{name:>15s} {m['n_gaussians']:>10d} {m['psnr_db']:>8.2f} {m['ate_rmse_cm']:>7.3f} {result.seconds:>8.1f}")
