"""Evaluation metrics: ATE-RMSE, PSNR, SSIM and depth L1."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 100.0


class EvaluationError(Exception):
    pass


def psnr(a, b, cap=PSNR_CAP):
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``cap`` when MSE is zero."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def image_metrics(rendered, reference):
    """Mean per-frame PSNR and SSIM over paired image lists."""
    from .losses import ssim

    rendered, reference = list(rendered), list(reference)
    if len(rendered) != len(reference) or not rendered:
        raise EvaluationError("image sets must be non-empty and paired")
    p = [psnr(a, b) for a, b in zip(rendered, reference)]
    s = [ssim(np.clip(a, 0, 1), b)[0] for a, b in zip(rendered, reference)]
    return float(np.mean(p)), float(np.mean(s))


def depth_l1(rendered, reference):
    """Mean ``|D̂ - D|`` in centimeters over pixels valid in both images."""
    total, count = 0.0, 0
    for a, b in zip(rendered, reference):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        valid = (a > 0) & (b > 0)
        total += float(np.abs(a[valid] - b[valid]).sum())
        count += int(valid.sum())
    if count == 0:
        raise EvaluationError("no pixel has valid depth in both sets")
    return 100.0 * total / count


def align_rigid(model, data):
    """Least-squares rotation ``R`` and translation ``t`` with ``model ≈ R data + t``.

    Umeyama's closed form with the scale fixed to one.
    """
    mu_m = model.mean(axis=0)
    mu_d = data.mean(axis=0)
    C = (model - mu_m).T @ (data - mu_d) / len(model)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    return R, mu_m - R @ mu_d


def ate_rmse(est, gt, align=True, max_dt=0.02):
    """Translational RMSE in centimeters between matched trajectory samples.

    Returns ``(rmse_cm, aligned_positions)``; with ``align`` the estimate is
    first rigidly aligned onto the ground truth.
    """
    from .datasets import associate

    pairs = associate(est.timestamps, gt.timestamps, max_dt)
    min_pairs = 3 if align else 1
    if len(pairs) < min_pairs:
        raise EvaluationError(f"need at least {min_pairs} matched poses, got {len(pairs)}")
    p_est = np.array([est.poses[i].t for i, _ in pairs])
    p_gt = np.array([gt.poses[j].t for _, j in pairs])
    if align:
        R, t = align_rigid(p_gt, p_est)
        p_est = p_est @ R.T + t
    err = np.linalg.norm(p_est - p_gt, axis=1)
    return 100.0 * float(np.sqrt(np.mean(err**2))), p_est
