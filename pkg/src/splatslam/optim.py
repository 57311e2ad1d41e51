"""Adaptive-moment optimizer over named parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam with one learning rate per parameter class.

    Parameters are updated in place. Non-finite gradient entries are skipped
    (their moments are left untouched) and tallied in :attr:`skipped`.
    Arrays named in ``unit_norm`` have their last axis renormalized after each
    step (quaternions); arrays named in ``clamp01`` are clipped to [0, 1].
    """

    def __init__(self, lrs, betas=(0.9, 0.999), eps=1e-8, unit_norm=(), clamp01=()):
        self.lrs = dict(lrs)
        self.unit_norm = tuple(unit_norm)
        self.clamp01 = tuple(clamp01)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = 0
        self.skipped = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            lr = self.lrs.get(name, 0.0)
            if lr == 0.0:
                continue
            p = params[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            if name not in self.m or self.m[name].shape != p.shape:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            ok = np.isfinite(g)
            if not ok.all():
                self.skipped += int((~ok).sum())
                g = np.where(ok, g, 0.0)
            m = np.where(ok, self.beta1 * self.m[name] + (1 - self.beta1) * g, self.m[name])
            v = np.where(ok, self.beta2 * self.v[name] + (1 - self.beta2) * g * g, self.v[name])
            self.m[name], self.v[name] = m, v
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p -= np.where(ok, update, 0.0)
            if name in self.unit_norm:
                p /= np.linalg.norm(p, axis=-1, keepdims=True)
            if name in self.clamp01:
                np.clip(p, 0.0, 1.0, out=p)


def adam_step(state, params, grads):
    """Functional spelling of :meth:`Adam.step`; returns ``params``."""
    state.step(params, grads)
    return params
