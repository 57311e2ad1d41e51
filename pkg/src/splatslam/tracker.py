"""Render-and-compare camera tracking with a constant-velocity prior."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose
from .losses import LossWeights, tracking_loss
from .optim import Adam
from .renderer import DEFAULT_SETTINGS, render, render_backward


class TrackingError(Exception):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 200
    lr_t: float = 2e-3
    lr_q: float = 1e-3
    lr_decay: float = 0.02   # final learning rate as a fraction of the initial one
    patience: int = 25
    min_improvement: float = 1e-7


@dataclass
class TrackerState:
    prev_pose: CameraPose | None = None
    prev_prev_pose: CameraPose | None = None

    @property
    def velocity(self):
        if self.prev_pose is None or self.prev_prev_pose is None:
            return CameraPose.identity()
        return self.prev_prev_pose.inverse() @ self.prev_pose

    def push(self, pose):
        self.prev_prev_pose = self.prev_pose
        self.prev_pose = pose.copy()


@dataclass
class TrackingReport:
    frame_index: int
    initial_loss: float
    final_loss: float
    iterations: int
    converged: bool
    aborted: bool
    seconds: float


def predict_pose(state):
    """``prev ∘ (prev_prev⁻¹ ∘ prev)``, falling back to ``prev`` or identity."""
    if state.prev_pose is None:
        return CameraPose.identity()
    if state.prev_prev_pose is None:
        return state.prev_pose.copy()
    return state.prev_pose @ state.velocity


def track_frame(gmap, frame, state, K, config=None, *, init_pose=None, settings=DEFAULT_SETTINGS):
    """Estimate the pose of ``frame`` against the frozen map.

    Returns the lowest-loss pose seen over the iterations and a report.
    """
    if len(gmap) == 0:
        raise TrackingError("cannot track against an empty map")
    config = config or TrackerConfig()
    t0 = time.perf_counter()
    pose = (init_pose or predict_pose(state)).copy()
    params = {"t": pose.t.copy(), "q": pose.q.copy()}
    opt = Adam({"t": config.lr_t, "q": config.lr_q}, unit_norm=("q",))
    best_pose, best_loss = pose.copy(), np.inf
    history = []
    initial_loss = np.nan
    aborted = converged = False
    used = 0
    for it in range(config.iterations):
        used += 1
        cur = CameraPose(params["t"], params["q"])
        out = render(gmap, cur, K, settings)
        loss, d_color, d_depth, d_opac, _ = tracking_loss(out, frame, config.weights)
        if not np.isfinite(loss):
            aborted = True
            break
        if it == 0:
            initial_loss = loss
        if loss < best_loss:
            best_loss, best_pose = loss, cur
        history.append(best_loss)
        if len(history) > config.patience and history[-config.patience - 1] - best_loss < config.min_improvement:
            converged = True
            break
        g = render_backward(gmap, cur, K, d_color, d_depth, d_opac, want_pose_grads=True,
                            forward=out, settings=settings)
        if config.iterations > 1 and config.lr_decay != 1.0:
            frac = config.lr_decay ** (it / (config.iterations - 1))
            opt.lrs = {"t": config.lr_t * frac, "q": config.lr_q * frac}
        opt.step(params, {"t": g.d_t, "q": g.d_q})
    if not np.isfinite(best_loss):
        best_loss = initial_loss
    report = TrackingReport(frame.index, float(initial_loss), float(best_loss), used,
                            converged, aborted, time.perf_counter() - t0)
    return best_pose, report
