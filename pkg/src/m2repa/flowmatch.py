"""Flow matching with per-frame timesteps, and Euler-integrated autoregressive rollout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import numcore as nc
from .numcore import Tensor

TIMESTEP_MODES = ("uniform-iid", "shared")


@dataclass
class FlowState:
    x_t: np.ndarray
    t_vec: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    v_target: np.ndarray

    def mixing_error(self) -> float:
        """Max deviation of x_t from t*x1 + (1-t)*x0, recomputed in float64."""
        t = _expand(self.t_vec.astype(np.float64), self.x1.ndim)
        ref = t * self.x1.astype(np.float64) + (1.0 - t) * self.x0.astype(np.float64)
        return float(np.abs(self.x_t.astype(np.float64) - ref).max())


def _expand(t: np.ndarray, ndim: int) -> np.ndarray:
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def interpolate(x1: np.ndarray, x0: np.ndarray, t_vec: np.ndarray) -> FlowState:
    """Noise each frame to its own timestep.

    ``x1`` and ``x0`` are ``[..., T, C, H, W]``; ``t_vec`` has the leading shape
    ``[..., T]``.
    """
    x1 = np.asarray(x1)
    x0 = np.asarray(x0)
    t_vec = np.asarray(t_vec)
    if x1.shape != x0.shape:
        raise ValueError(f"clean clip {x1.shape} and noise {x0.shape} differ in shape")
    if t_vec.shape != x1.shape[: t_vec.ndim] or x1.ndim - t_vec.ndim != 3:
        raise ValueError(f"timestep vector {t_vec.shape} does not match frames of {x1.shape}")
    if t_vec.size and (t_vec.min() < 0.0 or t_vec.max() > 1.0):
        raise ValueError("timesteps must lie in [0, 1]")
    t = _expand(t_vec.astype(np.float64), x1.ndim)
    x_t = (t * x1.astype(np.float64) + (1.0 - t) * x0.astype(np.float64)).astype(x1.dtype)
    return FlowState(x_t=x_t, t_vec=t_vec.astype(np.float32), x0=x0, x1=x1, v_target=x1 - x0)


def sample_timesteps(T: int, mode: str, rng: np.random.Generator, batch: int | None = None) -> np.ndarray:
    if T < 1:
        raise ValueError(f"need at least one frame, got T={T}")
    lead = () if batch is None else (batch,)
    if mode == "uniform-iid":
        t = rng.random(lead + (T,))
    elif mode == "shared":
        t = np.repeat(rng.random(lead + (1,)), T, axis=-1)
    else:
        raise ValueError(f"unknown timestep mode {mode!r}; expected one of {TIMESTEP_MODES}")
    return t.astype(np.float32)


def fm_loss(v_pred: Tensor, v_target) -> Tensor:
    """Mean squared error between predicted and target velocities."""
    target = v_target.data if isinstance(v_target, Tensor) else np.asarray(v_target)
    if tuple(v_pred.shape) != tuple(target.shape):
        raise ValueError(f"velocity shapes differ: predicted {v_pred.shape}, target {target.shape}")
    diff = v_pred - Tensor(target)
    return nc.mean(diff * diff)


def euler_step(x: np.ndarray, v: np.ndarray, dt: float) -> np.ndarray:
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if np.shape(x) != np.shape(v):
        raise ValueError(f"state {np.shape(x)} and velocity {np.shape(v)} differ in shape")
    return x + dt * v


class VelocityModel(Protocol):
    channels: int

    def velocity(self, x: np.ndarray, t: np.ndarray, cond: np.ndarray,
                 frame_index: np.ndarray) -> np.ndarray:
        """x: [1, T, C, h, w], t: [1, T], cond: [1, T, c]; returns [1, T, C, h, w]."""


def rollout(
    model: VelocityModel,
    context: np.ndarray,
    controls: np.ndarray,
    horizon: int,
    steps_per_frame: int = 8,
    window: int = 8,
    seed: int = 0,
    max_horizon: int | None = None,
) -> np.ndarray:
    """Generate ``horizon`` frames after ``context`` window by window.

    Each window holds the most recent ``N_ctx`` frames clean (t = 1) and
    integrates the remaining slots from noise (t = 0) to data (t = 1) with
    ``steps_per_frame`` uniform Euler steps. Returns ``[N_ctx + horizon, C, h, w]``
    whose first ``N_ctx`` frames are the context, untouched.
    """
    context = np.asarray(context)
    n_ctx = context.shape[0]
    if n_ctx < 1:
        raise ValueError("rollout needs at least one context frame")
    if horizon < 0:
        raise ValueError(f"horizon must be non-negative, got {horizon}")
    if max_horizon is not None and horizon > max_horizon:
        raise ValueError(f"horizon {horizon} exceeds configured maximum {max_horizon}")
    channels = getattr(model, "channels", context.shape[1])
    if context.shape[1] != channels:
        raise ValueError(f"context has {context.shape[1]} channels, model expects {channels}")
    if window <= n_ctx:
        raise ValueError(f"window {window} leaves no room after {n_ctx} context frames")
    if controls.shape[0] < n_ctx + horizon:
        raise ValueError(f"{controls.shape[0]} control rows for {n_ctx + horizon} frames")

    rng = np.random.default_rng(seed)
    frames = [f for f in context]
    dt = 1.0 / steps_per_frame
    made = 0
    while made < horizon:
        n_new = min(window - n_ctx, horizon - made)
        # absolute frame indices covered by this window
        idx = np.arange(made, made + n_ctx + n_new)
        ctx = np.stack(frames[-n_ctx:])
        noise = rng.standard_normal((n_new,) + context.shape[1:]).astype(context.dtype)
        x = np.concatenate([ctx, noise])[None]
        cond = controls[idx][None]
        t = np.concatenate([np.ones(n_ctx), np.zeros(n_new)]).astype(np.float32)
        for k in range(steps_per_frame):
            v = model.velocity(x, t[None], cond, idx)
            x[0, n_ctx:] = euler_step(x[0, n_ctx:], v[0, n_ctx:], dt)
            t[n_ctx:] = (k + 1) * dt
        frames.extend(x[0, n_ctx:])
        made += n_new
    out = np.stack(frames) if frames else context.copy()
    out[:n_ctx] = context
    return out
