"""Linear-path flow matching: timestep sampling, corruption, velocity targets."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np


def _constant_one(tau):
    return np.ones_like(np.asarray(tau, dtype=np.float64))


@dataclass(frozen=True)
class WeightSchedule:
    """Per-timestep loss weights for the video and action streams."""

    video: Callable = field(default=_constant_one)
    action: Callable = field(default=_constant_one)


@dataclass
class FlowSample:
    tau_v: np.ndarray
    tau_a: np.ndarray
    eps_v: np.ndarray
    eps_a: np.ndarray
    x_noisy: np.ndarray
    a_noisy: np.ndarray
    u_target: np.ndarray
    v_target: np.ndarray


def sample_timesteps(rng: np.random.Generator, size=None) -> tuple:
    """Independent uniform draws of the video and action timesteps."""
    return rng.uniform(0.0, 1.0, size), rng.uniform(0.0, 1.0, size)


def _broadcast_tau(tau, x: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(tau < 0.0) or np.any(tau > 1.0):
        raise ValueError("timesteps must lie in [0, 1]")
    return tau.reshape(tau.shape + (1,) * (x.ndim - tau.ndim))


def corrupt(x, a, tau_v, tau_a, eps_v, eps_a) -> FlowSample:
    """Interpolate clean video/actions toward their noise draws.

    ``tau_v``/``tau_a`` are scalars or per-batch-element arrays; they broadcast
    over the trailing axes of ``x`` and ``a``.
    """
    x, a = np.asarray(x, dtype=np.float64), np.asarray(a, dtype=np.float64)
    if eps_v.shape != x.shape or eps_a.shape != a.shape:
        raise ValueError("noise shape must match the clean tensors")
    tv, ta = _broadcast_tau(tau_v, x), _broadcast_tau(tau_a, a)
    return FlowSample(
        tau_v=np.asarray(tau_v, dtype=np.float64),
        tau_a=np.asarray(tau_a, dtype=np.float64),
        eps_v=eps_v,
        eps_a=eps_a,
        x_noisy=(1.0 - tv) * eps_v + tv * x,
        a_noisy=(1.0 - ta) * eps_a + ta * a,
        u_target=x - eps_v,
        v_target=a - eps_a,
    )


def schedule_weights(sched: WeightSchedule, tau_v, tau_a) -> tuple[np.ndarray, np.ndarray]:
    w_v = np.asarray(sched.video(tau_v), dtype=np.float64)
    w_a = np.asarray(sched.action(tau_a), dtype=np.float64)
    if np.any(w_v <= 0) or np.any(w_a <= 0):
        raise ValueError("weight schedules must be strictly positive")
    return w_v, w_a
