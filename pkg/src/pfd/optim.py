"""AdamW with global-norm clipping and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip: float = 1.0
    horizon: int = 2000


def cosine_lr(step: int, peak: float, horizon: int) -> float:
    """Learning rate at 0-based ``step``: ``peak`` at step 0, reaching 0 at ``horizon``."""
    frac = min(max(step, 0), horizon) / max(horizon, 1)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Rescale so the global norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class AdamWState:
    config: OptimizerConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)


def optimizer_step(state: AdamWState, params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   step: int) -> dict[str, float]:
    """Clip, then apply one decoupled-weight-decay Adam update in place.

    ``grads`` must be keyed by names present in ``params``; parameters without a
    gradient entry are left untouched. Returns the pre-clip norm and the lr used.
    """
    cfg = state.config
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)[:3]}")
    grads, norm = clip_by_global_norm(grads, cfg.clip)
    lr = cosine_lr(step, cfg.lr, cfg.horizon)
    for name, g in grads.items():
        p = params[name].data
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state.t[name] = 0
        m, v = state.m[name], state.v[name]
        state.t[name] += 1
        t = state.t[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        denom = np.sqrt(v / (1.0 - cfg.beta2 ** t)) + cfg.eps
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= (lr / (1.0 - cfg.beta1 ** t)) * m / denom
    return {"grad_norm": norm, "lr": lr}
