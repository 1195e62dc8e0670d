"""Current-only action-chunk denoising and the adapter latency benchmark."""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import MoTParams, action_stream, build_student_mask, video_stream
from .objective import AdapterParams, adapter_apply


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 10
    integrator: str = "euler"
    guidance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.integrator != "euler":
            raise ValueError("only the explicit Euler integrator is available")
        if self.guidance != 1.0:
            raise ValueError("guidance scale must be 1.0; unconditional branches are not built")


def make_velocity_fn(params: MoTParams, phi: AdapterParams | None, x1_clean: np.ndarray):
    """Velocity field over (noisy chunk, tau_a) conditioned on the current frame only.

    The sequence holds just the frame-1 video tokens at tau_v = 1, so the video
    stream is computed once and reused for every denoising step.
    """
    x1 = np.asarray(x1_clean, dtype=np.float64)
    layout = params.config.layout(frames=1)
    mask = build_student_mask(layout)
    with ad.no_grad():
        vs = video_stream(params, x1[:, None, :], x1, 1.0, mask)

    def velocity(a_noisy: np.ndarray, tau_a: float) -> np.ndarray:
        with ad.no_grad():
            v = action_stream(params, vs, a_noisy, tau_a, mask)
            if phi is not None:
                v = adapter_apply(phi, v, tau_a)[1]
        return v.data

    return velocity


def euler_integrate(velocity, a0: np.ndarray, num_steps: int) -> np.ndarray:
    """Integrate from tau = 0 to 1 with uniform steps."""
    a = a0
    dt = 1.0 / num_steps
    for i in range(num_steps):
        a = a + dt * velocity(a, i * dt)
    return a


def denoise_chunk(params: MoTParams, phi: AdapterParams | None, x1_clean: np.ndarray,
                  cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample action chunks (B, H, action_dim) for current frames ``x1_clean`` (B, frame_dim).

    Passing ``phi=None`` bypasses the adapter (the uncorrected student).
    """
    x1 = np.atleast_2d(np.asarray(x1_clean, dtype=np.float64))
    c = params.config
    a0 = rng.normal(size=(x1.shape[0], c.action_tokens, c.action_dim))
    return euler_integrate(make_velocity_fn(params, phi, x1), a0, cfg.num_steps)


@dataclass
class LatencyReport:
    baseline_ms: list[float]
    corrected_ms: list[float]
    warmup: int
    trials: int
    num_steps: int
    notes: dict = field(default_factory=dict)

    @property
    def baseline_mean(self) -> float:
        return float(np.mean(self.baseline_ms))

    @property
    def corrected_mean(self) -> float:
        return float(np.mean(self.corrected_ms))

    @property
    def overhead_fraction(self) -> float:
        return (self.corrected_mean - self.baseline_mean) / self.baseline_mean

    def to_text(self) -> str:
        lines = [
            "[latency]",
            f"warmup = {self.warmup}",
            f"trials = {self.trials}",
            f"num_steps = {self.num_steps}",
            f"baseline_mean_ms = {self.baseline_mean:.4f}",
            f"corrected_mean_ms = {self.corrected_mean:.4f}",
            f"overhead_ms = {self.corrected_mean - self.baseline_mean:.4f}",
            f"overhead_fraction = {self.overhead_fraction:.6f}",
            "",
            "[trials]",
        ]
        for i, (b, c) in enumerate(zip(self.baseline_ms, self.corrected_ms)):
            lines.append(f"trial_{i:02d} = baseline {b:.4f} ms, corrected {c:.4f} ms")
        return "\n".join(lines) + "\n"


def measure_latency(params: MoTParams, phi: AdapterParams | None, x1_clean: np.ndarray,
                    warmup: int = 5, trials: int = 20, cfg: SamplerConfig | None = None,
                    corrected_uses_adapter: bool = True) -> LatencyReport:
    """Per-chunk wall time with the adapter bypassed vs applied.

    Both arms run in every trial, with the order swapped on alternate trials so
    drift and first-run effects hit both equally; the collector is paused while
    timing. Setting ``corrected_uses_adapter=False``
    bypasses the adapter in both arms.
    """
    if trials < 1 or warmup < 0:
        raise ValueError("need trials >= 1 and warmup >= 0")
    cfg = cfg or SamplerConfig()
    x1 = np.atleast_2d(np.asarray(x1_clean, dtype=np.float64))
    arm_phi = phi if corrected_uses_adapter else None
    base, corr = [], []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(warmup + trials):
            arms = ((None, base), (arm_phi, corr))
            for arm, store in (arms if i % 2 == 0 else arms[::-1]):
                rng = np.random.default_rng([cfg.seed, i])
                t0 = time.perf_counter()
                denoise_chunk(params, arm, x1, cfg, rng)
                dt = (time.perf_counter() - t0) * 1e3
                if i >= warmup:
                    store.append(dt)
            gc.collect()
    finally:
        if gc_was_enabled:
            gc.enable()
    return LatencyReport(base, corr, warmup, trials, cfg.num_steps)
