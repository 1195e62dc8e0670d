"""Privileged foresight distillation: teacher forward, residual adapter, losses, routing.

One training step runs the backbone twice on the same noisy inputs. The
student pass (action rows see only the current frame) stays on the tape; the
teacher pass (action rows see every frame) is computed off the tape and
detached. A token-wise adapter reads the live student velocity and is fit to
the detached teacher-minus-student residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Tape, linear, silu, stop_gradient
from .backbone import (
    MoTParams,
    action_stream,
    build_student_mask,
    build_teacher_mask,
    mot_forward,
    select_trainable,
    video_head,
    video_stream,
)
from .flow import FlowSample, WeightSchedule, corrupt, sample_timesteps, schedule_weights
from .optim import AdamWState, optimizer_step
from .world import TrajectoryBatch, shuffle_future

TEACHER_MODES = ("true", "shuffled", "off")


# ---------------------------------------------------------------- adapter


@dataclass(frozen=True)
class AdapterConfig:
    action_dim: int = 2
    width: int = 64
    tau_dim: int = 16
    seed: int = 0


class AdapterParams:
    """Input projection, two SiLU hidden layers and a zero-initialized output."""

    def __init__(self, config: AdapterConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def set_trainable(self, flag: bool = True) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}


def init_adapter(config: AdapterConfig, seed: int | None = None) -> AdapterParams:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    w, a = config.width, config.action_dim
    t: dict[str, Tensor] = {}
    for name, blk in (
        ("in", ad.linear_init(a, w, rng)),
        ("h1", ad.linear_init(w + config.tau_dim, w, rng)),
        ("h2", ad.linear_init(w, w, rng)),
        ("out", ad.linear_zero_init(w, a)),
    ):
        t[f"adapter.{name}.w"], t[f"adapter.{name}.b"] = blk.weight, blk.bias
    # h1 reads [z, tau embedding]; its weight is stored as a token part and a
    # timestep part so the timestep term is computed once per sample, not per token.
    h1 = t["adapter.h1.w"].data
    t["adapter.h1.w"], t["adapter.tau.w"] = Tensor(h1[:w].copy()), Tensor(h1[w:].copy())
    return AdapterParams(config, t)


def adapter_apply(phi: AdapterParams, v_base: Tensor, tau_a) -> tuple[Tensor, Tensor]:
    """Predicted correction and corrected velocity, applied independently per token.

    ``v_base`` must be the live student output; the timestep embedding is
    broadcast over tokens.
    """
    tau = np.broadcast_to(np.asarray(tau_a, dtype=np.float64), (v_base.shape[0],))
    temb = Tensor(ad.sinusoidal_embed(tau, phi.config.tau_dim)[:, None, :])
    z = linear(v_base, phi["adapter.in.w"], phi["adapter.in.b"])
    z = silu(linear(z, phi["adapter.h1.w"], phi["adapter.h1.b"]) + linear(temb, phi["adapter.tau.w"]))
    z = silu(linear(z, phi["adapter.h2.w"], phi["adapter.h2.b"]))
    delta = linear(z, phi["adapter.out.w"], phi["adapter.out.b"])
    return delta, v_base + delta


# ---------------------------------------------------------------- forwards


def student_forward(params: MoTParams, sample: FlowSample, x1_clean) -> Tensor:
    """Action velocity with action rows restricted to the current frame."""
    mask = build_student_mask(params.config.layout(sample.x_noisy.shape[1]))
    return mot_forward(params, sample.x_noisy, sample.a_noisy, x1_clean,
                       sample.tau_v, sample.tau_a, mask)[1]


def teacher_forward(params: MoTParams, sample: FlowSample, x1_clean) -> Tensor:
    """Same parameters and noisy inputs as the student, full-future mask, detached."""
    mask = build_teacher_mask(params.config.layout(sample.x_noisy.shape[1]))
    with ad.no_grad():
        v = mot_forward(params, sample.x_noisy, sample.a_noisy, x1_clean,
                        sample.tau_v, sample.tau_a, mask)[1]
    return stop_gradient(v)


def foresight_residual(v_teacher: Tensor, v_base: Tensor) -> Tensor:
    if v_teacher.shape != v_base.shape:
        raise ValueError(f"shape mismatch: {v_teacher.shape} vs {v_base.shape}")
    return Tensor(v_teacher.data - v_base.data)


# ---------------------------------------------------------------- losses


@dataclass(frozen=True)
class LossWeights:
    video: float = 1.0
    gt: float = 1.0
    res: float = 0.5
    teacher: float = 0.1

    def __post_init__(self):
        if min(self.video, self.gt, self.res, self.teacher) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    video: Tensor
    gt: Tensor
    res: Tensor
    teacher: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"L_video": self.video.item(), "L_gt": self.gt.item(), "L_res": self.res.item(),
                "L_teacher": self.teacher.item(), "total": self.total.item()}


@dataclass
class PfdOutputs:
    v_base: Tensor
    v_teacher: Tensor | None
    residual: Tensor | None
    delta: Tensor | None
    v_final: Tensor


def _per_element(w, ndim: int) -> np.ndarray | None:
    w = np.asarray(w, dtype=np.float64)
    if np.all(w == 1.0):
        return None
    return w.reshape(w.shape + (1,) * (ndim - w.ndim))


def _same_shape(*pairs) -> None:
    for a, b in pairs:
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def compute_losses(u_video, u_target, v_final, v_target, delta, residual, v_teacher,
                   weights: LossWeights, w_v=1.0, w_a=1.0) -> LossBreakdown:
    """The four loss terms (mean squared error over elements) and their weighted sum.

    ``delta``, ``residual`` and ``v_teacher`` may be None when no teacher runs;
    the teacher-derived terms are then exactly 0.
    """
    u_video, v_final = ad.as_tensor(u_video), ad.as_tensor(v_final)
    _same_shape((u_video, ad.as_tensor(u_target)), (v_final, ad.as_tensor(v_target)))
    l_video = ad.mse(u_video, u_target, _per_element(w_v, u_video.ndim))
    l_gt = ad.mse(v_final, v_target, _per_element(w_a, v_final.ndim))
    if v_teacher is None:
        l_res = l_teacher = Tensor(0.0)
    else:
        delta = ad.as_tensor(delta)
        _same_shape((delta, ad.as_tensor(residual)), (v_final, ad.as_tensor(v_teacher)))
        l_res = ad.mse(delta, residual)
        l_teacher = ad.mse(v_final, v_teacher)
    total = (l_video * weights.video + l_gt * weights.gt
             + l_res * weights.res + l_teacher * weights.teacher)
    return LossBreakdown(l_video, l_gt, l_res, l_teacher, total)


# ---------------------------------------------------------------- regimes


@dataclass(frozen=True)
class RegimeConfig:
    """Which backbone blocks update: none, the last K per expert, or all of them."""

    regime: str = "partial"
    k_action: int = 2
    k_video: int = 2

    def __post_init__(self):
        if self.regime not in ("adapter-only", "partial", "full"):
            raise ValueError(f"unknown regime {self.regime!r}")


def trainable_blocks(params: MoTParams, regime: RegimeConfig) -> frozenset[str]:
    if regime.regime == "adapter-only":
        return frozenset()
    if regime.regime == "full":
        return frozenset(params.block_ids)
    return select_trainable(params, regime.k_action, regime.k_video)


# ---------------------------------------------------------------- one step


def draw_flow_sample(batch: TrajectoryBatch, rng: np.random.Generator) -> FlowSample:
    n = len(batch)
    tau_v, tau_a = sample_timesteps(rng, n)
    eps_v = rng.normal(size=batch.frames.shape)
    eps_a = rng.normal(size=batch.actions.shape)
    return corrupt(batch.frames, batch.actions, tau_v, tau_a, eps_v, eps_a)


@dataclass
class StepGraph:
    tape: Tape
    outputs: PfdOutputs
    losses: LossBreakdown
    u_video: Tensor


def build_step_graph(params: MoTParams, phi: AdapterParams | None, batch: TrajectoryBatch,
                     sample: FlowSample, weights: LossWeights, sched: WeightSchedule,
                     teacher: str = "true", teacher_frames: np.ndarray | None = None,
                     teacher_override: tuple[Tensor, Tensor] | None = None) -> StepGraph:
    """Forward half of a training step, recorded on a fresh tape.

    ``teacher_frames`` replaces the clean frames seen by the teacher (used by
    the shuffled-future control). ``teacher_override`` substitutes given
    ``(v_teacher, r)`` tensors for the computed ones.
    """
    if teacher not in TEACHER_MODES:
        raise ValueError(f"teacher must be one of {TEACHER_MODES}")
    cfg = params.config
    layout = cfg.layout(sample.x_noisy.shape[1])
    m_s, m_t = build_student_mask(layout), build_teacher_mask(layout)
    x1 = batch.frames[:, 0]
    w_v, w_a = schedule_weights(sched, sample.tau_v, sample.tau_a)
    with Tape() as tape:
        vs = video_stream(params, sample.x_noisy, x1, sample.tau_v, m_s)
        u_video = video_head(params, vs)
        v_base = action_stream(params, vs, sample.a_noisy, sample.tau_a, m_s)
        v_teacher = r = None
        if teacher != "off":
            with ad.no_grad():
                if teacher_frames is None:
                    vs_t = vs
                else:
                    tf = corrupt(teacher_frames, batch.actions, sample.tau_v, sample.tau_a,
                                 sample.eps_v, sample.eps_a)
                    vs_t = video_stream(params, tf.x_noisy, x1, sample.tau_v, m_t)
                v_teacher = stop_gradient(action_stream(params, vs_t, sample.a_noisy, sample.tau_a, m_t))
            r = foresight_residual(v_teacher, stop_gradient(v_base))
            if teacher_override is not None:
                v_teacher, r = teacher_override
        delta = None
        if phi is not None:
            delta, v_final = adapter_apply(phi, v_base, sample.tau_a)
        else:
            v_final = v_base
        losses = compute_losses(u_video, sample.u_target, v_final, sample.v_target,
                                delta, r, v_teacher, weights, w_v, w_a)
    return StepGraph(tape, PfdOutputs(v_base, v_teacher, r, delta, v_final), losses, u_video)


def named_gradients(graph: StepGraph, params: MoTParams, phi: AdapterParams | None) -> dict[str, np.ndarray]:
    """Gradient of the total loss for every trainable parameter, keyed by name.

    Trainable parameters the loss does not reach get an all-zero entry.
    """
    named = dict(params.trainable())
    if phi is not None:
        named.update({n: t for n, t in phi.tensors.items() if t.requires_grad})
    if not graph.tape.produced(graph.losses.total):
        return {n: np.zeros_like(t.data) for n, t in named.items()}
    by_id = ad.backward(graph.losses.total, graph.tape)
    return {n: by_id[t.id] if t.id in by_id else np.zeros_like(t.data) for n, t in named.items()}


@dataclass
class TrainState:
    params: MoTParams
    adapter: AdapterParams | None
    optimizer: AdamWState
    step: int = 0
    log: list[dict] = field(default_factory=list)


def configure_trainable(params: MoTParams, phi: AdapterParams | None, regime: RegimeConfig) -> frozenset[str]:
    blocks = trainable_blocks(params, regime)
    params.set_trainable(blocks)
    if phi is not None:
        phi.set_trainable(True)
    return blocks


def train_step(state: TrainState, batch: TrajectoryBatch, weights: LossWeights,
               sched: WeightSchedule, rng: np.random.Generator, teacher: str = "true") -> dict:
    """One optimizer step; returns the structured log record for the step.

    Trainability must already be configured (see :func:`configure_trainable`).
    ``teacher`` selects the privileged pass: on true futures, on futures shuffled
    across the batch, or not run at all.
    """
    params, phi = state.params, state.adapter
    sample = draw_flow_sample(batch, rng)
    teacher_frames = shuffle_future(batch, rng).frames if teacher == "shuffled" else None
    graph = build_step_graph(params, phi, batch, sample, weights, sched, teacher, teacher_frames)
    record = {"step": state.step, **graph.losses.values(), "teacher": teacher}
    out = graph.outputs
    record["max_abs_r"] = float(np.abs(out.residual.data).max()) if out.residual is not None else 0.0
    record["max_abs_delta"] = float(np.abs(out.delta.data).max()) if out.delta is not None else 0.0
    record["student_fm"] = float(ad.mse(stop_gradient(out.v_base), sample.v_target).item())
    record["teacher_fm"] = (float(ad.mse(out.v_teacher, sample.v_target).item())
                            if out.v_teacher is not None else math.nan)
    if not math.isfinite(record["total"]):
        raise FloatingPointError(f"non-finite loss at step {state.step}: {record}")
    grads = named_gradients(graph, params, phi)
    named = dict(params.trainable())
    if phi is not None:
        named.update(phi.tensors)
    stats = optimizer_step(state.optimizer, named, grads, state.step)
    record.update(stats)
    state.step += 1
    state.log.append(record)
    return record
