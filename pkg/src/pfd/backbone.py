"""Two-expert transformer (video expert + action expert) with joint masked attention.

Each depth level holds one block per expert. A block owns its own Q/K/V/O
projections, a SiLU feed-forward and two layer norms; the attention itself is
computed jointly over the concatenated token sequence and restricted by a
:class:`JointMask`. The student and teacher masks differ only in which video
columns the action rows may read.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, linear, layer_norm, masked_softmax, silu
from .blob import read_blob, write_blob


@dataclass(frozen=True)
class TokenLayout:
    frames: int
    video_tokens: int
    action_tokens: int
    d_model: int

    def __post_init__(self):
        if min(self.frames, self.video_tokens, self.action_tokens, self.d_model) <= 0:
            raise ValueError("token layout sizes must be positive")

    @property
    def n_video(self) -> int:
        return self.frames * self.video_tokens

    @property
    def n_tokens(self) -> int:
        return self.n_video + self.action_tokens


@dataclass(frozen=True)
class JointMask:
    permit: np.ndarray  # (n_tokens, n_tokens) bool, rows are queries
    kind: str
    layout: TokenLayout

    @property
    def video_rows(self) -> np.ndarray:
        n = self.layout.n_video
        return self.permit[:n, :n]

    @property
    def action_rows(self) -> np.ndarray:
        return self.permit[self.layout.n_video:, :]


def _video_rows(layout: TokenLayout) -> np.ndarray:
    # frame t reads frames 1..t; video never reads action tokens
    frame_of = np.repeat(np.arange(layout.frames), layout.video_tokens)
    rows = np.zeros((layout.n_video, layout.n_tokens), dtype=bool)
    rows[:, : layout.n_video] = frame_of[None, :] <= frame_of[:, None]
    return rows


def _build_mask(layout: TokenLayout, visible_frames: int, kind: str) -> JointMask:
    permit = np.zeros((layout.n_tokens, layout.n_tokens), dtype=bool)
    permit[: layout.n_video] = _video_rows(layout)
    permit[layout.n_video:, : visible_frames * layout.video_tokens] = True
    permit[layout.n_video:, layout.n_video:] = True
    permit.flags.writeable = False
    return JointMask(permit, kind, layout)


def build_student_mask(layout: TokenLayout) -> JointMask:
    """Action rows read the current-frame video tokens and all action tokens."""
    return _build_mask(layout, 1, "student")


def build_teacher_mask(layout: TokenLayout) -> JointMask:
    """Action rows read every video token, future frames included."""
    return _build_mask(layout, layout.frames, "teacher")


@dataclass(frozen=True)
class BackboneConfig:
    frames: int = 4
    video_tokens: int = 2
    action_tokens: int = 8
    frame_dim: int = 16
    action_dim: int = 2
    d_model: int = 32
    depth: int = 4
    heads: int = 2
    ffn_mult: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.frame_dim % self.video_tokens:
            raise ValueError("frame_dim must split evenly into video tokens")
        if self.d_model % self.heads or self.d_model % 2:
            raise ValueError("d_model must be even and divisible by heads")

    @property
    def slice_dim(self) -> int:
        return self.frame_dim // self.video_tokens

    def layout(self, frames: int | None = None) -> TokenLayout:
        return TokenLayout(frames or self.frames, self.video_tokens, self.action_tokens, self.d_model)


def block_id(name: str) -> str:
    """Block owning a parameter: ``video.3``/``action.0`` for expert blocks,
    ``embed`` or ``heads`` otherwise."""
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] in ("video", "action") else parts[0]


class MoTParams:
    """Named parameter tensors of the backbone, grouped into blocks."""

    def __init__(self, config: BackboneConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def block_ids(self) -> list[str]:
        return list(dict.fromkeys(block_id(n) for n in self.tensors))

    def in_blocks(self, blocks) -> dict[str, Tensor]:
        blocks = set(blocks)
        return {n: t for n, t in self.tensors.items() if block_id(n) in blocks}

    def set_trainable(self, blocks) -> None:
        blocks = set(blocks)
        for n, t in self.tensors.items():
            t.requires_grad = block_id(n) in blocks

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def copy(self) -> MoTParams:
        return MoTParams(self.config, {n: Tensor(t.data.copy()) for n, t in self.tensors.items()})


def init_params(config: BackboneConfig, seed: int | None = None) -> MoTParams:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, f = config.d_model, config.d_model * config.ffn_mult
    resid_gain = 1.0 / math.sqrt(2 * config.depth)
    t: dict[str, Tensor] = {}

    def lin(name, n_in, n_out, gain=1.0):
        blk = ad.linear_init(n_in, n_out, rng, gain)
        t[f"{name}.w"], t[f"{name}.b"] = blk.weight, blk.bias

    def norm(name):
        t[f"{name}.g"], t[f"{name}.b"] = Tensor(np.ones(d)), Tensor(np.zeros(d))

    lin("embed.video_in", config.slice_dim, d)
    lin("embed.clean_in", config.slice_dim, d)
    lin("embed.action_in", config.action_dim, d)
    lin("embed.time_v", d, d)
    lin("embed.time_a", d, d)
    # factorized: slot position within a frame plus frame index
    t["embed.video_pos"] = Tensor(rng.normal(0, 0.1, (config.video_tokens, d)))
    t["embed.frame_pos"] = Tensor(rng.normal(0, 0.1, (config.frames, d)))
    t["embed.action_pos"] = Tensor(rng.normal(0, 0.1, (config.action_tokens, d)))
    for i in range(config.depth):
        for expert in ("video", "action"):
            p = f"{expert}.{i}"
            norm(f"{p}.ln1")
            for proj in ("q", "k", "v"):
                lin(f"{p}.{proj}", d, d)
            lin(f"{p}.o", d, d, resid_gain)
            norm(f"{p}.ln2")
            lin(f"{p}.ff1", d, f)
            lin(f"{p}.ff2", f, d, resid_gain)
    norm("heads.video_ln")
    norm("heads.action_ln")
    lin("heads.video_out", d, config.slice_dim, 0.5)
    lin("heads.action_out", d, config.action_dim, 0.5)
    return MoTParams(config, t)


def select_trainable(params: MoTParams, k_action: int, k_video: int) -> frozenset[str]:
    """The last ``k_action`` action-expert and last ``k_video`` video-expert blocks."""
    depth = params.config.depth
    if not (0 <= k_action <= depth and 0 <= k_video <= depth):
        raise ValueError(f"K values must lie in [0, {depth}], got K_a={k_action}, K_v={k_video}")
    return frozenset(
        [f"action.{i}" for i in range(depth - k_action, depth)]
        + [f"video.{i}" for i in range(depth - k_video, depth)]
    )


# ---------------------------------------------------------------- forward


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def _qkv(p: MoTParams, prefix: str, h: Tensor, heads: int):
    x = layer_norm(h, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
    return tuple(_split_heads(linear(x, p[f"{prefix}.{k}.w"], p[f"{prefix}.{k}.b"]), heads)
                 for k in ("q", "k", "v"))


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    return masked_softmax(scores, mask) @ v


def _finish_block(p: MoTParams, prefix: str, h: Tensor, attn: Tensor) -> Tensor:
    h = h + linear(_merge_heads(attn), p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])
    x = layer_norm(h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    x = linear(silu(linear(x, p[f"{prefix}.ff1.w"], p[f"{prefix}.ff1.b"])),
               p[f"{prefix}.ff2.w"], p[f"{prefix}.ff2.b"])
    return h + x


def _time_embed(p: MoTParams, name: str, tau, batch: int) -> Tensor:
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (batch,))
    emb = ad.sinusoidal_embed(tau, p.config.d_model)
    return linear(Tensor(emb), p[f"embed.{name}.w"], p[f"embed.{name}.b"]).reshape(batch, 1, -1)


@dataclass
class VideoStream:
    """Per-layer video keys/values plus the final video hidden state."""

    keys: list[Tensor]
    values: list[Tensor]
    hidden: Tensor
    frames: int


def _check_inputs(cfg: BackboneConfig, x: np.ndarray, a: np.ndarray, x1: np.ndarray):
    if x.ndim != 3 or x.shape[2] != cfg.frame_dim or not 1 <= x.shape[1] <= cfg.frames:
        raise ValueError(f"video input must be (B, <= {cfg.frames}, {cfg.frame_dim}), got {x.shape}")
    if a.shape[1:] != (cfg.action_tokens, cfg.action_dim) or a.shape[0] != x.shape[0]:
        raise ValueError(f"action input must be (B, {cfg.action_tokens}, {cfg.action_dim}), got {a.shape}")
    if x1.shape != (x.shape[0], cfg.frame_dim):
        raise ValueError(f"clean frame must be (B, {cfg.frame_dim}), got {x1.shape}")


def video_stream(p: MoTParams, x_noisy: np.ndarray, x1_clean: np.ndarray, tau_v,
                 mask: JointMask) -> VideoStream:
    cfg = p.config
    b, frames, _ = x_noisy.shape
    nv = frames * cfg.video_tokens
    slices = Tensor(x_noisy.reshape(b, nv, cfg.slice_dim))
    h = linear(slices, p["embed.video_in.w"], p["embed.video_in.b"])
    pos = (p["embed.video_pos"].reshape(1, cfg.video_tokens, -1)
           + p["embed.frame_pos"][:frames].reshape(frames, 1, -1))
    h = h + pos.reshape(nv, -1) + _time_embed(p, "time_v", tau_v, b)
    clean = linear(Tensor(x1_clean.reshape(b, cfg.video_tokens, cfg.slice_dim)),
                   p["embed.clean_in.w"], p["embed.clean_in.b"])
    if frames > 1:
        clean = ad.concat([clean, Tensor(np.zeros((b, nv - cfg.video_tokens, cfg.d_model)))], axis=1)
    h = h + clean
    keys, values = [], []
    rows = mask.video_rows
    for i in range(cfg.depth):
        q, k, v = _qkv(p, f"video.{i}", h, cfg.heads)
        keys.append(k)
        values.append(v)
        h = _finish_block(p, f"video.{i}", h, _attend(q, k, v, rows))
    return VideoStream(keys, values, h, frames)


def action_stream(p: MoTParams, vs: VideoStream, a_noisy: np.ndarray, tau_a,
                  mask: JointMask) -> Tensor:
    cfg = p.config
    b = a_noisy.shape[0]
    h = linear(Tensor(a_noisy), p["embed.action_in.w"], p["embed.action_in.b"])
    h = h + p["embed.action_pos"] + _time_embed(p, "time_a", tau_a, b)
    rows = mask.action_rows
    for i in range(cfg.depth):
        q, k, v = _qkv(p, f"action.{i}", h, cfg.heads)
        k_all = ad.concat([vs.keys[i], k], axis=2)
        v_all = ad.concat([vs.values[i], v], axis=2)
        h = _finish_block(p, f"action.{i}", h, _attend(q, k_all, v_all, rows))
    h = layer_norm(h, p["heads.action_ln.g"], p["heads.action_ln.b"])
    return linear(h, p["heads.action_out.w"], p["heads.action_out.b"])


def video_head(p: MoTParams, vs: VideoStream) -> Tensor:
    cfg = p.config
    h = layer_norm(vs.hidden, p["heads.video_ln.g"], p["heads.video_ln.b"])
    u = linear(h, p["heads.video_out.w"], p["heads.video_out.b"])
    return u.reshape(u.shape[0], vs.frames, cfg.frame_dim)


def _check_mask(cfg: BackboneConfig, mask: JointMask, frames: int) -> None:
    lay = mask.layout
    if (lay.frames, lay.video_tokens, lay.action_tokens) != (frames, cfg.video_tokens, cfg.action_tokens):
        raise ValueError(f"mask layout {lay} does not match {frames} frames of input")
    if mask.permit[: lay.n_video, lay.n_video:].any():
        raise ValueError("video rows may not read action tokens")


def mot_forward(p: MoTParams, x_noisy, a_noisy, x1_clean, tau_v, tau_a,
                mask: JointMask) -> tuple[Tensor, Tensor]:
    """Video velocity (B, frames, frame_dim) and action velocity (B, H, action_dim)."""
    x_noisy, a_noisy = np.asarray(x_noisy, dtype=np.float64), np.asarray(a_noisy, dtype=np.float64)
    x1_clean = np.asarray(x1_clean, dtype=np.float64)
    _check_inputs(p.config, x_noisy, a_noisy, x1_clean)
    _check_mask(p.config, mask, x_noisy.shape[1])
    vs = video_stream(p, x_noisy, x1_clean, tau_v, mask)
    return video_head(p, vs), action_stream(p, vs, a_noisy, tau_a, mask)


# ---------------------------------------------------------------- checkpoints

_MAGIC = "PFD-CHECKPOINT"


def save_checkpoint(path: str | Path, params: MoTParams, extra: dict[str, Tensor] | None = None,
                    meta: dict | None = None) -> None:
    arrays = {n: t.data for n, t in params.tensors.items()}
    for n, t in (extra or {}).items():
        arrays[n] = t.data
    blocks = {n: block_id(n) for n in arrays}
    header = {"backbone": asdict(params.config), "blocks": blocks, **(meta or {})}
    write_blob(path, _MAGIC, header, arrays)


def load_checkpoint(path: str | Path) -> tuple[MoTParams, dict[str, Tensor], dict]:
    """Backbone params, any extra tensors (e.g. ``adapter.*``) and the header."""
    meta, arrays = read_blob(path, _MAGIC)
    cfg = replace(BackboneConfig(), **meta["backbone"])
    ref = init_params(cfg)
    tensors, extra = {}, {}
    for n, arr in arrays.items():
        (tensors if n in ref.tensors else extra)[n] = Tensor(arr)
    missing = set(ref.tensors) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks backbone tensors: {sorted(missing)[:3]}")
    return MoTParams(cfg, tensors), extra, meta
