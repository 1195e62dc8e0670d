"""Experiment configuration: sectioned ``key = value`` files, presets, validation.

A config file looks like::

    [world]
    cue = 0.25

    [run]
    steps = 2000
    seeds = 5

Every key must belong to its section; anything unknown is an error. Values
not given fall back to the chosen preset.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .objective import AdapterConfig, LossWeights, RegimeConfig
from .optim import OptimizerConfig
from .sampler import SamplerConfig
from .world import WorldConfig

CONFIGURATIONS = (
    "baseline",
    "pfd",
    "pure-finetune",
    "shuffled-future",
    "budget-realloc",
    "adapter-only",
    "half-depth",
)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    seeds: int = 5
    steps: int = 2000
    batch: int = 32
    dataset_size: int = 4000
    pretrain_lr: float = 1e-3
    configuration: str = "pfd"
    probes: tuple[str, ...] = CONFIGURATIONS
    radius: float = 0.2
    trace_window: int = 100

    def __post_init__(self):
        if self.seeds < 1:
            raise ValueError("need at least one seed")
        if self.steps < 1 or self.batch < 2:
            raise ValueError("steps must be >= 1 and batch >= 2")
        if self.dataset_size < 20:
            raise ValueError("dataset_size must be >= 20")
        bad = [p for p in (self.configuration, *self.probes) if p not in CONFIGURATIONS]
        if bad:
            raise ValueError(f"unknown configuration(s) {bad}; choose from {CONFIGURATIONS}")


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        w, b = self.world, self.backbone
        tied = {
            "frames": (b.frames, w.frames),
            "frame_dim": (b.frame_dim, w.frame_dim),
            "action_tokens": (b.action_tokens, w.horizon),
            "action_dim": (b.action_dim, w.action_dim),
        }
        off = {k: v for k, v in tied.items() if v[0] != v[1]}
        if off:
            raise ValueError(f"backbone and world disagree on {off}")
        if self.adapter.action_dim != w.action_dim:
            raise ValueError("adapter action_dim must match the world")
        if self.regime.regime == "partial":
            for k in (self.regime.k_action, self.regime.k_video):
                if not 0 <= k <= b.depth:
                    raise ValueError(f"K={k} outside [0, {b.depth}]")

    @property
    def seeds(self) -> list[int]:
        return [self.run.seed + i for i in range(self.run.seeds)]

    def with_world(self, **kw) -> ExperimentConfig:
        return replace(self, world=replace(self.world, **kw))

    def with_run(self, **kw) -> ExperimentConfig:
        return replace(self, run=replace(self.run, **kw))


# Keys a config file may set, per section. Structural fields that are derived
# from the world (frame sizes, horizon) or from the run (seeds, horizon of the
# schedule) are deliberately absent.
_SECTIONS = {
    "world": ("frame_dim", "frames", "horizon", "goals", "cue", "reveal", "noise", "nuisance"),
    "backbone": ("video_tokens", "d_model", "depth", "heads", "ffn_mult"),
    "adapter": ("width", "tau_dim"),
    "regime": ("regime", "k_action", "k_video"),
    "loss": ("video", "gt", "res", "teacher"),
    "sampler": ("num_steps",),
    "optim": ("lr", "beta1", "beta2", "eps", "weight_decay", "clip"),
    "run": ("seed", "seeds", "steps", "batch", "dataset_size", "pretrain_lr",
            "configuration", "probes", "radius", "trace_window"),
}

PRESETS: dict[str, dict[str, dict[str, str]]] = {
    "desk": {},
    # Backbone-scale ratios: about 40% of blocks unfrozen, width-512 adapter,
    # the fine-tuning learning rate used on the larger benchmark.
    "paper-ratio": {
        "backbone": {"depth": "5"},
        "regime": {"k_action": "2", "k_video": "2"},
        "adapter": {"width": "512"},
        "optim": {"lr": "6e-5"},
    },
}


def _coerce(default, text: str):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(p.strip() for p in text.split(",") if p.strip())
    return text


def _apply(base: ExperimentConfig, sections: dict[str, dict[str, str]]) -> ExperimentConfig:
    updates = {}
    for section, values in sections.items():
        if section not in _SECTIONS:
            raise ValueError(f"unknown section [{section}]")
        sub = updates.get(section, getattr(base, section))
        allowed = _SECTIONS[section]
        defaults = {f.name: getattr(sub, f.name) for f in fields(sub)}
        changes = {}
        for key, text in values.items():
            if key not in allowed:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            try:
                changes[key] = _coerce(defaults[key], text)
            except ValueError as exc:
                raise ValueError(f"[{section}] {key}: {exc}") from None
        updates[section] = replace(sub, **changes)
    return _finish(base, updates)


def _finish(base: ExperimentConfig, updates: dict) -> ExperimentConfig:
    """Propagate world sizes into the backbone, adapter and schedule horizon."""
    w = updates.get("world", base.world)
    run = updates.get("run", base.run)
    updates["backbone"] = replace(updates.get("backbone", base.backbone), frames=w.frames,
                                  frame_dim=w.frame_dim, action_tokens=w.horizon,
                                  action_dim=w.action_dim)
    updates["adapter"] = replace(updates.get("adapter", base.adapter), action_dim=w.action_dim)
    updates["optim"] = replace(updates.get("optim", base.optim), horizon=run.steps)
    return replace(base, **updates)


def preset(name: str = "desk") -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return _apply(ExperimentConfig(), PRESETS[name])


def parse_config_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}") from None
    sections = {s: dict(parser.items(s)) for s in parser.sections()}
    return _apply(base or preset("desk"), sections)


def load_config(path: str | Path | None, preset_name: str = "desk", seed: int | None = None,
                steps: int | None = None) -> ExperimentConfig:
    """Preset, then the file (if any), then command-line overrides."""
    cfg = preset(preset_name)
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    overrides = {}
    if seed is not None:
        overrides["seed"] = str(seed)
    if steps is not None:
        overrides["steps"] = str(steps)
    if overrides:
        cfg = _apply(cfg, {"run": overrides})
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` in the file format (round-trips through :func:`parse_config_text`)."""
    out = []
    for section, keys in _SECTIONS.items():
        sub = getattr(cfg, section)
        out.append(f"[{section}]")
        for k in keys:
            v = getattr(sub, k)
            out.append(f"{k} = {', '.join(v) if isinstance(v, tuple) else v}")
        out.append("")
    return "\n".join(out)
