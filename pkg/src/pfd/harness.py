"""Baseline training, the probe suite and report emission.

Every seed trains one baseline (all blocks, no teacher, no adapter). Each
probe configuration then starts from a copy of that baseline and runs the same
number of steps at the same batch size, so only the ingredient a probe
removes differs between rows.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import MoTParams, init_params, save_checkpoint
from .config import ExperimentConfig, dump_config
from .flow import WeightSchedule
from .objective import (
    AdapterParams,
    LossWeights,
    RegimeConfig,
    TrainState,
    configure_trainable,
    init_adapter,
    train_step,
)
from .optim import AdamWState
from .sampler import denoise_chunk
from .world import Dataset, TrajectoryBatch, load_dataset, make_dataset, success_metric

log = logging.getLogger(__name__)

LOG_KEYS = ("step", "L_video", "L_gt", "L_res", "L_teacher", "total", "max_abs_r",
            "max_abs_delta", "grad_norm", "lr", "student_fm", "teacher_fm", "teacher")


def derive_rng(*parts) -> np.random.Generator:
    """Generator seeded from a tuple of ints and strings (strings hashed by crc32)."""
    key = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(key)


def action_scale(horizon: int) -> float:
    """Actions are multiplied by this before flow matching so each step has unit length."""
    return float(horizon)


def scale_actions(batch: TrajectoryBatch, scale: float) -> TrajectoryBatch:
    return TrajectoryBatch(batch.frames, batch.actions * scale, batch.goals)


# ---------------------------------------------------------------- configurations


@dataclass(frozen=True)
class ProbeSpec:
    name: str
    teacher: str  # "true", "shuffled" or "off"
    adapter: bool
    regime: RegimeConfig
    width_mult: int = 1


def probe_spec(name: str, cfg: ExperimentConfig) -> ProbeSpec:
    r = cfg.regime
    if name == "baseline":
        return ProbeSpec(name, "off", False, RegimeConfig("full"))
    if name == "pfd":
        return ProbeSpec(name, "true", True, r)
    if name == "pure-finetune":
        return ProbeSpec(name, "off", False, r)
    if name == "shuffled-future":
        return ProbeSpec(name, "shuffled", True, r)
    if name == "budget-realloc":
        return ProbeSpec(name, "true", True, replace(r, k_video=r.k_video // 2), width_mult=2)
    if name == "adapter-only":
        return ProbeSpec(name, "true", True, RegimeConfig("adapter-only"))
    if name == "half-depth":
        return ProbeSpec(name, "true", True, replace(r, k_action=r.k_action // 2, k_video=r.k_video // 2))
    raise ValueError(f"unknown configuration {name!r}")


# ---------------------------------------------------------------- results


@dataclass
class ProbeResult:
    name: str
    seeds: list[int]
    eval_mse: list[float]
    success_rate: list[float]
    teacher: str
    steps: list[int] = field(default_factory=list)
    # per seed, per window of ``trace_window`` steps: mean student/teacher flow
    # loss on the training batch and mean max|r|
    trace: list[dict[str, list[float]]] = field(default_factory=list)

    def __post_init__(self):
        if not len(self.seeds) == len(self.eval_mse) == len(self.success_rate):
            raise ValueError("per-seed lists must have equal length")

    @property
    def mse_mean(self) -> float:
        return float(np.mean(self.eval_mse))

    @property
    def mse_sd(self) -> float:
        return float(np.std(self.eval_mse, ddof=1)) if len(self.eval_mse) > 1 else 0.0

    @property
    def success_mean(self) -> float:
        return float(np.mean(self.success_rate))

    @property
    def success_sd(self) -> float:
        return float(np.std(self.success_rate, ddof=1)) if len(self.success_rate) > 1 else 0.0


def pooled_sd(a: ProbeResult, b: ProbeResult) -> float:
    return math.sqrt((a.mse_sd ** 2 + b.mse_sd ** 2) / 2.0)


# ---------------------------------------------------------------- training


def windowed_trace(records: list[dict], window: int) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {"end_step": [], "student_fm": [], "teacher_fm": [], "max_abs_r": []}
    for start in range(0, len(records), window):
        chunk = records[start:start + window]
        out["end_step"].append(chunk[-1]["step"] + 1)
        for k in ("student_fm", "teacher_fm", "max_abs_r"):
            out[k].append(float(np.mean([r[k] for r in chunk])))
    return out


def write_log(path: Path, records: list[dict]) -> None:
    """One ``key=value`` line per optimizer step."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(" ".join(f"{k}={r[k]!r}" if isinstance(r[k], float) else f"{k}={r[k]}"
                              for k in LOG_KEYS) + "\n")


def read_log(path: Path) -> list[dict]:
    records = []
    for line in Path(path).read_text().splitlines():
        rec = {}
        for item in line.split():
            k, v = item.split("=", 1)
            rec[k] = v if k == "teacher" else (int(v) if k == "step" else float(v))
        records.append(rec)
    return records


def train(params: MoTParams, phi: AdapterParams | None, spec: ProbeSpec, cfg: ExperimentConfig,
          data: TrajectoryBatch, rng: np.random.Generator, lr: float,
          weights: LossWeights | None = None) -> TrainState:
    """Run ``cfg.run.steps`` optimizer steps of one configuration in place."""
    configure_trainable(params, phi, spec.regime)
    optim = replace(cfg.optim, lr=lr, horizon=cfg.run.steps)
    state = TrainState(params, phi, AdamWState(optim))
    weights = weights or cfg.loss
    sched = WeightSchedule()
    for _ in range(cfg.run.steps):
        idx = rng.integers(len(data), size=cfg.run.batch)
        try:
            train_step(state, data.subset(idx), weights, sched, rng, spec.teacher)
        except FloatingPointError:
            log.error("%s: non-finite loss, last records: %s", spec.name, state.log[-3:])
            raise
    return state


def evaluate(params: MoTParams, phi: AdapterParams | None, data: TrajectoryBatch,
             cfg: ExperimentConfig, world, rng: np.random.Generator) -> tuple[float, float]:
    """Mean chunk MSE and success rate of sampled chunks on ``data`` (raw action units)."""
    a_hat = denoise_chunk(params, phi, data.frames[:, 0], cfg.sampler, rng)
    a_hat = a_hat / action_scale(world.horizon)
    success, err = success_metric(a_hat, data.actions, world.goal_positions()[data.goals],
                                  cfg.run.radius)
    return float(err.mean()), float(success.mean())


def seed_dataset(cfg: ExperimentConfig, seed: int, dataset: Dataset | None = None) -> Dataset:
    if dataset is not None:
        return dataset
    world = replace(cfg.world, seed=seed)
    return make_dataset(world, cfg.run.dataset_size, derive_rng(seed, "data"))


@dataclass
class SeedRun:
    """Everything one seed produced: per-configuration params, adapters and logs."""

    seed: int
    dataset: Dataset
    params: dict[str, MoTParams] = field(default_factory=dict)
    adapters: dict[str, AdapterParams | None] = field(default_factory=dict)
    logs: dict[str, list[dict]] = field(default_factory=dict)
    metrics: dict[str, tuple[float, float]] = field(default_factory=dict)


def run_seed(cfg: ExperimentConfig, seed: int, configs, dataset: Dataset | None = None) -> SeedRun:
    """Baseline plus each requested configuration for one seed."""
    ds = seed_dataset(cfg, seed, dataset)
    scale = action_scale(ds.config.horizon)
    train_data = scale_actions(ds.train, scale)
    out = SeedRun(seed, ds)
    suite = cfg.run.seed

    base = init_params(replace(cfg.backbone, seed=seed))
    spec = probe_spec("baseline", cfg)
    no_teacher = replace(cfg.loss, res=0.0, teacher=0.0)
    state = train(base, None, spec, cfg, train_data, derive_rng(suite, "baseline", seed),
                  cfg.run.pretrain_lr, no_teacher)
    base.set_trainable(())
    out.params["baseline"], out.adapters["baseline"], out.logs["baseline"] = base, None, state.log
    out.metrics["baseline"] = evaluate(base, None, ds.eval, cfg, ds.config, derive_rng(seed, "eval"))
    log.info("seed %d baseline: mse %.5f success %.3f", seed, *out.metrics["baseline"])

    for name in configs:
        if name == "baseline":
            continue
        spec = probe_spec(name, cfg)
        params = base.copy()
        phi = None
        if spec.adapter:
            acfg = replace(cfg.adapter, width=cfg.adapter.width * spec.width_mult, seed=seed)
            phi = init_adapter(acfg)
        weights = cfg.loss if spec.teacher != "off" else no_teacher
        state = train(params, phi, spec, cfg, train_data, derive_rng(suite, name, seed),
                      cfg.optim.lr, weights)
        params.set_trainable(())
        if phi is not None:
            phi.set_trainable(False)
        out.params[name], out.adapters[name], out.logs[name] = params, phi, state.log
        out.metrics[name] = evaluate(params, phi, ds.eval, cfg, ds.config, derive_rng(seed, "eval"))
        log.info("seed %d %s: mse %.5f success %.3f", seed, name, *out.metrics[name])
    return out


def collect(cfg: ExperimentConfig, runs: list[SeedRun], configs) -> list[ProbeResult]:
    results = []
    for name in ("baseline", *[c for c in configs if c != "baseline"]):
        spec = probe_spec(name, cfg)
        results.append(ProbeResult(
            name=name,
            seeds=[r.seed for r in runs],
            eval_mse=[r.metrics[name][0] for r in runs],
            success_rate=[r.metrics[name][1] for r in runs],
            teacher=spec.teacher,
            steps=[len(r.logs[name]) for r in runs],
            trace=[windowed_trace(r.logs[name], cfg.run.trace_window) for r in runs],
        ))
    return results


def _save_seed(out: Path, run: SeedRun, cfg: ExperimentConfig, names) -> None:
    for name in names:
        tag = f"{name}_seed{run.seed}"
        write_log(out / f"log_{tag}.txt", run.logs[name])
        phi = run.adapters[name]
        meta = {"configuration": name, "seed": run.seed, "world": asdict(run.dataset.config),
                "action_scale": action_scale(run.dataset.config.horizon),
                "adapter": asdict(phi.config) if phi is not None else None}
        save_checkpoint(out / f"checkpoint_{tag}.bin", run.params[name],
                        phi.tensors if phi is not None else None, meta)


def run_training(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                 dataset: Dataset | None = None) -> ProbeResult:
    """Train ``cfg.run.configuration`` (on top of its baseline) for every seed."""
    name = cfg.run.configuration
    runs = [run_seed(cfg, s, [name], dataset) for s in cfg.seeds]
    result = collect(cfg, runs, [name])[-1]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg))
        for run in runs:
            _save_seed(out, run, cfg, [name])
        write_results_csv(out / "results.csv", [result])
        from .report import plot_training_curves

        plot_training_curves({f"{name} seed {r.seed}": r.logs[name] for r in runs},
                             out / "training_curves.png")
    return result


def run_probe_suite(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                    dataset: Dataset | None = None) -> list[ProbeResult]:
    configs = list(cfg.run.probes)
    runs = []
    for s in cfg.seeds:
        run = run_seed(cfg, s, configs, dataset)
        runs.append(run)
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            for name in run.logs:
                write_log(out / f"log_{name}_seed{s}.txt", run.logs[name])
    results = collect(cfg, runs, configs)
    if out_dir is not None:
        (Path(out_dir) / "config.ini").write_text(dump_config(cfg))
        emit_report(results, out_dir)
    return results


# ---------------------------------------------------------------- report


@dataclass
class Verdict:
    key: str
    passed: bool | None  # None when the needed rows are missing
    detail: str

    def line(self) -> str:
        tag = {True: "PASS", False: "FAIL", None: "SKIP"}[self.passed]
        return f"{self.key} = {tag}  # {self.detail}"


def teacher_beats_student(result: ProbeResult, after_step: int = 100) -> tuple[bool, str]:
    """Teacher flow loss below student flow loss in every logged window, and max|r| > 0
    in every window ending after ``after_step``."""
    ok_loss, ok_r, worst = True, True, -math.inf
    for tr in result.trace:
        gap = np.asarray(tr["teacher_fm"]) - np.asarray(tr["student_fm"])
        worst = max(worst, float(gap.max()))
        ok_loss &= bool(np.all(gap < 0))
        late = np.asarray(tr["end_step"]) > after_step
        ok_r &= bool(np.all(np.asarray(tr["max_abs_r"])[late] > 0))
    return ok_loss and ok_r, f"max window (teacher - student) flow loss {worst:.4g}, max|r|>0: {ok_r}"


def verdicts(results: list[ProbeResult]) -> list[Verdict]:
    by = {r.name: r for r in results}
    out = []

    def need(*names):
        return all(n in by for n in names)

    if need("baseline", "pfd"):
        b, p = by["baseline"], by["pfd"]
        sd = pooled_sd(b, p)
        out.append(Verdict("pfd_beats_baseline", p.mse_mean < b.mse_mean - sd,
                           f"pfd {p.mse_mean:.5g} vs baseline {b.mse_mean:.5g}, pooled sd {sd:.3g}"))
    else:
        out.append(Verdict("pfd_beats_baseline", None, "rows missing"))
    if need("baseline", "shuffled-future"):
        b, s = by["baseline"], by["shuffled-future"]
        sd = pooled_sd(b, s)
        out.append(Verdict("shuffled_not_better_than_baseline", s.mse_mean >= b.mse_mean - sd,
                           f"shuffled {s.mse_mean:.5g} vs baseline {b.mse_mean:.5g}, pooled sd {sd:.3g}"))
    else:
        out.append(Verdict("shuffled_not_better_than_baseline", None, "rows missing"))
    if need("pfd", "pure-finetune"):
        p, f = by["pfd"], by["pure-finetune"]
        out.append(Verdict("pure_finetune_not_better_than_pfd", f.mse_mean >= p.mse_mean,
                           f"pure finetune {f.mse_mean:.5g} vs pfd {p.mse_mean:.5g}"))
    else:
        out.append(Verdict("pure_finetune_not_better_than_pfd", None, "rows missing"))
    if need("pfd"):
        ok, detail = teacher_beats_student(by["pfd"])
        out.append(Verdict("teacher_loss_below_student", ok, detail))
    else:
        out.append(Verdict("teacher_loss_below_student", None, "rows missing"))
    return out


def write_results_csv(path: str | Path, results: list[ProbeResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "seed", "eval_mse", "success_rate"])
        for r in results:
            for s, m, sr in zip(r.seeds, r.eval_mse, r.success_rate):
                w.writerow([r.name, s, repr(m), repr(sr)])


def read_results_csv(path: str | Path) -> list[ProbeResult]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["config"], []).append(row)
    return [ProbeResult(name, [int(r["seed"]) for r in rs], [float(r["eval_mse"]) for r in rs],
                        [float(r["success_rate"]) for r in rs], teacher="?")
            for name, rs in rows.items()]


def summary_text(results: list[ProbeResult]) -> str:
    lines = []
    for r in results:
        lines += [
            f"[{r.name}]",
            f"seeds = {', '.join(map(str, r.seeds))}",
            f"teacher_forward = {'no' if r.teacher == 'off' else 'yes'}",
            f"teacher_data = {r.teacher if r.teacher != 'off' else 'none'}",
            f"steps = {', '.join(map(str, r.steps))}",
            f"eval_mse_mean = {r.mse_mean!r}",
            f"eval_mse_sd = {r.mse_sd!r}",
            f"success_rate_mean = {r.success_mean!r}",
            f"success_rate_sd = {r.success_sd!r}",
        ]
        if r.teacher != "off" and r.trace:
            final = [tr["max_abs_r"][-1] for tr in r.trace]
            peak = [max(tr["max_abs_r"]) for tr in r.trace]
            lines.append(f"max_abs_r_final_window = {float(np.mean(final)):.6g}")
            lines.append(f"max_abs_r_peak_window = {float(np.max(peak)):.6g}")
        lines.append("")
    lines.append("[verdicts]")
    lines += [v.line() for v in verdicts(results)]
    return "\n".join(lines) + "\n"


def emit_report(results: list[ProbeResult], out_dir: str | Path) -> dict[str, Path]:
    """CSV of per-seed metrics, a text summary with verdicts, and figures."""
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "summary": out / "summary.txt",
             "figure": out / "probe_mse.png"}
    write_results_csv(paths["csv"], results)
    paths["summary"].write_text(summary_text(results))
    from .report import plot_probe_bars, plot_residual_trace

    plot_probe_bars(results, paths["figure"])
    if any(r.teacher != "off" and r.trace for r in results):
        paths["trace"] = out / "residual_trace.png"
        plot_residual_trace(results, paths["trace"])
    return paths


def load_data_file(path: str | Path | None) -> Dataset | None:
    return load_dataset(path) if path else None
