"""Command-line entry point: ``pfd gen-data | train | probe | bench-latency``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backbone import load_checkpoint
from .config import PRESETS, load_config
from .harness import derive_rng, load_data_file, run_probe_suite, run_training, summary_text
from .objective import AdapterConfig, AdapterParams, init_adapter
from .sampler import SamplerConfig, measure_latency
from .world import WorldConfig, make_dataset, save_dataset


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", type=Path, help="sectioned key = value file")
    p.add_argument("--out", type=Path, required=True, help=out_help)
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--steps", type=int, help="override [run] steps")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="write a synthetic dataset file"), "dataset file")
    for name, hlp in (("train", "train one configuration"), ("probe", "run the probe suite")):
        p = sub.add_parser(name, help=hlp)
        _common(p, "output directory")
        p.add_argument("--data", type=Path, help="dataset file from gen-data (default: generate)")

    p = sub.add_parser("bench-latency", help="time chunk inference with and without the adapter")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--num-steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="also write the report here")
    return parser


def _gen_data(args) -> int:
    cfg = load_config(args.config, args.preset, args.seed, args.steps)
    world = replace(cfg.world, seed=cfg.run.seed)
    ds = make_dataset(world, cfg.run.dataset_size, derive_rng(cfg.run.seed, "data"))
    save_dataset(args.out, ds)
    print(f"wrote {len(ds.train)} train / {len(ds.eval)} eval trajectories to {args.out}")
    return 0


def _train(args) -> int:
    cfg = load_config(args.config, args.preset, args.seed, args.steps)
    result = run_training(cfg, args.out, load_data_file(args.data))
    print(summary_text([result]).split("[verdicts]")[0], end="")
    print(f"outputs in {args.out}")
    return 0


def _probe(args) -> int:
    cfg = load_config(args.config, args.preset, args.seed, args.steps)
    results = run_probe_suite(cfg, args.out, load_data_file(args.data))
    print(summary_text(results), end="")
    print(f"outputs in {args.out}")
    return 0


def _bench(args) -> int:
    params, extra, meta = load_checkpoint(args.checkpoint)
    if any(n.startswith("adapter.") for n in extra):
        acfg = AdapterConfig(**(meta.get("adapter") or {}))
        phi = AdapterParams(acfg, {n: t for n, t in extra.items() if n.startswith("adapter.")})
    else:
        phi = init_adapter(AdapterConfig(action_dim=params.config.action_dim))
    world = WorldConfig(**meta["world"]) if "world" in meta else WorldConfig(
        frame_dim=params.config.frame_dim, frames=params.config.frames,
        horizon=params.config.action_tokens)
    x1 = make_dataset(world, 20, np.random.default_rng(args.seed)).eval.frames[:1, 0]
    report = measure_latency(params, phi, x1, args.warmup, args.trials,
                             SamplerConfig(num_steps=args.num_steps, seed=args.seed))
    text = report.to_text()
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    handler = {"gen-data": _gen_data, "train": _train, "probe": _probe, "bench-latency": _bench}
    try:
        return handler[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
