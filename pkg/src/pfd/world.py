"""Hidden-goal reaching world with a weak current-frame cue and a strong future reveal.

Every trajectory picks one of ``goals`` targets on the unit circle. Each goal
owns a fixed orthonormal code vector. Frame 1 carries the code at amplitude
``cue``; from frame ``reveal`` on, the code is present at unit amplitude. All
frames share a per-trajectory nuisance observation orthogonal to the codes.
The action chunk walks from the origin to the goal in ``horizon`` equal steps.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .blob import read_blob, write_blob


@dataclass(frozen=True)
class WorldConfig:
    frame_dim: int = 16
    frames: int = 4
    horizon: int = 8
    action_dim: int = 2
    goals: int = 4
    cue: float = 0.25
    reveal: int = 3
    noise: float = 0.05
    nuisance: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.reveal <= self.frames:
            raise ValueError(f"reveal step must lie in [2, {self.frames}], got {self.reveal}")
        if self.cue < 0 or self.noise < 0 or self.nuisance < 0:
            raise ValueError("cue, noise and nuisance must be non-negative")
        if self.goals < 2:
            raise ValueError("need at least two goals")
        if self.goals > self.frame_dim:
            raise ValueError("goal codes must be orthonormal, so goals <= frame_dim")
        if self.action_dim != 2:
            raise ValueError("goals live on the unit circle, so action_dim must be 2")

    def codebook(self) -> np.ndarray:
        """(goals, frame_dim) orthonormal goal codes, fixed by ``seed``."""
        rng = np.random.default_rng([self.seed, 0xC0DE])
        q, _ = np.linalg.qr(rng.normal(size=(self.frame_dim, self.frame_dim)))
        return q[:, : self.goals].T.copy()

    def goal_positions(self) -> np.ndarray:
        ang = 2.0 * np.pi * np.arange(self.goals) / self.goals
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def amplitudes(self) -> np.ndarray:
        """Goal-code amplitude per frame: cue, linear ramp, then 1 from the reveal."""
        t = np.arange(1, self.frames + 1, dtype=np.float64)
        ramp = self.cue + (1.0 - self.cue) * (t - 1) / (self.reveal - 1)
        return np.minimum(ramp, 1.0)


@dataclass
class TrajectoryBatch:
    frames: np.ndarray  # (B, T, frame_dim)
    actions: np.ndarray  # (B, H, action_dim)
    goals: np.ndarray  # (B,) int

    def __len__(self) -> int:
        return len(self.goals)

    def subset(self, idx) -> TrajectoryBatch:
        return TrajectoryBatch(self.frames[idx], self.actions[idx], self.goals[idx])


@dataclass
class Dataset:
    config: WorldConfig
    train: TrajectoryBatch
    eval: TrajectoryBatch


def _generate(cfg: WorldConfig, goals: np.ndarray, rng: np.random.Generator) -> TrajectoryBatch:
    n = len(goals)
    codes = cfg.codebook()
    # nuisance lives in the orthogonal complement of the code span
    base = rng.normal(size=(n, cfg.frame_dim)) * cfg.nuisance
    base -= (base @ codes.T) @ codes
    noise = rng.normal(size=(n, cfg.frames, cfg.frame_dim)) * cfg.noise
    amp = cfg.amplitudes()
    frames = base[:, None, :] + amp[None, :, None] * codes[goals][:, None, :] + noise
    step = cfg.goal_positions()[goals] / cfg.horizon
    actions = np.repeat(step[:, None, :], cfg.horizon, axis=1)
    return TrajectoryBatch(frames, actions, goals.astype(np.int64))


def generate_trajectory(cfg: WorldConfig, rng: np.random.Generator) -> TrajectoryBatch:
    """A single trajectory, returned as a batch of one."""
    goal = rng.integers(cfg.goals, size=1)
    return _generate(cfg, goal, rng)


def make_dataset(cfg: WorldConfig, n: int, rng: np.random.Generator) -> Dataset:
    """``n`` trajectories with uniform goals; first 90% by index train, rest eval."""
    if n < 2:
        raise ValueError("dataset needs at least two trajectories")
    goals = rng.integers(cfg.goals, size=n)
    data = _generate(cfg, goals, rng)
    cut = max(1, min(n - 1, (9 * n) // 10))
    return Dataset(cfg, data.subset(slice(0, cut)), data.subset(slice(cut, n)))


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Permutation of range(n) with no fixed point."""
    if n < 2:
        raise ValueError("a derangement needs at least two elements")
    perm = rng.permutation(n)
    src = np.empty(n, dtype=np.int64)
    src[perm] = np.roll(perm, -1)
    return src


def shuffle_future(batch: TrajectoryBatch, rng: np.random.Generator) -> TrajectoryBatch:
    """Replace frames 2..T of each element with those of a different element."""
    if len(batch) < 2:
        raise ValueError("shuffling futures needs a batch of at least two trajectories")
    src = derangement(len(batch), rng)
    frames = batch.frames.copy()
    frames[:, 1:] = batch.frames[src, 1:]
    return TrajectoryBatch(frames, batch.actions, batch.goals)


def decode_goal(frame: np.ndarray, cfg: WorldConfig) -> np.ndarray:
    """Nearest-code goal estimate for (..., frame_dim) frames."""
    codes = cfg.codebook()
    d2 = ((frame[..., None, :] - codes) ** 2).sum(axis=-1)
    return d2.argmin(axis=-1)


def success_metric(a_hat: np.ndarray, a_true: np.ndarray, goal_pos: np.ndarray, radius: float):
    """Endpoint-within-radius success and chunk MSE, per trajectory.

    Inputs may carry a leading batch axis; the endpoint is the sum of the
    chunk's action steps.
    """
    end = a_hat.sum(axis=-2)
    success = np.linalg.norm(end - goal_pos, axis=-1) <= radius
    err = ((a_hat - a_true) ** 2).mean(axis=(-2, -1))
    return success, err


_MAGIC = "PFD-DATASET"


def save_dataset(path: str | Path, ds: Dataset) -> None:
    meta = {"world": asdict(ds.config), "n_train": len(ds.train), "n_eval": len(ds.eval)}
    arrays = {}
    for split in ("train", "eval"):
        b = getattr(ds, split)
        arrays[f"{split}.frames"] = b.frames
        arrays[f"{split}.actions"] = b.actions
        arrays[f"{split}.goals"] = b.goals.astype(np.float64)
    write_blob(path, _MAGIC, meta, arrays)


def load_dataset(path: str | Path) -> Dataset:
    meta, arrays = read_blob(path, _MAGIC)
    cfg = replace(WorldConfig(), **meta["world"])
    splits = {
        s: TrajectoryBatch(arrays[f"{s}.frames"], arrays[f"{s}.actions"],
                           arrays[f"{s}.goals"].astype(np.int64))
        for s in ("train", "eval")
    }
    return Dataset(cfg, splits["train"], splits["eval"])
