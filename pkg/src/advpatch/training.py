"""SGD training: normal, occlusion (random patches) and adversarial patch training.

In the patched modes the first ``batch_size // 2`` images of every shuffled,
augmented batch carry a patch and the rest stay clean; the SGD step minimises
the mean cross-entropy over the combined batch.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, worst_case_batch
from .errors import ConfigError
from .model import ClassifierParams, ImageBatch, TrainConfig, loss_and_param_grad, sgd_step
from .patches import apply_patches, center_region, feasible_locations

MODES = ("normal", "occlusion", "adversarial")


@dataclass(frozen=True)
class TrainMode:
    """``kind`` is normal / occlusion / adversarial; patched modes take geometry (and, for
    adversarial, the full attack budget) from ``attack``."""

    kind: str = "normal"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(iterations=25, restarts=1))

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown training mode {self.kind!r}; expected one of {MODES}")


@dataclass(frozen=True)
class AugConfig:
    padding: int = 4
    flip: bool = True
    contrast: tuple = (0.7, 1.3)

    def __post_init__(self):
        lo, hi = self.contrast
        if self.padding < 0:
            raise ConfigError("crop padding must be >= 0")
        if not 0 <= lo <= hi:
            raise ConfigError(f"contrast range must satisfy 0 <= lo <= hi, got {self.contrast}")

    @classmethod
    def identity(cls) -> "AugConfig":
        return cls(padding=0, flip=False, contrast=(1.0, 1.0))


def augment(batch: ImageBatch, aug: AugConfig, rng: np.random.Generator) -> ImageBatch:
    """Zero-pad + random crop, random horizontal flip, random contrast around 0.5."""
    x = batch.pixels
    n, h, w, _ = x.shape
    p = aug.padding
    offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
    flips = rng.random(n) < 0.5 if aug.flip else np.zeros(n, dtype=bool)
    lo, hi = aug.contrast
    c = rng.uniform(lo, hi, size=n).astype(np.float32)

    if p:
        padded = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        rows = offsets[:, 0, None] + np.arange(h)
        cols = offsets[:, 1, None] + np.arange(w)
        x = padded[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
    else:
        x = x.copy()
    x[flips] = x[flips, :, ::-1]
    scale = c[:, None, None, None]
    contrasted = np.clip(scale * (x - np.float32(0.5)) + np.float32(0.5), 0, 1)
    x = np.where(scale == 1, x, contrasted).astype(np.float32)
    return ImageBatch(x, batch.labels.copy())


def occlude(x: np.ndarray, side: int, center_side: int, rng: np.random.Generator) -> np.ndarray:
    """Paste a uniformly random patch at a uniformly random feasible location on each image."""
    n, h, w, c = x.shape
    locs = feasible_locations((h, w), side, center_region((h, w), center_side))
    if len(locs) == 0:
        raise ConfigError(f"no feasible location for a {side}x{side} patch")
    pick = locs[rng.integers(len(locs), size=n)]
    vals = rng.random((n, side, side, c), dtype=np.float32)
    return apply_patches(x, pick[:, 0], pick[:, 1], vals)


def compose_batch(params: ClassifierParams, batch: ImageBatch, mode: TrainMode,
                  rng: np.random.Generator, attack_seed: int = 0,
                  example_offset: int = 0) -> tuple[np.ndarray, int]:
    """Replace the first half of an augmented batch by patched images.

    Returns the pixels to train on and the number of patched examples. Attacks
    all run against the same (current) ``params``.
    """
    x = batch.pixels
    if mode.kind == "normal":
        return x, 0
    half = len(x) // 2
    out = x.copy()
    if half == 0:
        return out, 0
    cfg = mode.attack
    if mode.kind == "occlusion":
        out[:half] = occlude(x[:half], cfg.patch_side, cfg.center_side, rng)
    else:
        outcomes = worst_case_batch(params, x[:half], batch.labels[:half], [cfg], attack_seed,
                                    example_indices=example_offset + np.arange(half))
        rows = np.array([o.best_patch.location.row for o in outcomes])
        cols = np.array([o.best_patch.location.col for o in outcomes])
        vals = np.stack([o.best_patch.values for o in outcomes])
        out[:half] = apply_patches(x[:half], rows, cols, vals)
    return out, half


def train(params: ClassifierParams, dataset: ImageBatch, mode: TrainMode, tcfg: TrainConfig,
          aug: AugConfig, seed: int | None = None, log: list | None = None,
          verbose: bool = False) -> ClassifierParams:
    """Train ``params`` for ``tcfg.epochs`` epochs; deterministic for a fixed seed.

    Each epoch runs ``N // batch_size`` SGD steps (the remainder is dropped)
    with learning rate ``lr * decay**epoch``. Per-epoch metrics are appended
    to ``log`` when given.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    if tcfg.batch_size > n:
        raise ConfigError(f"batch size {tcfg.batch_size} exceeds dataset size {n}")
    seed = tcfg.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    steps = n // tcfg.batch_size
    bs = tcfg.batch_size

    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        clean_sum = adv_sum = 0.0
        clean_n = adv_n = 0
        for step in range(steps):
            batch = augment(dataset[perm[step * bs:(step + 1) * bs]], aug, rng)
            x, half = compose_batch(params, batch, mode, rng, attack_seed=seed,
                                    example_offset=(epoch * steps + step) * bs)
            losses, grads = loss_and_param_grad(params, x, batch.labels, per_example=True)
            params = sgd_step(params, grads, tcfg, epoch)
            adv_sum += float(losses[:half].sum())
            adv_n += half
            clean_sum += float(losses[half:].sum())
            clean_n += len(losses) - half
        row = {
            "epoch": epoch,
            "lr": tcfg.lr_at(epoch),
            "clean_loss": clean_sum / clean_n if clean_n else math.nan,
            "adv_loss": adv_sum / adv_n if adv_n else math.nan,
            "wall_time": time.perf_counter() - t0,
        }
        if log is not None:
            log.append(row)
        if verbose:
            print("epoch {epoch:3d}  lr {lr:.5f}  clean {clean_loss:.4f}  "
                  "patched {adv_loss:.4f}  {wall_time:.1f}s".format(**row))
    return params


def write_metrics_csv(rows: list[dict], path) -> None:
    fields = ["epoch", "lr", "clean_loss", "adv_loss", "wall_time"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in fields})


def normalized_cost_configs(budget: int) -> dict[str, int]:
    """Iterations per scheme so that every attack spends ``budget`` forward passes."""
    if budget < 5:
        raise ConfigError("forward-pass budget must be >= 5")
    return {"fixed": budget, "random": budget, "random-one": budget // 2,
            "full-four": budget // 5}
