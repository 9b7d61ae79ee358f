"""Image-specific adversarial patch attack with location optimisation.

Each iteration takes a signed-gradient ascent step on the patch values
(clipped to ``[0, 1]``) followed by an optional greedy location step. The
iterate with the highest cross-entropy is returned. Many independent attacks
(different images and/or restarts) run together as one vectorised batch; every
attack owns its random stream, and the model's per-example computations do not
depend on batch composition, so results are identical however the work is
batched or distributed.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .errors import ConfigError, InputError
from .location import check_scheme, next_location_batch
from .model import (ClassifierParams, ImageBatch, forward, loss_and_input_grad,
                    per_example_loss, per_example_loss_from_logits)
from .patches import (PatchLocation, PatchState, apply_patches, center_region, gather_footprints,
                      init_patch)

InitScheme = Union[str, tuple]


@dataclass(frozen=True)
class AttackConfig:
    """Budget and geometry of one attack.

    ``init`` is ``"random"`` or a fixed ``(row, col)``; ``value_init`` is
    ``"uniform"`` or ``"copy"`` (patch starts equal to the covered pixels, so
    it is an identity patch until updated).
    """

    iterations: int = 100
    restarts: int = 1
    step_size: float = 0.05
    stride: int = 2
    scheme: str = "full-four"
    init: InitScheme = "random"
    patch_side: int = 8
    center_side: int = 10
    early_stop: bool = False
    seed: int = 0
    recompute_loss_before_move: bool = False
    value_init: str = "uniform"

    def __post_init__(self):
        if isinstance(self.init, list):
            object.__setattr__(self, "init", tuple(self.init))
        check_scheme(self.scheme)
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.step_size < 0:
            raise ConfigError("step_size must be >= 0")
        if self.stride < 1:
            raise ConfigError("stride must be >= 1")
        if self.patch_side < 1 or self.center_side < 0:
            raise ConfigError("patch_side must be >= 1 and center_side >= 0")
        if self.init != "random" and not (isinstance(self.init, tuple) and len(self.init) == 2):
            raise ConfigError(f"init must be 'random' or (row, col), got {self.init!r}")
        if self.value_init not in ("uniform", "copy"):
            raise ConfigError(f"value_init must be 'uniform' or 'copy', got {self.value_init!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.init, tuple):
            d["init"] = list(self.init)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown attack config fields {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "ap-fixed": {"scheme": "fixed-location", "init": (3, 3)},
    "ap-rand": {"scheme": "none", "init": "random"},
    "ap-randlo": {"scheme": "random-one", "init": "random"},
    "ap-fulllo": {"scheme": "full-four", "init": "random"},
}

DEFAULT_BUDGETS = ((100, 30), (1000, 3))


def preset(name: str, **overrides) -> AttackConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown attack preset {name!r}; expected one of {sorted(PRESETS)}")
    return AttackConfig(**{**PRESETS[name], **overrides})


def default_suite(name: str = "ap-fulllo", **overrides) -> list[AttackConfig]:
    """The two default budgets, ``(T=100, r=30)`` and ``(T=1000, r=3)``: 33 restarts in total."""
    return [preset(name, **{**overrides, "iterations": t, "restarts": r})
            for t, r in DEFAULT_BUDGETS]


def restart_seed(base: int, example: int, config: int, restart: int) -> np.random.SeedSequence:
    """Seed for one attack instance; independent of the order instances are executed in."""
    return np.random.SeedSequence([int(base), int(example), int(config), int(restart)])


@dataclass(eq=False)
class AttackOutcome:
    best_patch: PatchState
    best_loss: float
    success: bool
    final_location: PatchLocation
    final_success: bool
    losses: np.ndarray
    early_stopped: bool = False
    trajectory: list | None = None
    restarts: list = field(default_factory=list)

    @property
    def restarts_used(self) -> int:
        return max(1, len(self.restarts))


def attack_batch(params: ClassifierParams, images: np.ndarray, labels, cfg: AttackConfig,
                 seeds: Sequence, record: bool = False) -> list[AttackOutcome]:
    """Run ``len(images)`` independent attacks with the same config.

    ``seeds[b]`` seeds attack ``b`` (int or :class:`numpy.random.SeedSequence`).
    With ``record=True`` every visited iterate is kept in ``trajectory`` as
    ``(PatchState, loss)`` pairs, the last being the final iterate.
    """
    images = np.asarray(images, dtype=params.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or len(images) != len(labels) or len(seeds) != len(images):
        raise InputError("images, labels and seeds must have matching lengths")
    if images.size and (images.min() < 0 or images.max() > 1):
        raise InputError("images must lie in [0, 1]")
    b, h, w, c = images.shape
    side, eps = cfg.patch_side, np.float32(cfg.step_size)
    region = center_region((h, w), cfg.center_side)
    rngs = [np.random.default_rng(s) for s in seeds]

    rows = np.empty(b, dtype=np.int64)
    cols = np.empty(b, dtype=np.int64)
    vals = np.empty((b, side, side, c), dtype=np.float32)
    for i, rng in enumerate(rngs):
        p = init_patch(cfg.init, side, (h, w), region, rng, channels=c)
        rows[i], cols[i] = p.location.row, p.location.col
        vals[i] = p.values
    if cfg.value_init == "copy":
        vals[:] = gather_footprints(images, rows, cols, side)

    best_loss = np.full(b, -np.inf)
    best_rows, best_cols, best_vals = rows.copy(), cols.copy(), vals.copy()
    best_pred = np.full(b, -1, dtype=np.int64)
    history: list[list[float]] = [[] for _ in range(b)]
    traj = [[] for _ in range(b)] if record else None
    stopped = np.zeros(b, dtype=bool)

    def observe(idx, losses, preds, force=None):
        for j, i in enumerate(idx):
            history[i].append(float(losses[j]))
            if record:
                traj[i].append((PatchState(PatchLocation(int(rows[i]), int(cols[i]), side),
                                           vals[i].copy()), float(losses[j])))
        better = losses > best_loss[idx]
        if force is not None:
            better |= force
        sel = idx[better]
        best_loss[sel] = losses[better]
        best_rows[sel], best_cols[sel] = rows[sel], cols[sel]
        best_vals[sel] = vals[sel]
        best_pred[sel] = preds[better]

    for _ in range(cfg.iterations):
        idx = np.flatnonzero(~stopped)
        if len(idx) == 0:
            break
        x = apply_patches(images[idx], rows[idx], cols[idx], vals[idx])
        loss, grad, logits = loss_and_input_grad(params, x, labels[idx], return_logits=True)
        loss = loss.astype(np.float64)
        pred = logits.argmax(axis=1)
        if cfg.early_stop:
            hit = pred != labels[idx]
            observe(idx, loss, pred, force=hit)
            stopped[idx[hit]] = True
            keep = ~hit
            idx, loss, grad = idx[keep], loss[keep], grad[keep]
            if len(idx) == 0:
                break
        else:
            observe(idx, loss, pred)

        step = np.sign(gather_footprints(grad, rows[idx], cols[idx], side))
        vals[idx] = np.clip(vals[idx] + eps * step, 0, 1)

        current = loss
        if cfg.recompute_loss_before_move and cfg.scheme in ("random-one", "full-four"):
            current = per_example_loss(
                params, apply_patches(images[idx], rows[idx], cols[idx], vals[idx]),
                labels[idx]).astype(np.float64)
        new_r, new_c, _, _ = next_location_batch(
            params, images[idx], labels[idx], rows[idx], cols[idx], vals[idx], current,
            cfg.scheme, cfg.stride, region, [rngs[i] for i in idx])
        rows[idx], cols[idx] = new_r, new_c

    # the final iterate has not been evaluated yet
    idx = np.flatnonzero(~stopped)
    final_pred = np.full(b, -1, dtype=np.int64)
    if len(idx):
        logits = forward(params, apply_patches(images[idx], rows[idx], cols[idx], vals[idx]))
        loss = per_example_loss_from_logits(logits, labels[idx]).astype(np.float64)
        pred = logits.argmax(axis=1)
        final_pred[idx] = pred
        observe(idx, loss, pred)
    final_pred[stopped] = best_pred[stopped]

    out = []
    for i in range(b):
        out.append(AttackOutcome(
            best_patch=PatchState(PatchLocation(int(best_rows[i]), int(best_cols[i]), side),
                                  best_vals[i].copy()),
            best_loss=float(best_loss[i]),
            success=bool(best_pred[i] != labels[i]),
            final_location=PatchLocation(int(rows[i]), int(cols[i]), side),
            final_success=bool(final_pred[i] != labels[i]),
            losses=np.asarray(history[i]),
            early_stopped=bool(stopped[i]),
            trajectory=traj[i] if record else None,
        ))
    return out


def value_step(params: ClassifierParams, image: np.ndarray, label: int, patch: PatchState,
               step_size: float) -> tuple[PatchState, float]:
    """Signed-gradient ascent on the patch values; returns the new patch and the loss before it."""
    loc = patch.location
    x = apply_patches(image[None].astype(params.dtype), [loc.row], [loc.col], patch.values[None])
    loss, grad = loss_and_input_grad(params, x, [label])
    g = gather_footprints(grad, [loc.row], [loc.col], loc.side)[0]
    new = np.clip(patch.values + np.float32(step_size) * np.sign(g), 0, 1).astype(np.float32)
    return PatchState(loc, new), float(loss[0])


def run_attack(params: ClassifierParams, image: np.ndarray, label: int, cfg: AttackConfig,
               seed: int | None = None, record: bool = False) -> AttackOutcome:
    """One attack (a single restart) on one image.

    Uses the same random stream as restart 0 of config 0 of example 0 in
    :func:`attack_with_restarts`.
    """
    seed = cfg.seed if seed is None else seed
    return attack_batch(params, np.asarray(image)[None], [label], cfg,
                        [restart_seed(seed, 0, 0, 0)], record=record)[0]


def combine(outcomes: Sequence[AttackOutcome], keep: bool = True) -> AttackOutcome:
    """Per-example worst case: the maximal-loss restart; success if any restart succeeded."""
    if not outcomes:
        raise InputError("no attack outcomes to combine")
    worst = max(range(len(outcomes)), key=lambda i: (outcomes[i].best_loss, -i))
    return replace(outcomes[worst], success=any(o.success for o in outcomes),
                   restarts=list(outcomes) if keep else [])


def worst_case_batch(params: ClassifierParams, images: np.ndarray, labels,
                     suite: Sequence[AttackConfig], seed: int, example_indices=None,
                     max_batch: int = 512, keep_restarts: bool = False) -> list[AttackOutcome]:
    """Every restart of every config for each image, reduced to the per-example worst case.

    ``example_indices`` are the dataset indices of ``images``; they enter the
    restart seeds, so an example gets the same attacks whichever subset it is
    evaluated in.
    """
    if not suite:
        raise ConfigError("attack suite is empty")
    images = np.asarray(images)
    labels = np.asarray(labels)
    n = len(images)
    if example_indices is None:
        example_indices = np.arange(n)
    per_example: list[list[AttackOutcome]] = [[] for _ in range(n)]
    for ci, cfg in enumerate(suite):
        jobs = [(e, r) for e in range(n) for r in range(cfg.restarts)]
        for start in range(0, len(jobs), max_batch):
            chunk = jobs[start:start + max_batch]
            ex = np.array([e for e, _ in chunk], dtype=np.int64)
            seeds = [restart_seed(seed, example_indices[e], ci, r) for e, r in chunk]
            for (e, _), o in zip(chunk, attack_batch(params, images[ex], labels[ex], cfg, seeds)):
                per_example[e].append(o)
    return [combine(outs, keep=keep_restarts) for outs in per_example]


def attack_with_restarts(params: ClassifierParams, image: np.ndarray, label: int,
                         suite: Sequence[AttackConfig], seed: int = 0,
                         example_index: int = 0) -> AttackOutcome:
    return worst_case_batch(params, np.asarray(image)[None], [label], suite, seed,
                            [example_index], keep_restarts=True)[0]


def universal_attack(params: ClassifierParams, images, target: int, cfg: AttackConfig,
                     seed: int | None = None, batch_size: int | None = None) -> PatchState:
    """One targeted patch shared by all images, at a location drawn once and then frozen.

    Each of ``cfg.iterations`` steps descends the mean cross-entropy towards
    ``target`` with a signed gradient, averaged over the whole set (or over a
    random subset of ``batch_size`` images per step).
    """
    x = images.pixels if isinstance(images, ImageBatch) else np.asarray(images)
    if x.ndim != 4 or len(x) == 0:
        raise InputError("universal attack needs a non-empty image batch")
    if cfg.scheme not in ("none", "fixed-location"):
        raise ConfigError("universal patches use a frozen location (scheme 'none' or 'fixed-location')")
    if not 0 <= target < params.arch.classes:
        raise InputError(f"target {target} out of range [0, {params.arch.classes})")
    x = x.astype(params.dtype)
    n, h, w, c = x.shape
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(restart_seed(seed, 0, 0, 0))
    region = center_region((h, w), cfg.center_side)
    patch = init_patch(cfg.init, cfg.patch_side, (h, w), region, rng, channels=c)
    row, col, side = patch.location.row, patch.location.col, cfg.patch_side
    vals = patch.values
    eps = np.float32(cfg.step_size)
    for _ in range(cfg.iterations):
        sub = x if batch_size is None or batch_size >= n else x[rng.choice(n, batch_size, replace=False)]
        m = len(sub)
        patched = apply_patches(sub, np.full(m, row), np.full(m, col), np.broadcast_to(vals, (m,) + vals.shape))
        _, grad = loss_and_input_grad(params, patched, np.full(m, target))
        g = gather_footprints(grad, np.full(m, row), np.full(m, col), side).mean(axis=0)
        vals = np.clip(vals - eps * np.sign(g), 0, 1).astype(np.float32)
    return PatchState(patch.location, vals)
