"""Greedy location search: try moving the patch by ``stride`` pixels, keep the best strict improvement."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .errors import ConfigError
from .model import ClassifierParams, per_example_loss
from .patches import DIRECTIONS, CenterRegion, PatchState, apply_patches, feasible_many

SCHEMES = ("none", "fixed-location", "random-one", "full-four")


def check_scheme(scheme: str) -> None:
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown direction scheme {scheme!r}; expected one of {SCHEMES}")


def forward_pass_budget(scheme: str) -> int:
    """Forward passes per attack iteration: one for the value step plus one per candidate."""
    check_scheme(scheme)
    return {"none": 1, "fixed-location": 1, "random-one": 2, "full-four": 5}[scheme]


def candidate_directions(scheme: str, rng: np.random.Generator | None) -> tuple[int, ...]:
    """Indices into :data:`DIRECTIONS` to evaluate this iteration."""
    if scheme == "full-four":
        return (0, 1, 2, 3)
    if scheme == "random-one":
        return (int(rng.integers(4)),)
    return ()


def next_location_batch(params: ClassifierParams, images: np.ndarray, labels: np.ndarray,
                        rows: np.ndarray, cols: np.ndarray, values: np.ndarray,
                        current_loss: np.ndarray, scheme: str, stride: int,
                        region: CenterRegion, rngs=None):
    """One location step for ``B`` independent attacks.

    Returns ``(rows, cols, losses, moved)``. Infeasible candidates (out of the
    image or touching ``region``) are never evaluated. A move is accepted only if
    its loss is strictly greater than ``current_loss``; among equal maxima the
    first direction in up/down/left/right order wins.
    """
    check_scheme(scheme)
    b = len(rows)
    rows, cols = np.array(rows), np.array(cols)
    losses = np.array(current_loss, dtype=np.float64)
    moved = np.zeros(b, dtype=bool)
    if scheme in ("none", "fixed-location") or b == 0:
        return rows, cols, losses, moved
    if stride < 1:
        raise ConfigError("stride must be >= 1")

    side = values.shape[1]
    meta = images.shape[1:3]
    ex, dirs = [], []
    for i in range(b):
        for d in candidate_directions(scheme, None if rngs is None else rngs[i]):
            ex.append(i)
            dirs.append(d)
    ex = np.asarray(ex, dtype=np.int64)
    dirs = np.asarray(dirs, dtype=np.int64)
    deltas = np.array([d.delta for d in DIRECTIONS])
    cand_r = rows[ex] + deltas[dirs, 0] * stride
    cand_c = cols[ex] + deltas[dirs, 1] * stride
    ok = feasible_many(cand_r, cand_c, side, meta, region)
    ex, dirs, cand_r, cand_c = ex[ok], dirs[ok], cand_r[ok], cand_c[ok]
    if len(ex) == 0:
        return rows, cols, losses, moved

    cand_loss = per_example_loss(
        params, apply_patches(images[ex], cand_r, cand_c, values[ex]), labels[ex])
    table = np.full((b, 4), -np.inf)
    table[ex, dirs] = cand_loss
    best_dir = table.argmax(axis=1)
    best = table[np.arange(b), best_dir]
    moved = best > losses
    d = deltas[best_dir]
    rows = np.where(moved, rows + d[:, 0] * stride, rows)
    cols = np.where(moved, cols + d[:, 1] * stride, cols)
    losses = np.where(moved, best, losses)
    return rows, cols, losses, moved


def next_location(params: ClassifierParams, image: np.ndarray, label: int, patch: PatchState,
                  current_loss: float, scheme: str, stride: int, region: CenterRegion,
                  rng: np.random.Generator | None = None) -> tuple[PatchState, float]:
    """Single-image form of :func:`next_location_batch`."""
    loc = patch.location
    rows, cols, losses, moved = next_location_batch(
        params, image[None], np.array([label]), np.array([loc.row]), np.array([loc.col]),
        patch.values[None], np.array([current_loss]), scheme, stride, region,
        None if rng is None else [rng])
    if not moved[0]:
        return patch, float(current_loss)
    return PatchState(replace(loc, row=int(rows[0]), col=int(cols[0])), patch.values), float(losses[0])
