"""Square patch geometry: center exclusion region, placement, application, shifts.

A patch mask is never materialised as a dense ``H x W x C`` tensor; a patch is
the top-left corner plus side length, and its values are stored only over the
footprint.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .errors import ConfigError, InputError


class Direction(enum.Enum):
    UP = (-1, 0)
    DOWN = (1, 0)
    LEFT = (0, -1)
    RIGHT = (0, 1)

    @property
    def delta(self) -> tuple[int, int]:
        return self.value


# fixed evaluation order; also the tie-break order of location optimisation
DIRECTIONS = (Direction.UP, Direction.DOWN, Direction.LEFT, Direction.RIGHT)


@dataclass(frozen=True)
class CenterRegion:
    top: int
    left: int
    side: int

    def intersects(self, row: int, col: int, side: int) -> bool:
        if self.side == 0 or side == 0:
            return False
        return (row < self.top + self.side and self.top < row + side
                and col < self.left + self.side and self.left < col + side)


@dataclass(frozen=True)
class PatchLocation:
    row: int
    col: int
    side: int


@dataclass(frozen=True, eq=False)
class PatchState:
    location: PatchLocation
    values: np.ndarray

    def __eq__(self, other):
        return (isinstance(other, PatchState) and self.location == other.location
                and np.array_equal(self.values, other.values))


def _hw(meta) -> tuple[int, int]:
    if isinstance(meta, tuple):
        return meta[0], meta[1]
    return meta.height, meta.width


def center_region(meta, side: int) -> CenterRegion:
    """Centered exclusion square; odd remainders put the extra pixel below/right."""
    h, w = _hw(meta)
    if side < 0 or side > min(h, w):
        raise ConfigError(f"center side {side} does not fit a {h}x{w} image")
    return CenterRegion((h - side) // 2, (w - side) // 2, side)


def is_feasible(row: int, col: int, side: int, meta, region: CenterRegion) -> bool:
    h, w = _hw(meta)
    if row < 0 or col < 0 or row + side > h or col + side > w:
        return False
    return not region.intersects(row, col, side)


def feasible_grid(meta, side: int, region: CenterRegion) -> np.ndarray:
    """Boolean grid over all top-left corners; True where a patch of ``side`` is allowed."""
    h, w = _hw(meta)
    if side < 1 or side > min(h, w):
        raise ConfigError(f"patch side {side} does not fit a {h}x{w} image")
    rows = np.arange(h - side + 1)[:, None]
    cols = np.arange(w - side + 1)[None, :]
    if region.side == 0:
        return np.ones((rows.size, cols.size), dtype=bool)
    hit = ((rows < region.top + region.side) & (region.top < rows + side)
           & (cols < region.left + region.side) & (region.left < cols + side))
    return ~hit


def feasible_locations(meta, side: int, region: CenterRegion) -> np.ndarray:
    """All feasible top-left corners on the stride-1 grid, shape ``(M, 2)``."""
    return np.argwhere(feasible_grid(meta, side, region))


def init_patch(scheme: Union[str, tuple], side: int, meta, region: CenterRegion,
               rng: np.random.Generator, channels: int | None = None) -> PatchState:
    """New patch with i.i.d. uniform values at a fixed ``(row, col)`` or a random location.

    ``scheme`` is either ``"random"`` or a ``(row, col)`` tuple.
    """
    h, w = _hw(meta)
    if scheme == "random":
        locs = feasible_locations(meta, side, region)
        if len(locs) == 0:
            raise ConfigError(f"no feasible location for a {side}x{side} patch in {h}x{w}")
        row, col = locs[rng.integers(len(locs))]
    else:
        row, col = scheme
        if not is_feasible(row, col, side, meta, region):
            raise ConfigError(
                f"fixed location ({row}, {col}) with side {side} is out of bounds "
                f"or intersects the center region")
    if channels is None:
        channels = getattr(meta, "channels", None)
        if channels is None:
            raise ConfigError("channel count needed when meta is a (height, width) pair")
    values = rng.random((side, side, channels), dtype=np.float32)
    return PatchState(PatchLocation(int(row), int(col), side), values)


def apply_patch(image: np.ndarray, patch: PatchState) -> np.ndarray:
    loc = patch.location
    h, w = image.shape[:2]
    if loc.row < 0 or loc.col < 0 or loc.row + loc.side > h or loc.col + loc.side > w:
        raise InputError(f"patch at ({loc.row}, {loc.col}) side {loc.side} leaves a {h}x{w} image")
    if patch.values.shape != (loc.side, loc.side, image.shape[2]):
        raise InputError(f"patch values have shape {patch.values.shape}")
    out = image.copy()
    out[loc.row:loc.row + loc.side, loc.col:loc.col + loc.side] = patch.values
    return out


def shift_patch(patch: PatchState, direction: Direction, stride: int, meta,
                region: CenterRegion) -> PatchState | None:
    """Move the patch ``stride`` pixels; ``None`` if the result is infeasible."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    dr, dc = direction.delta
    loc = patch.location
    row, col = loc.row + dr * stride, loc.col + dc * stride
    if not is_feasible(row, col, loc.side, meta, region):
        return None
    return PatchState(replace(loc, row=row, col=col), patch.values)


# --------------------------------------------------------------------------- #
# Vectorised forms used by the batched attack engine
# --------------------------------------------------------------------------- #

def _footprint_index(rows: np.ndarray, cols: np.ndarray, side: int):
    ar = np.arange(side)
    bi = np.arange(len(rows))[:, None, None]
    ri = np.asarray(rows)[:, None, None] + ar[None, :, None]
    ci = np.asarray(cols)[:, None, None] + ar[None, None, :]
    return bi, ri, ci


def apply_patches(images: np.ndarray, rows, cols, values: np.ndarray) -> np.ndarray:
    """Paste ``values[b]`` at ``(rows[b], cols[b])`` into a copy of ``images[b]``."""
    out = images.copy()
    out[_footprint_index(rows, cols, values.shape[1])] = values
    return out


def gather_footprints(arrays: np.ndarray, rows, cols, side: int) -> np.ndarray:
    """Inverse of :func:`apply_patches`: read the ``side x side`` block of each array."""
    return arrays[_footprint_index(rows, cols, side)]


def feasible_many(rows, cols, side: int, meta, region: CenterRegion) -> np.ndarray:
    h, w = _hw(meta)
    rows, cols = np.asarray(rows), np.asarray(cols)
    ok = (rows >= 0) & (cols >= 0) & (rows + side <= h) & (cols + side <= w)
    if region.side:
        hit = ((rows < region.top + region.side) & (region.top < rows + side)
               & (cols < region.left + region.side) & (region.left < cols + side))
        ok &= ~hit
    return ok
