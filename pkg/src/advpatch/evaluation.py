"""Clean / robust test error, location heatmaps and ablation sweeps."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .attack import AttackConfig, worst_case_batch
from .errors import ConfigError, InputError
from .model import ClassifierParams, ImageBatch, predict_batch
from .patches import center_region, feasible_grid


def test_error(params: ClassifierParams, dataset: ImageBatch) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_batch(params, dataset.pixels) != dataset.labels))


@dataclass
class ExampleRecord:
    index: int
    label: int
    clean_pred: int
    attacked: bool = False
    success: bool = False
    worst_loss: float = math.nan
    row: int = -1
    col: int = -1
    restarts_used: int = 0
    # per-restart final locations and verdicts, kept only when requested
    restart_rows: list = field(default_factory=list)
    restart_cols: list = field(default_factory=list)
    restart_success: list = field(default_factory=list)

    @property
    def clean_correct(self) -> bool:
        return self.clean_pred == self.label

    @property
    def robust_error(self) -> bool:
        return (not self.clean_correct) or self.success


CSV_FIELDS = ("index", "label", "clean_pred", "clean_correct", "attacked", "success",
              "worst_loss", "row", "col", "restarts_used")


@dataclass
class RteReport:
    records: list
    suite: list
    seed: int
    attack_all: bool = False

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def te(self) -> float:
        return sum(not r.clean_correct for r in self.records) / self.n if self.n else 0.0

    @property
    def rte(self) -> float:
        return sum(r.robust_error for r in self.records) / self.n if self.n else 0.0

    def summary(self) -> dict:
        return {
            "examples": self.n,
            "test_error": self.te,
            "robust_test_error": self.rte,
            "clean_wrong": sum(not r.clean_correct for r in self.records),
            "attacked_successfully": sum(r.clean_correct and r.success for r in self.records),
            "total_restarts": sum(c.restarts for c in self.suite),
            "seed": self.seed,
            "attack_all": self.attack_all,
            "suite": [c.to_dict() for c in self.suite],
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in self.records:
                w.writerow([r.index, r.label, r.clean_pred, int(r.clean_correct), int(r.attacked),
                            int(r.success), f"{r.worst_loss:.9g}", r.row, r.col, r.restarts_used])

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_attack_log(self, path) -> None:
        """One JSON object per line and example."""
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps({
                    "index": r.index, "clean_correct": r.clean_correct, "success": r.success,
                    "best_loss": None if math.isnan(r.worst_loss) else r.worst_loss,
                    "row": r.row, "col": r.col, "restarts_used": r.restarts_used,
                }, sort_keys=True) + "\n")


def _evaluate_chunk(params, pixels, labels, indices, suite, seed, attack_all, keep_restarts):
    preds = predict_batch(params, pixels)
    records = [ExampleRecord(int(i), int(y), int(p)) for i, y, p in zip(indices, labels, preds)]
    todo = np.array([j for j, r in enumerate(records) if attack_all or r.clean_correct],
                    dtype=np.int64)
    if len(todo):
        outcomes = worst_case_batch(params, pixels[todo], labels[todo], suite, seed,
                                    example_indices=np.asarray(indices)[todo],
                                    keep_restarts=keep_restarts)
        for j, o in zip(todo, outcomes):
            r = records[j]
            r.attacked = True
            r.success = o.success
            r.worst_loss = o.best_loss
            r.row, r.col = o.best_patch.location.row, o.best_patch.location.col
            r.restarts_used = sum(c.restarts for c in suite)
            if keep_restarts:
                r.restart_rows = [x.final_location.row for x in o.restarts]
                r.restart_cols = [x.final_location.col for x in o.restarts]
                r.restart_success = [x.final_success for x in o.restarts]
    return records


def robust_test_error(params: ClassifierParams, dataset: ImageBatch,
                      suite: Sequence[AttackConfig], seed: int = 0, attack_all: bool = False,
                      keep_restarts: bool = False, workers: int = 1,
                      chunk_size: int = 64) -> RteReport:
    """Per-example worst case over every restart of every config in ``suite``.

    Misclassified clean examples count as robust errors and are only attacked
    when ``attack_all`` is set. The report does not depend on ``workers`` or
    ``chunk_size``: attack seeds derive from dataset indices and per-example
    model evaluations do not depend on batch composition.
    """
    suite = list(suite)
    if not suite:
        raise ConfigError("attack suite is empty")
    n = len(dataset)
    chunks = [np.arange(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]
    args = [(params, dataset.pixels[c], dataset.labels[c], c, suite, seed, attack_all,
             keep_restarts) for c in chunks]
    if workers <= 1 or len(chunks) <= 1:
        parts = [_evaluate_chunk(*a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_evaluate_chunk, *zip(*args)))
    records = [r for part in parts for r in part]
    return RteReport(records, suite, seed, attack_all)


@dataclass
class HeatmapGrid:
    """Counts of final patch locations, indexed by top-left corner.

    Cells whose patch would overlap the center region are not part of the
    grid (``feasible`` is False there and both counts stay zero).
    """

    all_counts: np.ndarray
    success_counts: np.ndarray
    feasible: np.ndarray
    height: int
    width: int
    side: int

    def write_csv(self, path, which: str = "all") -> None:
        grid = self.all_counts if which == "all" else self.success_counts
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            for r in range(grid.shape[0]):
                w.writerow([str(grid[r, c]) if self.feasible[r, c] else ""
                            for c in range(grid.shape[1])])

    def write_pgm(self, path, which: str = "all") -> None:
        grid = self.all_counts if which == "all" else self.success_counts
        write_pgm(scale_to_u8(grid), path)


def scale_to_u8(grid: np.ndarray) -> np.ndarray:
    """Linear map with the maximum cell at 255 (integer rounding, halves up)."""
    m = int(grid.max()) if grid.size else 0
    if m == 0:
        return np.zeros(grid.shape, dtype=np.uint8)
    return ((grid.astype(np.int64) * 255 + m // 2) // m).astype(np.uint8)


def write_pgm(img: np.ndarray, path) -> None:
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = open(path, "rb").read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise InputError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


def read_grid_csv(path) -> np.ndarray:
    """Counts from :meth:`HeatmapGrid.write_csv`; absent cells become -1."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return np.array([[int(v) if v else -1 for v in row] for row in rows], dtype=np.int64)


def location_heatmap(report: RteReport, height: int, width: int, side: int,
                     center_side: int) -> HeatmapGrid:
    """Accumulate every attacked example's per-restart final locations."""
    feasible = feasible_grid((height, width), side, center_region((height, width), center_side))
    all_c = np.zeros(feasible.shape, dtype=np.int64)
    succ_c = np.zeros(feasible.shape, dtype=np.int64)
    for r in report.records:
        if not r.attacked:
            continue
        if not r.restart_rows:
            raise InputError(f"example {r.index} has no per-restart locations; "
                             "evaluate with keep_restarts=True")
        for row, col, ok in zip(r.restart_rows, r.restart_cols, r.restart_success):
            if not feasible[row, col]:
                raise InputError(f"restart location ({row}, {col}) is not a feasible cell")
            all_c[row, col] += 1
            succ_c[row, col] += int(ok)
    return HeatmapGrid(all_c, succ_c, feasible, height, width, side)


def patch_size_sweep(params: ClassifierParams, dataset: ImageBatch, sides: Sequence[int],
                     template: AttackConfig | Sequence[AttackConfig], seed: int = 0,
                     workers: int = 1) -> dict[int, float]:
    suite = [template] if isinstance(template, AttackConfig) else list(template)
    h, w = dataset.pixels.shape[1:3]
    out = {}
    for side in sides:
        sized = [replace(c, patch_side=side) for c in suite]
        for c in sized:
            # raises ConfigError for sides with no feasible location
            if not feasible_grid((h, w), side, center_region((h, w), c.center_side)).any():
                raise ConfigError(f"patch side {side} has no feasible location")
        out[side] = robust_test_error(params, dataset, sized, seed, workers=workers).rte
    return out


def ablation_grid(params: ClassifierParams, dataset: ImageBatch, iterations: Sequence[int],
                  restarts: Sequence[int], template: AttackConfig, seed: int = 0,
                  workers: int = 1) -> dict[tuple[int, int], float]:
    """RTE for every ``(T, r)``; restart seeds are shared, so larger ``r`` nests smaller ones."""
    return {(t, r): robust_test_error(params, dataset,
                                      [replace(template, iterations=t, restarts=r)], seed,
                                      workers=workers).rte
            for t in iterations for r in restarts}
