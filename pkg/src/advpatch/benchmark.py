"""The desk-scale benchmark: three shape classes on 16x16x3 images.

500 training and 200 test images per class, 4x4 patches kept outside an 8x8
central square, attack step 0.05. Everything is seeded, so two runs produce
bit-identical models and reports.
"""
from __future__ import annotations

from collections import Counter

import numpy as np

from .attack import AttackConfig, preset, worst_case_batch
from .data_io import SynthSpec, make_synthetic
from .model import ClassifierParams, ImageBatch, TrainConfig, build_model, predict_batch, small_cnn
from .patches import apply_patches
from .training import AugConfig, TrainMode, train

GEOMETRY = {"patch_side": 4, "center_side": 8, "step_size": 0.05}
TRAIN_SPEC = SynthSpec(per_class=500, seed=1)
TEST_SPEC = SynthSpec(per_class=200, seed=2)
# batches of 25 give 60 SGD steps per epoch on 1 500 images, enough to converge in 30 epochs
TRAIN_CONFIG = TrainConfig(epochs=30, batch_size=25)
AUGMENT = AugConfig(padding=2, flip=True, contrast=(0.8, 1.2))


def datasets() -> tuple[ImageBatch, ImageBatch]:
    return make_synthetic(TRAIN_SPEC)[0], make_synthetic(TEST_SPEC)[0]


def attack(name: str = "ap-fulllo", iterations: int = 25, restarts: int = 3,
           **overrides) -> AttackConfig:
    return preset(name, iterations=iterations, restarts=restarts, **{**GEOMETRY, **overrides})


def train_model(kind: str = "normal", train_attack: AttackConfig | None = None,
                dataset: ImageBatch | None = None, seed: int = 0, log: list | None = None,
                verbose: bool = False) -> ClassifierParams:
    """Train the reference network; ``kind`` adversarial defaults to FullLO with T=10, r=1."""
    if dataset is None:
        dataset = datasets()[0]
    if train_attack is None:
        train_attack = attack(iterations=10, restarts=1)
    return train(build_model(small_cnn(), seed), dataset, TrainMode(kind, train_attack),
                 TRAIN_CONFIG, AUGMENT, seed=seed, log=log, verbose=verbose)


def modal_adversarial_class(params: ClassifierParams, dataset: ImageBatch,
                            cfg: AttackConfig, seed: int = 0) -> tuple[int, Counter]:
    """Class that successful image-specific attacks most often flip predictions to.

    A data-driven choice of target for universal patches that looks only at
    ``dataset``; ties go to the lowest class.
    """
    outs = worst_case_batch(params, dataset.pixels, dataset.labels, [cfg], seed)
    rows = np.array([o.best_patch.location.row for o in outs])
    cols = np.array([o.best_patch.location.col for o in outs])
    vals = np.stack([o.best_patch.values for o in outs])
    pred = predict_batch(params, apply_patches(dataset.pixels, rows, cols, vals))
    counts = Counter(pred[pred != dataset.labels].tolist())
    if not counts:
        return 0, counts
    top = max(counts.values())
    return min(k for k, v in counts.items() if v == top), counts
