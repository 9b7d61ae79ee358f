"""One patch, one location, many images: a targeted universal patch.

Run: python3 demos/03_universal_patch.py  (about 1 minute)
"""
import numpy as np

from advpatch import AttackConfig, PatchState, universal_attack
from advpatch import benchmark
from advpatch.cli import targeted_success

train_set, test_set = benchmark.datasets()
model = benchmark.train_model("normal", dataset=train_set)
source, held_out = test_set[np.arange(400)], test_set[np.arange(400, 600)]

# aim for the class that image-specific attacks already drift towards
target, flips = benchmark.modal_adversarial_class(
    model, source, benchmark.attack("ap-fulllo", restarts=1))
print(f"image-specific attacks flip predictions to: {dict(flips)}; target {target}")

cfg = AttackConfig(iterations=200, scheme="none", **benchmark.GEOMETRY)
for seed in range(3):
    patch = universal_attack(model, source, target, cfg, seed=seed)
    noise = PatchState(patch.location,
                       np.random.default_rng(seed).random(patch.values.shape, dtype=np.float32))
    print(f"location {patch.location.row, patch.location.col}: "
          f"universal {targeted_success(model, held_out, patch, target):.3f}, "
          f"random {targeted_success(model, held_out, noise, target):.3f}")
