"""Train a small classifier, then watch a patch wander and grow adversarial.

Run: python3 demos/01_attack_one_image.py  (about 15 seconds)
"""
import numpy as np

from advpatch import apply_patch, predict, run_attack
from advpatch import benchmark

train_set, test_set = benchmark.datasets()
model = benchmark.train_model("normal", dataset=train_set)

# one restart of the location-optimized attack, keeping the whole trajectory;
# show the first test image on which the patch both moves and wins
cfg = benchmark.attack("ap-fulllo", iterations=25, restarts=1)
for i in range(len(test_set)):
    image, label = test_set.pixels[i], int(test_set.labels[i])
    outcome = run_attack(model, image, label, cfg, seed=0, record=True)
    if outcome.success and len({p.location for p, _ in outcome.trajectory}) > 1:
        break
print(f"test image {i}: clean prediction {predict(model, image)}, true label {label}")

for t, (patch, loss) in enumerate(outcome.trajectory):
    if t % 5 == 0 or t == len(outcome.trajectory) - 1:
        loc = patch.location
        print(f"iter {t:2d}  patch at ({loc.row:2d}, {loc.col:2d})  loss {loss:.3f}")

best = outcome.best_patch
print(f"best loss {outcome.best_loss:.3f} at {best.location}; "
      f"patched prediction {predict(model, apply_patch(image, best))}, "
      f"success {outcome.success}")
moved = {p.location for p, _ in outcome.trajectory}
print(f"the patch visited {len(moved)} distinct locations")
np.set_printoptions(precision=2, suppress=True)
print("first channel of the best patch:\n", best.values[..., 0])
