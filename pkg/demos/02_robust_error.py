"""Compare attack variants and adversarial patch training on the desk benchmark.

Run: python3 demos/02_robust_error.py  (about 5 minutes on one core)
"""
import time

from advpatch import robust_test_error, test_error
from advpatch import benchmark

train_set, test_set = benchmark.datasets()

t0 = time.perf_counter()
normal = benchmark.train_model("normal", dataset=train_set)
print(f"normal training: {time.perf_counter() - t0:.0f}s, TE {test_error(normal, test_set):.3f}")

# same iterations and restarts, different location strategies
for name in ("ap-rand", "ap-randlo", "ap-fulllo"):
    report = robust_test_error(normal, test_set, [benchmark.attack(name)], seed=0)
    print(f"  {name:10s} RTE {report.rte:.3f}")

# half of every batch is attacked on the fly during training
t0 = time.perf_counter()
robust = benchmark.train_model("adversarial", dataset=train_set, verbose=True)
print(f"adversarial training: {time.perf_counter() - t0:.0f}s, "
      f"TE {test_error(robust, test_set):.3f}")
report = robust_test_error(robust, test_set, [benchmark.attack("ap-fulllo")], seed=0)
print(f"  ap-fulllo  RTE {report.rte:.3f}")
