"""Why preference leaks: per-class model sensitivity tracks class sample size.

Two experiments on synthetic Gaussian-blob data:
  1. Nine binary classifiers trained with class-A ratio 0.1 .. 0.9 -- the
     extracted sensitivity of class A falls monotonically as A gets more data.
  2. A 10-class model trained with one class at 50% and another at 2% -- the
     majority class has the smallest sensitivity and the minority the largest.

Run: python3 demos/sensitivity_rationale.py
"""

import numpy as np

from fedprof import attack, data, nn
from fedprof.seeding import derive_seed

DIM, TOTAL = 16, 6000

print("=" * 70)
print("1. Binary ratio sweep: sensitivity of class A vs its share of the data")
print("=" * 70)

pool = data.make_synthetic(2, DIM, TOTAL + 200, seed=0)
aux = data.build_auxiliary(pool, 150, excluded_indices=None)
aux_idx = np.concatenate(aux.source_indices)
avail = {c: np.setdiff1d(np.flatnonzero(pool.y == c), aux_idx) for c in (0, 1)}
arch = nn.Architecture((nn.Dense(DIM, 32), nn.Relu(), nn.Dense(32, 2)), (DIM,), 2)

print(f"{'ratio A':>8} {'S[A]':>10} {'S[B]':>10}")
for i, ratio in enumerate(np.arange(0.1, 0.95, 0.1)):
    n_a = int(round(ratio * TOTAL))
    ds = pool.subset(np.concatenate([avail[0][:n_a], avail[1][:TOTAL - n_a]]))
    params = nn.init_params(arch, seed=derive_seed(0, "init"))
    trained = nn.train(params, arch, ds.X, ds.y,
                       nn.TrainConfig(0.01, 1, 32, seed=derive_seed(0, "train", i)))
    s = attack.extract_sensitivity(trained, arch, aux, alpha=0.001)
    print(f"{ratio:8.1f} {s[0]:10.3f} {s[1]:10.3f}")
print("-> more samples of a class == smaller gradient change when retrained on it\n")

print("=" * 70)
print("2. Ten classes, majority at 50%, minority at 2%")
print("=" * 70)

pool10 = data.make_synthetic(10, DIM, 3400, seed=7)
aux10 = data.build_auxiliary(pool10, 150, excluded_indices=None)
aux_idx = np.concatenate(aux10.source_indices)
counts = np.full(10, 360)
counts[1], counts[8] = 3000, 120
idx = np.concatenate([
    np.setdiff1d(np.flatnonzero(pool10.y == c), aux_idx)[:counts[c]] for c in range(10)
])
ds10 = pool10.subset(idx)
arch10 = nn.Architecture((nn.Dense(DIM, 32), nn.Relu(), nn.Dense(32, 10)), (DIM,), 10)
trained = nn.train(nn.init_params(arch10, seed=1), arch10, ds10.X, ds10.y,
                   nn.TrainConfig(0.03, 1, 32, seed=2))
s = attack.extract_sensitivity(trained, arch10, aux10, alpha=0.001)

print(f"{'class':>6} {'train count':>12} {'sensitivity':>12}")
for c in range(10):
    marker = "  <- majority" if c == 1 else ("  <- minority" if c == 8 else "")
    print(f"{c:>6} {counts[c]:>12} {s[c]:>12.3f}{marker}")
print(f"\nargmin(S) = {int(np.argmin(s))} (true majority 1), "
      f"argmax(S) = {int(np.argmax(s))} (true minority 8)")

# the synthetic pool round-trips through the IDX container for external tools
data.write_idx(data.normalized_unit(ds10), "/tmp/fedprof_demo_images.idx",
               "/tmp/fedprof_demo_labels.idx")
back = data.load_idx("/tmp/fedprof_demo_images.idx", "/tmp/fedprof_demo_labels.idx")
print(f"\n(exported the skewed dataset as IDX and reloaded {len(back)} samples)")
