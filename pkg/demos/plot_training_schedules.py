"""
Sampling plans, learning-rate curves and folds
==============================================
"""

# %%
# Pooling datasets of very different size: drawing each with probability
# proportional to 1/sqrt(n) keeps the small ones from disappearing without
# letting them dominate.
from collections import Counter

from lesionbench.schedules import LrSchedule, make_folds, sample_sequence, sampling_weights

plan = sampling_weights([20, 80, 180], ["heart", "liver", "hippocampus"])
for name, p in zip(plan.dataset_ids, plan.probabilities):
    print(f"{name:12s} {p:.4f}")
draws = Counter(sample_sequence(plan, seed=1, count=11_000))
print({k: draws[k] for k in plan.dataset_ids})

# %%
# Poly decay from 0.01 over 1000 epochs, and the same curve behind a 50-epoch
# linear warm-up to 0.001.
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

poly = LrSchedule.poly(0.01, 1000)
warm = LrSchedule.warmup_then_poly(0.001, 50, 1000)
fig, ax = plt.subplots(figsize=(6, 3))
ax.plot(*zip(*poly.table()), label="poly, lr0 = 0.01")
ax.plot(*zip(*warm.table()), label="warm-up to 0.001, then poly")
ax.set_xlabel("epoch")
ax.set_ylabel("learning rate")
ax.set_yscale("log")
ax.legend()
fig.tight_layout()
print("epoch 49 after warm-up:", warm.lr_at(49))

# %%
# Five folds over 388 scans. The split depends only on the ids and the seed.
folds = make_folds([f"scan{i:03d}" for i in range(388)], k=5, seed=0)
print([len(f) for f in folds])
