"""
Threshold sweeps, ablation and conservatism
===========================================

ROC curves from the coupled threshold sweep, the DDQN/IQN x penalty ablation,
the beta sweep, the limited-data sweep and the threshold-selection histograms,
all at reduced scale so the script finishes in a few minutes.
"""

# %%
import numpy as np

from distded import dataset, dead_end, harness, learners, lifegate

SEED = 7
spec = lifegate.default_spec()
ds = dataset.collect_random(spec, 30_000, np.random.default_rng(SEED), SEED)
cfg = learners.TrainConfig(epochs=5, batch_size=128, beta=0.1, seed=SEED, k_eval=300)
held = harness.TrajectorySet(harness.heldout_trajectories(spec, 300, np.random.default_rng([SEED, 50])))
print("held-out trajectories:", int(held.negative.sum()), "negative of", len(held.negative))

# %% Ablation matrix
cache = harness.HeadCache()
abl = harness.ablation_matrix(ds, cfg, held, cache=cache, n_thresholds=50)
for row in abl.table():
    print(row)

# %% AUC across the alpha grid for DistDeD
fam = abl.families[dead_end.DISTDED]
for a, v in zip(fam.alphas[::7], fam.aucs[::7]):
    print(f"alpha {a:.2f}  AUC {v:.4f}")

# %% Beta sweep (trend reported, not asserted)
for b, (f, _) in harness.beta_sweep(ds, cfg, held, n_thresholds=50).items():
    print(f"beta {b:.2f}  max AUC {f.max_auc:.4f}  missed {f.best.missed_fraction:.3f}")

# %% Limited data
for (m, frac), f in harness.data_fraction_sweep(ds, cfg, held, (0.25, 1.0), cache=cache, n_thresholds=50).items():
    print(f"{m:8s} fraction {frac:.2f}  max AUC {f.max_auc:.4f}")

# %% Histograms of median values by steps-to-termination
rows = harness.threshold_histograms(harness.make_assessor(abl.heads[dead_end.DED], dead_end.DED),
                                    held.trajectories, time_bins=[0, 2, 5, 10])
print(len(rows), "histogram rows; first:", rows[:3])
