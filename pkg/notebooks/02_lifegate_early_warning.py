"""
LifeGate early warning
======================

Collect random-policy data, fit DeD (DDQN) and DistDeD (IQN + CQL) head pairs,
then walk the two suboptimal policies into the dead-end zone and count how
many steps before zone entry each method raises its alarm.

The full desk run (2e5 transitions, 30 epochs) takes roughly ten minutes on
one core. Set ``SCALE`` below 1 for a quick look.
"""

# %%
import sys
import time

import numpy as np

from distded import dataset, dead_end, harness, learners, lifegate

SCALE = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
SEED = 7

spec = lifegate.default_spec()
marks = [(spec.goal_cells, "G"), (spec.barrier_cells, "#"), (spec.deadend_zone_cells, "z"),
         (spec.negative_edge_cells, "X")]
for y in reversed(range(spec.height)):
    print("".join(next((m for cells, m in marks if (x, y) in cells), ".") for x in range(spec.width)))

# %% Data
ds = dataset.collect_random(spec, int(200_000 * SCALE), np.random.default_rng(SEED), SEED)
print(len(ds), "transitions", ds.outcome_counts())

# %% Heads
cfg = learners.TrainConfig(epochs=max(1, int(30 * SCALE)), batch_size=128, beta=0.1, seed=SEED)
cache = harness.HeadCache()
t0 = time.perf_counter()
heads = {m: cache.get(ds, m, cfg) for m in (dead_end.DED, dead_end.DISTDED)}
print(f"trained in {time.perf_counter() - t0:.0f} s")

# %% Alarm scores over the grid (top row printed first)
ded = harness.make_assessor(heads[dead_end.DED], dead_end.DED)
dist = harness.make_assessor(heads[dead_end.DISTDED], dead_end.DISTDED, alpha=0.1)
cells = [(x, y) for y in range(spec.height) for x in range(spec.width)]
states = np.array([spec.features(c) for c in cells])
for name, a in (("DeD", ded), ("DistDeD", dist)):
    score = dead_end.assess_states(a, states).alarm_score.reshape(spec.height, spec.width)
    print(name, "alarm score, threshold", a.delta_d)
    print(np.round(score[::-1], 2))

# %% Paired rollouts of the two suboptimal policies
policies = lifegate.suboptimal_policies(spec, 0.1)
res = harness.early_warning_study({"ded": ded, "distded": dist}, policies, int(500 * SCALE) or 1,
                                  np.random.default_rng([SEED, 60]), spec)
for name, s in res.stats().items():
    print(name, {k: round(v, 3) if isinstance(v, float) else v for k, v in s.items()})
diff = res.paired_differences("distded", "ded")
print("paired DistDeD - DeD gap: mean", round(float(diff.mean()), 3), "over", diff.size, "pairs")
