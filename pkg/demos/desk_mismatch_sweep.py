"""How much logged data does it take to overcome a wrong scenario prior?

The desk grid's model is corrupted: half of its prior mass sits on levels whose
box is stuck in a corner.  Conditioning on more of each logged episode pulls the
estimate of the expert's return back to the truth.

Run with ``python demos/desk_mismatch_sweep.py``.
"""

import numpy as np

from cfrl import offpolicy as op
from cfrl.envs import gridpush as gp
from cfrl.policy import TabularPolicy

desk = gp.desk_preset()
env = gp.as_pomdp(desk)
print("a sample level:\n" + gp.generate_level(desk, np.random.default_rng(0)).to_text())

model = op.corrupt_prior(env, 0.5)
expert = gp.expert_policy(env)
truth = gp.expert_value(env)
print(f"expert return in the real grid: {truth}")

mu = TabularPolicy.uniform(env.default_featurizer(), 5, gp.ACTIONS)
buf = op.collect(env, mu, 2000, seed=1)
print(" t  estimate  |error|  skipped")
for t, rep in op.sweep_conditioning(model, expert, buf, [0, 1, 2, 4, 8, 12], rng=2):
    print(f"{t:2d}  {rep.estimate:8.3f}  {abs(rep.estimate - truth):7.3f}  {rep.skipped:7d}")
