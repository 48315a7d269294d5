"""Learning to push a box with a wrong model: MB-PS vs GPS-like vs CF-GPS.

All three learners plan in the corrupted model and are scored in the real grid.
MB-PS imagines episodes from the wrong prior; the guided variants start their
imagined episodes from scenarios inferred from real experience.

Run with ``python demos/desk_policy_search.py [iterations]``.
"""

import sys

from cfrl import offpolicy as op
from cfrl import search as srch
from cfrl.envs import gridpush as gp

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 100
env = gp.as_pomdp(gp.desk_preset())
model = op.corrupt_prior(env, 0.5)
expert = gp.expert_policy(env)
cfg = srch.SearchConfig(iterations=iterations, n_rollouts=40, n_cf=10, n_eval=200, seed=0)

print(f"expert return: {gp.expert_value(env)}")
for algo in ("mbps", "gpslike", "cfgps"):
    res = srch.ALGORITHMS[algo](model, cfg, env, expert)
    curve = [f"{r.true_eval_return:.2f}" for r in res.metrics[:: max(1, iterations // 5)]]
    final, se = srch.evaluate_policy(env, res.policy, 5000, 99)
    print(f"{algo:>8}: curve {' '.join(curve)}  final {final:.3f} +- {se:.3f}")
