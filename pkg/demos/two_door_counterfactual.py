"""Two doors, one noisy hint: exact counterfactual reasoning on a tiny POMDP.

Run with ``python demos/two_door_counterfactual.py``.
"""

import numpy as np

from cfrl import offpolicy as op
from cfrl import scm as S
from cfrl.envs import follow_hint_policy, two_door, uniform_policy
from cfrl.pomdp import compile as compile_pomdp, policy_intervention

env = two_door(0.8)
mu, pi = uniform_policy(env), follow_hint_policy(env)

# Compile the environment with the logging policy into an unrolled SCM.
model = compile_pomdp(env, mu)
print("SCM nodes:", " ".join(model.nodes))

# Before seeing anything, the prize is behind either door with equal odds.
# After the hint says "L", the posterior over the scenario tilts to 0.8 / 0.2.
post = S.infer_noise_posterior(model, {"O1": "L"})
print("P(scenario | hint = L):", {k[0]: round(v, 3) for k, v in post.marginal(["U_S1"]).items()})

# Swapping the policy is an intervention on the action mechanisms.
swap = policy_intervention(mu, pi, env)
print("value of mu:", S.expectation(S.interventional_marginal(model, S.Intervention(), "G")))
print("value of pi:", S.expectation(S.interventional_marginal(model, swap, "G")))

# Off-policy evaluation from logged uniform play: the counterfactual estimate
# replays each logged episode's inferred noise under the new policy.
buf = op.collect(env, mu, 20_000, seed=0)
for rep in (op.is_evaluate(buf, pi), op.mb_evaluate(env, pi, 20_000, 1), op.cf_evaluate(env, pi, buf, 2, rng=2)):
    print(f"{rep.estimator:>4}: {rep.estimate:.4f} +- {rep.stderr:.4f}")
print("episodes where pi would have done better than the log:",
      int(np.sum(op.counterfactual_returns(env, pi, buf.episodes, 2, 1, np.random.default_rng(3))[0][:, 0]
                 > buf.returns())))
