"""Two doors, one prize, one noisy hint.

The prize sits behind door ``L`` or ``R`` with equal probability.  The agent
sees a hint that names the right door with probability ``alpha``, opens one
door and is paid 1 if the prize is there.  Following the hint is worth
``alpha``; any fixed door is worth 0.5.
"""

import numpy as np

from ..policy import ObservationFeaturizer, TabularPolicy
from ..pomdp import TablePomdp
from ..scm import NoiseSpec

STATES = ("L", "R")
ACTIONS = ("openL", "openR")


def two_door(alpha=0.8):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    transition = np.array([[[0], [0]], [[1], [1]]])      # the prize never moves
    observation = np.array([[0, 1], [1, 0]])             # u=keep shows the truth
    reward = np.array([[1.0, 0.0], [0.0, 1.0]])
    return TablePomdp(
        states=STATES, actions=ACTIONS, observations=STATES, horizon=2,
        initial_probs=np.array([0.5, 0.5]),
        transition_noise=NoiseSpec("U_S", ("stay",), (1.0,)),
        transition=transition,
        observation_noise=NoiseSpec("U_O", ("keep", "flip"), (alpha, 1.0 - alpha)),
        observation=observation,
        reward_table=reward, reward_min=0.0, reward_max=1.0,
    )


def follow_hint_policy(pomdp, strength=np.inf):
    """Open the door the hint names (deterministic unless ``strength`` is finite)."""
    feat = ObservationFeaturizer(pomdp.n_obs, pomdp.horizon, k=1, include_step=True)
    table = {}
    for o in range(pomdp.n_obs):
        key = int(feat.step(feat.start(1), np.array([o]), None, 1)[1][0])
        row = np.full(pomdp.n_actions, -strength if np.isinf(strength) else 0.0)
        row[o] = 0.0 if np.isinf(strength) else strength
        table[key] = row
    return TabularPolicy.from_table(feat, pomdp.n_actions, table, pomdp.actions)


def uniform_policy(pomdp):
    feat = ObservationFeaturizer(pomdp.n_obs, pomdp.horizon, k=1, include_step=True)
    return TabularPolicy.uniform(feat, pomdp.n_actions, pomdp.actions)
