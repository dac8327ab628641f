import numpy as np
import pytest

from magcla.env import EnvConfig, Trial, make_env
from magcla.replay import Episode, JointTransition, ReplayBuffer, TerminalReason


def random_episode(env, rng, trial=None, length=None):
    """Roll out uniform random joint actions; returns an Episode."""
    if trial is None:
        trial = Trial(int(rng.integers(0, 2**31 - 1)), float(rng.uniform(-3.0, 3.0)))
    obs = env.reset(trial)
    steps = []
    reason = TerminalReason.TIME_LIMIT
    while True:
        a = rng.uniform(-1.0, 1.0, env.action_dim)
        nxt, r, terminal, info = env.step(a)
        steps.append(JointTransition(obs.x, obs.prev_actions, np.clip(a, -1, 1), r, nxt.x, obs.achieved_goal,
                                     nxt.achieved_goal, obs.desired_goal))
        obs = nxt
        if terminal or (length is not None and len(steps) >= length):
            if info["dropped"]:
                reason = TerminalReason.DROPPED
            break
    return Episode.from_transitions(steps, reason)


def filled_buffer(n_episodes=20, capacity=50, seed=0, config=None):
    config = config or EnvConfig()
    env = make_env(config)
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(capacity, config.episode_length, config.state_dim, config.action_dim,
                       env.compute_reward)
    for _ in range(n_episodes):
        buf.store_episode(random_episode(env, rng))
    return buf


@pytest.fixture
def rotation_buffer():
    return filled_buffer()
