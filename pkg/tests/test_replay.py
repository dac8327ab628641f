import json

import numpy as np
import pytest

from magcla.env import EnvConfig, Trial, compute_reward, make_env
from magcla.replay import (Batch, Episode, JointTransition, MinibatchSpec, ReplayBuffer, StaleIndexError,
                           TerminalReason, draw_minibatch_spec, materialize, sample_her, sample_sher)

from conftest import filled_buffer, random_episode


def tiny_episode(goals=(0.0,), ag=(0.5, 0.5)):
    """Episode with achieved goals ``ag`` (one longer than ``goals``) and zero states/actions."""
    steps = [JointTransition(np.zeros(7), np.zeros(7), np.zeros(7), compute_reward(ag[t + 1], g), np.zeros(7),
                             ag[t], ag[t + 1], g) for t, g in enumerate(goals)]
    return Episode.from_transitions(steps)


class TestBuffer:
    def test_store_one(self):
        buf = ReplayBuffer(3, 50, 7, 7)
        assert buf.store_episode(tiny_episode()) == 0
        assert len(buf) == 1

    def test_ring_eviction(self):
        buf = filled_buffer(n_episodes=6, capacity=5)
        assert len(buf) == 5
        assert 0 not in buf and 5 in buf
        with pytest.raises(StaleIndexError):
            buf.get_episode(0)

    def test_round_trip(self):
        env = make_env(EnvConfig())
        ep = random_episode(env, np.random.default_rng(2))
        buf = ReplayBuffer(4, 50, 7, 7)
        eid = buf.store_episode(ep)
        back = buf.get_episode(eid)
        for name in ("x", "actions", "reward", "x_next", "achieved_goal_next", "desired_goal"):
            np.testing.assert_array_equal(getattr(back, name), getattr(ep, name))
        assert back.terminal_reason is ep.terminal_reason

    def test_rewards_binary(self, rotation_buffer):
        for eid in rotation_buffer.live_ids():
            assert np.all(np.isin(rotation_buffer.get_episode(int(eid)).reward, (0.0, -1.0)))

    def test_rejects_inconsistent_episode(self):
        ep = tiny_episode(goals=(0.0, 0.0), ag=(0.5, 0.5, 0.5))
        ep.reward[0] = 0.0
        with pytest.raises(ValueError):
            ReplayBuffer(2, 50, 7, 7).store_episode(ep)

    def test_rejects_too_long(self):
        with pytest.raises(ValueError):
            ReplayBuffer(2, 1, 7, 7).store_episode(tiny_episode((0.0, 0.0), (0.5, 0.5, 0.5)))

    def test_dropped_flag_on_last_step(self):
        ep = tiny_episode((0.0, 0.0), (0.5, 0.5, 0.5))
        ep.terminal_reason = TerminalReason.DROPPED
        assert ep[-1].dropped and not ep[0].dropped

    def test_dump(self, tmp_path, rotation_buffer):
        rotation_buffer.dump(tmp_path / "b.jsonl")
        lines = (tmp_path / "b.jsonl").read_text().splitlines()
        assert len(lines) == rotation_buffer.n_transitions()
        assert set(json.loads(lines[0])) >= {"episode", "t", "reward", "desired_goal"}


class TestSpec:
    def test_k_zero(self, rotation_buffer):
        spec = draw_minibatch_spec(rotation_buffer, 500, np.random.default_rng(0), her_k=0)
        assert not spec.relabeled.any()

    def test_single_step_episode(self):
        buf = ReplayBuffer(2, 50, 7, 7)
        buf.store_episode(tiny_episode())
        spec = draw_minibatch_spec(buf, 64, np.random.default_rng(0))
        assert np.all(spec.episode_ids == 0) and np.all(spec.timesteps == 0)
        assert set(spec.relabel.tolist()) <= {-1, 0}

    def test_relabel_fraction(self, rotation_buffer):
        spec = draw_minibatch_spec(rotation_buffer, 100_000, np.random.default_rng(1), her_k=4)
        assert abs(spec.relabeled.mean() - 0.8) < 0.01

    def test_future_range(self, rotation_buffer):
        spec = draw_minibatch_spec(rotation_buffer, 5000, np.random.default_rng(2))
        lengths = rotation_buffer.episode_lengths(spec.episode_ids)
        r = spec.relabeled
        assert np.all(spec.relabel[r] >= spec.timesteps[r])
        assert np.all(spec.relabel[r] < lengths[r])

    def test_deterministic(self, rotation_buffer):
        a = draw_minibatch_spec(rotation_buffer, 64, np.random.default_rng(3))
        b = draw_minibatch_spec(rotation_buffer, 64, np.random.default_rng(3))
        assert np.array_equal(a.relabel, b.relabel) and np.array_equal(a.timesteps, b.timesteps)

    def test_empty_buffer(self):
        with pytest.raises(ValueError):
            draw_minibatch_spec(ReplayBuffer(2, 50, 7, 7), 4, np.random.default_rng(0))

    def test_window_groups_share_relabel(self, rotation_buffer):
        spec = draw_minibatch_spec(rotation_buffer, 40, np.random.default_rng(4), window=8)
        groups = spec.relabel.reshape(5, 8)
        assert np.all(groups == groups[:, :1])
        assert np.all(spec.episode_ids.reshape(5, 8) == spec.episode_ids.reshape(5, 8)[:, :1])


class TestMaterialize:
    def test_relabel_soundness(self, rotation_buffer):
        spec = draw_minibatch_spec(rotation_buffer, 2000, np.random.default_rng(5))
        b = materialize(rotation_buffer, spec)
        np.testing.assert_array_equal(b.reward, compute_reward(b.achieved_goal_next, b.desired_goal))

    def test_f_equals_t_gives_zero_reward(self, rotation_buffer):
        ids = rotation_buffer.live_ids()[:5]
        t = np.minimum([0, 3, 10, 20, 49], rotation_buffer.episode_lengths(ids) - 1)
        b = materialize(rotation_buffer, MinibatchSpec(ids, t, t.copy()))
        assert np.all(b.reward == 0.0)
        np.testing.assert_array_equal(b.desired_goal, b.achieved_goal_next)

    def test_unrelabeled_row_matches_storage(self, rotation_buffer):
        eid = int(rotation_buffer.live_ids()[2])
        b = materialize(rotation_buffer, MinibatchSpec(np.array([eid]), np.array([7]), np.array([-1])))
        tr = rotation_buffer.get_episode(eid)[7]
        np.testing.assert_array_equal(b.x[0], tr.x)
        np.testing.assert_array_equal(b.actions[0], tr.actions)
        np.testing.assert_array_equal(b.prev_actions_next[0], tr.prev_actions_next)
        assert b.reward[0] == tr.reward and b.desired_goal[0] == tr.desired_goal

    def test_far_goal_reward_negative(self):
        ep = tiny_episode(goals=(0.0, 0.0), ag=(0.4, 0.5, 2.0))
        buf = ReplayBuffer(2, 50, 7, 7)
        buf.store_episode(ep)
        b = materialize(buf, MinibatchSpec(np.array([0]), np.array([0]), np.array([1])))
        assert b.desired_goal[0] == 2.0
        assert b.reward[0] == compute_reward(0.5, 2.0) == -1.0

    def test_stale_rejected(self):
        buf = filled_buffer(n_episodes=3, capacity=3)
        spec = draw_minibatch_spec(buf, 32, np.random.default_rng(0))
        env = make_env(EnvConfig())
        for _ in range(3):
            buf.store_episode(random_episode(env, np.random.default_rng(9)))
        with pytest.raises(StaleIndexError):
            materialize(buf, spec)

    def test_buffer_unchanged(self, rotation_buffer):
        before = rotation_buffer._dg.copy(), rotation_buffer._reward.copy()
        b = materialize(rotation_buffer, draw_minibatch_spec(rotation_buffer, 500, np.random.default_rng(6)))
        b.reward[:] = 7.0
        np.testing.assert_array_equal(rotation_buffer._dg, before[0])
        np.testing.assert_array_equal(rotation_buffer._reward, before[1])


class TestSamplers:
    def test_sher_identical(self, rotation_buffer):
        rng = np.random.default_rng(0)
        for _ in range(20):
            batches = sample_sher(rotation_buffer, 128, 4, rng)
            assert all(b.equals(batches[0]) for b in batches)

    def test_her_differs(self, rotation_buffer):
        rng = np.random.default_rng(1)
        differing = sum(
            any(not b.equals(bs[0]) for b in bs[1:])
            for bs in (sample_her(rotation_buffer, 128, 6, rng) for _ in range(100)))
        assert differing == 100

    def test_single_agent_her_equals_sher(self, rotation_buffer):
        a = sample_her(rotation_buffer, 64, 1, np.random.default_rng(7))[0]
        b = sample_sher(rotation_buffer, 64, 1, np.random.default_rng(7))[0]
        assert a.equals(b)

    def test_her_single_equals_one_draw(self, rotation_buffer):
        a = sample_her(rotation_buffer, 64, 1, np.random.default_rng(8))[0]
        b = materialize(rotation_buffer, draw_minibatch_spec(rotation_buffer, 64, np.random.default_rng(8)))
        assert a.equals(b)

    def test_reproducible(self, rotation_buffer):
        a = sample_her(rotation_buffer, 32, 3, np.random.default_rng(2))
        b = sample_her(rotation_buffer, 32, 3, np.random.default_rng(2))
        assert all(x.equals(y) for x, y in zip(a, b))
