"""Episode replay with hindsight relabeling, independent or synchronized across agents.

A draw is split into two steps. ``draw_minibatch_spec`` picks
``(episode, t, relabel-timestep)`` triples; ``materialize`` turns a spec into
training rows, replacing the goal with the achieved goal at the relabel
timestep and recomputing the reward. Independent replay (``sample_her``) draws
one spec per agent. Synchronized replay (``sample_sher``) draws once and hands
every agent the same rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .env import compute_reward


class TerminalReason(str, Enum):
    TIME_LIMIT = "time_limit"
    DROPPED = "dropped"


class StaleIndexError(KeyError):
    """A minibatch spec refers to an episode that has been evicted."""


@dataclass
class JointTransition:
    x: np.ndarray
    prev_actions: np.ndarray
    actions: np.ndarray
    reward: float
    x_next: np.ndarray
    achieved_goal: float
    achieved_goal_next: float
    desired_goal: float
    dropped: bool = False

    @property
    def prev_actions_next(self) -> np.ndarray:
        return self.actions


@dataclass
class Episode:
    """One trajectory stored column-wise; ``episode[t]`` gives a JointTransition."""

    x: np.ndarray
    prev_actions: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    x_next: np.ndarray
    achieved_goal: np.ndarray
    achieved_goal_next: np.ndarray
    desired_goal: np.ndarray
    terminal_reason: TerminalReason = TerminalReason.TIME_LIMIT

    @classmethod
    def from_transitions(cls, transitions: Sequence[JointTransition],
                         terminal_reason: TerminalReason = TerminalReason.TIME_LIMIT) -> "Episode":
        if not transitions:
            raise ValueError("an episode needs at least one transition")
        col = lambda name: np.array([getattr(tr, name) for tr in transitions], dtype=np.float64)
        return cls(col("x"), col("prev_actions"), col("actions"), col("reward"), col("x_next"),
                   col("achieved_goal"), col("achieved_goal_next"), col("desired_goal"),
                   TerminalReason(terminal_reason))

    def __len__(self) -> int:
        return len(self.reward)

    def __getitem__(self, t: int) -> JointTransition:
        n = len(self)
        if not -n <= t < n:
            raise IndexError(t)
        t %= n
        return JointTransition(self.x[t], self.prev_actions[t], self.actions[t], float(self.reward[t]),
                               self.x_next[t], float(self.achieved_goal[t]),
                               float(self.achieved_goal_next[t]), float(self.desired_goal[t]),
                               dropped=(t == n - 1 and self.terminal_reason is TerminalReason.DROPPED))

    @property
    def prev_actions_next(self) -> np.ndarray:
        return self.actions

    @property
    def total_reward(self) -> float:
        return float(self.reward.sum())

    def check(self, reward_fn: Callable = compute_reward) -> None:
        """Raise ValueError unless the episode is internally consistent."""
        n = len(self)
        if n == 0:
            raise ValueError("empty episode")
        shapes = {len(a) for a in (self.x, self.prev_actions, self.actions, self.x_next,
                                   self.achieved_goal, self.achieved_goal_next, self.desired_goal)}
        if shapes != {n}:
            raise ValueError("episode columns have different lengths")
        if not np.all(np.isin(self.reward, (0.0, -1.0))):
            raise ValueError("rewards must be 0 or -1")
        if np.any(np.abs(self.actions) > 1.0) or np.any(np.abs(self.prev_actions) > 1.0):
            raise ValueError("actions must lie in [-1, 1]")
        if not np.array_equal(self.x_next[:-1], self.x[1:]):
            raise ValueError("x_next[t] != x[t+1]")
        if not np.array_equal(self.actions[:-1], self.prev_actions[1:]):
            raise ValueError("actions[t] != prev_actions[t+1]")
        if not np.array_equal(self.achieved_goal_next[:-1], self.achieved_goal[1:]):
            raise ValueError("achieved goal chain broken")
        if not np.array_equal(np.asarray(reward_fn(self.achieved_goal_next, self.desired_goal)), self.reward):
            raise ValueError("stored rewards disagree with the reward function")


@dataclass
class MinibatchSpec:
    episode_ids: np.ndarray
    timesteps: np.ndarray
    relabel: np.ndarray  # future timestep per row, -1 where the row keeps its goal

    def __len__(self) -> int:
        return len(self.timesteps)

    @property
    def relabeled(self) -> np.ndarray:
        return self.relabel >= 0


@dataclass
class Batch:
    x: np.ndarray
    prev_actions: np.ndarray
    actions: np.ndarray
    reward: np.ndarray
    x_next: np.ndarray
    prev_actions_next: np.ndarray
    desired_goal: np.ndarray
    achieved_goal_next: np.ndarray
    dropped: np.ndarray
    spec: Optional[MinibatchSpec] = None

    FIELDS = ("x", "prev_actions", "actions", "reward", "x_next", "prev_actions_next",
              "desired_goal", "achieved_goal_next", "dropped")

    def __len__(self) -> int:
        return len(self.reward)

    def equals(self, other: "Batch") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.FIELDS)


class ReplayBuffer:
    """Ring of whole episodes, evicted oldest first.

    Storage is preallocated as ``(capacity, horizon, ...)`` arrays; episode
    ids count up from 0 and an id stays valid until ``capacity`` newer
    episodes have been stored.
    """

    def __init__(self, capacity: int, horizon: int, state_dim: int, action_dim: int,
                 reward_fn: Callable = compute_reward):
        if capacity < 1 or horizon < 1:
            raise ValueError("capacity and horizon must be >= 1")
        self.capacity = capacity
        self.horizon = horizon
        self.reward_fn = reward_fn
        c, h = capacity, horizon
        self._x = np.zeros((c, h, state_dim))
        self._x_next = np.zeros((c, h, state_dim))
        self._prev_actions = np.zeros((c, h, action_dim))
        self._actions = np.zeros((c, h, action_dim))
        self._reward = np.zeros((c, h))
        self._ag = np.zeros((c, h))
        self._ag_next = np.zeros((c, h))
        self._dg = np.zeros((c, h))
        self._lengths = np.zeros(c, dtype=np.int64)
        self._dropped = np.zeros(c, dtype=bool)
        self.n_stored = 0

    def __len__(self) -> int:
        return min(self.n_stored, self.capacity)

    @property
    def oldest_id(self) -> int:
        return self.n_stored - len(self)

    def live_ids(self) -> np.ndarray:
        return np.arange(self.oldest_id, self.n_stored)

    def n_transitions(self) -> int:
        return int(self._lengths[self.live_ids() % self.capacity].sum())

    def __contains__(self, episode_id: int) -> bool:
        return self.oldest_id <= episode_id < self.n_stored

    def store_episode(self, episode: Episode) -> int:
        """Append an episode and return its id."""
        episode.check(self.reward_fn)
        n = len(episode)
        if n > self.horizon:
            raise ValueError(f"episode of length {n} exceeds buffer horizon {self.horizon}")
        slot = self.n_stored % self.capacity
        self._x[slot, :n] = episode.x
        self._x_next[slot, :n] = episode.x_next
        self._prev_actions[slot, :n] = episode.prev_actions
        self._actions[slot, :n] = episode.actions
        self._reward[slot, :n] = episode.reward
        self._ag[slot, :n] = episode.achieved_goal
        self._ag_next[slot, :n] = episode.achieved_goal_next
        self._dg[slot, :n] = episode.desired_goal
        self._lengths[slot] = n
        self._dropped[slot] = episode.terminal_reason is TerminalReason.DROPPED
        self.n_stored += 1
        return self.n_stored - 1

    def get_episode(self, episode_id: int) -> Episode:
        if episode_id not in self:
            raise StaleIndexError(episode_id)
        s = episode_id % self.capacity
        n = self._lengths[s]
        return Episode(self._x[s, :n].copy(), self._prev_actions[s, :n].copy(),
                       self._actions[s, :n].copy(), self._reward[s, :n].copy(),
                       self._x_next[s, :n].copy(), self._ag[s, :n].copy(), self._ag_next[s, :n].copy(),
                       self._dg[s, :n].copy(),
                       TerminalReason.DROPPED if self._dropped[s] else TerminalReason.TIME_LIMIT)

    def episode_lengths(self, episode_ids) -> np.ndarray:
        return self._lengths[np.asarray(episode_ids) % self.capacity]

    def dump(self, path) -> None:
        """Debug dump, one JSON object per transition, oldest episode first."""
        with open(path, "w") as fh:
            for eid in self.live_ids():
                ep = self.get_episode(int(eid))
                for t in range(len(ep)):
                    tr = ep[t]
                    fh.write(json.dumps({
                        "episode": int(eid), "t": t, "x": tr.x.tolist(),
                        "prev_actions": tr.prev_actions.tolist(), "actions": tr.actions.tolist(),
                        "reward": tr.reward, "x_next": tr.x_next.tolist(),
                        "achieved_goal": tr.achieved_goal, "achieved_goal_next": tr.achieved_goal_next,
                        "desired_goal": tr.desired_goal, "dropped": tr.dropped,
                    }) + "\n")


def _draw_positions(buffer: ReplayBuffer, n: int, rng: np.random.Generator):
    """``n`` (episode id, t) pairs uniform over all stored transitions."""
    ids = buffer.live_ids()
    lengths = buffer.episode_lengths(ids)
    ends = np.cumsum(lengths)
    flat = rng.integers(0, ends[-1], size=n)
    pos = np.searchsorted(ends, flat, side="right")
    t = flat - (ends[pos] - lengths[pos])
    return ids[pos], t, lengths[pos]


def draw_minibatch_spec(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator,
                        her_k: float = 4, window: Optional[int] = None) -> MinibatchSpec:
    """Sample row positions and hindsight relabel targets.

    Each row is relabeled with probability ``her_k / (her_k + 1)`` to a future
    timestep ``f`` uniform on ``[t, episode_end]``. With ``window`` set, rows
    come in groups of ``window`` consecutive timesteps of one episode that
    share a single relabel target.
    """
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty replay buffer")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    p_future = her_k / (her_k + 1.0)
    if window is None or window <= 1:
        ep, t, length = _draw_positions(buffer, batch_size, rng)
        use = rng.random(batch_size) < p_future
        f = t + np.floor(rng.random(batch_size) * (length - t)).astype(np.int64)
        relabel = np.where(use, f, -1)
        return MinibatchSpec(ep, t, relabel)

    n_windows = -(-batch_size // window)
    ep, t0, length = _draw_positions(buffer, n_windows, rng)
    start = np.minimum(t0, np.maximum(length - window, 0))
    offsets = np.arange(window)
    t = np.minimum(start[:, None] + offsets[None, :], (length - 1)[:, None])
    last = t[:, -1]
    use = rng.random(n_windows) < p_future
    f = last + np.floor(rng.random(n_windows) * (length - last)).astype(np.int64)
    relabel = np.where(use, f, -1)
    return MinibatchSpec(np.repeat(ep, window)[:batch_size], t.reshape(-1)[:batch_size],
                         np.repeat(relabel, window)[:batch_size])


def materialize(buffer: ReplayBuffer, spec: MinibatchSpec) -> Batch:
    """Gather rows for ``spec``; relabeled rows get a new goal and reward. Buffer is not modified."""
    ids = np.asarray(spec.episode_ids)
    live = (ids >= buffer.oldest_id) & (ids < buffer.n_stored)
    if not np.all(live):
        raise StaleIndexError(f"episodes {sorted(set(ids[~live].tolist()))} are no longer stored")
    slots = ids % buffer.capacity
    t = np.asarray(spec.timesteps)
    lengths = buffer._lengths[slots]
    if np.any(t < 0) or np.any(t >= lengths):
        raise IndexError("timestep outside its episode")
    relabel = np.asarray(spec.relabel)
    use = relabel >= 0
    if np.any(use & ((relabel < t) | (relabel >= lengths))):
        raise IndexError("relabel timestep must lie in [t, episode_end]")
    ag_next = buffer._ag_next[slots, t]
    goal = buffer._dg[slots, t].copy()
    reward = buffer._reward[slots, t].copy()
    if np.any(use):
        goal[use] = buffer._ag_next[slots[use], relabel[use]]
        reward[use] = buffer.reward_fn(ag_next[use], goal[use])
    actions = buffer._actions[slots, t]
    return Batch(
        x=buffer._x[slots, t],
        prev_actions=buffer._prev_actions[slots, t],
        actions=actions,
        reward=reward,
        x_next=buffer._x_next[slots, t],
        prev_actions_next=actions.copy(),
        desired_goal=goal,
        achieved_goal_next=ag_next,
        dropped=buffer._dropped[slots] & (t == lengths - 1),
        spec=spec,
    )


def sample_her(buffer: ReplayBuffer, batch_size: int, n_agents: int, rng: np.random.Generator,
               her_k: float = 4, window: Optional[int] = None) -> list[Batch]:
    """Independent hindsight replay: one fresh spec per agent."""
    return [materialize(buffer, draw_minibatch_spec(buffer, batch_size, rng, her_k, window))
            for _ in range(n_agents)]


def sample_sher(buffer: ReplayBuffer, batch_size: int, n_agents: int, rng: np.random.Generator,
                her_k: float = 4, window: Optional[int] = None) -> list[Batch]:
    """Synchronized hindsight replay: one spec, one materialization, shared by all agents."""
    batch = materialize(buffer, draw_minibatch_spec(buffer, batch_size, rng, her_k, window))
    return [batch] * n_agents
