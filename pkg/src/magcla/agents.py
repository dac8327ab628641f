"""Per-agent actor/critic ensembles and their deterministic policy-gradient updates.

Every agent owns an actor, a critic and target copies of both. Critics always
see the full joint action:

    critic input = [x, goal(sin, cos), a_1 .. a_N]

What an actor sees depends on the algorithm:

* ``magcla``: ``[x, goal, neighbor action slices]``. For a finger the
  neighbors are the fingers on either side and itself; the wrist sees every
  agent. The observed actions are the previous step's executed actions
  (zeros at t=0), since same-step actions are not yet known at execution time.
* ``maddpg``: ``[x, goal]`` only, with one actor per hand part.
* ``ddpg``: a single agent that outputs the whole joint action.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .env import GOAL_ENC_DIM, EnvConfig, Observation, goal_encoding
from .nn_core import (Activation, AdamState, MlpParams, adam_step, clip_gradients,
                      mlp_backward, mlp_forward, mlp_init)

CHECKPOINT_VERSION = 1


class Role(str, Enum):
    FINGER = "finger"
    WRIST = "wrist"
    WHOLE = "whole"


class Algorithm(str, Enum):
    MAGCLA = "magcla"
    MADDPG = "maddpg"
    DDPG_SINGLE = "ddpg"


class ReplayMode(str, Enum):
    HER = "her"
    SHER = "sher"


@dataclass(frozen=True)
class AlgorithmVariant:
    algorithm: Algorithm = Algorithm.MAGCLA
    replay: ReplayMode = ReplayMode.SHER

    def __post_init__(self):
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "replay", ReplayMode(self.replay))

    @classmethod
    def parse(cls, text: str) -> "AlgorithmVariant":
        """Parse ``"magcla+sher"``, ``"maddpg-her"``, ``"ddpg_her"`` and the like."""
        cleaned = text.strip().lower()
        for sep in ("+", "-", "_", " "):
            if sep in cleaned:
                alg, rep = cleaned.split(sep, 1)
                break
        else:
            raise ValueError(f"variant {text!r} should look like 'magcla+sher'")
        try:
            return cls(Algorithm(alg), ReplayMode(rep))
        except ValueError:
            raise ValueError(f"unknown variant {text!r}; algorithms: magcla, maddpg, ddpg; "
                             "replay: her, sher") from None

    @property
    def label(self) -> str:
        return f"{self.algorithm.value}+{self.replay.value}"


@dataclass(frozen=True)
class AgentPartition:
    agent_id: int
    action_slice: tuple[int, int]
    neighbor_ids: tuple[int, ...]
    role: Role

    @property
    def size(self) -> int:
        return self.action_slice[1] - self.action_slice[0]

    def to_dict(self) -> dict:
        return {"agent_id": self.agent_id, "action_slice": list(self.action_slice),
                "neighbor_ids": list(self.neighbor_ids), "role": self.role.value}

    @classmethod
    def from_dict(cls, d: dict) -> "AgentPartition":
        return cls(int(d["agent_id"]), tuple(d["action_slice"]), tuple(d["neighbor_ids"]), Role(d["role"]))


def hand_partition(env_config: EnvConfig) -> list[AgentPartition]:
    """One agent per finger plus, if present, a wrist agent that watches everyone."""
    slices = env_config.agent_slices()
    finger_ids = [i for i, (_, _, role) in enumerate(slices) if role == "finger"]
    parts = []
    for i, (start, stop, role) in enumerate(slices):
        if role == "wrist":
            neighbors = tuple(range(len(slices)))
            parts.append(AgentPartition(i, (start, stop), neighbors, Role.WRIST))
        else:
            neighbors = tuple(j for j in (i - 1, i, i + 1) if j in finger_ids)
            parts.append(AgentPartition(i, (start, stop), neighbors, Role.FINGER))
    validate_partition(parts, env_config.action_dim)
    return parts


def single_partition(action_dim: int) -> list[AgentPartition]:
    return [AgentPartition(0, (0, action_dim), (), Role.WHOLE)]


def validate_partition(parts: Sequence[AgentPartition], action_dim: int) -> None:
    covered = np.zeros(action_dim, dtype=int)
    for k, p in enumerate(parts):
        if p.agent_id != k:
            raise ValueError("agent ids must be 0..N-1 in order")
        start, stop = p.action_slice
        if not 0 <= start < stop <= action_dim:
            raise ValueError(f"agent {k} slice {p.action_slice} out of range")
        covered[start:stop] += 1
        if any(not 0 <= j < len(parts) for j in p.neighbor_ids):
            raise ValueError(f"agent {k} has an unknown neighbor")
    if not np.all(covered == 1):
        raise ValueError("agent slices must be disjoint and cover the joint action")


def build_critic_obs(x, desired_goal, joint_actions) -> np.ndarray:
    """``[x, (sin g, cos g), a_1..a_N]``; the same layout for every agent."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(joint_actions, dtype=np.float64)
    if x.ndim != a.ndim:
        raise ValueError("x and joint_actions must both be vectors or both be batches")
    return np.concatenate([x, goal_encoding(desired_goal), a], axis=-1)


def build_actor_obs(agent: AgentPartition, x, desired_goal, reference_actions,
                    partitions: Sequence[AgentPartition], observe_neighbors: bool = True) -> np.ndarray:
    """``[x, goal, reference_actions sliced for agent's neighbors in order]``."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(reference_actions, dtype=np.float64)
    parts = [x, goal_encoding(desired_goal)]
    if observe_neighbors:
        total = partitions[-1].action_slice[1]
        if ref.shape[-1] != total:
            raise ValueError(f"reference actions have {ref.shape[-1]} entries, expected {total}")
        parts.extend(ref[..., slice(*partitions[j].action_slice)] for j in agent.neighbor_ids)
    return np.concatenate(parts, axis=-1)


@dataclass
class AgentNets:
    actor: MlpParams
    critic: MlpParams
    target_actor: MlpParams
    target_critic: MlpParams
    actor_opt: AdamState
    critic_opt: AdamState

    def copy(self) -> "AgentNets":
        return AgentNets(self.actor.copy(), self.critic.copy(), self.target_actor.copy(),
                         self.target_critic.copy(), self.actor_opt.copy(), self.critic_opt.copy())


@dataclass
class Exploration:
    noise_sigma: float = 0.2
    random_eps: float = 0.3


@dataclass
class UpdateSettings:
    gamma: float = 0.98
    action_l2: float = 1.0
    clip_return: bool = True
    grad_clip: Optional[float] = 10.0


@dataclass
class Ensemble:
    variant: AlgorithmVariant
    partitions: list[AgentPartition]
    nets: list[AgentNets]
    state_dim: int
    action_dim: int
    _actor_idx: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        validate_partition(self.partitions, self.action_dim)
        observe = self.variant.algorithm is Algorithm.MAGCLA
        self._actor_idx = []
        for p in self.partitions:
            if observe:
                idx = [np.arange(*self.partitions[j].action_slice) for j in p.neighbor_ids]
                self._actor_idx.append(np.concatenate(idx) if idx else np.zeros(0, dtype=int))
            else:
                self._actor_idx.append(np.zeros(0, dtype=int))

    @property
    def n_agents(self) -> int:
        return len(self.partitions)

    @property
    def critic_input_dim(self) -> int:
        return self.state_dim + GOAL_ENC_DIM + self.action_dim

    def actor_input_dim(self, agent_id: int) -> int:
        return self.state_dim + GOAL_ENC_DIM + len(self._actor_idx[agent_id])

    @property
    def observes_neighbors(self) -> bool:
        return self.variant.algorithm is Algorithm.MAGCLA

    def actor_obs(self, agent_id: int, x, goal, reference_actions) -> np.ndarray:
        return build_actor_obs(self.partitions[agent_id], x, goal, reference_actions,
                               self.partitions, self.observes_neighbors)

    def act(self, x, goal, reference_actions, target: bool = False) -> np.ndarray:
        """Noise-free joint action for a single observation or a batch."""
        ref = np.asarray(reference_actions, dtype=np.float64)
        out = np.empty(ref.shape)
        for p, nets in zip(self.partitions, self.nets):
            net = nets.target_actor if target else nets.actor
            a, _ = mlp_forward(net, self.actor_obs(p.agent_id, x, goal, ref))
            out[..., slice(*p.action_slice)] = a
        return out

    def snapshot(self) -> "Ensemble":
        return Ensemble(self.variant, list(self.partitions), [n.copy() for n in self.nets],
                        self.state_dim, self.action_dim)

    # -- checkpoints --

    def to_dict(self, include_optimizer: bool = False, meta: Optional[dict] = None) -> dict:
        agents = []
        for nets in self.nets:
            d = {"actor": nets.actor.to_dict(), "critic": nets.critic.to_dict(),
                 "target_actor": nets.target_actor.to_dict(),
                 "target_critic": nets.target_critic.to_dict()}
            if include_optimizer:
                d["actor_opt"] = nets.actor_opt.to_dict()
                d["critic_opt"] = nets.critic_opt.to_dict()
            agents.append(d)
        return {"format_version": CHECKPOINT_VERSION,
                "variant": {"algorithm": self.variant.algorithm.value, "replay": self.variant.replay.value},
                "state_dim": self.state_dim, "action_dim": self.action_dim,
                "partitions": [p.to_dict() for p in self.partitions], "agents": agents,
                "meta": dict(meta or {})}

    @classmethod
    def from_dict(cls, d: dict, actor_lr: float = 1e-3, critic_lr: float = 1e-3) -> "Ensemble":
        if d.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported ensemble checkpoint version {d.get('format_version')!r}")
        nets = []
        for a in d["agents"]:
            actor, critic = MlpParams.from_dict(a["actor"]), MlpParams.from_dict(a["critic"])
            actor_opt = (AdamState.from_dict(a["actor_opt"], actor) if "actor_opt" in a
                         else AdamState.for_params(actor, actor_lr))
            critic_opt = (AdamState.from_dict(a["critic_opt"], critic) if "critic_opt" in a
                          else AdamState.for_params(critic, critic_lr))
            nets.append(AgentNets(actor, critic, MlpParams.from_dict(a["target_actor"]),
                                  MlpParams.from_dict(a["target_critic"]), actor_opt, critic_opt))
        return cls(AlgorithmVariant(**d["variant"]), [AgentPartition.from_dict(p) for p in d["partitions"]],
                   nets, int(d["state_dim"]), int(d["action_dim"]))

    def save(self, path, include_optimizer: bool = False, meta: Optional[dict] = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(include_optimizer, meta), fh)

    @classmethod
    def load(cls, path) -> "Ensemble":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def checkpoint_meta(path) -> dict:
    """The ``meta`` block (run configs) stored alongside an ensemble checkpoint."""
    with open(path) as fh:
        return json.load(fh).get("meta", {})


def make_ensemble(variant: AlgorithmVariant, partition: Sequence[AgentPartition], state_dim: int,
                  action_dim: int, seed=0, hidden: Sequence[int] = (64, 64),
                  actor_lr: float = 1e-3, critic_lr: float = 1e-3) -> Ensemble:
    """Build online and target networks for each agent; targets start as exact copies."""
    variant = AlgorithmVariant(variant.algorithm, variant.replay)
    if variant.algorithm is Algorithm.DDPG_SINGLE:
        if len(partition) != 1:
            partition = single_partition(action_dim)
    elif len(partition) == 1 and partition[0].role is Role.WHOLE and action_dim > 1:
        raise ValueError(f"{variant.algorithm.value} needs a per-part partition, got a single agent")
    partition = list(partition)
    validate_partition(partition, action_dim)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shell = Ensemble(variant, partition, [], state_dim, action_dim)
    nets = []
    for p in partition:
        actor = mlp_init([shell.actor_input_dim(p.agent_id), *hidden, p.size], Activation.TANH, rng)
        critic = mlp_init([shell.critic_input_dim, *hidden, 1], Activation.IDENTITY, rng)
        nets.append(AgentNets(actor, critic, actor.copy(), critic.copy(),
                              AdamState.for_params(actor, actor_lr),
                              AdamState.for_params(critic, critic_lr)))
    shell.nets = nets
    return shell


def select_action(ensemble: Ensemble, observation: Observation, exploration: Optional[Exploration] = None,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Joint action for one observation; ``exploration=None`` is the deterministic policy."""
    a = ensemble.act(observation.x, observation.desired_goal, observation.prev_actions)
    if exploration is None:
        return a
    if rng is None:
        raise ValueError("exploration needs an rng")
    for p in ensemble.partitions:
        sl = slice(*p.action_slice)
        noisy = a[sl] + exploration.noise_sigma * rng.standard_normal(p.size)
        a[sl] = np.clip(noisy, -1.0, 1.0)
        if rng.random() < exploration.random_eps:
            a[sl] = rng.uniform(-1.0, 1.0, p.size)
    return a


def next_joint_actions(ensemble: Ensemble, batch) -> np.ndarray:
    """a' from every agent's target actor on the next observations."""
    return ensemble.act(batch.x_next, batch.desired_goal, batch.prev_actions_next, target=True)


def compute_td_target(ensemble: Ensemble, agent_id: int, batch, gamma: float,
                      next_actions: Optional[np.ndarray] = None, clip_return: bool = True) -> np.ndarray:
    """y = r + gamma * Q'_i(x', g, a'), with bootstrapping cut on dropped terminals.

    With ``clip_return`` the target is clipped to the attainable range of a
    discounted sum of {0, -1} rewards, ``[-1/(1-gamma), 0]``.
    """
    if next_actions is None:
        next_actions = next_joint_actions(ensemble, batch)
    reward = np.asarray(batch.reward, dtype=np.float64)
    if gamma == 0:
        return reward.copy()
    nets = ensemble.nets[agent_id]
    q_next, _ = mlp_forward(nets.target_critic, build_critic_obs(batch.x_next, batch.desired_goal, next_actions))
    alive = 1.0 - np.asarray(batch.dropped, dtype=np.float64)
    y = reward + gamma * alive * q_next[:, 0]
    if clip_return:
        y = np.clip(y, -1.0 / (1.0 - gamma), 0.0)
    return y


def critic_loss_and_grad(critic: MlpParams, critic_obs: np.ndarray, y: np.ndarray):
    """Mean squared TD error and its parameter gradient."""
    q, cache = mlp_forward(critic, critic_obs)
    err = q[:, 0] - y
    loss = float(np.mean(err * err))
    upstream = (2.0 / len(y)) * err[:, None]
    return loss, mlp_backward(critic, cache, upstream)


def actor_loss_and_grad(actor: MlpParams, critic: MlpParams, actor_obs: np.ndarray,
                        critic_obs: np.ndarray, action_slice: tuple[int, int], state_goal_dim: int,
                        action_l2: float = 1.0):
    """Loss ``-mean Q(o_critic | a_i = mu(o_actor)) + c * mean(a_i^2)`` and its actor gradient.

    Only agent i's slice of the critic's action block is replaced; the other
    slices keep the batch's stored actions. Returns ``(loss, grads, mean_q)``.
    """
    a, a_cache = mlp_forward(actor, actor_obs)
    start, stop = action_slice
    co = critic_obs.copy()
    co[:, state_goal_dim + start:state_goal_dim + stop] = a
    q, q_cache = mlp_forward(critic, co)
    b = len(a)
    mean_q = float(np.mean(q))
    loss = -mean_q + action_l2 * float(np.mean(a * a))
    q_grads = mlp_backward(critic, q_cache, np.full((b, 1), -1.0 / b), want_input_gradient=True)
    da = q_grads.input_gradient[:, state_goal_dim + start:state_goal_dim + stop]
    da = da + action_l2 * 2.0 * a / a.size
    return loss, mlp_backward(actor, a_cache, da), mean_q


def critic_update(nets: AgentNets, batch, y: np.ndarray, grad_clip: Optional[float] = 10.0) -> float:
    """One Adam step on the critic's MSE; returns the loss before the step."""
    co = build_critic_obs(batch.x, batch.desired_goal, batch.actions)
    loss, grads = critic_loss_and_grad(nets.critic, co, y)
    if not np.isfinite(loss):
        raise FloatingPointError("critic loss is not finite")
    nets.critic, nets.critic_opt = adam_step(nets.critic, clip_gradients(grads, grad_clip), nets.critic_opt)
    return loss


def actor_update(ensemble: Ensemble, agent_id: int, batch, action_l2: float = 1.0,
                 grad_clip: Optional[float] = 10.0) -> float:
    """One Adam step ascending the critic along agent i's action; returns mean Q before the step."""
    nets = ensemble.nets[agent_id]
    p = ensemble.partitions[agent_id]
    ao = ensemble.actor_obs(agent_id, batch.x, batch.desired_goal, batch.prev_actions)
    co = build_critic_obs(batch.x, batch.desired_goal, batch.actions)
    loss, grads, mean_q = actor_loss_and_grad(nets.actor, nets.critic, ao, co, p.action_slice,
                                              ensemble.state_dim + GOAL_ENC_DIM, action_l2)
    if not np.isfinite(loss):
        raise FloatingPointError("actor objective is not finite")
    nets.actor, nets.actor_opt = adam_step(nets.actor, clip_gradients(grads, grad_clip), nets.actor_opt)
    return mean_q


def soft_update(nets: AgentNets, tau: float) -> None:
    """theta' <- tau * theta + (1 - tau) * theta' for target actor and critic."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    for online, target in ((nets.actor, nets.target_actor), (nets.critic, nets.target_critic)):
        for src, dst in zip(online.arrays(), target.arrays()):
            if tau == 1.0:
                dst[...] = src
            elif tau != 0.0:
                dst[...] = tau * src + (1.0 - tau) * dst


def update_agents(ensemble: Ensemble, batches: Sequence, settings: UpdateSettings) -> tuple[float, float]:
    """Critic then actor update for each agent in id order; returns mean loss and mean Q.

    Agents handed the same batch object share one target-action computation.
    """
    losses, objs = [], []
    cached_for = None
    next_a = None
    for i, batch in enumerate(batches):
        if batch is not cached_for:
            next_a = next_joint_actions(ensemble, batch)
            cached_for = batch
        y = compute_td_target(ensemble, i, batch, settings.gamma, next_a, settings.clip_return)
        losses.append(critic_update(ensemble.nets[i], batch, y, settings.grad_clip))
        objs.append(actor_update(ensemble, i, batch, settings.action_l2, settings.grad_clip))
    return float(np.mean(losses)), float(np.mean(objs))
