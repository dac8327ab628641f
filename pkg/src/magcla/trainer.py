"""Training loop: collect episodes, replay, update critics and actors, track validation success.

The default schedule works in epochs of ``cycles_per_epoch`` cycles. A cycle
collects ``episodes_per_cycle`` exploratory episodes, runs
``batches_per_cycle`` replay iterations and then soft-updates every target
network once. Each iteration updates every agent's critic and then its actor,
in agent-id order. With ``update_schedule="per_step"`` there is one replay
iteration and one target update after every environment step instead.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .agents import (AlgorithmVariant, Ensemble, Exploration, UpdateSettings, hand_partition,
                     make_ensemble, select_action, single_partition, soft_update, update_agents)
from .agents import Algorithm, ReplayMode
from .env import (VALIDATION_SEED, EnvConfig, MalfunctionMask, Trial, apply_malfunction,
                  bundled_trials, make_env, make_trials, sample_goal)
from .plotting import line_chart_svg
from .replay import Episode, JointTransition, ReplayBuffer, TerminalReason, sample_her, sample_sher

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "success_rate", "mean_return", "critic_loss", "actor_obj", "seconds", "rng_fp")


@dataclass
class TrainConfig:
    epochs: int = 400
    cycles_per_epoch: int = 25
    batches_per_cycle: int = 25
    episodes_per_cycle: int = 2
    batch_size: int = 128
    gamma: float = 0.98
    tau: float = 0.05
    noise_sigma: float = 0.2
    random_eps: float = 0.3
    her_k: float = 4.0
    buffer_capacity: int = 1000
    eval_every_epochs: int = 20
    validation_trials: int = 50
    seed: int = 0
    variant: str = "magcla+sher"
    hidden: tuple = (64, 64)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    action_l2: float = 1.0
    grad_clip: Optional[float] = 10.0
    clip_return: bool = True
    update_schedule: str = "cycle"
    sher_window: Optional[int] = None
    checkpoint_every_eval: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("epochs", "cycles_per_epoch", "batches_per_cycle", "episodes_per_cycle",
                     "batch_size", "buffer_capacity", "eval_every_epochs", "validation_trials"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("noise_sigma", "her_k", "action_l2", "actor_lr", "critic_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("gamma", "tau", "random_eps"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.gamma >= 1.0 and self.clip_return:
            raise ValueError("clip_return needs gamma < 1")
        if self.update_schedule not in ("cycle", "per_step"):
            raise ValueError("update_schedule must be 'cycle' or 'per_step'")
        if self.sher_window is not None and self.sher_window < 1:
            raise ValueError("sher_window must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be >= 1")
        AlgorithmVariant.parse(self.variant)

    @property
    def algorithm_variant(self) -> AlgorithmVariant:
        return AlgorithmVariant.parse(self.variant)

    @property
    def exploration(self) -> Exploration:
        return Exploration(self.noise_sigma, self.random_eps)

    @property
    def update_settings(self) -> UpdateSettings:
        return UpdateSettings(self.gamma, self.action_l2, self.clip_return, self.grad_clip)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """CI-sized budget: 100 epochs x 10 cycles x 10 batches."""
        base = dict(epochs=100, cycles_per_epoch=10, batches_per_cycle=10)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LogRow:
    epoch: int
    success_rate: float
    mean_return: float
    critic_loss: float
    actor_obj: float
    seconds: float
    rng_fp: str

    def as_csv(self) -> list[str]:
        return [str(self.epoch), repr(float(self.success_rate)), repr(float(self.mean_return)),
                repr(float(self.critic_loss)), repr(float(self.actor_obj)), repr(float(self.seconds)),
                self.rng_fp]


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def append(self, row: LogRow) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise ValueError("log rows must have strictly increasing epochs")
        if not 0.0 <= row.success_rate <= 1.0:
            raise ValueError("success rate outside [0, 1]")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def success_rates(self) -> list[float]:
        return [r.success_rate for r in self.rows]

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                out.append(LogRow(int(rec["epoch"]), float(rec["success_rate"]), float(rec["mean_return"]),
                                  float(rec["critic_loss"]), float(rec["actor_obj"]), float(rec["seconds"]),
                                  rec["rng_fp"]))
        return out


@dataclass
class TrainResult:
    log: TrainLog
    ensemble: Ensemble
    out_dir: Optional[Path] = None
    timing: list[float] = field(default_factory=list)


def rng_fingerprint(*rngs: np.random.Generator) -> str:
    blob = json.dumps([r.bit_generator.state for r in rngs], sort_keys=True, default=int)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def partition_for(variant: AlgorithmVariant, env_config: EnvConfig):
    if variant.algorithm is Algorithm.DDPG_SINGLE:
        return single_partition(env_config.action_dim)
    return hand_partition(env_config)


def build_ensemble(config: TrainConfig, env_config: EnvConfig, seed) -> Ensemble:
    variant = config.algorithm_variant
    return make_ensemble(variant, partition_for(variant, env_config), env_config.state_dim,
                         env_config.action_dim, seed, config.hidden, config.actor_lr, config.critic_lr)


def random_trial(rng: np.random.Generator) -> Trial:
    return Trial(int(rng.integers(0, 2**31 - 1)), sample_goal(rng))


def rollout_episode(env, ensemble: Ensemble, exploration: Optional[Exploration],
                    rng: Optional[np.random.Generator], trial: Optional[Trial] = None,
                    mask: Optional[MalfunctionMask] = None,
                    on_step: Optional[Callable[[], None]] = None) -> Episode:
    """Run one episode; a fresh trial is drawn from ``rng`` when none is given."""
    if trial is None:
        trial = random_trial(rng)
    obs = env.reset(trial)
    steps: list[JointTransition] = []
    reason = TerminalReason.TIME_LIMIT
    while True:
        a = select_action(ensemble, obs, exploration, rng)
        a = apply_malfunction(np.clip(a, -1.0, 1.0), mask, env.config)
        nxt, reward, terminal, info = env.step(a)
        steps.append(JointTransition(obs.x, obs.prev_actions, a, reward, nxt.x, obs.achieved_goal,
                                     nxt.achieved_goal, obs.desired_goal))
        obs = nxt
        if on_step is not None:
            on_step()
        if terminal:
            if info["dropped"]:
                reason = TerminalReason.DROPPED
            break
    return Episode.from_transitions(steps, reason)


@dataclass
class EvalOutcome:
    successes: np.ndarray
    returns: np.ndarray
    final_rewards: np.ndarray
    dropped: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes)) if len(self.successes) else 0.0


def evaluate_trials(ensemble: Ensemble, env_config: EnvConfig, trials: Sequence[Trial],
                    mask: Optional[MalfunctionMask] = None) -> EvalOutcome:
    """Deterministic noise-free rollouts of every trial, batched across trials.

    A trial succeeds when its final reward is 0 and the object was not dropped.
    """
    envs = [make_env(env_config) for _ in trials]
    obs = [e.reset(t) for e, t in zip(envs, trials)]
    n = len(trials)
    active = np.ones(n, dtype=bool)
    returns = np.zeros(n)
    final = np.full(n, -1.0)
    dropped = np.zeros(n, dtype=bool)
    while active.any():
        idx = np.flatnonzero(active)
        x = np.stack([obs[i].x for i in idx])
        g = np.array([obs[i].desired_goal for i in idx])
        prev = np.stack([obs[i].prev_actions for i in idx])
        acts = apply_malfunction(ensemble.act(x, g, prev), mask, env_config)
        for k, i in enumerate(idx):
            obs[i], r, terminal, info = envs[i].step(acts[k])
            returns[i] += r
            if terminal:
                active[i] = False
                final[i] = r
                dropped[i] = info["dropped"]
    return EvalOutcome((final == 0.0) & ~dropped, returns, final, dropped)


def validate(ensemble: Ensemble, env_config: EnvConfig, trials: Sequence[Trial]) -> float:
    return evaluate_trials(ensemble, env_config, trials).success_rate


def make_buffer(config: TrainConfig, env_config: EnvConfig, env) -> ReplayBuffer:
    return ReplayBuffer(config.buffer_capacity, env_config.episode_length, env_config.state_dim,
                        env_config.action_dim, env.compute_reward)


def replay_iteration(ensemble: Ensemble, buffer: ReplayBuffer, config: TrainConfig,
                     rng: np.random.Generator) -> tuple[float, float]:
    sampler = sample_sher if config.algorithm_variant.replay is ReplayMode.SHER else sample_her
    batches = sampler(buffer, config.batch_size, ensemble.n_agents, rng, config.her_k, config.sher_window)
    return update_agents(ensemble, batches, config.update_settings)


def update_cycle(ensemble: Ensemble, buffer: ReplayBuffer, config: TrainConfig,
                 rng: np.random.Generator) -> tuple[float, float]:
    """``batches_per_cycle`` replay iterations, then one soft target update."""
    if len(buffer) == 0:
        raise ValueError("update_cycle needs at least one stored episode")
    losses, objs = [], []
    for _ in range(config.batches_per_cycle):
        loss, obj = replay_iteration(ensemble, buffer, config, rng)
        losses.append(loss)
        objs.append(obj)
    for nets in ensemble.nets:
        soft_update(nets, config.tau)
    return float(np.mean(losses)), float(np.mean(objs))


def default_validation_trials(n: int) -> list[Trial]:
    if n == 50:
        return bundled_trials("validation")
    return make_trials(VALIDATION_SEED, n)


def write_manifest(out_dir: Path, payload: dict) -> None:
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def manifest_payload(config: TrainConfig, env_config: EnvConfig, completed: bool, **extra) -> dict:
    return {"artifact": "magcla", "version": __version__, "command": "train", "seed": config.seed,
            "train_config": config.to_dict(), "env_config": env_config.to_dict(), "completed": completed,
            "python": platform.python_version(), "numpy": np.__version__, **extra}


def checkpoint_meta_for(config: TrainConfig, env_config: EnvConfig, epoch: int) -> dict:
    return {"epoch": epoch, "train_config": config.to_dict(), "env_config": env_config.to_dict()}


def train(config: TrainConfig, env_config: EnvConfig = EnvConfig(), out_dir=None,
          trials: Optional[Sequence[Trial]] = None) -> TrainResult:
    """Train one ensemble; fully determined by ``config.seed``.

    When ``out_dir`` is given it receives ``train_log.csv`` (flushed row by
    row), ``checkpoints/epoch_NNNN.json`` at each validation point,
    ``checkpoints/final.json``, ``timing.csv``, ``learning_curve.svg`` and a
    ``manifest.json`` that is marked completed at the end.
    """
    trials = list(trials) if trials is not None else default_validation_trials(config.validation_trials)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, explore_rng, replay_rng = (np.random.default_rng(s) for s in seeds)
    env = make_env(env_config)
    ensemble = build_ensemble(config, env_config, init_rng)
    buffer = make_buffer(config, env_config, env)
    exploration = config.exploration

    out = Path(out_dir) if out_dir is not None else None
    log_fh = writer = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        write_manifest(out, manifest_payload(config, env_config, completed=False))
        log_fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        log_fh.flush()

    train_log = TrainLog()
    timing: list[float] = []
    t_start = time.perf_counter()
    env_steps = 0
    per_step = config.update_schedule == "per_step"
    try:
        for epoch in range(1, config.epochs + 1):
            returns, losses, objs = [], [], []

            def step_update():
                nonlocal env_steps
                env_steps += 1
                if per_step and len(buffer) > 0:
                    loss, obj = replay_iteration(ensemble, buffer, config, replay_rng)
                    for nets in ensemble.nets:
                        soft_update(nets, config.tau)
                    losses.append(loss)
                    objs.append(obj)

            for _ in range(config.cycles_per_epoch):
                for _ in range(config.episodes_per_cycle):
                    ep = rollout_episode(env, ensemble, exploration, explore_rng, on_step=step_update)
                    buffer.store_episode(ep)
                    returns.append(ep.total_reward)
                if not per_step:
                    loss, obj = update_cycle(ensemble, buffer, config, replay_rng)
                    losses.append(loss)
                    objs.append(obj)

            timing.append(time.perf_counter() - t_start)
            if epoch % config.eval_every_epochs and epoch != config.epochs:
                continue
            sr = validate(ensemble, env_config, trials)
            row = LogRow(epoch, sr, float(np.mean(returns)),
                         float(np.mean(losses)) if losses else math.nan,
                         float(np.mean(objs)) if objs else math.nan,
                         env_steps * env_config.dt, rng_fingerprint(init_rng, explore_rng, replay_rng))
            train_log.append(row)
            log.info("epoch %d  success %.3f  return %.2f  critic %.4f", epoch, sr, row.mean_return,
                     row.critic_loss)
            if writer is not None:
                writer.writerow(row.as_csv())
                log_fh.flush()
                if config.checkpoint_every_eval:
                    ensemble.save(out / "checkpoints" / f"epoch_{epoch:04d}.json",
                                  meta=checkpoint_meta_for(config, env_config, epoch))
    finally:
        if log_fh is not None:
            log_fh.close()

    if out is not None:
        ensemble.save(out / "checkpoints" / "final.json", include_optimizer=True,
                      meta=checkpoint_meta_for(config, env_config, config.epochs))
        with open(out / "timing.csv", "w") as fh:
            fh.write("epoch,wall_seconds\n")
            for k, s in enumerate(timing, 1):
                fh.write(f"{k},{s:.3f}\n")
        epochs = [r.epoch for r in train_log.rows]
        line_chart_svg({config.variant: (epochs, train_log.success_rates)}, out / "learning_curve.svg",
                       title="validation success", xlabel="epoch", ylabel="success rate", y_range=(0.0, 1.0))
        write_manifest(out, manifest_payload(config, env_config, completed=True,
                                             wall_seconds=round(timing[-1], 3) if timing else 0.0))
    return TrainResult(train_log, ensemble, out, timing)
