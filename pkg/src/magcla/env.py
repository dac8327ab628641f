"""Goal-conditioned planar rotation task and a one-joint reach task.

The rotation task is a 1-DoF object turned about a fixed axis by ``n_fingers``
torque-producing fingers and an optional wrist. Each finger's action is a
``(grip, torque)`` pair, the wrist's is a single tilt command; the joint action
is laid out finger by finger with the wrist last. Reward is sparse: 0 when the
object angle is within ``success_threshold`` of the goal, -1 otherwise.

Both environments expose ``reset(trial) -> Observation`` and
``step(action) -> (Observation, reward, terminal, info)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from typing import Iterable, NamedTuple, Optional

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(x):
    """Map angles onto (-pi, pi]. Works on scalars and arrays."""
    y = x - TWO_PI * np.ceil((np.asarray(x, dtype=np.float64) - math.pi) / TWO_PI)
    if np.ndim(y) == 0:
        return float(y)
    return y


def compute_reward(achieved_goal, desired_goal, success_threshold: float = 0.1):
    """0.0 where the wrapped angular error is below the threshold, else -1.0."""
    err = np.abs(wrap_angle(np.asarray(achieved_goal, dtype=np.float64)
                            - np.asarray(desired_goal, dtype=np.float64)))
    r = np.where(err < success_threshold, 0.0, -1.0)
    if np.ndim(r) == 0:
        return float(r)
    return r


def sample_goal(rng: np.random.Generator) -> float:
    """Uniform angle strictly inside (-pi, pi)."""
    while True:
        g = float(rng.uniform(-math.pi, math.pi))
        if g != -math.pi:
            return g


def goal_encoding(goal) -> np.ndarray:
    """(sin, cos) of a goal angle; ``(..., 2)`` for array input."""
    g = np.asarray(goal, dtype=np.float64)
    return np.stack([np.sin(g), np.cos(g)], axis=-1)


GOAL_ENC_DIM = 2


@dataclass(frozen=True)
class EnvConfig:
    kind: str = "rotation"
    n_fingers: int = 3
    has_wrist: bool = True
    dt: float = 0.04
    success_threshold: float = 0.1
    episode_length: int = 50
    torque_gain: float = 2.0
    drag_gain: float = 0.5
    wrist_gain: float = 0.3
    grip_threshold: float = 1.0
    joint_lag: float = 0.5
    max_speed: float = 4.0
    drop_patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("rotation", "reach"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.n_fingers < 1:
            raise ValueError("n_fingers must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.success_threshold < math.pi:
            raise ValueError("success_threshold must lie in (0, pi)")
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if not 0 < self.joint_lag <= 1:
            raise ValueError("joint_lag must lie in (0, 1]")
        if not self.max_speed > 0:
            raise ValueError("max_speed must be positive")
        if self.drop_patience < 1:
            raise ValueError("drop_patience must be >= 1")

    @property
    def action_dim(self) -> int:
        if self.kind == "reach":
            return 1
        return 2 * self.n_fingers + (1 if self.has_wrist else 0)

    @property
    def state_dim(self) -> int:
        if self.kind == "reach":
            return 2
        return self.n_fingers + (1 if self.has_wrist else 0) + 3

    @property
    def n_agents(self) -> int:
        """Number of hand parts that can be assigned an agent (fingers + wrist)."""
        if self.kind == "reach":
            return 1
        return self.n_fingers + (1 if self.has_wrist else 0)

    def agent_slices(self) -> list[tuple[int, int, str]]:
        """(start, stop, role) of each hand part's slice of the joint action."""
        if self.kind == "reach":
            return [(0, 1, "finger")]
        out = [(2 * i, 2 * i + 2, "finger") for i in range(self.n_fingers)]
        if self.has_wrist:
            out.append((2 * self.n_fingers, 2 * self.n_fingers + 1, "wrist"))
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**d)


class Trial(NamedTuple):
    seed: int
    goal: float


@dataclass
class SimState:
    theta: float
    omega: float
    grip_positions: np.ndarray
    wrist_tilt: float
    prev_actions: np.ndarray
    steps_below_grip: int = 0
    step_index: int = 0
    dropped: bool = False

    def copy(self) -> "SimState":
        return replace(self, grip_positions=self.grip_positions.copy(),
                       prev_actions=self.prev_actions.copy())


@dataclass
class Observation:
    x: np.ndarray
    achieved_goal: float
    desired_goal: float
    prev_actions: np.ndarray


@dataclass(frozen=True)
class MalfunctionMask:
    disabled_agent: Optional[int] = None


NO_MALFUNCTION = MalfunctionMask()


def apply_malfunction(joint_action, mask: Optional[MalfunctionMask], config: EnvConfig) -> np.ndarray:
    """Pin the disabled part's slice: a finger opens fully (-1, 0), the wrist goes neutral (0)."""
    a = np.array(joint_action, dtype=np.float64, copy=True)
    if mask is None or mask.disabled_agent is None:
        return a
    slices = config.agent_slices()
    aid = mask.disabled_agent
    if not 0 <= aid < len(slices):
        raise ValueError(f"unknown agent id {aid} (environment has {len(slices)} parts)")
    start, stop, role = slices[aid]
    if role == "finger" and stop - start == 2:
        a[..., start] = -1.0
        a[..., start + 1] = 0.0
    else:
        a[..., start:stop] = 0.0
    return a


def initial_angle(trial_seed: int) -> float:
    return sample_goal(np.random.default_rng(trial_seed))


class RotationEnv:
    """Cooperative in-hand rotation stand-in (see module docstring)."""

    def __init__(self, config: EnvConfig = EnvConfig()):
        if config.kind != "rotation":
            raise ValueError("RotationEnv needs kind='rotation'")
        self.config = config
        self.state: Optional[SimState] = None
        self.goal: float = 0.0

    @property
    def action_dim(self) -> int:
        return self.config.action_dim

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    def reset(self, trial: Trial) -> Observation:
        seed, goal = trial
        if not -math.pi < goal < math.pi:
            raise ValueError(f"goal {goal} outside (-pi, pi)")
        cfg = self.config
        self.goal = float(goal)
        self.state = SimState(
            theta=initial_angle(int(seed)),
            omega=0.0,
            grip_positions=np.full(cfg.n_fingers, 0.5),
            wrist_tilt=0.0,
            prev_actions=np.zeros(cfg.action_dim),
        )
        return self.observe()

    def observe(self, state: Optional[SimState] = None) -> Observation:
        s = self.state if state is None else state
        cfg = self.config
        parts = [s.grip_positions]
        if cfg.has_wrist:
            parts.append([s.wrist_tilt])
        parts.append([math.sin(s.theta), math.cos(s.theta), s.omega / cfg.max_speed])
        return Observation(np.concatenate(parts), s.theta, self.goal, s.prev_actions.copy())

    def transition(self, state: SimState, joint_action) -> SimState:
        """Pure dynamics: returns the successor state, ``state`` is not modified."""
        cfg = self.config
        a = np.asarray(joint_action, dtype=np.float64)
        if a.shape != (cfg.action_dim,):
            raise ValueError(f"joint action has shape {a.shape}, expected ({cfg.action_dim},)")
        a = np.clip(a, -1.0, 1.0)
        lam = cfg.joint_lag
        u_grip = a[0:2 * cfg.n_fingers:2]
        u_torque = a[1:2 * cfg.n_fingers:2]
        grips = np.clip(state.grip_positions + lam * ((u_grip + 1.0) / 2.0 - state.grip_positions), 0.0, 1.0)
        torque = float(np.sum(u_torque * grips))
        tilt = 0.0
        if cfg.has_wrist:
            tilt = min(1.0, max(-1.0, state.wrist_tilt + lam * (a[-1] - state.wrist_tilt)))
        total_grip = float(np.sum(grips))
        omega = (state.omega + cfg.dt * (cfg.torque_gain * torque + cfg.wrist_gain * tilt)
                 - cfg.dt * cfg.drag_gain * total_grip * state.omega)
        omega = min(cfg.max_speed, max(-cfg.max_speed, omega))
        theta = wrap_angle(state.theta + cfg.dt * omega)
        below = state.steps_below_grip + 1 if total_grip < cfg.grip_threshold else 0
        return SimState(theta=theta, omega=omega, grip_positions=grips, wrist_tilt=tilt,
                        prev_actions=a.copy(), steps_below_grip=below,
                        step_index=state.step_index + 1,
                        dropped=state.dropped or below >= cfg.drop_patience)

    def step(self, joint_action):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state = self.transition(self.state, joint_action)
        obs = self.observe()
        reward = compute_reward(self.state.theta, self.goal, self.config.success_threshold)
        time_limit = self.state.step_index >= self.config.episode_length
        terminal = self.state.dropped or time_limit
        info = {"dropped": self.state.dropped, "time_limit": time_limit and not self.state.dropped}
        return obs, reward, terminal, info

    def compute_reward(self, achieved_goal, desired_goal):
        return compute_reward(achieved_goal, desired_goal, self.config.success_threshold)


class ReachEnv:
    """A single joint with limits at +-pi driven by a velocity command; used for smoke tests.

    ``x = (joint angle / pi, last command)``; the command sets angular velocity
    to ``max_speed * u`` and the joint stops at its limits. The achieved goal is
    the wrapped joint angle, so both limits count as reaching a goal near +-pi.
    Episodes only end on the time limit.
    """

    def __init__(self, config: EnvConfig = EnvConfig(kind="reach")):
        if config.kind != "reach":
            raise ValueError("ReachEnv needs kind='reach'")
        self.config = config
        self.state: Optional[SimState] = None
        self.goal = 0.0

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def state_dim(self) -> int:
        return 2

    def reset(self, trial: Trial) -> Observation:
        seed, goal = trial
        if not -math.pi < goal < math.pi:
            raise ValueError(f"goal {goal} outside (-pi, pi)")
        self.goal = float(goal)
        self.state = SimState(theta=initial_angle(int(seed)), omega=0.0,
                              grip_positions=np.zeros(0), wrist_tilt=0.0,
                              prev_actions=np.zeros(1))
        return self.observe()

    def observe(self, state: Optional[SimState] = None) -> Observation:
        s = self.state if state is None else state
        x = np.array([s.theta / math.pi, s.omega / self.config.max_speed])
        return Observation(x, wrap_angle(s.theta), self.goal, s.prev_actions.copy())

    def transition(self, state: SimState, joint_action) -> SimState:
        a = np.asarray(joint_action, dtype=np.float64)
        if a.shape != (1,):
            raise ValueError(f"joint action has shape {a.shape}, expected (1,)")
        a = np.clip(a, -1.0, 1.0)
        omega = self.config.max_speed * float(a[0])
        theta = min(math.pi, max(-math.pi, state.theta + self.config.dt * omega))
        return SimState(theta=theta, omega=omega, grip_positions=state.grip_positions, wrist_tilt=0.0,
                        prev_actions=a.copy(), step_index=state.step_index + 1)

    def step(self, joint_action):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state = self.transition(self.state, joint_action)
        obs = self.observe()
        reward = compute_reward(obs.achieved_goal, self.goal, self.config.success_threshold)
        terminal = self.state.step_index >= self.config.episode_length
        return obs, reward, terminal, {"dropped": False, "time_limit": terminal}

    def compute_reward(self, achieved_goal, desired_goal):
        return compute_reward(achieved_goal, desired_goal, self.config.success_threshold)


def make_env(config: EnvConfig):
    return ReachEnv(config) if config.kind == "reach" else RotationEnv(config)


# -- trial sets ---------------------------------------------------------------

def make_trials(seed: int, n: int) -> list[Trial]:
    """``n`` (initial-state seed, goal) pairs drawn from one generator."""
    rng = np.random.default_rng(seed)
    trials = []
    for _ in range(n):
        trial_seed = int(rng.integers(0, 2**31 - 1))
        trials.append(Trial(trial_seed, sample_goal(rng)))
    return trials


def save_trials(trials: Iterable[Trial], path) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{int(t.seed)},{float(t.goal)!r}\n")


def parse_trials(lines: Iterable[str]) -> list[Trial]:
    out = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            seed_s, goal_s = line.split(",")
            trial = Trial(int(seed_s), float(goal_s))
        except ValueError as exc:
            raise ValueError(f"bad trial line {lineno}: {line!r}") from exc
        if not -math.pi < trial.goal < math.pi:
            raise ValueError(f"trial line {lineno}: goal outside (-pi, pi)")
        out.append(trial)
    return out


def load_trials(path) -> list[Trial]:
    with open(path) as fh:
        return parse_trials(fh)


VALIDATION_SEED = 2023
TESTING_SEED = 4046


def bundled_trials(name: str) -> list[Trial]:
    """The frozen ``validation`` (50) or ``testing`` (100) set shipped with the package."""
    fname = {"validation": "validation_trials.csv", "testing": "testing_trials.csv"}[name]
    text = resources.files("magcla").joinpath("data", fname).read_text()
    return parse_trials(text.splitlines())
