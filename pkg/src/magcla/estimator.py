"""scikit-learn style wrapper around :func:`magcla.trainer.train`.

``fit`` trains an ensemble, ``predict`` maps observation rows to joint
actions and ``score`` is the success rate on a trial set. Rows fed to
``predict`` are ``[x, desired_goal, prev_actions]`` with the goal as a raw
angle, so their width is ``state_dim + 1 + action_dim``.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .env import EnvConfig, Trial, bundled_trials
from .trainer import TrainConfig, evaluate_trials, train

_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


class MagclaPolicy(BaseEstimator):
    """Multi-agent hand controller trained with DDPG-family updates.

    Parameters mirror :class:`TrainConfig` for the most used knobs; anything
    else goes in ``train_overrides``. ``env`` is an :class:`EnvConfig` or a
    dict of its fields.
    """

    def __init__(self, variant="magcla+sher", epochs=100, cycles_per_epoch=10, batches_per_cycle=10,
                 batch_size=128, gamma=0.98, tau=0.05, noise_sigma=0.2, random_eps=0.3, her_k=4.0,
                 eval_every_epochs=20, seed=0, env=None, out_dir=None, train_overrides=None):
        self.variant = variant
        self.epochs = epochs
        self.cycles_per_epoch = cycles_per_epoch
        self.batches_per_cycle = batches_per_cycle
        self.batch_size = batch_size
        self.gamma = gamma
        self.tau = tau
        self.noise_sigma = noise_sigma
        self.random_eps = random_eps
        self.her_k = her_k
        self.eval_every_epochs = eval_every_epochs
        self.seed = seed
        self.env = env
        self.out_dir = out_dir
        self.train_overrides = train_overrides

    def _train_config(self) -> TrainConfig:
        params = {k: v for k, v in self.get_params().items() if k in _TRAIN_KEYS}
        params.update(self.train_overrides or {})
        return TrainConfig(**params)

    def _env_config(self) -> EnvConfig:
        if self.env is None:
            return EnvConfig()
        if isinstance(self.env, EnvConfig):
            return self.env
        return EnvConfig.from_dict(dict(self.env))

    def fit(self, X=None, y=None):
        """Train from scratch. ``X`` is an optional validation trial list; ``y`` is ignored."""
        trials = None if X is None else _as_trials(X)
        cfg = self._train_config()
        env_cfg = self._env_config()
        result = train(cfg, env_cfg, self.out_dir, trials)
        self.ensemble_ = result.ensemble
        self.train_log_ = result.log
        self.env_config_ = env_cfg
        self.n_features_in_ = env_cfg.state_dim + 1 + env_cfg.action_dim
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        s = self.env_config_.state_dim
        return self.ensemble_.act(X[:, :s], X[:, s], X[:, s + 1:])

    def score(self, X=None, y=None) -> float:
        """Noise-free success rate on ``X`` (trials); defaults to the bundled testing set."""
        check_is_fitted(self, "ensemble_")
        trials = bundled_trials("testing") if X is None else _as_trials(X)
        return evaluate_trials(self.ensemble_, self.env_config_, trials).success_rate


def _as_trials(X) -> list[Trial]:
    rows = list(X)
    if rows and isinstance(rows[0], Trial):
        return rows
    arr = check_array(np.asarray(rows, dtype=np.float64), dtype=np.float64)
    if arr.shape[1] != 2:
        raise ValueError("trial arrays need two columns: seed, goal")
    return [Trial(int(s), float(g)) for s, g in arr]
