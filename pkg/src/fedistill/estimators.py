"""scikit-learn style wrapper around the federated training schemes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import channel as channel_mod
from .data import LabeledDataset, ShardPlan, shard
from .fd import TrainConfig, run_fd, run_fl
from .mix2fld import run_mix2fld
from .nn import Mlp, forward, softmax
from .seeding import child_int


class FederatedDistillationClassifier(ClassifierMixin, BaseEstimator):
    """Train a classifier by simulating ``n_workers`` devices.

    The training set is sharded across workers, who cooperate through
    ``scheme``: ``"fd"`` (per-label logits), ``"fl"`` (FedAvg),
    ``"mixfld"`` or ``"mix2fld"`` (logits up, global model down).
    Predictions average the workers' class probabilities.
    """

    def __init__(self, scheme="fd", n_workers=2, hidden=(128, 64), activation="tanh", rounds=30,
                 local_steps=20, batch_size=32, lr=0.1, distill_weight=0.1, shard_mode="iid",
                 channel=None, gamma=0.4, n_mix=50, n_inv=50, server_steps=100,
                 random_state=0, n_jobs=1):
        self.scheme = scheme
        self.n_workers = n_workers
        self.hidden = hidden
        self.activation = activation
        self.rounds = rounds
        self.local_steps = local_steps
        self.batch_size = batch_size
        self.lr = lr
        self.distill_weight = distill_weight
        self.shard_mode = shard_mode
        self.channel = channel
        self.gamma = gamma
        self.n_mix = n_mix
        self.n_inv = n_inv
        self.server_steps = server_steps
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        if self.scheme not in ("fd", "fl", "mixfld", "mix2fld"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        X, y = check_X_y(X, y, dtype=np.float64)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if self.classes_.size < 2:
            raise ValueError("need samples of at least two classes")
        self.n_features_in_ = X.shape[1]
        seed = 0 if self.random_state is None else int(self.random_state)
        data = LabeledDataset(X, self._encoder.transform(y), self.classes_.size)
        shards = shard(data, self.n_workers, ShardPlan(self.shard_mode, seed=seed))
        dims = [X.shape[1], *self.hidden, self.classes_.size]
        models = [Mlp(dims, self.activation, child_int(seed, "model", c)) for c in range(self.n_workers)]
        config = TrainConfig(self.local_steps, self.batch_size, self.lr, self.distill_weight)
        link = channel_mod.preset(self.channel) if self.channel else None
        if self.scheme in ("fd", "fl"):
            runner = run_fd if self.scheme == "fd" else run_fl
            self.history_ = runner(models, shards, self.rounds, config, None, link, seed, self.n_jobs)
        else:
            self.history_ = run_mix2fld(models, shards, self.rounds, self.gamma, self.n_mix, self.n_inv,
                                        link, config, self.server_steps, test=None, seed=seed,
                                        variant=self.scheme, n_jobs=self.n_jobs)
        self.models_ = models
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "models_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return np.mean([softmax(forward(m, X)[0]) for m in self.models_], axis=0)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
