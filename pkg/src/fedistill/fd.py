"""Federated distillation (logit exchange) and the FedAvg baseline.

Each FD round has two phases. Workers run ``k`` SGD steps on their own
shard with a distillation penalty pulling their logits toward per-label
targets, accumulating the logits they produce per ground-truth label. The
server then turns the uploaded per-label averages into a leave-one-out
target for every worker.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .channel import LinkBudget, transmit
from .data import LabeledDataset
from .nn import CROSS_ENTROPY, LossKind, Mlp, backward, fedavg, forward, objective
from .seeding import child_rng


@dataclass
class TrainConfig:
    local_steps: int = 20
    batch_size: int = 32
    lr: float = 0.1
    distill_weight: float = 0.1
    loss: LossKind = CROSS_ENTROPY
    regularizer: LossKind = CROSS_ENTROPY
    logit_layer: str = "output"
    float_width: int = 4

    def __post_init__(self):
        if self.local_steps < 0 or self.batch_size <= 0:
            raise ValueError("local_steps must be >= 0 and batch_size > 0")
        if not self.lr > 0 or self.distill_weight < 0:
            raise ValueError("lr must be positive and distill_weight non-negative")
        if self.float_width not in (4, 8):
            raise ValueError("float_width must be 4 or 8")

    @property
    def kinds(self):
        return (self.loss, self.regularizer)


class LogitTable:
    """Per-label logit accumulators for one worker and round."""

    def __init__(self, label_count, logit_dim, round_index=0):
        self.sums = np.zeros((label_count, logit_dim))
        self.counts = np.zeros(label_count, dtype=np.int64)
        self.round = round_index

    @property
    def label_count(self):
        return self.sums.shape[0]

    @property
    def logit_dim(self):
        return self.sums.shape[1]

    def add(self, labels, logits):
        labels = np.asarray(labels, dtype=np.int64)
        logits = np.asarray(logits, dtype=np.float64).reshape(labels.size, -1)
        np.add.at(self.sums, labels, logits)
        np.add.at(self.counts, labels, 1)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    def averages(self) -> np.ndarray:
        """Per-label means; rows of unseen labels are zero (check :attr:`present`)."""
        avg = np.zeros_like(self.sums)
        seen = self.present
        avg[seen] = self.sums[seen] / self.counts[seen, None]
        return avg


@dataclass
class GlobalLogitView:
    targets: np.ndarray  # (C, |Y|, d_logit)
    mask: np.ndarray  # (C, |Y|) bool, False where no target exists yet
    round: int = 0

    def for_worker(self, c):
        return self.targets[c], self.mask[c]


@dataclass
class RoundReport:
    round: int
    losses: List[float]
    accuracies: List[float]
    uplink_bytes: List[int]
    downlink_bytes: List[int]
    uplink_delivered: List[bool] = field(default_factory=list)
    downlink_delivered: List[bool] = field(default_factory=list)
    seed_uplink_bytes: List[int] = field(default_factory=list)

    def rows(self):
        for c in range(len(self.losses)):
            yield {
                "round": self.round,
                "worker": c,
                "loss": self.losses[c],
                "accuracy": self.accuracies[c],
                "uplink_bytes": self.uplink_bytes[c],
                "downlink_bytes": self.downlink_bytes[c],
                "uplink_delivered": int(self.uplink_delivered[c]) if self.uplink_delivered else 1,
                "downlink_delivered": int(self.downlink_delivered[c]) if self.downlink_delivered else 1,
                "seed_uplink_bytes": self.seed_uplink_bytes[c] if self.seed_uplink_bytes else 0,
            }


def payload_bytes(scheme, model, label_count, logit_dim, float_width=4):
    """Per-worker ``(uplink, downlink)`` bytes of one round.

    ``model`` may be an :class:`Mlp` or a parameter count.
    """
    if float_width not in (4, 8):
        raise ValueError("float_width must be 4 or 8")
    if scheme == "fd":
        size = label_count * logit_dim * float_width
    elif scheme == "fl":
        n_params = model.n_params if isinstance(model, Mlp) else int(model)
        size = n_params * float_width
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    return size, size


def shard_key(ds: LabeledDataset) -> int:
    return int(ds.digest()[:15], 16)


def local_train_phase(model: Mlp, shard: LabeledDataset, targets, k, batch, eta, lam, kinds,
                      rng=None, target_mask=None, logit_layer="output", round_index=0):
    """Run ``k`` distillation-regularized SGD steps and collect per-label logits.

    ``targets`` is a ``(|Y|, d_logit)`` array (or None); rows with
    ``target_mask`` False get no distillation penalty. Logits are collected
    after each step, on the batch the step used. Returns a trained copy of
    ``model`` and the worker's :class:`LogitTable`.
    """
    if len(shard) == 0:
        raise ValueError("cannot train on an empty shard")
    rng = np.random.default_rng(0) if rng is None else rng
    model = model.copy()
    logit_dim = model.output_dim if logit_layer == "output" else model.logit_dim
    table = LogitTable(shard.label_count, logit_dim, round_index)
    distill = targets is not None and lam > 0
    if distill:
        targets = np.asarray(targets, dtype=np.float64)
        mask = np.ones(shard.label_count, bool) if target_mask is None else np.asarray(target_mask, bool)
    n = len(shard)
    size = min(batch, n)
    for _ in range(k):
        idx = rng.choice(n, size=size, replace=False)
        X = shard.samples[idx]
        labels = shard.labels[idx]
        T = shard.one_hot(idx)
        if distill:
            grad = backward(model, X, T, targets[labels], lam * mask[labels], kinds, logit_layer)
        else:
            grad = backward(model, X, T, None, 0.0, kinds)
        model.weights -= eta * grad
        out, hidden = forward(model, X)
        table.add(labels, out if logit_layer == "output" else hidden)
    return model, table


def global_ensemble(tables: Sequence[Optional[LogitTable]], previous: Optional[GlobalLogitView] = None,
                    round_index=0) -> GlobalLogitView:
    """Leave-one-out per-label averages.

    ``None`` entries are workers whose upload did not arrive. A worker whose
    peers never saw a label keeps last round's target for it, if any.
    """
    C = len(tables)
    if C < 2:
        raise ValueError("global ensembling needs at least two workers")
    ref = next((t for t in tables if t is not None), None)
    if ref is None:
        if previous is None:
            raise ValueError("no tables delivered and no previous targets")
        return GlobalLogitView(previous.targets.copy(), previous.mask.copy(), round_index)
    L, d = ref.label_count, ref.logit_dim
    avg = np.zeros((C, L, d))
    present = np.zeros((C, L), bool)
    for c, t in enumerate(tables):
        if t is None:
            continue
        if (t.label_count, t.logit_dim) != (L, d):
            raise ValueError("logit tables disagree on label count or logit dimension")
        avg[c] = t.averages()
        present[c] = t.present
    total = avg.sum(axis=0)
    n_present = present.sum(axis=0)
    others = n_present[None, :] - present
    own = np.where(present[:, :, None], avg, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        targets = (total[None] - own) / others[:, :, None]
    mask = others > 0
    if previous is not None:
        carry = ~mask & previous.mask
        targets[carry] = previous.targets[carry]
        mask = mask | carry
    targets[~mask] = 0.0
    return GlobalLogitView(targets, mask, round_index)


def accuracy(model: Mlp, ds: Optional[LabeledDataset]) -> float:
    if ds is None or len(ds) == 0:
        return float("nan")
    pred = np.argmax(forward(model, ds.samples)[0], axis=1)
    return float(np.mean(pred == ds.labels))


def train_loss(model: Mlp, ds: LabeledDataset, kind: LossKind) -> float:
    return float(objective(model, ds.samples, ds.one_hot(), kinds=(kind, kind)))


def _map(fn, items, n_jobs):
    if n_jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))


def _send(channel, direction, size):
    if channel is None:
        return True
    return transmit(channel, direction, size).delivered


def run_fd(models: List[Mlp], shards: Sequence[LabeledDataset], rounds: int, config: TrainConfig,
           test: Optional[LabeledDataset] = None, channel: Optional[LinkBudget] = None,
           seed=0, n_jobs=1) -> List[RoundReport]:
    """Federated distillation for ``rounds`` rounds; ``models`` are updated in place.

    Round 1 has no targets yet, so it trains without the penalty.
    """
    C = len(models)
    if C < 2:
        raise ValueError("FD needs at least two workers")
    if len(shards) != C:
        raise ValueError("one shard per worker required")
    keys = [shard_key(s) for s in shards]
    L = shards[0].label_count
    d = models[0].output_dim if config.logit_layer == "output" else models[0].logit_dim
    local_targets = [None] * C
    view = None
    reports = []
    for r in range(1, rounds + 1):
        def work(c):
            rng = child_rng(seed, "fd-local", r, keys[c])
            tgt, mask = local_targets[c] if local_targets[c] is not None else (None, None)
            return local_train_phase(models[c], shards[c], tgt, config.local_steps, config.batch_size,
                                     config.lr, config.distill_weight if tgt is not None else 0.0,
                                     config.kinds, rng, mask, config.logit_layer, r)

        results = _map(work, range(C), n_jobs)
        up_size, down_size = payload_bytes("fd", models[0], L, d, config.float_width)
        delivered_up, delivered_down = [], []
        tables = []
        for c, (model, table) in enumerate(results):
            models[c].weights = model.weights
            ok = _send(channel, "up", up_size)
            delivered_up.append(ok)
            tables.append(table if ok else None)
        if any(delivered_up) or view is not None:
            view = global_ensemble(tables, view, r)
        for c in range(C):
            ok = view is not None and _send(channel, "down", down_size)
            delivered_down.append(ok)
            if ok:
                local_targets[c] = view.for_worker(c)
        reports.append(RoundReport(
            round=r,
            losses=[train_loss(m, s, config.loss) for m, s in zip(models, shards)],
            accuracies=[accuracy(m, test) for m in models],
            uplink_bytes=[up_size] * C,
            downlink_bytes=[down_size if view is not None else 0] * C,
            uplink_delivered=delivered_up,
            downlink_delivered=delivered_down,
        ))
    return reports


def local_sgd(model: Mlp, shard: LabeledDataset, k, batch, eta, kinds, rng) -> Mlp:
    return local_train_phase(model, shard, None, k, batch, eta, 0.0, kinds, rng)[0]


def run_fl(models: List[Mlp], shards: Sequence[LabeledDataset], rounds: int, config: TrainConfig,
           test: Optional[LabeledDataset] = None, channel: Optional[LinkBudget] = None,
           seed=0, n_jobs=1) -> List[RoundReport]:
    """FedAvg: local SGD, average delivered models, broadcast; ``models`` updated in place.

    The server broadcasts only in rounds where at least one upload arrived;
    otherwise workers keep their local models.
    """
    C = len(models)
    if len(shards) != C:
        raise ValueError("one shard per worker required")
    for m in models[1:]:
        if not m.same_architecture(models[0]):
            fedavg([models[0], m])  # raises AggregationError with details
    keys = [shard_key(s) for s in shards]
    L = shards[0].label_count
    reports = []
    for r in range(1, rounds + 1):
        def work(c):
            rng = child_rng(seed, "fl-local", r, keys[c])
            return local_sgd(models[c], shards[c], config.local_steps, config.batch_size,
                             config.lr, config.kinds, rng)

        trained = _map(work, range(C), n_jobs)
        up_size, down_size = payload_bytes("fl", models[0], L, models[0].output_dim, config.float_width)
        delivered_up = []
        for c, m in enumerate(trained):
            models[c].weights = m.weights
            delivered_up.append(_send(channel, "up", up_size))
        received = [m for m, ok in zip(trained, delivered_up) if ok]
        delivered_down = []
        if received:
            global_model = fedavg(received)
            for c in range(C):
                ok = _send(channel, "down", down_size)
                delivered_down.append(ok)
                if ok:
                    models[c].weights = global_model.weights.copy()
        else:
            delivered_down = [False] * C
        reports.append(RoundReport(
            round=r,
            losses=[train_loss(m, s, config.loss) for m, s in zip(models, shards)],
            accuracies=[accuracy(m, test) for m in models],
            uplink_bytes=[up_size] * C,
            downlink_bytes=[down_size if received else 0] * C,
            uplink_delivered=delivered_up,
            downlink_delivered=delivered_down,
        ))
    return reports
