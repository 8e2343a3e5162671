"""Mixup seed collection, inverse-Mixup, and output-to-model conversion.

Workers upload per-label logits (small) and, once, a handful of mixed-up
seed samples. The server recombines mirrored seeds from different workers
into hard-labeled synthetic samples, distills the global logits into a
global model on them, and broadcasts that model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .channel import LinkBudget, transmit
from .data import LabeledDataset, ShardPlan, shard
from .fd import (RoundReport, TrainConfig, _map, accuracy, local_train_phase, payload_bytes,
                 shard_key, train_loss)
from .nn import Mlp, backward
from .seeding import child_int, child_rng

log = logging.getLogger(__name__)

LABEL_TOL = 1e-9


class SingularMixtureError(ValueError):
    pass


class PrivacyRuleError(ValueError):
    pass


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MixedSample:
    x: np.ndarray
    soft_label: np.ndarray
    gamma: float
    origin_worker: int = 0
    # raw covariates that went in, kept for privacy evaluation only; never uploaded
    sources: Tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if abs(float(np.sum(self.soft_label)) - 1.0) > LABEL_TOL:
            raise ValueError("soft label must sum to 1")
        if not 0 < self.gamma <= 0.5:
            raise ValueError("mixing ratio must lie in (0, 0.5]")


@dataclass
class InverseMixedSample:
    x: np.ndarray
    label: int
    contributing_workers: FrozenSet[int]
    coefficients: np.ndarray
    sources: Tuple[np.ndarray, ...] = field(default=(), repr=False)


def mixup(x_i, y_i, x_j, y_j, gamma, origin_worker=0) -> MixedSample:
    """``gamma * (x_i, y_i) + (1 - gamma) * (x_j, y_j)``."""
    if not 0 < gamma <= 0.5:
        raise ValueError(f"mixing ratio {gamma} outside (0, 0.5]")
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    return MixedSample(gamma * x_i + (1 - gamma) * x_j, gamma * y_i + (1 - gamma) * y_j,
                       gamma, origin_worker, (x_i, x_j))


def solve_inverse_ratio(gamma, target_position) -> float:
    """Inverse mixing ratio for two mirrored seeds with soft labels {g, 1-g} and {1-g, g}.

    ``target_position`` 0 asks for hard label {1, 0}, 1 for {0, 1}. Solved
    in exact rational arithmetic on the decimal value of ``gamma``.
    """
    g = Fraction(repr(float(gamma)))
    if g == Fraction(1, 2):
        raise SingularMixtureError("gamma = 0.5 makes both soft labels identical")
    if not 0 < g < Fraction(1, 2):
        raise ValueError(f"mixing ratio {gamma} outside (0, 0.5)")
    if target_position == 0:
        return float(g / (2 * g - 1))
    if target_position == 1:
        return float((g - 1) / (2 * g - 1))
    raise ValueError("target_position must be 0 or 1")


def _mirror_ratio(a: MixedSample, b: MixedSample, target_label):
    """Closed-form coefficients when ``a``/``b`` form a mirrored two-label pair."""
    if a.gamma != b.gamma or a.gamma >= 0.5:
        return None
    support = np.flatnonzero(np.abs(a.soft_label) > LABEL_TOL)
    if support.size != 2 or not np.allclose(a.soft_label[support[::-1]], b.soft_label[support],
                                            atol=LABEL_TOL, rtol=0):
        return None
    if np.any(np.abs(np.delete(b.soft_label, support)) > LABEL_TOL):
        return None
    if target_label not in support:
        return None
    # position 0 is the label that ``a`` weights by gamma
    p = support[np.argmin(np.abs(a.soft_label[support] - a.gamma))]
    g_hat = solve_inverse_ratio(a.gamma, 0 if target_label == p else 1)
    return np.array([g_hat, 1.0 - g_hat])


def inverse_mixup(seeds: Sequence[MixedSample], target_label: int) -> InverseMixedSample:
    """Linearly recombine seeds from >= 2 workers into a hard-labeled sample."""
    seeds = list(seeds)
    workers = frozenset(s.origin_worker for s in seeds)
    if len(workers) < 2:
        raise PrivacyRuleError("inverse-Mixup requires seeds from at least two different workers")
    Y = np.stack([s.soft_label for s in seeds])
    n_s, d_y = Y.shape
    if not 0 <= target_label < d_y:
        raise ValueError(f"target label {target_label} outside [0, {d_y})")
    A = np.vstack([Y.T, np.ones((1, n_s))])
    b = np.zeros(d_y + 1)
    b[target_label] = 1.0
    b[-1] = 1.0
    if np.linalg.matrix_rank(A, tol=1e-10) < n_s:
        raise SingularMixtureError("seed soft labels are linearly dependent")
    coef = _mirror_ratio(seeds[0], seeds[1], target_label) if n_s == 2 else None
    if coef is None:
        coef = np.linalg.lstsq(A, b, rcond=None)[0]
    if np.max(np.abs(A @ coef - b)) > LABEL_TOL:
        raise SingularMixtureError(f"no combination of the seeds yields hard label {target_label}")
    x = np.tensordot(coef, np.stack([s.x for s in seeds]), axes=1)
    sources = tuple(src for s in seeds for src in s.sources)
    return InverseMixedSample(x, int(target_label), workers, coef, sources)


def is_mirror(a: MixedSample, b: MixedSample) -> bool:
    return (a.gamma == b.gamma and a.soft_label.shape == b.soft_label.shape
            and _mirror_ratio(a, b, int(np.argmax(a.soft_label))) is not None)


def mirror_pairs(seeds: Sequence[MixedSample]):
    """Cross-worker mirrored seed pairs: a greedy disjoint matching first, then the rest."""
    n = len(seeds)
    candidates = [(i, j) for i in range(n) for j in range(i + 1, n)
                  if seeds[i].origin_worker != seeds[j].origin_worker and is_mirror(seeds[i], seeds[j])]
    used = set()
    greedy = []
    for i, j in candidates:
        if i not in used and j not in used:
            greedy.append((i, j))
            used.update((i, j))
    unmatched = n - len(used)
    if unmatched:
        log.warning("%d seed(s) had no mirrored partner from another worker and were dropped", unmatched)
    chosen = set(greedy)
    return greedy + [p for p in candidates if p not in chosen]


def generate_inverse_samples(seeds: Sequence[MixedSample], count: int) -> List[InverseMixedSample]:
    """Up to ``count`` inverse-mixed samples, two (one per label) from each mirrored pair."""
    out = []
    for i, j in mirror_pairs(seeds):
        labels = np.flatnonzero(np.abs(seeds[i].soft_label) > LABEL_TOL)
        for label in labels:
            if len(out) >= count:
                return out
            out.append(inverse_mixup([seeds[i], seeds[j]], int(label)))
    if len(out) < count:
        log.warning("only %d of %d requested inverse-mixed samples could be formed", len(out), count)
    return out


def mixup_schedule(master_seed, label_count):
    """Label pairs shared by all workers, so that seeds from different workers mirror.

    Pairs come from a random perfect matching of the labels that is redrawn
    every second pass, so each pair recurs and extra mirrors exist for
    augmentation.
    """
    rng = child_rng(master_seed, "mixup-schedule")
    while True:
        perm = rng.permutation(label_count)
        pairs = [(int(perm[k]), int(perm[k + 1])) for k in range(0, label_count - 1, 2)]
        for _ in range(2):
            yield from pairs


def generate_seeds(shard: LabeledDataset, n_mix, gamma, worker, master_seed=0) -> List[MixedSample]:
    """Worker-side Mixup of ``n_mix`` two-label pairs following the shared schedule.

    Even and odd workers mix each scheduled pair in opposite orientations, so
    every seed has a mirrored partner for each repeat of its pair on a
    worker of the other parity.
    """
    rng = child_rng(master_seed, "mixup-raw", worker)
    eye = np.eye(shard.label_count)
    by_label = [np.flatnonzero(shard.labels == label) for label in range(shard.label_count)]
    seeds = []
    schedule = mixup_schedule(master_seed, shard.label_count)
    for t, (a, b) in enumerate(schedule):
        if len(seeds) == n_mix:
            break
        if t > 100 * max(n_mix, 1):
            raise ValueError(f"worker {worker} cannot form {n_mix} two-label pairs")
        if not (by_label[a].size and by_label[b].size):
            continue
        i = rng.choice(by_label[a])
        j = rng.choice(by_label[b])
        if worker % 2:
            i, j = j, i
        seeds.append(mixup(shard.samples[i], eye[shard.labels[i]], shard.samples[j],
                           eye[shard.labels[j]], gamma, worker))
    return seeds


@dataclass
class DpParams:
    n: int
    n_mix: int
    d_x: int
    d_y: int
    sigma_x2: float = 1.0
    sigma_y2: float = 1.0
    delta: float = 1e-5

    def __post_init__(self):
        if min(self.n, self.n_mix, self.d_x, self.d_y) <= 0:
            raise ValueError("n, n_mix, d_x and d_y must be positive")
        if min(self.sigma_x2, self.sigma_y2) <= 0:
            raise ValueError("noise variances must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    @property
    def sensitivity2(self) -> float:
        return self.d_x / self.sigma_x2 + self.d_y / self.sigma_y2


def dp_epsilon(p: DpParams) -> float:
    """Epsilon of Gaussian-noised ``gamma = 0.5`` Mixup producing ``n_mix`` samples out of ``n``."""
    d2 = p.sensitivity2
    log_inv_delta = math.log(1.0 / p.delta)
    first = 2 * p.n_mix * d2 / (8 * p.n) * (1 + math.sqrt(4 * p.n * log_inv_delta / (d2 * p.n_mix)))
    return first + math.sqrt(d2 * p.n_mix * log_inv_delta / (4 * p.n))


def sample_privacy(x, *raws) -> float:
    """``log`` of the smallest Euclidean distance from ``x`` to its raw sources."""
    if isinstance(x, (MixedSample, InverseMixedSample)):
        if not raws:
            raws = x.sources
        x = x.x
    raws = [np.asarray(r, dtype=np.float64) for r in raws]
    if len(raws) < 1:
        raise UndefinedMetricError("no raw samples to compare against")
    for i in range(len(raws)):
        for j in range(i + 1, len(raws)):
            if np.array_equal(raws[i], raws[j]):
                raise UndefinedMetricError("raw samples coincide; similarity metric is undefined")
    dist = min(float(np.linalg.norm(np.asarray(x) - r)) for r in raws)
    return math.log(dist)


def privacy_report(ds: LabeledDataset, gammas, n_mix=100, seed=0, mode="mixup"):
    """Rows of ``(gamma, median, p25, p75)`` sample privacy over generated seeds.

    ``mode="mixup"`` scores single-worker mixed samples against their two
    raw inputs; ``"mix2up"`` splits ``ds`` across two workers and scores
    inverse-mixed samples against the raw samples behind both seeds.
    """
    rows = []
    if mode == "mix2up":
        parts = shard(ds, 2, ShardPlan("iid", seed=seed))
    for gamma in gammas:
        if mode == "mixup":
            samples = generate_seeds(ds, n_mix, gamma, 0, seed)
        elif mode == "mix2up":
            seeds = generate_seeds(parts[0], n_mix, gamma, 0, seed) + \
                generate_seeds(parts[1], n_mix, gamma, 1, seed)
            samples = generate_inverse_samples(seeds, 2 * n_mix)
        else:
            raise ValueError(f"unknown privacy mode {mode!r}")
        scores = np.array([sample_privacy(s) for s in samples])
        p25, med, p75 = np.percentile(scores, [25, 50, 75])
        rows.append((float(gamma), float(med), float(p25), float(p75)))
    return rows


def _seed_arrays(samples, label_count):
    X = np.stack([s.x for s in samples])
    if isinstance(samples[0], InverseMixedSample):
        Y = np.eye(label_count)[[s.label for s in samples]]
    else:
        Y = np.stack([s.soft_label for s in samples])
    return X, Y


def output_to_model(global_model: Mlp, seed_samples, global_targets, K_s, eta, lam, kinds,
                    target_mask=None, batch_size=None, rng=None, logit_layer="output") -> Mlp:
    """Distill per-label global logits into ``global_model`` using seed samples.

    Soft-labeled (mixed) seeds take the label-weighted combination of the
    per-label targets. Returns a new model after ``K_s`` SGD steps.
    """
    if not len(seed_samples):
        raise ValueError("output-to-model conversion needs at least one seed sample")
    targets = np.asarray(global_targets, dtype=np.float64)
    L = targets.shape[0]
    if isinstance(seed_samples, tuple):
        X, Y = seed_samples
    else:
        X, Y = _seed_arrays(seed_samples, L)
    mask = np.ones(L, bool) if target_mask is None else np.asarray(target_mask, bool)
    needed = np.any(np.abs(Y) > LABEL_TOL, axis=0)
    if lam > 0 and np.any(needed & ~mask):
        missing = np.flatnonzero(needed & ~mask).tolist()
        raise KeyError(f"no global target for seed label(s) {missing}")
    teacher = Y @ np.where(mask[:, None], targets, 0.0)
    rng = np.random.default_rng(0) if rng is None else rng
    model = global_model.copy()
    n = X.shape[0]
    size = n if batch_size is None else min(batch_size, n)
    for _ in range(K_s):
        idx = rng.choice(n, size=size, replace=False) if size < n else np.arange(n)
        grad = backward(model, X[idx], Y[idx], teacher[idx], lam, kinds, logit_layer)
        model.weights -= eta * grad
    return model


def seed_payload_bytes(n_mix, d_x, d_y, float_width=4) -> int:
    return n_mix * (d_x + d_y) * float_width


def run_mix2fld(models: List[Mlp], shards: Sequence[LabeledDataset], rounds: int, gamma: float,
                n_mix: int, n_inv: int, channel: Optional[LinkBudget], config: TrainConfig,
                server_steps: int = 100, server_batch: Optional[int] = 32,
                test: Optional[LabeledDataset] = None, seed=0, variant="mix2fld",
                server_seeds=None, global_model: Optional[Mlp] = None, record=None,
                n_jobs=1) -> List[RoundReport]:
    """Logits up, model down, with Mixup (``variant="mixfld"``) or Mix2up seeds.

    ``n_mix`` and ``n_inv`` are per worker; the server forms up to
    ``C * n_inv`` inverse-mixed samples. Seeds go up once, in round 1, as a
    separate transfer that may span several uplink slots. ``server_seeds``
    (an ``(X, Y)`` pair) overrides the seed set fed to the server.
    ``models`` and ``global_model`` are updated in place.
    """
    C = len(models)
    if C < 2:
        raise ValueError("Mix2FLD needs at least two workers")
    if variant not in ("mix2fld", "mixfld"):
        raise ValueError(f"unknown variant {variant!r}")
    L = shards[0].label_count
    d_x = shards[0].dim
    if global_model is None:
        global_model = Mlp(models[0].layer_dims, models[0].activations, child_int(seed, "server-model"))
    keys = [shard_key(s) for s in shards]
    logit_dim = models[0].output_dim if config.logit_layer == "output" else models[0].logit_dim
    up_size = payload_bytes("fd", None, L, logit_dim, config.float_width)[0]
    down_size = payload_bytes("fl", global_model, L, logit_dim, config.float_width)[1]
    seed_bytes = seed_payload_bytes(n_mix, d_x, L, config.float_width)
    server_X = server_Y = None
    global_targets = None
    target_mask = np.zeros(L, bool)
    reports = []
    for r in range(1, rounds + 1):
        def work(c):
            rng = child_rng(seed, "mix2fld-local", r, keys[c])
            return local_train_phase(models[c], shards[c], None, config.local_steps, config.batch_size,
                                     config.lr, 0.0, config.kinds, rng, None, config.logit_layer, r)

        results = _map(work, range(C), n_jobs)
        delivered_up = []
        tables = []
        for c, (model, table) in enumerate(results):
            models[c].weights = model.weights
            ok = channel is None or transmit(channel, "up", up_size).delivered
            delivered_up.append(ok)
            if ok:
                tables.append(table)

        if r == 1:
            if server_seeds is not None:
                server_X, server_Y = (np.asarray(a, dtype=np.float64) for a in server_seeds)
            else:
                mixed = [s for c in range(C) for s in generate_seeds(shards[c], n_mix, gamma, c, seed)]
                if variant == "mix2fld":
                    seeds = generate_inverse_samples(mixed, C * n_inv)
                else:
                    seeds = mixed
                server_X, server_Y = _seed_arrays(seeds, L)
                if record is not None:
                    record["mixed"] = mixed
                    record["seeds"] = seeds

        if tables:
            sums = np.sum([t.averages() * t.present[:, None] for t in tables], axis=0)
            counts = np.sum([t.present for t in tables], axis=0)
            fresh = counts > 0
            if global_targets is None:
                global_targets = np.zeros((L, logit_dim))
            global_targets[fresh] = sums[fresh] / counts[fresh, None]
            target_mask = target_mask | fresh

        delivered_down = [False] * C
        broadcast = bool(tables)
        if broadcast:
            known = np.any(np.abs(server_Y) > LABEL_TOL, axis=0)
            lam = config.distill_weight if np.all(target_mask[known]) else 0.0
            updated = output_to_model(global_model, (server_X, server_Y), global_targets, server_steps,
                                      config.lr, lam, config.kinds, target_mask, server_batch,
                                      child_rng(seed, "server-kd", r), config.logit_layer)
            global_model.weights = updated.weights
            for c in range(C):
                ok = channel is None or transmit(channel, "down", down_size).delivered
                delivered_down[c] = ok
                if ok:
                    models[c].weights = global_model.weights.copy()
        reports.append(RoundReport(
            round=r,
            losses=[train_loss(m, s, config.loss) for m, s in zip(models, shards)],
            accuracies=[accuracy(m, test) for m in models],
            uplink_bytes=[up_size] * C,
            downlink_bytes=[down_size if broadcast else 0] * C,
            uplink_delivered=delivered_up,
            downlink_delivered=delivered_down,
            seed_uplink_bytes=[seed_bytes if r == 1 and server_seeds is None else 0] * C,
        ))
    return reports
