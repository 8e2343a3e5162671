"""Experiment configuration, dispatch and metrics emission.

A run is described by one JSON document (see :data:`CONFIG_SCHEMA`).
Every scheme writes its metrics as CSV plus a ``manifest.json`` holding the
fully-defaulted config, the package version, the wall time and the dataset
hash. CSV bytes depend only on the config, including under ``n_jobs > 1``.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import subprocess
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import jsonschema
import numpy as np

from . import channel as channel_mod
from .data import ShardPlan, load_idx, shard, synth_classification, train_test_split
from .fd import TrainConfig, run_fd, run_fl
from .frd import DrlConfig, run_drl
from .mix2fld import privacy_report, run_mix2fld
from .nn import CROSS_ENTROPY, MSE, Mlp
from .ntk import (KernelRegimeSystem, cd_closed_form, cd_iterate, gradient_flow_oracle, kd_fixed_point,
                  peer_sum, rounds_to_tolerance, warm_start_system)
from .seeding import child_int, child_rng

OUTPUT_DIR_ENV = "FEDISTILL_OUTPUT_DIR"

SCHEMES = ("fd", "fl", "cd_analytic", "kd_analytic", "mixfld", "mix2fld", "pd", "frd", "frl")
SUPERVISED = ("fd", "fl", "mixfld", "mix2fld")
REINFORCEMENT = ("pd", "frd", "frl")

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["scheme"],
    "additionalProperties": False,
    "properties": {
        "scheme": {"enum": list(SCHEMES)},
        "seed": _nonneg_int,
        "output_dir": {"type": "string"},
        "n_jobs": _pos_int,
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["synthetic", "idx"]},
                "classes": _pos_int,
                "per_class": _pos_int,
                "dim": _pos_int,
                "spread": {"type": "number", "minimum": 0},
                "test_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "label_count": _pos_int,
            },
        },
        "shards": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "workers": _pos_int,
                "mode": {"enum": ["iid", "non_iid"]},
                "per_worker_counts": {"type": "object"},
                "rare_labels": _nonneg_int,
                "rare_count": _nonneg_int,
                "common_count": _nonneg_int,
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": _pos_int},
                "activation": {"enum": ["tanh", "relu", "identity"]},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": _pos_int,
                "local_steps": _nonneg_int,
                "batch_size": _pos_int,
                "lr": _pos_num,
                "distill_weight": {"type": "number", "minimum": 0},
                "loss": {"enum": ["mse", "cross_entropy"]},
                "regularizer": {"enum": ["mse", "cross_entropy"]},
                "logit_layer": {"enum": ["hidden", "output"]},
                "float_width": {"enum": [4, 8]},
            },
        },
        "channel": {"enum": [None, *channel_mod.PRESETS]},
        "mix": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                "n_mix": _pos_int,
                "n_inv": _pos_int,
                "server_steps": _nonneg_int,
                "server_batch": _pos_int,
                "privacy_gammas": {"type": "array", "items": {"type": "number"}},
            },
        },
        "ntk": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": _pos_int,
                "workers": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
                "a": _pos_num,
                "lam": _pos_num,
                "noise": {"type": "number", "minimum": 0},
                "rounds": _nonneg_int,
                "tolerance": _pos_num,
                "systems": _pos_int,
                "step": _pos_num,
                "iters": _pos_int,
            },
        },
        "drl": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "agents": _pos_int,
                "episodes": _pos_int,
                "S": _pos_int,
                "interval": _pos_int,
                "hidden": {"type": "array", "items": _pos_int},
                "agent_hidden": {"type": "array", "items": {"type": "array", "items": _pos_int}},
                "actor_lr": _pos_num,
                "critic_lr": _pos_num,
                "distill_steps": _nonneg_int,
                "distill_lr": _pos_num,
                "mission_score": {"type": "number"},
                "float_width": {"enum": [4, 8]},
            },
        },
    },
    "allOf": [
        {"if": {"properties": {"scheme": {"enum": ["mixfld", "mix2fld"]}}},
         "then": {"required": ["mix"], "properties": {"mix": {"required": ["gamma"]}}}},
    ],
}

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "n_jobs": 1,
    "dataset": {"kind": "synthetic", "classes": 10, "per_class": 125, "dim": 32, "spread": 1.5,
                "test_fraction": 0.2, "label_count": 10},
    "shards": {"workers": 2, "mode": "iid", "rare_labels": 2, "rare_count": 2, "common_count": 62},
    "model": {"hidden": [128, 64], "activation": "tanh"},
    "train": {"rounds": 30, "local_steps": 20, "batch_size": 32, "lr": 0.1, "distill_weight": 0.1,
              "loss": "cross_entropy", "regularizer": "cross_entropy", "logit_layer": "output",
              "float_width": 4},
    "channel": None,
    "mix": {"n_mix": 50, "n_inv": 50, "server_steps": 100, "server_batch": 32, "privacy_gammas": []},
    "ntk": {"n": 500, "workers": [2, 5, 100], "a": 1.0, "lam": 4.0, "noise": 1.0, "rounds": 200,
            "tolerance": 1e-4, "systems": 50, "step": 0.1, "iters": 2000},
    "drl": {"agents": 2, "episodes": 500, "S": 10, "interval": 25, "hidden": [32, 32],
            "actor_lr": 0.01, "critic_lr": 0.01, "distill_steps": 20, "distill_lr": 0.01,
            "mission_score": 490.0, "float_width": 4},
}

_LOSSES = {"mse": MSE, "cross_entropy": CROSS_ENTROPY}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``path`` locates the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


class SchemaError(ValueError):
    pass


def _merge(defaults, given):
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    scheme: str
    seed: int
    output_dir: str
    n_jobs: int
    dataset: dict
    shards: dict
    model: dict
    train: dict
    channel: Optional[str]
    mix: dict
    ntk: dict
    drl: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("", "config must be a JSON object")
        errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(raw),
                        key=lambda e: list(map(str, e.absolute_path)))
        if errors:
            e = errors[0]
            raise ConfigError(".".join(map(str, e.absolute_path)), e.message)
        full = _merge(DEFAULTS, raw)
        cfg = cls(**full)
        cfg._check()
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON in {path}: {exc}") from None
        return cls.from_dict(raw)

    def _check(self):
        ds = self.dataset
        if ds["kind"] == "idx":
            for key in ("images", "labels"):
                if key not in ds:
                    raise ConfigError(f"dataset.{key}", "required when dataset.kind is 'idx'")
        if self.scheme in SUPERVISED and self.scheme != "fl" and self.shards["workers"] < 2:
            raise ConfigError("shards.workers", f"scheme {self.scheme!r} needs at least 2 workers")
        if self.scheme in ("mixfld", "mix2fld") and self.train["logit_layer"] != "output":
            raise ConfigError("train.logit_layer", "Mixup schemes exchange output-layer logits")
        hetero = self.drl.get("agent_hidden")
        if self.scheme in REINFORCEMENT and hetero is not None and len(hetero) != self.drl["agents"]:
            raise ConfigError("drl.agent_hidden", "needs one entry per agent")

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    @property
    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(t["local_steps"], t["batch_size"], t["lr"], t["distill_weight"],
                           _LOSSES[t["loss"]], _LOSSES[t["regularizer"]], t["logit_layer"],
                           t["float_width"])

    @property
    def drl_config(self) -> DrlConfig:
        d = self.drl
        return DrlConfig(hidden=tuple(d["hidden"]), agent_hidden=d.get("agent_hidden"),
                         actor_lr=d["actor_lr"], critic_lr=d["critic_lr"], S=d["S"],
                         exchange_interval=d["interval"], distill_steps=d["distill_steps"],
                         distill_lr=d["distill_lr"], mission_score=d["mission_score"],
                         float_width=d["float_width"])


# --- outputs ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path, rows: Sequence[Dict], columns: Optional[Sequence[str]] = None) -> None:
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def version_string() -> str:
    """Installed version, suffixed with ``git describe`` output when available."""
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{base}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


@dataclass
class RunResult:
    output_dir: Path
    files: List[Path]
    manifest: dict
    extra: dict = field(default_factory=dict)


# --- dataset / models ---------------------------------------------------------

def build_dataset(cfg: ExperimentConfig):
    ds_cfg = cfg.dataset
    if ds_cfg["kind"] == "idx":
        full = load_idx(ds_cfg["images"], ds_cfg["labels"], ds_cfg["label_count"])
    else:
        full = synth_classification(ds_cfg["classes"], ds_cfg["per_class"], ds_cfg["dim"],
                                    child_int(cfg.seed, "dataset"), ds_cfg["spread"])
    train, test = train_test_split(full, ds_cfg["test_fraction"], child_int(cfg.seed, "split"))
    return full, train, test


def build_models(cfg: ExperimentConfig, d_x, label_count, workers) -> List[Mlp]:
    dims = [d_x, *cfg.model["hidden"], label_count]
    return [Mlp(dims, cfg.model["activation"], child_int(cfg.seed, "model", c)) for c in range(workers)]


# --- runners ------------------------------------------------------------------

def _run_supervised(cfg, out):
    full, train, test = build_dataset(cfg)
    plan = ShardPlan(cfg.shards["mode"], cfg.shards.get("per_worker_counts"), child_int(cfg.seed, "shards"),
                     cfg.shards["rare_labels"], cfg.shards["rare_count"], cfg.shards["common_count"])
    C = cfg.shards["workers"]
    shards = shard(train, C, plan)
    models = build_models(cfg, train.dim, train.label_count, C)
    link = channel_mod.preset(cfg.channel) if cfg.channel else None
    tc = cfg.train_config
    rounds = cfg.train["rounds"]
    files = []
    if cfg.scheme in ("fd", "fl"):
        runner = run_fd if cfg.scheme == "fd" else run_fl
        reports = runner(models, shards, rounds, tc, test, link, cfg.seed, cfg.n_jobs)
    else:
        m = cfg.mix
        reports = run_mix2fld(models, shards, rounds, m["gamma"], m["n_mix"], m["n_inv"], link, tc,
                              m["server_steps"], m["server_batch"], test, cfg.seed, cfg.scheme,
                              n_jobs=cfg.n_jobs)
        if m["privacy_gammas"]:
            rows = []
            for mode in ("mixup", "mix2up"):
                for g, med, p25, p75 in privacy_report(train, m["privacy_gammas"], m["n_mix"], cfg.seed, mode):
                    rows.append({"mode": mode, "gamma": g, "median": med, "p25": p25, "p75": p75})
            path = out / "privacy.csv"
            write_csv(path, rows, ["mode", "gamma", "median", "p25", "p75"])
            files.append(path)
    rows = [dict(scheme=cfg.scheme, **row) for rep in reports for row in rep.rows()]
    path = out / "metrics.csv"
    write_csv(path, rows, METRIC_COLUMNS)
    files.insert(0, path)
    return files, full.digest()


METRIC_COLUMNS = ["scheme", "round", "worker", "loss", "accuracy", "uplink_bytes", "downlink_bytes",
                  "uplink_delivered", "downlink_delivered", "seed_uplink_bytes"]


def _ntk_y(cfg):
    n = cfg.ntk["n"]
    return (np.arange(n) % cfg.dataset["classes"]).astype(np.float64)


def _run_cd(cfg, out):
    p = cfg.ntk
    y = _ntk_y(cfg)
    rows, summary = [], []
    for C in p["workers"]:
        sys = warm_start_system(y, C, p["a"], p["lam"], p["noise"], child_int(cfg.seed, "cd", C))
        traj = cd_iterate(sys, p["rounds"])
        for r, f in enumerate(traj):
            v = peer_sum(sys, f)
            gap = float(np.max(np.abs(cd_closed_form(sys, r) - v) / np.maximum(np.abs(v), 1e-300)))
            resid = np.max(np.abs(f - y), axis=1)
            for c in range(C):
                rows.append({"workers": C, "round": r, "worker": c, "residual": resid[c],
                             "closed_form_gap": gap})
        summary.append({"workers": C, "tolerance": p["tolerance"],
                        "rounds_to_tolerance": rounds_to_tolerance(sys, p["tolerance"])})
    a, b = out / "residuals.csv", out / "cd_summary.csv"
    write_csv(a, rows, ["workers", "round", "worker", "residual", "closed_form_gap"])
    write_csv(b, summary, ["workers", "tolerance", "rounds_to_tolerance"])
    return [a, b], _array_digest(y)


def _run_kd(cfg, out):
    p = cfg.ntk
    rows = []
    for i in range(p["systems"]):
        rng = child_rng(cfg.seed, "kd", i)
        y = rng.standard_normal(p["n"])
        phi = rng.standard_normal(p["n"])
        sys = KernelRegimeSystem(y, p["a"], p["lam"], 2, teacher_pred=phi)
        fixed = kd_fixed_point(sys)
        flow = gradient_flow_oracle(sys, p["step"], p["iters"])
        rows.append({"system": i, "kd_error": float(np.linalg.norm(fixed - y)),
                     "oracle_gap": float(np.max(np.abs(flow - fixed)))})
    path = out / "kd.csv"
    write_csv(path, rows, ["system", "kd_error", "oracle_gap"])
    return [path], None


def _run_drl(cfg, out):
    d = cfg.drl
    res = run_drl(cfg.scheme, d["agents"], d["episodes"], cfg.drl_config, cfg.seed, cfg.n_jobs)
    a, b = out / "exchanges.csv", out / "scores.csv"
    write_csv(a, [dict(scheme=cfg.scheme, **row) for rep in res.reports for row in rep.rows()],
              ["scheme", "exchange", "agent", "rolling_score", "uplink_bytes", "downlink_bytes"])
    score_rows = [{"agent": c, "episode": e + 1, "score": s}
                  for c, row in enumerate(res.scores) for e, s in enumerate(row) if not math.isnan(s)]
    write_csv(b, score_rows, ["agent", "episode", "score"])
    return [a, b], None


def _array_digest(a):
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()


_RUNNERS = {
    "fd": _run_supervised, "fl": _run_supervised, "mixfld": _run_supervised, "mix2fld": _run_supervised,
    "cd_analytic": _run_cd, "kd_analytic": _run_kd,
    "pd": _run_drl, "frd": _run_drl, "frl": _run_drl,
}


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run ``cfg`` and write its CSVs and ``manifest.json`` to the output directory."""
    out = resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    files, digest = _RUNNERS[cfg.scheme](cfg, out)
    manifest = {
        "config": cfg.to_dict(),
        "version": version_string(),
        "wall_time_seconds": time.perf_counter() - start,
        "dataset_sha256": digest,
        "outputs": [f.name for f in files],
    }
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return RunResult(out, files + [path], manifest)


# --- comparison ---------------------------------------------------------------

_COMPARE_COLUMNS = {"round", "worker", "accuracy", "uplink_bytes", "downlink_bytes"}


@dataclass
class Comparison:
    rounds: List[dict]
    thresholds: List[dict]

    def format(self) -> str:
        lines = ["round  acc_a     acc_b     d_acc     bytes_a       bytes_b       d_bytes"]
        for r in self.rounds:
            lines.append(f"{r['round']:<6} {r['accuracy_a']:<9.4f} {r['accuracy_b']:<9.4f} "
                         f"{r['accuracy_delta']:<+9.4f} {r['bytes_a']:<13d} {r['bytes_b']:<13d} "
                         f"{r['bytes_delta']:+d}")
        lines.append("threshold  round_a  round_b  cost_ratio(b/a)")
        for t in self.thresholds:
            ratio = "undefined" if t["cost_ratio"] is None else f"{t['cost_ratio']:.6g}"
            ra = "-" if t["round_a"] is None else t["round_a"]
            rb = "-" if t["round_b"] is None else t["round_b"]
            lines.append(f"{t['threshold']:<10} {ra!s:<8} {rb!s:<8} {ratio}")
        return "\n".join(lines)


def _per_round(rows, name):
    if not rows:
        raise SchemaError(f"{name}: no rows")
    missing = _COMPARE_COLUMNS - set(rows[0])
    if missing:
        raise SchemaError(f"{name}: missing columns {sorted(missing)}")
    acc, spent = {}, {}
    for row in rows:
        r = int(row["round"])
        acc.setdefault(r, []).append(float(row["accuracy"]))
        cost = int(row["uplink_bytes"]) + int(row["downlink_bytes"]) + int(row.get("seed_uplink_bytes") or 0)
        spent[r] = spent.get(r, 0) + cost
    rounds = sorted(acc)
    total, cumulative = 0, {}
    for r in rounds:
        total += spent[r]
        cumulative[r] = total
    return {r: (float(np.mean(acc[r])), cumulative[r]) for r in rounds}


def compare(report_a, report_b, thresholds=(0.5, 0.8, 0.9, 0.95)) -> Comparison:
    """Per-round accuracy and cumulative-byte deltas (``b - a``) of two metric reports.

    Reports are ``metrics.csv`` paths or lists of row dicts. For each accuracy
    threshold the cost ratio is the cumulative bytes ``b`` spent to first reach
    it divided by those of ``a``; ``None`` when either never reaches it.
    """
    rows_a = read_csv(report_a) if isinstance(report_a, (str, Path)) else list(report_a)
    rows_b = read_csv(report_b) if isinstance(report_b, (str, Path)) else list(report_b)
    a, b = _per_round(rows_a, "report a"), _per_round(rows_b, "report b")
    if set(a) != set(b):
        raise SchemaError("reports cover different rounds")
    table = []
    for r in sorted(a):
        (acc_a, bytes_a), (acc_b, bytes_b) = a[r], b[r]
        table.append({"round": r, "accuracy_a": acc_a, "accuracy_b": acc_b,
                      "accuracy_delta": acc_b - acc_a, "bytes_a": bytes_a, "bytes_b": bytes_b,
                      "bytes_delta": bytes_b - bytes_a})

    def first(rep, thr):
        return next((r for r in sorted(rep) if rep[r][0] >= thr), None)

    ratios = []
    for thr in thresholds:
        ra, rb = first(a, thr), first(b, thr)
        ratio = None
        if ra is not None and rb is not None and a[ra][1] > 0:
            ratio = b[rb][1] / a[ra][1]
        ratios.append({"threshold": thr, "round_a": ra, "round_b": rb, "cost_ratio": ratio})
    return Comparison(table, ratios)
