"""Synthetic transfer tasks, pretrain -> finetune -> evaluate pipeline, sweeps, persistence."""

from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .config import TrainConfig
from .distill import DistillConfig, DistillModule
from .memory import analytic_memory, count_flops
from .models import (ArchSpec, BackboneModel, FreezePolicy, apply_freeze, build_backbone,
                     build_side)
from .trainer import Models, OptimState, evaluate, lr_schedule, train_step

log = logging.getLogger(__name__)

# fixed offsets keep the seed streams of one run disjoint
_BACKBONE, _SIDE, _DISTILL, _HEAD, _MASK, _BATCH, _SOURCE, _TARGET = range(8)


def _seed(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, stream])


def _int_seed(seed: int, stream: int) -> int:
    return int(_seed(seed, stream).generate_state(1)[0])


class ConvergenceError(RuntimeError):
    def __init__(self, msg, record=None):
        super().__init__(msg)
        self.record = record


@dataclass
class SyntheticTask:
    centroids: np.ndarray  # (C, input_dim)
    label_of_centroid: np.ndarray  # (C,)
    X_train: np.ndarray
    y_train: np.ndarray
    X_eval: np.ndarray
    y_eval: np.ndarray
    noise: float
    seed: int

    @property
    def train(self):
        return self.X_train, self.y_train

    @property
    def eval(self):
        return self.X_eval, self.y_eval


def _sphere(rng, c, dim, radius):
    v = rng.standard_normal((c, dim))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _balanced_labels(rng, n, c):
    y = np.arange(n) % c
    rng.shuffle(y)
    return y


def _draw(rng, centroids, label_of_centroid, n, spec: ArchSpec, noise):
    c = len(centroids)
    cls = _balanced_labels(rng, n, c)
    X = centroids[cls][:, None, :] + noise * rng.standard_normal((n, spec.N, spec.input_dim))
    return X, label_of_centroid[cls]


def make_task(seed: int, C: int, n_train: int, n_eval: int, spec: ArchSpec, noise: float = 1.0,
              radius: float = 3.0, centroids: Optional[np.ndarray] = None,
              label_of_centroid: Optional[np.ndarray] = None) -> SyntheticTask:
    """Tokens are centroid + Gaussian noise; each class owns one centroid on a sphere of ``radius``."""
    if C < 2:
        raise ValueError("a task needs at least 2 classes")
    rng = np.random.default_rng(_seed(seed, 0))
    if centroids is None:
        centroids = _sphere(rng, C, spec.input_dim, radius)
    if label_of_centroid is None:
        label_of_centroid = np.arange(C)
    Xt, yt = _draw(np.random.default_rng(_seed(seed, 1)), centroids, label_of_centroid, n_train, spec, noise)
    Xe, ye = _draw(np.random.default_rng(_seed(seed, 2)), centroids, label_of_centroid, n_eval, spec, noise)
    return SyntheticTask(centroids, label_of_centroid, Xt, yt, Xe, ye, noise, seed)


def make_transfer_task(source: SyntheticTask, seed: int, n_train: int, n_eval: int,
                       spec: ArchSpec) -> SyntheticTask:
    """Same centroid geometry, permuted labels with no fixed point, fresh noise."""
    C = len(source.centroids)
    shift = 1 + int(np.random.default_rng(_seed(seed, 3)).integers(C - 1))
    perm = (source.label_of_centroid + shift) % C
    return make_task(seed, C, n_train, n_eval, spec, source.noise, centroids=source.centroids,
                     label_of_centroid=perm)


def nearest_centroid_accuracy(task: SyntheticTask) -> float:
    """Brute-force oracle: classify the token mean by its nearest centroid."""
    means = task.X_eval.mean(axis=1)
    d = ((means[:, None, :] - task.centroids[None]) ** 2).sum(-1)
    return float((task.label_of_centroid[d.argmin(1)] == task.y_eval).mean())


def source_task(cfg: TrainConfig) -> SyntheticTask:
    t = cfg.task
    return make_task(_int_seed(cfg.seed, _SOURCE), t.classes, t.n_train, t.n_eval, cfg.arch,
                     t.noise, t.radius)


def target_task(cfg: TrainConfig) -> SyntheticTask:
    t = cfg.task
    return make_transfer_task(source_task(cfg), _int_seed(cfg.seed, _TARGET), t.n_train, t.n_eval,
                              cfg.arch)


def _batches(rng, n, batch_size):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i:i + batch_size]


# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    mode: str
    seed: int
    config_hash: str
    tag: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    status: str = "ok"
    wall_clock: float = 0.0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(**d)


def state_hash(state: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(ckpt.dumps(state)).hexdigest()


def pretrain(cfg: TrainConfig) -> tuple[dict[str, np.ndarray], RunRecord]:
    """Train the whole backbone on the source task; returns (checkpoint tensors, record).

    Raises ConvergenceError when source accuracy stays below the configured floor.
    """
    start = time.perf_counter()
    spec = cfg.arch
    task = source_task(cfg)
    backbone = build_backbone(spec, _int_seed(cfg.seed, _BACKBONE))
    apply_freeze(backbone, policy=FreezePolicy("all", False))
    models = Models(backbone)
    p = cfg.pretrain
    state = OptimState(p.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.weight_decay, cfg.optim.eps)
    rng = np.random.default_rng(_seed(cfg.seed, _BATCH))
    batches = _batches(rng, len(task.y_train), p.batch_size)
    rec = RunRecord("pretrain", cfg.seed, cfg.hash())
    for step in range(p.steps):
        idx = next(batches)
        lr = lr_schedule(step, p.steps, p.lr, cfg.schedule.warmup, cfg.schedule.warmup_frac)
        out = train_step(models, (task.X_train[idx], task.y_train[idx]), cfg.distill, state, rng,
                         lr=lr, mode="full_ft")
        rec.losses.append({"step": step, "sft": out.sft, "total": out.total})
    acc = evaluate(models, task.eval, "faded")["accuracy"]
    rec.final = {"source_accuracy": acc}
    rec.wall_clock = time.perf_counter() - start
    state_dict = backbone.state_dict()
    # the stored checkpoint is float32; hand back exactly what a reload yields
    state_dict = ckpt.loads(ckpt.dumps(state_dict))
    if acc < p.min_accuracy:
        rec.status = "convergence_failure"
        raise ConvergenceError(f"pretraining reached {acc:.3f} < {p.min_accuracy}", rec)
    return state_dict, rec


def build_models(cfg: TrainConfig, backbone_state: dict[str, np.ndarray], mode: Optional[str] = None) -> Models:
    mode = mode or cfg.mode
    spec = cfg.arch
    backbone = build_backbone(spec, _int_seed(cfg.seed, _BACKBONE))
    backbone.load_state_dict(backbone_state)
    backbone.reinit_head(_int_seed(cfg.seed, _HEAD))
    side = distill = None
    if mode in ("mdpd", "side_only"):
        side = build_side(spec, _int_seed(cfg.seed, _SIDE))
    if mode == "mdpd":
        distill = DistillModule(spec, cfg.distill, _int_seed(cfg.seed, _DISTILL))
    apply_freeze(backbone, side, FreezePolicy.for_mode(mode), distill)
    return Models(backbone, side, distill)


def finetune(cfg: TrainConfig, backbone_state: dict[str, np.ndarray],
             task: Optional[SyntheticTask] = None, tag: Optional[dict] = None) -> tuple[RunRecord, Models]:
    start = time.perf_counter()
    mode = cfg.mode
    d = cfg.distill
    if mode != "mdpd" and d != DistillConfig(lam=d.lam):
        log.warning("mode %s ignores the distillation settings in the config", mode)
    task = task or target_task(cfg)
    models = build_models(cfg, backbone_state, mode)
    o = cfg.optim
    state = OptimState(o.lr, o.beta1, o.beta2, o.weight_decay, o.eps, o.grad_clip)
    batch_rng = np.random.default_rng(_seed(cfg.seed, _BATCH))
    mask_rng = np.random.default_rng(_seed(cfg.seed, _MASK))
    batches = _batches(batch_rng, len(task.y_train), cfg.batch_size)
    rec = RunRecord(mode, cfg.seed, cfg.hash(), dict(tag or {}))
    first_ledger = None
    for step in range(cfg.steps):
        idx = next(batches)
        lr = lr_schedule(step, cfg.steps, o.lr, cfg.schedule.warmup, cfg.schedule.warmup_frac)
        out = train_step(models, (task.X_train[idx], task.y_train[idx]), d, state, mask_rng,
                         lr=lr, mode=mode)
        if first_ledger is None:
            first_ledger = out.ledger
        row = {"step": step, **out.as_dict()}
        rec.losses.append(row)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            rec.evals.append({"step": step + 1, **_eval_all(models, task, cfg)})
    rec.final = _eval_all(models, task, cfg)
    rep = analytic_memory(cfg.arch)
    rec.final["memory_side_over_full"] = rep.side_network / rep.full_ft
    rec.final["memory_petl_over_full"] = rep.petl_lower_bound / rep.full_ft
    rec.final["stored_scalars_step0"] = first_ledger.total if first_ledger else 0
    rec.wall_clock = time.perf_counter() - start
    return rec, models


def _eval_all(models: Models, task: SyntheticTask, cfg: TrainConfig) -> dict:
    out = {}
    f = evaluate(models, task.eval, "faded")
    out["faded_accuracy"] = f["accuracy"]
    out["faded_flops"] = f["flops"]
    if models.side is not None:
        a = evaluate(models, task.eval, "assisted", cfg.distill)
        out["assisted_accuracy"] = a["accuracy"]
        out["assisted_flops"] = a["flops"]
    return out


def reinit_head_baseline(cfg: TrainConfig, backbone_state, task: Optional[SyntheticTask] = None) -> float:
    """Faded accuracy of the pretrained backbone with the freshly reinitialised head."""
    task = task or target_task(cfg)
    models = build_models(cfg, backbone_state, "partial")
    return evaluate(models, task.eval, "faded")["accuracy"]


def models_state(models: Models) -> dict[str, np.ndarray]:
    out = ckpt.prefixed("backbone", models.backbone.state_dict())
    if models.side is not None:
        out.update(ckpt.prefixed("side", models.side.state_dict()))
    if models.distill is not None:
        out.update(ckpt.prefixed("distill", models.distill.state_dict()))
    return out


# ---------------------------------------------------------------------------
# sweeps

SWEEP_KEYS = {
    "lambda": ("distill", "lam", float),
    "distill.lambda": ("distill", "lam", float),
    "layers": ("distill", "layers", str),
    "distill.layers": ("distill", "layers", str),
    "generation": ("distill", "generation", lambda s: s.lower() in ("true", "1", "on", "yes")),
    "distill.generation": ("distill", "generation", lambda s: s.lower() in ("true", "1", "on", "yes")),
}


def parse_sweep(text: str) -> tuple[str, list[str]]:
    if "=" not in text:
        raise ValueError(f"sweep must look like KEY=V1,V2,..., got {text!r}")
    key, vals = text.split("=", 1)
    key = key.strip()
    if key not in SWEEP_KEYS:
        raise ValueError(f"cannot sweep {key!r}; choose one of lambda, layers, generation")
    values = [v.strip() for v in vals.split(",") if v.strip()]
    if not values:
        raise ValueError("sweep needs at least one value")
    return key, values


def ablate(cfg: TrainConfig, sweep: str, seeds: list[int], pretrained: Optional[dict] = None) -> list[RunRecord]:
    """One finetune per (grid value, seed); records carry the swept value in ``tag``."""
    key, values = parse_sweep(sweep)
    section, attr, conv = SWEEP_KEYS[key]
    records = []
    pretrained = dict(pretrained or {})
    for seed in seeds:
        base = dataclasses.replace(cfg, seed=seed)
        if seed not in pretrained:
            pretrained[seed], _ = pretrain(base)
        for raw in values:
            sec = dataclasses.replace(getattr(base, section), **{attr: conv(raw)})
            run_cfg = dataclasses.replace(base, **{section: sec})
            rec, _ = finetune(run_cfg, pretrained[seed], tag={key.split(".")[-1]: conv(raw)})
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# persistence

SUMMARY_FIELDS = ["mode", "tag", "lambda", "seed", "config_hash", "status", "final_sft", "final_log",
                  "final_sha", "final_deep", "final_total", "assisted_accuracy", "faded_accuracy",
                  "faded_flops", "assisted_flops", "memory_side_over_full", "memory_petl_over_full",
                  "stored_scalars_step0"]


def _num(v):
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summary_row(rec: RunRecord, lam: Optional[float] = None) -> dict:
    last = rec.losses[-1] if rec.losses else {}
    f = rec.final
    lam = rec.tag.get("lambda", lam)
    return {
        "mode": rec.mode,
        "tag": json.dumps(rec.tag, sort_keys=True),
        "lambda": _num(lam),
        "seed": _num(rec.seed),
        "config_hash": rec.config_hash,
        "status": rec.status,
        "final_sft": _num(last.get("sft")),
        "final_log": _num(last.get("log")),
        "final_sha": _num(sum(last["sha_per_layer"]) if last.get("sha_per_layer") else ""),
        "final_deep": _num(sum(last["deep_per_layer"]) if last.get("deep_per_layer") else ""),
        "final_total": _num(last.get("total")),
        "assisted_accuracy": _num(f.get("assisted_accuracy")),
        "faded_accuracy": _num(f.get("faded_accuracy")),
        "faded_flops": _num(f.get("faded_flops")),
        "assisted_flops": _num(f.get("assisted_flops")),
        "memory_side_over_full": _num(f.get("memory_side_over_full")),
        "memory_petl_over_full": _num(f.get("memory_petl_over_full")),
        "stored_scalars_step0": _num(f.get("stored_scalars_step0")),
    }


def summary_path(out_path) -> Path:
    p = Path(out_path)
    return p.with_name(p.stem + ".summary.csv")


def persist(records: list[RunRecord], out_path, lam: Optional[float] = None):
    """Write one JSON record per line to ``out_path`` and a CSV summary beside it."""
    out_path = Path(out_path)
    try:
        with out_path.open("w") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
        with summary_path(out_path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
            w.writeheader()
            for rec in records:
                w.writerow(summary_row(rec, lam))
    except OSError as exc:
        raise OSError(f"cannot write results to {out_path}: {exc}") from exc


def load_records(path) -> list[RunRecord]:
    with Path(path).open() as fh:
        return [RunRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def load_summary(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
