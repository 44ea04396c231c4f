"""AdamW, warmup schedules, the MDPD train step and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import GradientMap, Tensor
from .distill import DistillConfig, DistillModule, LossBreakdown, combined_objective, sample_mask
from .memory import count_flops
from .models import BackboneModel, SideModel, backbone_forward, faded_forward, side_forward


class FreezeBreach(RuntimeError):
    pass


@dataclass
class OptimState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    eps: float = 1e-8
    grad_clip: Optional[float] = None
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _decays(p: Tensor) -> bool:
    # weight matrices and conv kernels only; layernorm affine, biases, gates, mask tokens excluded
    return p.ndim >= 2


def adamw_step(state: OptimState, grads: GradientMap, params: dict[str, Tensor], lr: Optional[float] = None):
    """One decoupled-weight-decay Adam update of every trainable parameter in ``params``.

    Trainable parameters without a gradient entry are left untouched.
    """
    lr = state.lr if lr is None else lr
    by_uid = {p.uid: (name, p) for name, p in params.items()}
    for leaf in grads.leaves():
        if leaf.uid in by_uid and not by_uid[leaf.uid][1].requires_grad:
            raise FreezeBreach(f"gradient supplied for frozen parameter {by_uid[leaf.uid][0]!r}")
        if leaf.uid not in by_uid and leaf.param and not leaf.requires_grad:
            raise FreezeBreach(f"gradient supplied for frozen parameter {leaf.name!r}")

    updates = [(name, p, grads[p]) for name, p in params.items() if p.requires_grad and p in grads]
    if state.grad_clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for _, _, g in updates))
        if norm > state.grad_clip:
            updates = [(n, p, g * (state.grad_clip / norm)) for n, p, g in updates]

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p, g in updates:
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay and _decays(p):
            p.values *= 1.0 - lr * state.weight_decay
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup: str = "linear",
                warmup_frac: float = 0.1) -> float:
    """Linear ramp to ``base_lr``, then linear or cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = int(round(warmup_frac * total_steps))
    if w > 0 and step <= w:
        return base_lr * step / w
    span = total_steps - w
    if span <= 0:
        return base_lr
    progress = (step - w) / span
    if warmup == "linear":
        return base_lr * (1.0 - progress)
    if warmup == "cosine":
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ValueError(f"unknown warmup strategy {warmup!r}")


@dataclass
class Models:
    backbone: BackboneModel
    side: Optional[SideModel] = None
    distill: Optional[DistillModule] = None

    def trainable(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": p for k, p in self.backbone.trainable().items()}
        if self.side is not None:
            out.update({f"side.{k}": p for k, p in self.side.trainable().items()})
        if self.distill is not None:
            out.update({f"distill.{k}": p for k, p in self.distill.trainable().items()})
        return out

    def all_params(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": p for k, p in self.backbone.params.items()}
        if self.side is not None:
            out.update({f"side.{k}": p for k, p in self.side.params.items()})
        if self.distill is not None:
            out.update({f"distill.{k}": p for k, p in self.distill.params.items()})
        return out


def forward_objective(models: Models, X, y, cfg: DistillConfig, mask=None, rng=None,
                      teacher=None, mode: str = "mdpd") -> LossBreakdown:
    """Forward both networks and build the objective for ``mode``.

    mdpd: task loss on Y^S plus all distillation terms.
    side_only: task loss on Y^S only.
    full_ft / partial: task loss on Y^B only.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    bb = backbone_forward(models.backbone, X)
    if mode in ("full_ft", "partial"):
        with ad.segment("heads"):
            task = ad.cross_entropy(bb.logits, y)
        weights = {"w_sft": 1.0, "w_log": 0.0, "w_sha": 0.0, "w_deep": 0.0}
        out = LossBreakdown(task.item(), 0.0, [], [], 0.0, weights, task)
        out.total = out.recompute_total()
        return out
    feats = teacher.backbone_features if teacher is not None else bb.features
    sd = side_forward(models.side, feats)
    with ad.segment("heads"):
        task = ad.cross_entropy(sd.logits, y)
        bb_task = ad.cross_entropy(bb.logits, y) if cfg.task_loss_on_backbone and mode == "mdpd" else None
    if mode == "side_only":
        weights = {"w_sft": 1.0, "w_log": 0.0, "w_sha": 0.0, "w_deep": 0.0}
        out = LossBreakdown(task.item(), 0.0, [], [], 0.0, weights, task)
        out.total = out.recompute_total()
        return out
    return combined_objective(task, bb, sd, models.distill, cfg, rng=rng, mask=mask,
                              teacher=teacher, backbone_task_loss=bb_task)


def train_step(models: Models, batch, cfg: DistillConfig, state: OptimState,
               rng: np.random.Generator, lr: Optional[float] = None, mode: str = "mdpd") -> LossBreakdown:
    """Forward, objective, backward and one AdamW update; consumes one mask draw in mdpd mode."""
    X, y = batch
    mask = sample_mask(models.backbone.spec.N, cfg.lam, rng) if mode == "mdpd" else None
    tape = ad.Tape()
    with tape:
        out = forward_objective(models, X, y, cfg, mask=mask, mode=mode)
        out.ledger = ad.ledger_snapshot(tape)
        grads = ad.backward(out.total_tensor)
    adamw_step(state, grads, models.trainable(), lr=lr)
    return out


def predict(models: Models, X, mode: str = "faded", batch_size: int = 256) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            xb = Tensor(np.asarray(X[i:i + batch_size]))
            if mode == "faded":
                logits = faded_forward(models.backbone, xb)
            elif mode == "assisted":
                if models.side is None:
                    raise ValueError("assisted evaluation needs a side network")
                feats = backbone_forward(models.backbone, xb).features
                logits = side_forward(models.side, feats).logits
            else:
                raise ValueError(f"unknown eval mode {mode!r}")
            preds.append(logits.values.argmax(axis=-1))
    return np.concatenate(preds)


def evaluate(models: Models, dataset, mode: str = "faded", cfg: Optional[DistillConfig] = None) -> dict:
    """Accuracy of argmax(Y^S) (assisted) or argmax(Y^B) via the faded path, plus FLOPs per example."""
    X, y = dataset
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    acc = float((predict(models, X, mode) == np.asarray(y)).mean())
    spec = models.backbone.spec
    if mode == "faded":
        flops = count_flops(spec, faded=True).faded_total
    else:
        flops = count_flops(spec, cfg=cfg).assisted_total
    return {"accuracy": acc, "flops": flops}
