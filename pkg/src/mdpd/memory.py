"""Analytic backprop memory model, its empirical reconciliation, and FLOP counts.

Memory is counted in stored scalars.  Byte sizes are scalars times the
element width and are left to callers.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ArchSpec, apply_freeze, backbone_forward, build_backbone, build_side, side_forward, FreezePolicy


def preactivation_dims(spec: ArchSpec, width: Optional[int] = None) -> list[tuple[str, int]]:
    """Every nonlinearity input z_i of the layer stack, per batch item."""
    d = spec.D_B if width is None else width
    n = spec.N
    out = []
    for l in range(1, spec.L + 1):
        out += [
            (f"layer{l}.ln1", n * d),
            (f"layer{l}.softmax", n * n),
            (f"layer{l}.ln2", n * d),
            (f"layer{l}.relu", n * d * spec.mlp_ratio),
        ]
    return out


@dataclass(frozen=True)
class AnalyticMemoryReport:
    a_total: int
    sigma_total: int
    full_ft: int
    petl_lower_bound: int
    side_network: int
    r: int

    def as_dict(self) -> dict:
        return asdict(self)


def report_from_totals(a_total: int, sigma_total: int, r: int) -> AnalyticMemoryReport:
    """Full FT keeps {a} and {sigma'}; PETL can at best drop {a}; the side net keeps both at 1/r."""
    full = a_total + sigma_total
    if r < 1 or full % r:
        raise ValueError(f"(|a| + |sigma'|) = {full} is not divisible by r={r}")
    return AnalyticMemoryReport(a_total, sigma_total, full, sigma_total, full // r, r)


def analytic_memory(spec: ArchSpec, r: Optional[int] = None) -> AnalyticMemoryReport:
    r = spec.r if r is None else r
    if r < 1 or spec.D_B % r:
        raise ValueError(f"reduction factor r={r} must divide D_B={spec.D_B}")
    sigma = sum(d for _, d in preactivation_dims(spec))
    a = sigma  # |{a}| = |{sigma'}| when no activation changes dimensionality
    return report_from_totals(a, sigma, r)


@dataclass
class Reconciliation:
    ratio_empirical: float
    ratio_analytic: float
    passed: bool
    side_scalars: int
    backbone_scalars: int
    notes: str = ""

    @property
    def gap(self) -> float:
        return abs(self.ratio_empirical - self.ratio_analytic)


def reconcile(side_ledger: ad.MemoryLedger, full_ledger: ad.MemoryLedger,
              report: AnalyticMemoryReport, tol: float) -> Reconciliation:
    """Compare stored scalars of the side layer stack against the full-FT backbone stack."""
    if "side" not in side_ledger.per_segment:
        raise ValueError("side ledger has no 'side' segment tag")
    if "backbone" not in full_ledger.per_segment:
        raise ValueError("full-FT ledger has no 'backbone' segment tag")
    side = side_ledger.segment_total("side")
    full = full_ledger.segment_total("backbone")
    emp = side / full
    analytic = report.side_network / report.full_ft
    proj = side_ledger.segment_total("projectors")
    notes = (f"softmax buffers are N x N and layernorm keeps one rstd per token; neither scales "
             f"with width. fusion/projector buffers held separately: {proj} scalars")
    return Reconciliation(emp, analytic, abs(emp - analytic) <= tol, side, full, notes)


def measure_ledgers(spec: ArchSpec, r: Optional[int] = None, batch: int = 1, seed: int = 0):
    """Ledgers of (side-network training pass, full fine-tuning pass) for ``spec``."""
    rng = np.random.default_rng(seed)
    X = Tensor(rng.standard_normal((batch, spec.N, spec.input_dim)))

    backbone = build_backbone(spec, seed)
    apply_freeze(backbone, policy=FreezePolicy("all", False))
    tape = ad.Tape()
    with tape:
        backbone_forward(backbone, X)
        full = ad.ledger_snapshot(tape)

    side = build_side(spec, seed + 1, r=r)
    apply_freeze(backbone, side, FreezePolicy("none", True))
    with ad.no_grad():
        feats = backbone_forward(backbone, X).features
    tape = ad.Tape()
    with tape:
        side_forward(side, feats)
        side_l = ad.ledger_snapshot(tape)
    return side_l, full


@dataclass(frozen=True)
class FlopReport:
    backbone_forward: int
    side_forward: int
    projectors: int
    layer_matmuls_backbone: int
    layer_matmuls_side: int
    fusion: int = 0  # part of ``projectors``; needed by assisted inference

    @property
    def assisted_total(self) -> int:
        return self.backbone_forward + self.side_forward + self.fusion

    @property
    def faded_total(self) -> int:
        return self.backbone_forward

    @property
    def training_total(self) -> int:
        return self.backbone_forward + self.side_forward + self.projectors

    def as_dict(self) -> dict:
        d = asdict(self)
        d["faded_total"] = self.faded_total
        d["training_total"] = self.training_total
        d["assisted_total"] = self.assisted_total
        return d


def _layer_flops(n: int, d: int, mlp_ratio: int) -> tuple[int, int]:
    weights = 2 * n * d * d * 4 + 2 * 2 * n * d * d * mlp_ratio
    attention = 2 * 2 * n * n * d
    return weights, attention


def count_flops(spec: ArchSpec, faded: bool = False, cfg=None, side: bool = True) -> FlopReport:
    """Closed-form matmul/conv FLOPs per input example (2 per multiply-add).

    Fusion down-projections and all distillation projectors go to the
    ``projectors`` segment, matching the tags used at runtime.
    """
    from .distill import DistillConfig

    cfg = cfg or DistillConfig()
    n, db, ds = spec.N, spec.D_B, spec.D_S
    w_b, a_b = _layer_flops(n, db, spec.mlp_ratio)
    bb = 2 * n * spec.input_dim * db + spec.L * (w_b + a_b) + 2 * db * spec.D_out
    if faded or not side:
        return FlopReport(bb, 0, 0, spec.L * w_b, 0)
    w_s, a_s = _layer_flops(n, ds, spec.mlp_ratio)
    sd = spec.L * (w_s + a_s) + 2 * ds * spec.D_out
    fusion = spec.L * 2 * n * db * ds
    proj = fusion
    d = cfg.rank
    layers = cfg.shallow_layers(spec) + cfg.deep_layers(spec)
    proj += len(layers) * 2 * n * (ds * d + d * db)
    if cfg.generation:
        proj += len(cfg.deep_layers(spec)) * 2 * (2 * 3 * n * db * db)
    if cfg.w_log > 0:
        proj += 2 * 2 * spec.D_out * spec.D_out
    return FlopReport(bb, sd, proj, spec.L * w_b, spec.L * w_s, fusion)
