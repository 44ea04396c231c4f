"""Bottleneck alignment, masked generation and the dual-path loss terms."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import ArchSpec, BackboneOutput, Module, SideOutput, _uniform


@dataclass
class DistillConfig:
    lam: float = 0.5
    w_log: float = 1e-4
    w_deep: float = 6e-5
    w_sha: float = 4e-5
    w_sft: float = 1.0
    rank: int = 8
    layers: str = "all"  # all | shallow | deep | none
    generation: bool = True
    task_loss_on_backbone: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"mask ratio lambda must lie in [0, 1], got {self.lam}")
        if self.rank <= 0:
            raise ValueError(f"bottleneck rank must be positive, got {self.rank}")
        if self.layers not in ("all", "shallow", "deep", "none"):
            raise ValueError(f"unknown layer subset {self.layers!r}")
        for name in ("w_log", "w_deep", "w_sha", "w_sft"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def shallow_layers(self, spec: ArchSpec) -> list[int]:
        return spec.shallow_layers if self.layers in ("all", "shallow") else []

    def deep_layers(self, spec: ArchSpec) -> list[int]:
        return spec.deep_layers if self.layers in ("all", "deep") else []


def projector_param_count(d_in: int, d_out: int, d: int) -> int:
    return (1 + d_in + d_out) * d + d_out


class BottleneckProjector:
    """x @ M_down + inner bias, then @ M_up + output bias."""

    def __init__(self, owner: Module, prefix: str, d_in: int, d_out: int, d: int, rng=None,
                 identity=False):
        self.d_in, self.d_out, self.d = d_in, d_out, d
        if identity:
            if not d_in == d_out == d:
                raise ValueError("identity projector needs d_in == d_out == d")
            down, up = np.eye(d), np.eye(d)
        else:
            down, up = _uniform(rng, d_in, (d_in, d)), _uniform(rng, d, (d, d_out))
        self.M_down = owner._param(f"{prefix}.M_down", down)
        self.b_inner = owner._param(f"{prefix}.b_inner", np.zeros(d))
        self.M_up = owner._param(f"{prefix}.M_up", up)
        self.b_out = owner._param(f"{prefix}.b_out", np.zeros(d_out))

    @property
    def parameters(self) -> list[Tensor]:
        return [self.M_down, self.b_inner, self.M_up, self.b_out]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters if p.requires_grad)


class _Standalone(Module):
    pass


def make_projector(d_in: int, d_out: int, d: int, seed: int = 0) -> BottleneckProjector:
    return BottleneckProjector(_Standalone(), "proj", d_in, d_out, d, np.random.default_rng(seed))


def bottleneck_project(x: Tensor, proj: BottleneckProjector, detached: bool = False) -> Tensor:
    if x.shape[-1] != proj.d_in:
        raise ad.ShapeError(f"bottleneck_project: incompatible shapes {x.shape} and {proj.M_down.shape}")
    ps = [p.detach() for p in proj.parameters] if detached else proj.parameters
    m_down, b_in, m_up, b_out = ps
    h = ad.add(ad.matmul(x, m_down), b_in)
    return ad.add(ad.matmul(h, m_up), b_out)


@dataclass
class MaskVector:
    m: np.ndarray
    lam: float
    seed: Optional[int] = None

    @property
    def N(self) -> int:
        return len(self.m)

    @property
    def fraction(self) -> float:
        return float(self.m.mean())


def mask_from_uniforms(r, lam: float) -> MaskVector:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mask ratio lambda must lie in [0, 1], got {lam}")
    return MaskVector((np.asarray(r) < lam).astype(np.int8), lam)


def sample_mask(N: int, lam: float, rng: np.random.Generator, seed: Optional[int] = None) -> MaskVector:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mask ratio lambda must lie in [0, 1], got {lam}")
    mv = mask_from_uniforms(rng.random(N), lam)
    mv.seed = seed
    return mv


def apply_mask(aligned: Tensor, mask: MaskVector, token: Tensor) -> Tensor:
    if mask.N != aligned.shape[-2]:
        raise ad.ShapeError(f"apply_mask: mask length {mask.N} does not match N={aligned.shape[-2]}")
    return ad.mask_rows(aligned, token, mask.m)


class GenerationBlock:
    """conv1d_k3 -> relu -> conv1d_k3 along the token axis, D_B channels."""

    def __init__(self, owner: Module, prefix: str, d: int, rng):
        self.W1 = owner._param(f"{prefix}.conv1.W", _uniform(rng, 3 * d, (3, d, d)))
        self.b1 = owner._param(f"{prefix}.conv1.b", np.zeros(d))
        self.W2 = owner._param(f"{prefix}.conv2.W", _uniform(rng, 3 * d, (3, d, d)))
        self.b2 = owner._param(f"{prefix}.conv2.b", np.zeros(d))

    def set_identity(self):
        for W, b in ((self.W1, self.b1), (self.W2, self.b2)):
            W.values[...] = 0.0
            W.values[1] = np.eye(W.shape[1])
            b.values[...] = 0.0


def generate(s_bar: Tensor, G: GenerationBlock) -> Tensor:
    return ad.conv1d_k3(ad.relu(ad.conv1d_k3(s_bar, G.W1, G.b1)), G.W2, G.b2)


def _batch_mean(loss: Tensor, like: Tensor, token_axis: int = 2) -> Tensor:
    # losses are summed per sample, then averaged over the batch
    if like.ndim > token_axis:
        return ad.scale(loss, 1.0 / like.shape[0])
    return loss


def loss_shallow(b_l: Tensor, aligned: Tensor) -> Tensor:
    """sum_ij (b_ij - phi(s)_ij)^2 with the backbone feature as a fixed teacher."""
    return _batch_mean(ad.mse_like(b_l.detach(), aligned), aligned)


def loss_deep(b_l: Tensor, generated: Tensor, mask: MaskVector) -> Tensor:
    """sum_ij m_i (b_ij - G(s_bar)_ij)^2; rows with m_i = 0 do not contribute."""
    return _batch_mean(ad.mse_like(b_l.detach(), generated, row_weights=mask.m), generated)


def loss_logits(Y_S: Tensor, Y_B: Tensor, logit_proj: BottleneckProjector) -> Tensor:
    """sum_i (Y^S_i - phi_log(Y^B)_i)^2 with the side logits as a fixed teacher.

    The projector is applied with detached parameters, so only the backbone
    side of the graph receives gradient.
    """
    if Y_S.shape != Y_B.shape:
        raise ad.ShapeError(f"loss_logits: incompatible shapes {Y_S.shape} and {Y_B.shape}")
    loss = ad.mse_like(Y_S.detach(), bottleneck_project(Y_B, logit_proj, detached=True))
    return _batch_mean(loss, Y_B, token_axis=1)


class DistillModule(Module):
    """Per-layer feature projectors, per-deep-layer mask tokens and generation blocks,
    and the logits projector."""

    def __init__(self, spec: ArchSpec, cfg: DistillConfig, seed: int, d_s: Optional[int] = None):
        super().__init__()
        self.spec, self.cfg = spec, cfg
        d_s = spec.D_S if d_s is None else d_s
        rng = np.random.default_rng(seed)
        self.projectors = {l: BottleneckProjector(self, f"phi.{l}", d_s, spec.D_B, cfg.rank, rng)
                           for l in range(1, spec.L + 1)}
        self.mask_tokens = {l: self._param(f"mask_token.{l}", np.zeros(spec.D_B))
                            for l in spec.deep_layers}
        self.generators = {l: GenerationBlock(self, f"gen.{l}", spec.D_B, rng)
                           for l in spec.deep_layers}
        self.logit_proj = BottleneckProjector(self, "phi_log", spec.D_out, spec.D_out, spec.D_out,
                                              identity=True)


@dataclass
class LossBreakdown:
    sft: float
    log: float
    sha_per_layer: list
    deep_per_layer: list
    total: float
    weights: dict = field(default_factory=dict)
    total_tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)
    mask: Optional[MaskVector] = field(default=None, repr=False, compare=False)
    ledger: Optional[ad.MemoryLedger] = field(default=None, repr=False, compare=False)

    def recompute_total(self) -> float:
        w = self.weights
        return (w["w_sft"] * self.sft + w["w_log"] * self.log
                + w["w_sha"] * sum(self.sha_per_layer) + w["w_deep"] * sum(self.deep_per_layer))

    def as_dict(self) -> dict:
        return {"sft": self.sft, "log": self.log, "sha_per_layer": list(self.sha_per_layer),
                "deep_per_layer": list(self.deep_per_layer), "total": self.total}


@dataclass
class Teacher:
    """Frozen teacher signals; defaults to the detached values of the current forward."""

    backbone_features: list
    side_logits: Tensor


def combined_objective(task_loss: Optional[Tensor], bb: BackboneOutput, sd: SideOutput,
                       distill: DistillModule, cfg: DistillConfig, rng=None,
                       mask: Optional[MaskVector] = None, teacher: Optional[Teacher] = None,
                       backbone_task_loss: Optional[Tensor] = None) -> LossBreakdown:
    """Weighted sum of the task loss and the dual-path distillation terms.

    Backbone features are teachers for the side network (detached inside the
    feature losses) and side logits are the teacher for the backbone head
    (detached inside the logits loss).  One mask is drawn for all deep layers.
    """
    spec = distill.spec
    if mask is None:
        mask = sample_mask(spec.N, cfg.lam, rng if rng is not None else np.random.default_rng())
    t_feats = teacher.backbone_features if teacher else bb.features
    t_logits = teacher.side_logits if teacher else sd.logits

    terms = []  # (weight, tensor)
    sft = 0.0
    if task_loss is not None:
        sft = task_loss.item()
        terms.append((cfg.w_sft, task_loss))
    if backbone_task_loss is not None:
        sft += backbone_task_loss.item()
        terms.append((cfg.w_sft, backbone_task_loss))

    log = 0.0
    if cfg.w_log > 0:
        with ad.segment("projectors"):
            l_log = loss_logits(t_logits, bb.logits, distill.logit_proj)
        log = l_log.item()
        terms.append((cfg.w_log, l_log))

    sha, deep = [], []
    with ad.segment("projectors"):
        for l in cfg.shallow_layers(spec):
            aligned = bottleneck_project(sd.features[l - 1], distill.projectors[l])
            t = loss_shallow(t_feats[l - 1], aligned)
            sha.append(t.item())
            if cfg.w_sha > 0:
                terms.append((cfg.w_sha, t))
        for l in cfg.deep_layers(spec):
            aligned = bottleneck_project(sd.features[l - 1], distill.projectors[l])
            if cfg.generation:
                s_bar = apply_mask(aligned, mask, distill.mask_tokens[l])
                t = loss_deep(t_feats[l - 1], generate(s_bar, distill.generators[l]), mask)
            else:
                t = loss_shallow(t_feats[l - 1], aligned)
            deep.append(t.item())
            if cfg.w_deep > 0:
                terms.append((cfg.w_deep, t))

    total_t = None
    for w, t in terms:
        if w == 0:
            continue
        wt = t if w == 1.0 else ad.scale(t, w)
        total_t = wt if total_t is None else ad.add(total_t, wt)
    if total_t is None:
        total_t = Tensor(np.zeros(()))

    weights = {"w_sft": cfg.w_sft, "w_log": cfg.w_log, "w_sha": cfg.w_sha, "w_deep": cfg.w_deep}
    out = LossBreakdown(sft, log, sha, deep, 0.0, weights, total_t, mask)
    out.total = out.recompute_total()
    return out
