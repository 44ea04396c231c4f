"""Backbone encoder, width-reduced side network, fusion and freeze policy."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass(frozen=True)
class ArchSpec:
    L: int = 4
    N: int = 16
    D_B: int = 64
    r: int = 2
    D_out: int = 4
    mlp_ratio: int = 2
    input_dim: int = 16

    def __post_init__(self):
        for name in ("L", "N", "D_B", "r", "D_out", "mlp_ratio", "input_dim"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ValueError(f"ArchSpec.{name} must be an integer, got {v!r}")
        if self.L < 2:
            raise ValueError(f"ArchSpec.L must be >= 2, got {self.L}")
        if self.N < 1:
            raise ValueError(f"ArchSpec.N must be >= 1, got {self.N}")
        if self.r < 2:
            raise ValueError(f"ArchSpec.r must be >= 2, got {self.r}")
        if self.D_B <= 0 or self.D_B % self.r:
            raise ValueError(f"ArchSpec.D_B={self.D_B} must be a positive multiple of r={self.r}")
        for name in ("D_out", "mlp_ratio", "input_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ArchSpec.{name} must be positive")

    @property
    def D_S(self) -> int:
        return self.D_B // self.r

    @property
    def boundary(self) -> int:
        """Last shallow layer (1-based); layers after it are deep."""
        return self.L // 2

    @property
    def shallow_layers(self) -> list[int]:
        return list(range(1, self.boundary + 1))

    @property
    def deep_layers(self) -> list[int]:
        return list(range(self.boundary + 1, self.L + 1))

    def as_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Named parameter container."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _param(self, name, values):
        p = Parameter(values, name=name)
        self.params[name] = p
        return p

    def named_parameters(self):
        return self.params.items()

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    def num_params(self, trainable_only=False) -> int:
        return sum(p.size for p in self.params.values() if p.requires_grad or not trainable_only)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict=True):
        missing = set(self.params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if k not in state:
                continue
            v = np.asarray(state[k])
            if v.shape != p.shape:
                raise ValueError(f"{k}: shape {v.shape} does not match {p.shape}")
            p.values[...] = v


class EncoderLayer:
    """Pre-LN block: LN -> single-head attention -> +res -> LN -> relu MLP -> +res."""

    def __init__(self, owner: Module, prefix: str, d: int, mlp_ratio: int, rng):
        h = d * mlp_ratio
        p = owner._param
        self.ln1_g = p(f"{prefix}.ln1.g", np.ones(d))
        self.ln1_b = p(f"{prefix}.ln1.b", np.zeros(d))
        self.Wq = p(f"{prefix}.attn.Wq", _uniform(rng, d, (d, d)))
        self.Wk = p(f"{prefix}.attn.Wk", _uniform(rng, d, (d, d)))
        self.Wv = p(f"{prefix}.attn.Wv", _uniform(rng, d, (d, d)))
        self.Wo = p(f"{prefix}.attn.Wo", _uniform(rng, d, (d, d)))
        self.ln2_g = p(f"{prefix}.ln2.g", np.ones(d))
        self.ln2_b = p(f"{prefix}.ln2.b", np.zeros(d))
        self.W1 = p(f"{prefix}.mlp.W1", _uniform(rng, d, (d, h)))
        self.b1 = p(f"{prefix}.mlp.b1", np.zeros(h))
        self.W2 = p(f"{prefix}.mlp.W2", _uniform(rng, h, (h, d)))
        self.b2 = p(f"{prefix}.mlp.b2", np.zeros(d))
        self.d = d

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.layernorm(x, self.ln1_g, self.ln1_b)
        q, k, v = ad.matmul(h, self.Wq), ad.matmul(h, self.Wk), ad.matmul(h, self.Wv)
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(self.d))
        attn = ad.matmul(ad.softmax_rows(scores), v)
        x = ad.add(x, ad.matmul(attn, self.Wo))
        h = ad.layernorm(x, self.ln2_g, self.ln2_b)
        h = ad.relu(ad.add(ad.matmul(h, self.W1), self.b1))
        return ad.add(x, ad.add(ad.matmul(h, self.W2), self.b2))


LAYER_MATMUL_WEIGHTS = ("attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo", "mlp.W1", "mlp.W2")


class BackboneModel(Module):
    def __init__(self, spec: ArchSpec, seed: int):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.embed_W = self._param("embed.W", _uniform(rng, spec.input_dim, (spec.input_dim, spec.D_B)))
        self.embed_b = self._param("embed.b", np.zeros(spec.D_B))
        self.layers = [EncoderLayer(self, f"layers.{i}", spec.D_B, spec.mlp_ratio, rng)
                       for i in range(spec.L)]
        self.head_W = self._param("head.W", _uniform(rng, spec.D_B, (spec.D_B, spec.D_out)))

    def layernorm_params(self) -> list[Tensor]:
        return [p for k, p in self.params.items() if ".ln" in k]

    def reinit_head(self, seed: int):
        rng = np.random.default_rng(seed)
        self.head_W.values[...] = _uniform(rng, self.spec.D_B, self.head_W.shape)


class SideModel(Module):
    """L side layers at width D_B / r with gated fusion inputs from the backbone."""

    def __init__(self, spec: ArchSpec, seed: int, r: Optional[int] = None):
        super().__init__()
        self.spec = spec
        self.r = spec.r if r is None else r
        if spec.D_B % self.r:
            raise ValueError(f"r={self.r} does not divide D_B={spec.D_B}")
        d_s = spec.D_B // self.r
        self.D_S = d_s
        rng = np.random.default_rng(seed)
        self.gates = [self._param(f"fuse.{i}.alpha", np.zeros(())) for i in range(spec.L)]
        self.proj_W = [self._param(f"fuse.{i}.P.W", _uniform(rng, spec.D_B, (spec.D_B, d_s)))
                       for i in range(spec.L)]
        self.proj_b = [self._param(f"fuse.{i}.P.b", np.zeros(d_s)) for i in range(spec.L)]
        self.layers = [EncoderLayer(self, f"layers.{i}", d_s, spec.mlp_ratio, rng)
                       for i in range(spec.L)]
        self.head_W = self._param("head.W", _uniform(rng, d_s, (d_s, spec.D_out)))

    def fuse(self, l: int, b_l: Tensor, b_L: Tensor) -> Tensor:
        """Fusion input of 0-based layer ``l``."""
        return fuse_inputs(b_l, b_L, self.gates[l], self.proj_W[l], self.proj_b[l])


def build_backbone(spec: ArchSpec, seed: int) -> BackboneModel:
    return BackboneModel(spec, seed)


def build_side(spec: ArchSpec, seed: int, r: Optional[int] = None) -> SideModel:
    return SideModel(spec, seed, r=r)


@dataclass
class BackboneOutput:
    features: list  # b^1..b^L
    logits: Tensor  # Y^B


@dataclass
class SideOutput:
    features: list  # s^1..s^L
    logits: Tensor  # Y^S


def _check_input(spec: ArchSpec, X: Tensor):
    if X.ndim != 3 or X.shape[1] != spec.N or X.shape[2] != spec.input_dim:
        raise ad.ShapeError(f"expected input (batch, {spec.N}, {spec.input_dim}), got {X.shape}")


def backbone_forward(model: BackboneModel, X) -> BackboneOutput:
    X = X if isinstance(X, Tensor) else Tensor(X)
    _check_input(model.spec, X)
    with ad.segment("embedding"):
        h = ad.add(ad.matmul(X, model.embed_W), model.embed_b)
    feats = []
    with ad.segment("backbone"):
        for layer in model.layers:
            h = layer(h)
            feats.append(h)
    with ad.segment("heads"):
        logits = ad.matmul(ad.gap(h), model.head_W)
    return BackboneOutput(feats, logits)


def faded_forward(model: BackboneModel, X) -> Tensor:
    """Inference with the side branch dropped: only the backbone and its head run."""
    return backbone_forward(model, X).logits


def fuse_inputs(b_l: Tensor, b_L: Tensor, gate: Tensor, proj_W: Tensor, proj_b: Optional[Tensor] = None) -> Tensor:
    """P( sigmoid(a) * b_l + (1 - sigmoid(a)) * b_L ), written as b_L + sigmoid(a) * (b_l - b_L)."""
    if b_l.shape != b_L.shape:
        raise ad.ShapeError(f"fuse_inputs: incompatible shapes {b_l.shape} and {b_L.shape}")
    diff = Tensor(b_l.values - b_L.values)
    if b_l.requires_grad or b_L.requires_grad:
        diff = ad.add(b_l, ad.scale(b_L, -1.0))
    mixed = ad.add(b_L, ad.mul(ad.sigmoid(gate), diff))
    z = ad.matmul(mixed, proj_W)
    return z if proj_b is None else ad.add(z, proj_b)


def side_forward(side: SideModel, backbone_feats) -> SideOutput:
    """Run the side network on backbone features, which enter as constants."""
    spec = side.spec
    if len(backbone_feats) != spec.L:
        raise ValueError(f"side_forward needs {spec.L} backbone features, got {len(backbone_feats)}")
    consts = [f.detach() if isinstance(f, Tensor) else Tensor(f) for f in backbone_feats]
    b_L = consts[-1]
    s = None
    feats = []
    for i, layer in enumerate(side.layers):
        with ad.segment("projectors"):
            z = side.fuse(i, consts[i], b_L)
        with ad.segment("side"):
            s = layer(z if s is None else ad.add(s, z))
        feats.append(s)
    with ad.segment("heads"):
        logits = ad.matmul(ad.gap(s), side.head_W)
    return SideOutput(feats, logits)


@dataclass(frozen=True)
class FreezePolicy:
    """Which parameter groups receive gradients.

    backbone: "ln_head" (layernorm affine + W_B), "all", "none"
    side: whether the side network and distillation parameters train.
    """

    backbone: str = "ln_head"
    side: bool = True

    @classmethod
    def for_mode(cls, mode: str) -> "FreezePolicy":
        return {
            "mdpd": cls("ln_head", True),
            "full_ft": cls("all", False),
            "partial": cls("ln_head", False),
            "side_only": cls("none", True),
        }[mode]


def apply_freeze(backbone: BackboneModel, side: Optional[Module] = None,
                 policy: FreezePolicy = FreezePolicy(), distill: Optional[Module] = None):
    for name, p in backbone.params.items():
        if policy.backbone == "all":
            p.requires_grad = True
        elif policy.backbone == "ln_head":
            p.requires_grad = ".ln" in name or name == "head.W"
        elif policy.backbone == "none":
            p.requires_grad = False
        else:
            raise ValueError(f"unknown backbone policy {policy.backbone!r}")
    for mod in (side, distill):
        if mod is not None:
            for p in mod.params.values():
                p.requires_grad = policy.side
