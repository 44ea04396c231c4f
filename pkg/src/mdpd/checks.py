"""Finite-difference checks for every op and for the full MDPD objective."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .distill import DistillConfig, DistillModule, Teacher, sample_mask
from .models import ArchSpec, FreezePolicy, apply_freeze, backbone_forward, build_backbone, build_side, side_forward
from .trainer import Models, forward_objective

KINK_MARGIN = 1e-3


def _away_from_zero(rng, shape, margin=KINK_MARGIN):
    x = rng.standard_normal(shape)
    x[np.abs(x) < margin] += 2 * margin * np.sign(x[np.abs(x) < margin] + 1e-300)
    return x


def _probe(rng, shape):
    return Tensor(rng.standard_normal(shape))


def op_case(kind: str, rng: np.random.Generator):
    """Random (forward_fn, point) pair exercising ``kind``, reduced to a scalar by a fixed probe."""
    b, n, k, m = (int(v) for v in rng.integers(1, 5, size=4))
    n = max(n, 2)

    def reduce(y):
        return ad.mse_like(y, _probe(np.random.default_rng(99), y.shape))

    if kind == "matmul":
        pt = [Parameter(rng.standard_normal((b, n, k))), Parameter(rng.standard_normal((k, m)))]
        return (lambda a, w: reduce(ad.matmul(a, w))), pt
    if kind == "add":
        pt = [Parameter(rng.standard_normal((b, n, k))), Parameter(rng.standard_normal(k))]
        return (lambda a, c: reduce(ad.add(a, c))), pt
    if kind == "mul":
        pt = [Parameter(rng.standard_normal((n, k))), Parameter(rng.standard_normal((n, k))),
              Parameter(rng.standard_normal(()))]
        return (lambda a, c, s: reduce(ad.mul(s, ad.mul(a, c)))), pt
    if kind == "relu":
        pt = [Parameter(_away_from_zero(rng, (b, n, k)))]
        return (lambda a: reduce(ad.relu(a))), pt
    if kind == "softmax_rows":
        pt = [Parameter(rng.standard_normal((b, n, k + 1)))]
        return (lambda a: reduce(ad.softmax_rows(a))), pt
    if kind == "layernorm":
        d = k + 1
        pt = [Parameter(rng.standard_normal((b, n, d))), Parameter(1 + 0.1 * rng.standard_normal(d)),
              Parameter(rng.standard_normal(d))]
        return (lambda a, g, c: reduce(ad.layernorm(a, g, c))), pt
    if kind == "conv1d_k3":
        pt = [Parameter(rng.standard_normal((b, n, k))), Parameter(rng.standard_normal((3, k, m))),
              Parameter(rng.standard_normal(m))]
        return (lambda a, w, c: reduce(ad.conv1d_k3(a, w, c))), pt
    if kind == "gap":
        pt = [Parameter(rng.standard_normal((b, n, k)))]
        return (lambda a: reduce(ad.gap(a))), pt
    if kind == "mse_like":
        w = (rng.random(n) < 0.5).astype(float)
        pt = [Parameter(rng.standard_normal((b, n, k))), Parameter(rng.standard_normal((b, n, k)))]
        return (lambda a, c: ad.mse_like(a, c, row_weights=w)), pt
    if kind == "transpose":
        pt = [Parameter(rng.standard_normal((b, n, k)))]
        return (lambda a: reduce(ad.transpose(a))), pt
    if kind == "scale":
        pt = [Parameter(rng.standard_normal((n, k)))]
        return (lambda a: reduce(ad.scale(a, -1.7))), pt
    if kind == "sigmoid":
        pt = [Parameter(rng.standard_normal((n, k)))]
        return (lambda a: reduce(ad.sigmoid(a))), pt
    if kind == "cross_entropy":
        labels = rng.integers(0, m + 1, size=b)
        pt = [Parameter(rng.standard_normal((b, m + 1)))]
        return (lambda a: ad.cross_entropy(a, labels)), pt
    if kind == "mask_rows":
        mask = rng.random(n) < 0.5
        pt = [Parameter(rng.standard_normal((b, n, k))), Parameter(rng.standard_normal(k))]
        return (lambda a, t: reduce(ad.mask_rows(a, t, mask))), pt
    raise ValueError(f"no grad-check case for {kind!r}")


def check_op(kind: str, seed: int, h: float = 1e-5) -> float:
    fn, pt = op_case(kind, np.random.default_rng(seed))
    return ad.grad_check(fn, pt, h)


TINY_SPEC = ArchSpec(L=2, N=8, D_B=16, r=2, D_out=4, mlp_ratio=2, input_dim=6)


def objective_case(spec: ArchSpec = TINY_SPEC, seed: int = 0, batch: int = 2,
                   cfg: DistillConfig | None = None):
    """(forward_fn, point) for the full MDPD objective with the teacher signals held fixed.

    Stop-gradients make the trained objective a surrogate: the analytic
    gradient equals the derivative taken with teacher features, teacher logits
    and the logits projector frozen at their current values, which is what the
    finite differences here perturb around.
    """
    cfg = cfg or DistillConfig(w_log=0.3, w_deep=0.2, w_sha=0.1, rank=4)
    rng = np.random.default_rng(seed)
    backbone = build_backbone(spec, seed)
    side = build_side(spec, seed + 1)
    distill = DistillModule(spec, cfg, seed + 2)
    # move mask tokens and generators off their degenerate init
    for t in distill.mask_tokens.values():
        t.values[...] = rng.standard_normal(t.shape)
    for i, g in enumerate(side.gates):
        g.values[...] = 0.3 * (i + 1)
    apply_freeze(backbone, side, FreezePolicy.for_mode("mdpd"), distill)
    models = Models(backbone, side, distill)
    X = Tensor(rng.standard_normal((batch, spec.N, spec.input_dim)))
    y = rng.integers(0, spec.D_out, size=batch)
    mask = sample_mask(spec.N, 0.5, rng)
    if mask.m.sum() == 0:
        mask.m[0] = 1

    with ad.no_grad():
        bb = backbone_forward(backbone, X)
        sd = side_forward(side, bb.features)
    teacher = Teacher([Tensor(f.values.copy()) for f in bb.features], Tensor(sd.logits.values.copy()))

    frozen = {id(p) for p in distill.logit_proj.parameters}
    point = [p for p in models.trainable().values() if id(p) not in frozen]

    def fn(*_):
        return forward_objective(models, X, y, cfg, mask=mask, teacher=teacher).total_tensor

    return fn, point


def check_objective(spec: ArchSpec = TINY_SPEC, seed: int = 0, h: float = 1e-5) -> float:
    fn, point = objective_case(spec, seed)
    return ad.grad_check(fn, point, h)


def check_all(seeds=range(3), h: float = 1e-5) -> dict[str, float]:
    out = {}
    for kind in list(ad.OPS) + list(ad.AUX_OPS):
        out[kind] = max(check_op(kind, s, h) for s in seeds)
    out["mdpd_objective"] = check_objective(h=h)
    return out
