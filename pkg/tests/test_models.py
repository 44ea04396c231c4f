import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdpd import autodiff as ad
from mdpd.autodiff import Tensor
from mdpd.distill import DistillConfig, DistillModule
from mdpd.models import (LAYER_MATMUL_WEIGHTS, ArchSpec, FreezePolicy, apply_freeze, backbone_forward,
                         build_backbone, build_side, faded_forward, fuse_inputs, side_forward)

SPEC = ArchSpec(L=4, N=16, D_B=64, r=2)
SMALL = ArchSpec(L=2, N=6, D_B=8, r=2, D_out=3, input_dim=5)


def _x(spec, batch=2, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((batch, spec.N, spec.input_dim)))


# --- ArchSpec ---------------------------------------------------------------

def test_spec_derived_widths():
    assert SPEC.D_S == 32
    assert SPEC.boundary == 2
    assert SPEC.shallow_layers == [1, 2] and SPEC.deep_layers == [3, 4]


@pytest.mark.parametrize("field, kwargs", [
    ("D_B", dict(D_B=63, r=2)),
    ("L", dict(L=1)),
    ("r", dict(r=1)),
    ("D_out", dict(D_out=0)),
    ("N", dict(N=2.5)),
])
def test_invalid_spec_names_field(field, kwargs):
    with pytest.raises(ValueError, match=field):
        ArchSpec(**kwargs)


@given(st.integers(2, 12), st.integers(1, 8), st.integers(2, 6))
def test_boundary_in_range(L, k, r):
    spec = ArchSpec(L=L, D_B=k * r, r=r)
    assert 1 <= spec.boundary <= L - 1
    assert sorted(spec.shallow_layers + spec.deep_layers) == list(range(1, L + 1))
    assert spec.D_S * r == spec.D_B


# --- backbone -----------------------------------------------------------------

def test_backbone_shapes():
    out = backbone_forward(build_backbone(SPEC, 0), _x(SPEC))
    assert len(out.features) == SPEC.L
    assert all(f.shape == (2, 16, 64) for f in out.features)
    assert out.logits.shape == (2, SPEC.D_out)


def test_same_seed_same_params():
    a, b = build_backbone(SPEC, 3), build_backbone(SPEC, 3)
    assert all(a.params[k].values.tobytes() == b.params[k].values.tobytes() for k in a.params)
    c = build_backbone(SPEC, 4)
    assert any(a.params[k].values.tobytes() != c.params[k].values.tobytes() for k in a.params)


def test_layernorm_scale_init_ones():
    bb = build_backbone(SPEC, 0)
    scales = [p for k, p in bb.params.items() if k.endswith((".ln1.g", ".ln2.g"))]
    assert len(scales) == 2 * SPEC.L
    assert all(np.all(p.values == 1.0) for p in scales)


def test_zero_head_gives_zero_logits():
    bb = build_backbone(SPEC, 0)
    bb.head_W.values[...] = 0.0
    assert np.all(faded_forward(bb, _x(SPEC, seed=5)).values == 0.0)


def test_input_token_mismatch_rejected():
    bb = build_backbone(SPEC, 0)
    with pytest.raises(ad.ShapeError):
        backbone_forward(bb, np.zeros((1, SPEC.N + 1, SPEC.input_dim)))


def _reference_layer(x, P, prefix, d):
    # independent plain-numpy pre-LN block
    def ln(v, g, b):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * g + b

    h = ln(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    q, k, v = h @ P[f"{prefix}.attn.Wq"], h @ P[f"{prefix}.attn.Wk"], h @ P[f"{prefix}.attn.Wv"]
    s = q @ k.swapaxes(-1, -2) / np.sqrt(d)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    x = x + (a @ v) @ P[f"{prefix}.attn.Wo"]
    h = ln(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    h = np.maximum(h @ P[f"{prefix}.mlp.W1"] + P[f"{prefix}.mlp.b1"], 0)
    return x + h @ P[f"{prefix}.mlp.W2"] + P[f"{prefix}.mlp.b2"]


def test_hand_set_two_token_instance():
    spec = ArchSpec(L=2, N=2, D_B=2, r=2, D_out=2, mlp_ratio=1, input_dim=2)
    bb = build_backbone(spec, 0)
    P = {k: p.values for k, p in bb.params.items()}
    eye = np.eye(2)
    P["embed.W"][...] = [[1.0, 0.0], [0.0, 2.0]]
    P["embed.b"][...] = [0.5, -0.5]
    for i in range(2):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            P[f"layers.{i}.attn.{w}"][...] = eye
        P[f"layers.{i}.mlp.W1"][...] = [[1.0, -1.0], [0.0, 1.0]]
        P[f"layers.{i}.mlp.W2"][...] = 0.5 * eye
    P["head.W"][...] = [[1.0, 0.0], [1.0, -1.0]]
    X = np.array([[[1.0, 2.0], [-1.0, 0.5]]])

    # first block by hand.  embed: e0=[1.5, 3.5], e1=[-0.5, 0.5]
    e = X @ P["embed.W"] + P["embed.b"]
    np.testing.assert_allclose(e, [[[1.5, 3.5], [-0.5, 0.5]]])
    # LN of [u, v] is [-1, 1] * (|u-v|/2) / sqrt((u-v)^2/4 + eps) when u < v
    c0 = 1.0 / np.sqrt(1.0 + 1e-5)
    c1 = 0.5 / np.sqrt(0.25 + 1e-5)
    n = np.array([[-c0, c0], [-c1, c1]])
    # identity q/k/v/o: scores n n^T / sqrt(2)
    s = n @ n.T / np.sqrt(2)
    att = np.exp(s) / np.exp(s).sum(-1, keepdims=True)
    x1 = e[0] + att @ n
    m = x1.mean(-1, keepdims=True)
    n2 = (x1 - m) / np.sqrt(((x1 - m) ** 2).mean(-1, keepdims=True) + 1e-5)
    hid = np.maximum(n2 @ np.array([[1.0, -1.0], [0.0, 1.0]]), 0)
    block1 = x1 + 0.5 * hid
    out = backbone_forward(bb, X)
    np.testing.assert_allclose(out.features[0].values[0], block1, rtol=1e-12, atol=1e-12)

    h = e
    for i in range(2):
        h = _reference_layer(h, P, f"layers.{i}", 2)
    want = h.mean(-2) @ P["head.W"]
    np.testing.assert_allclose(out.logits.values, want, rtol=1e-12, atol=1e-12)


def test_backbone_matches_reference_on_random_weights():
    bb = build_backbone(SMALL, 11)
    P = {k: p.values for k, p in bb.params.items()}
    X = _x(SMALL, batch=3, seed=2).values
    h = X @ P["embed.W"] + P["embed.b"]
    feats = []
    for i in range(SMALL.L):
        h = _reference_layer(h, P, f"layers.{i}", SMALL.D_B)
        feats.append(h)
    out = backbone_forward(bb, X)
    for got, want in zip(out.features, feats):
        np.testing.assert_allclose(got.values, want, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(out.logits.values, h.mean(-2) @ P["head.W"], rtol=1e-10, atol=1e-12)


# --- fusion ---------------------------------------------------------------------

def _fuse_case(seed=0):
    rng = np.random.default_rng(seed)
    b_l, b_L = rng.standard_normal((2, 5, 8)), rng.standard_normal((2, 5, 8))
    W, bias = rng.standard_normal((8, 4)), rng.standard_normal(4)
    return b_l, b_L, W, bias


def test_fuse_gate_saturation():
    b_l, b_L, W, bias = _fuse_case()
    z = fuse_inputs(Tensor(b_l), Tensor(b_L), Tensor(np.array(20.0)), Tensor(W), Tensor(bias)).values
    want = b_l @ W + bias
    assert np.abs(z - want).max() / np.abs(want).max() < 1e-6


def test_fuse_equal_mixing_at_zero_gate():
    b_l, b_L, W, bias = _fuse_case(1)
    z = fuse_inputs(Tensor(b_l), Tensor(b_L), Tensor(np.array(0.0)), Tensor(W), Tensor(bias)).values
    np.testing.assert_allclose(z, (0.5 * b_l + 0.5 * b_L) @ W + bias, rtol=1e-12, atol=1e-12)


@given(st.floats(-30, 30), st.integers(0, 1000))
def test_fuse_equal_inputs_ignore_gate(alpha, seed):
    b_l, _, W, bias = _fuse_case(seed)
    z = fuse_inputs(Tensor(b_l), Tensor(b_l.copy()), Tensor(np.array(alpha)), Tensor(W), Tensor(bias)).values
    np.testing.assert_allclose(z, b_l @ W + bias, rtol=1e-12, atol=1e-12)


def test_fuse_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        fuse_inputs(Tensor(np.ones((5, 8))), Tensor(np.ones((4, 8))), Tensor(np.zeros(())), Tensor(np.ones((8, 4))))


# --- side network -------------------------------------------------------------------

def test_side_shapes():
    bb, sd = build_backbone(SPEC, 0), build_side(SPEC, 1)
    out = side_forward(sd, backbone_forward(bb, _x(SPEC)).features)
    assert len(out.features) == SPEC.L
    assert all(f.shape == (2, 16, 32) for f in out.features)
    assert out.logits.shape == (2, SPEC.D_out)


def test_side_missing_features_rejected():
    bb, sd = build_backbone(SPEC, 0), build_side(SPEC, 1)
    feats = backbone_forward(bb, _x(SPEC)).features
    with pytest.raises(ValueError):
        side_forward(sd, feats[:-1])


def test_side_first_layer_sees_only_fused_input():
    # s^0 = 0: the first side layer acts on the fused input alone.  An
    # ArchSpec needs L >= 2, so the single-layer case is checked as layer 1
    # of a deeper net with b^L set equal to b^1.
    bb, sd = build_backbone(SMALL, 0), build_side(SMALL, 1)
    feats = [f.values for f in backbone_forward(bb, _x(SMALL)).features]
    feats[-1] = feats[0].copy()
    sd.gates[0].values[...] = 1.7
    out = side_forward(sd, [Tensor(f) for f in feats])
    z = feats[0] @ sd.proj_W[0].values + sd.proj_b[0].values
    want = sd.layers[0](Tensor(z)).values
    np.testing.assert_allclose(out.features[0].values, want, rtol=1e-12, atol=1e-12)


def test_side_zero_residual_branches_accumulate_fusions():
    bb, sd = build_backbone(SMALL, 0), build_side(SMALL, 1)
    for layer in sd.layers:
        for p in (layer.Wo, layer.W2, layer.b2):
            p.values[...] = 0.0
    for i, g in enumerate(sd.gates):
        g.values[...] = 0.4 * i - 0.3
    feats = backbone_forward(bb, _x(SMALL)).features
    out = side_forward(sd, feats)
    acc = 0.0
    for i in range(SMALL.L):
        acc = acc + sd.fuse(i, feats[i], feats[-1]).values
        np.testing.assert_allclose(out.features[i].values, acc, rtol=1e-12, atol=1e-12)


def test_side_weights_are_scaled_backbone_dims():
    bb, sd = build_backbone(SPEC, 0), build_side(SPEC, 1)
    for i in range(SPEC.L):
        for name in LAYER_MATMUL_WEIGHTS:
            bshape = bb.params[f"layers.{i}.{name}"].shape
            sshape = sd.params[f"layers.{i}.{name}"].shape
            assert tuple(d // SPEC.r for d in bshape) == sshape


@pytest.mark.parametrize("r", [2, 4, 8])
def test_dimension_halving(r):
    spec = ArchSpec(D_B=64, r=r)
    bb, sd = build_backbone(spec, 0), build_side(spec, 1)

    def layer_total(m, only_matmul=False):
        return sum(p.size for k, p in m.params.items() if k.startswith("layers.")
                   and (not only_matmul or any(k.endswith(w) for w in LAYER_MATMUL_WEIGHTS)))

    assert layer_total(sd) < layer_total(bb)
    assert layer_total(sd, True) * r * r == layer_total(bb, True)


@given(st.integers(0, 2**31 - 1))
def test_backbone_independent_of_side(seed):
    bb, sd = build_backbone(SMALL, 0), build_side(SMALL, 1)
    X = _x(SMALL, seed=3)
    before = backbone_forward(bb, X)
    side_forward(sd, before.features)
    rng = np.random.default_rng(seed)
    for p in sd.params.values():
        p.values[...] += rng.standard_normal(p.shape)
    after = backbone_forward(bb, X)
    for a, b in zip(before.features + [before.logits], after.features + [after.logits]):
        assert a.values.tobytes() == b.values.tobytes()


# --- freeze ---------------------------------------------------------------------------

def test_freeze_examples():
    bb, sd = build_backbone(SPEC, 0), build_side(SPEC, 1)
    apply_freeze(bb, sd, FreezePolicy.for_mode("mdpd"))
    assert not bb.params["layers.0.attn.Wq"].requires_grad
    assert bb.params["layers.0.ln1.g"].requires_grad
    assert bb.params["head.W"].requires_grad


def test_freeze_policy_sets():
    bb, sd = build_backbone(SPEC, 0), build_side(SPEC, 1)
    dm = DistillModule(SPEC, DistillConfig(), 2)
    apply_freeze(bb, sd, FreezePolicy.for_mode("mdpd"), dm)
    ln = {k for k in bb.params if ".ln1." in k or ".ln2." in k}
    assert set(bb.trainable()) == ln | {"head.W"}
    assert set(sd.trainable()) == set(sd.params)
    assert set(dm.trainable()) == set(dm.params)


@pytest.mark.parametrize("mode, backbone_all, backbone_none, side", [
    ("full_ft", True, False, False),
    ("partial", False, False, False),
    ("side_only", False, True, True),
])
def test_freeze_policy_modes(mode, backbone_all, backbone_none, side):
    bb, sd = build_backbone(SMALL, 0), build_side(SMALL, 1)
    apply_freeze(bb, sd, FreezePolicy.for_mode(mode))
    n = len(bb.trainable())
    if backbone_all:
        assert n == len(bb.params)
    elif backbone_none:
        assert n == 0
    else:
        assert 0 < n < len(bb.params)
    assert bool(sd.trainable()) == side


# --- fading -------------------------------------------------------------------------

def test_faded_equals_training_forward_bitwise():
    bb, sd = build_backbone(SPEC, 0), build_side(SPEC, 1)
    apply_freeze(bb, sd, FreezePolicy.for_mode("mdpd"))
    X = _x(SPEC, batch=4, seed=9)
    with ad.Tape():
        train = backbone_forward(bb, X)
        side_forward(sd, train.features)
    assert faded_forward(bb, X).values.tobytes() == train.logits.values.tobytes()


def test_faded_works_without_side():
    bb = build_backbone(SPEC, 0)
    sd = build_side(SPEC, 1)
    X = _x(SPEC, seed=4)
    want = faded_forward(bb, X).values.copy()
    del sd
    assert faded_forward(bb, X).values.tobytes() == want.tobytes()


def test_state_dict_roundtrip():
    a, b = build_backbone(SMALL, 0), build_backbone(SMALL, 1)
    b.load_state_dict(a.state_dict())
    assert all(a.params[k].values.tobytes() == b.params[k].values.tobytes() for k in a.params)
    with pytest.raises(KeyError):
        b.load_state_dict({})
