import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdpd import autodiff as ad
from mdpd.autodiff import Tensor
from mdpd.distill import DistillConfig, DistillModule, sample_mask, combined_objective
from mdpd.memory import (analytic_memory, count_flops, measure_ledgers, preactivation_dims, reconcile,
                         report_from_totals)
from mdpd.models import ArchSpec, backbone_forward, build_backbone, build_side, side_forward
from mdpd.trainer import evaluate, Models


# --- analytic report ----------------------------------------------------------------

def test_toy_totals():
    rep = report_from_totals(500, 500, 4)
    assert rep.side_network == 250


def test_r2_equals_petl():
    rep = analytic_memory(ArchSpec(r=2))
    assert rep.side_network == rep.petl_lower_bound


def test_r4_is_half_petl():
    rep = analytic_memory(ArchSpec(r=4))
    assert 2 * rep.side_network == rep.petl_lower_bound


def test_non_dividing_r_rejected():
    with pytest.raises(ValueError):
        analytic_memory(ArchSpec(D_B=64, r=2), r=3)


def test_preactivation_census():
    spec = ArchSpec(L=2, N=4, D_B=8, r=2, mlp_ratio=2)
    dims = dict(preactivation_dims(spec))
    assert dims["layer1.ln1"] == 32 and dims["layer1.softmax"] == 16 and dims["layer1.relu"] == 64


@given(st.integers(2, 6), st.integers(1, 32), st.integers(2, 8), st.integers(1, 16))
def test_report_invariants(L, k, r, N):
    spec = ArchSpec(L=L, N=N, D_B=k * r, r=r)
    total = 2 * sum(d for _, d in preactivation_dims(spec))
    if total % r:
        # the N x N softmax buffers need not divide by r; exactness is enforced by rejection
        with pytest.raises(ValueError):
            analytic_memory(spec)
        return
    rep = analytic_memory(spec)
    assert rep.side_network * r == rep.a_total + rep.sigma_total
    assert rep.full_ft == rep.a_total + rep.sigma_total
    # sigma' persists under PETL: the lower bound is exactly the sigma' total
    assert rep.petl_lower_bound == rep.sigma_total
    assert (rep.side_network < rep.petl_lower_bound) == (r > 2)
    assert all(isinstance(v, int) and v >= 0 for v in (rep.a_total, rep.sigma_total, rep.full_ft,
                                                        rep.petl_lower_bound, rep.side_network))


# --- reconcile ------------------------------------------------------------------------

def test_reconcile_example():
    spec = ArchSpec(L=4, N=16, D_B=256, r=4)
    side, full = measure_ledgers(spec)
    rec = reconcile(side, full, analytic_memory(spec), tol=0.15)
    assert rec.passed
    assert "softmax" in rec.notes


def test_reconcile_r1_identical_graphs():
    spec = ArchSpec(L=4, N=16, D_B=64, r=2)
    side, full = measure_ledgers(spec, r=1)
    rec = reconcile(side, full, analytic_memory(spec, r=1), tol=0.0)
    assert rec.ratio_empirical == 1.0 and rec.passed


def test_reconcile_tol0_reports_deviation():
    # layernorm rstd and softmax buffers do not scale with width, so r=2 is not exactly 0.5
    spec = ArchSpec(L=4, N=16, D_B=128, r=2)
    side, full = measure_ledgers(spec)
    rec = reconcile(side, full, analytic_memory(spec), tol=0.0)
    assert rec.ratio_analytic == 0.5
    assert rec.ratio_empirical != 0.5 and not rec.passed
    assert rec.gap == abs(rec.ratio_empirical - 0.5)


def test_reconcile_missing_tags_rejected():
    spec = ArchSpec(L=2, N=4, D_B=8, r=2)
    side, full = measure_ledgers(spec)
    with pytest.raises(ValueError):
        reconcile(ad.MemoryLedger(), full, analytic_memory(spec), tol=0.15)
    with pytest.raises(ValueError):
        reconcile(side, ad.MemoryLedger(), analytic_memory(spec), tol=0.15)


def test_measured_full_ft_buffer_census():
    # derived independently: per layer the full-FT backbone stores
    #   a: ln1 out (shared by q/k/v), q and k for the scores, v, the Wo input,
    #      ln2 out, relu out; softmax probabilities are already held as sigma
    #   sigma: per layernorm the normalised input (N*d) plus rstd (N),
    #          softmax output (N^2), relu mask (N*h)
    spec = ArchSpec(L=2, N=4, D_B=8, r=2, mlp_ratio=2)
    n, d, h = 4, 8, 16
    _, full = measure_ledgers(spec)
    seg = full.per_segment["backbone"]
    assert seg["sigma"] == spec.L * (2 * (n * d + n) + n * n + n * h)
    assert seg["a"] == spec.L * (6 * n * d + n * h)


@given(st.integers(0, 2**31 - 1))
def test_measured_ledger_batch_scales_linearly(seed):
    spec = ArchSpec(L=2, N=4, D_B=8, r=2)
    s1, f1 = measure_ledgers(spec, batch=1, seed=seed % 1000)
    s3, f3 = measure_ledgers(spec, batch=3, seed=seed % 1000)
    assert s3.segment_total("side") == 3 * s1.segment_total("side")
    assert f3.segment_total("backbone") == 3 * f1.segment_total("backbone")


# --- flops -------------------------------------------------------------------------------

SPEC = ArchSpec(L=4, N=8, D_B=16, r=2, D_out=4, input_dim=6)


def test_faded_equals_backbone_only():
    assert count_flops(SPEC, faded=True) == count_flops(SPEC, side=False)


@pytest.mark.parametrize("r", [2, 4])
def test_layer_matmul_ratio(r):
    rep = count_flops(ArchSpec(D_B=64, r=r))
    assert rep.layer_matmuls_side * r * r == rep.layer_matmuls_backbone


def test_training_minus_faded():
    rep = count_flops(SPEC)
    assert rep.training_total - rep.faded_total == rep.side_forward + rep.projectors
    assert rep.faded_total < rep.training_total


def test_flops_closed_form_matches_counter():
    bb, sd = build_backbone(SPEC, 0), build_side(SPEC, 1)
    cfg = DistillConfig()
    dm = DistillModule(SPEC, cfg, 2)
    X = Tensor(np.random.default_rng(0).standard_normal((1, SPEC.N, SPEC.input_dim)))
    with ad.flop_counter() as fc:
        b = backbone_forward(bb, X)
        s = side_forward(sd, b.features)
        combined_objective(None, b, s, dm, cfg, mask=sample_mask(SPEC.N, 0.5, np.random.default_rng(0)))
    rep = count_flops(SPEC, cfg=cfg)
    seg = fc.by_segment
    assert seg["embedding"] + seg["backbone"] + _head(seg, "backbone") == rep.backbone_forward
    assert seg["side"] + 2 * SPEC.D_S * SPEC.D_out == rep.side_forward
    assert seg["projectors"] == rep.projectors
    assert fc.total == rep.training_total


def _head(seg, which):
    # both heads are tagged "heads"; the backbone head is D_B x D_out
    return 2 * SPEC.D_B * SPEC.D_out if which == "backbone" else 2 * SPEC.D_S * SPEC.D_out


def test_faded_counter_matches_never_distilled():
    trained = build_backbone(SPEC, 0)
    fresh = build_backbone(SPEC, 5)
    X = Tensor(np.ones((1, SPEC.N, SPEC.input_dim)))
    with ad.flop_counter() as a:
        backbone_forward(trained, X)
    with ad.flop_counter() as b:
        backbone_forward(fresh, X)
    assert a.total == b.total == count_flops(SPEC, side=False).faded_total


def test_flops_respect_config():
    full = count_flops(SPEC, cfg=DistillConfig())
    none = count_flops(SPEC, cfg=DistillConfig(layers="none", w_log=0))
    no_gen = count_flops(SPEC, cfg=DistillConfig(generation=False))
    assert none.projectors == full.fusion
    assert none.projectors < no_gen.projectors < full.projectors


def test_eval_faded_cheaper_than_assisted():
    bb, sd = build_backbone(SPEC, 0), build_side(SPEC, 1)
    models = Models(bb, sd)
    rng = np.random.default_rng(0)
    data = (rng.standard_normal((10, SPEC.N, SPEC.input_dim)), rng.integers(0, 4, 10))
    assert evaluate(models, data, "faded")["flops"] < evaluate(models, data, "assisted")["flops"]
