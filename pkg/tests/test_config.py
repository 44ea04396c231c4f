import pytest
from hypothesis import given, strategies as st

from mdpd.config import ConfigError, TrainConfig, flatten, parse_config, parse_text


def test_empty_file_gives_defaults(tmp_path):
    f = tmp_path / "empty.cfg"
    f.write_text("")
    cfg = parse_config(f)
    assert cfg == TrainConfig()
    d = cfg.distill
    assert (d.lam, d.w_log, d.w_deep, d.w_sha, d.w_sft) == (0.5, 1e-4, 6e-5, 4e-5, 1.0)
    assert cfg.arch.r == 2
    o = cfg.optim
    assert (o.beta1, o.beta2, o.weight_decay) == (0.9, 0.999, 1e-2)
    assert cfg.schedule.warmup == "linear"


def test_lambda_out_of_range_names_key_and_line():
    with pytest.raises(ConfigError) as exc:
        parse_text("seed=1\ndistill.lambda=1.5\n")
    msg = str(exc.value)
    assert "distill.lambda" in msg and "line 2" in msg


def test_flag_overrides_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("seed=3\n")
    assert parse_config(f).seed == 3
    assert parse_config(f, {"seed": "7"}).seed == 7


def test_unknown_key_rejected_with_line():
    with pytest.raises(ConfigError, match=r"'distill\.lamda' \(line 3\)"):
        parse_text("# comment\n\ndistill.lamda=0.5\n")


def test_type_mismatch_rejected():
    with pytest.raises(ConfigError, match=r"arch\.L.*line 1"):
        parse_text("arch.L=four\n")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="line 1"):
        parse_text("just words\n")


def test_invalid_mode_rejected():
    with pytest.raises(ConfigError):
        parse_text("mode=lora\n")


def test_indivisible_width_rejected():
    with pytest.raises(ConfigError, match="arch"):
        parse_text("arch.D_B=63\n")


def test_aliases_and_sections():
    cfg = parse_text("train.steps=50\ntrain.batch_size=8\nschedule.warmup=cosine\n"
                     "distill.generation=false\noptim.grad_clip=1.0\n")
    assert (cfg.steps, cfg.batch_size, cfg.schedule.warmup) == (50, 8, "cosine")
    assert cfg.distill.generation is False and cfg.optim.grad_clip == 1.0


def test_dump_round_trip():
    cfg = parse_text("seed=5\ndistill.lambda=0.25\narch.r=4\noptim.lr=0.001\n")
    assert parse_text(cfg.dump()) == cfg
    assert parse_text(cfg.dump()).hash() == cfg.hash()


def test_dump_lists_every_default():
    text = TrainConfig().dump()
    for line in ("distill.lambda=0.5", "arch.r=2", "distill.w_log=0.0001", "distill.w_deep=6e-05",
                 "distill.w_sha=4e-05", "distill.w_sft=1.0", "optim.beta1=0.9", "optim.beta2=0.999",
                 "optim.weight_decay=0.01", "schedule.warmup=linear"):
        assert line in text.splitlines()


@given(st.floats(0, 1), st.integers(0, 10**6), st.sampled_from(["mdpd", "full_ft", "partial", "side_only"]))
def test_round_trip_property(lam, seed, mode):
    cfg = parse_text(f"distill.lambda={lam!r}\nseed={seed}\nmode={mode}\n")
    assert cfg.distill.lam == lam and cfg.seed == seed and cfg.mode == mode
    assert parse_text(cfg.dump()) == cfg


def test_hash_changes_with_values():
    assert TrainConfig().hash() != parse_text("seed=1\n").hash()
    assert set(flatten(TrainConfig())) == {line.split("=")[0] for line in TrainConfig().dump().splitlines()}
