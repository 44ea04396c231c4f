import dataclasses
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mdpd.config import TrainConfig
from mdpd.harness import finetune, pretrain, reinit_head_baseline, target_task

settings.register_profile("mdpd", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mdpd")

TRANSFER_SEEDS = list(range(20))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pretrained_seed0():
    state, rec = pretrain(TrainConfig(seed=0))
    return state, rec


@pytest.fixture(scope="session")
def transfer_runs(pretrained_seed0):
    """Default synthetic transfer, 200 steps, 20 seeds, the three adaptation modes per seed.

    One pretrain per seed is shared by all modes.  Shared between the trainer
    tests and the acceptance suite so the sweep runs once per session.
    """
    out = []
    for seed in TRANSFER_SEEDS:
        start = time.perf_counter()
        cfg = TrainConfig(seed=seed)
        if seed == 0:
            state, pre = pretrained_seed0
        else:
            state, pre = pretrain(cfg)
        task = target_task(cfg)
        row = {"seed": seed, "source_accuracy": pre.final["source_accuracy"]}
        for mode in ("mdpd", "partial", "side_only"):
            rec, _ = finetune(dataclasses.replace(cfg, mode=mode), state, task)
            row[mode] = rec
        row["reinit_baseline"] = reinit_head_baseline(cfg, state, task)
        row["seconds"] = time.perf_counter() - start
        out.append(row)
    return out


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(num: int, name: str, ok: bool, detail: str = ""):
        line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE[num] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
