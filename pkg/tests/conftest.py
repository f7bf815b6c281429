import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sniper.models import build_mlp, make_task, TaskConfig  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_task():
    """A quick teacher-student problem: (train, val, student)."""
    cfg = TaskConfig(d_in=6, teacher_hidden=3, student_hidden=12, n=120, noise_std=0.05, batch_size=16)
    return make_task(cfg, seed=7)


@pytest.fixture
def tiny_model():
    return build_mlp([4, 8, 1], "tanh", seed=3)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance" not in rep.nodeid:
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], outcome.upper(), props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for crit, status, detail in sorted(lines, key=lambda l: int(l[0].split()[0])):
            terminalreporter.write_line(f"[{'PASS' if status == 'PASSED' else 'FAIL'}] criterion {crit} {detail}")
