import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pgscam import recipe  # noqa: E402

ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE.append((number, bool(passed), detail))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """The reference model trained once per session, with its runtime."""
    import time

    start = time.perf_counter()
    ckpt, losses = recipe.train_reference()
    return ckpt, losses, time.perf_counter() - start


@pytest.fixture(scope="session")
def heldout_scenes():
    return recipe.scenes(recipe.HELDOUT_SEED, 20)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}")
