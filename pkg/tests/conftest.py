from __future__ import annotations

import numpy as np
import pytest

from synernet.datagen import BenchmarkConfig, generate_benchmark, make_split
from synernet.training import Task, TrainConfig


@pytest.fixture(scope="session")
def bench():
    return generate_benchmark(BenchmarkConfig(), 0)


@pytest.fixture(scope="session")
def split16(bench):
    return make_split(bench, 16, 0)


@pytest.fixture(scope="session")
def task(bench):
    return Task.from_benchmark(bench)


@pytest.fixture
def params(task):
    return task.init_params(TrainConfig())


@pytest.fixture
def small_batch(task, split16):
    """One training shot of each OOD class (8 samples)."""
    first = {}
    for s, c in split16.train:
        first.setdefault(c, s)
    return task.batch(list(first.values()))


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + h
        fp = f()
        flat[i] = o - h
        fm = f()
        flat[i] = o
        gf[i] = (fp - fm) / (2 * h)
    return g


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one PASS/FAIL line for the summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
