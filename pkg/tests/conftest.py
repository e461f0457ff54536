import numpy as np
import pytest

from freshivf.core import IndexConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cfg():
    return IndexConfig()


def blobs(rng, n, dim=16, centers=8, spread=6.0, std=1.0):
    c = rng.normal(scale=spread, size=(centers, dim))
    which = rng.integers(centers, size=n)
    return (c[which] + rng.normal(scale=std, size=(n, dim))).astype(np.float32)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(n: int, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
