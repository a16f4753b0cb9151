import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixture_root():
    from mres.synthetic import fixture_root

    return fixture_root()


@pytest.fixture(scope="session")
def fixture_split(fixture_root):
    from mres.dataset import load_benchmark

    return load_benchmark(fixture_root, "val")


ACCEPTANCE_LINES = []


@pytest.fixture()
def criterion(request, capsys):
    """Record one PASS/FAIL line for an acceptance criterion: ``criterion(n, text)`` used as a context."""
    import contextlib
    import time

    @contextlib.contextmanager
    def run(number, text):
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            line = f"{status} criterion {number:>2}: {text} ({time.perf_counter() - t0:.2f}s)"
            ACCEPTANCE_LINES.append(line)
            with capsys.disabled():
                print(f"\n{line}")

    return run


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
