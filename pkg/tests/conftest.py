import contextlib
import time

import numpy as np
import pytest
import torch

from dsva.core import Config, load_config

torch.set_num_threads(1)

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny() -> Config:
    return load_config(preset="tiny")


@pytest.fixture
def criterion():
    """Record one acceptance line: ``with criterion(3, "name", seconds): ...``."""

    @contextlib.contextmanager
    def run(number: int, name: str, limit: float | None = None):
        start = time.perf_counter()
        try:
            yield
        except BaseException as exc:
            _ACCEPTANCE[number] = f"FAIL  {number}. {name}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            raise
        elapsed = time.perf_counter() - start
        if limit is not None and elapsed > limit:
            _ACCEPTANCE[number] = f"FAIL  {number}. {name}: took {elapsed:.1f}s, limit {limit:.0f}s"
            raise AssertionError(f"criterion {number} took {elapsed:.1f}s (limit {limit}s)")
        if not _ACCEPTANCE.get(number, "").startswith("FAIL"):
            _ACCEPTANCE[number] = f"PASS  {number}. {name} ({elapsed:.2f}s)"

    return run


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
