import numpy as np
import pytest

from hollowconv.experiment import load_config
from hollowconv.synth import gen_dataset
from hollowconv.tensor import precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


# small enough for seconds-long training runs, large enough for three poolings
SMALL = ["size=32", "seq_len=4", "n_train=2", "n_test=1", "width=0.125", "batch=2", "eval_every=2"]


@pytest.fixture(scope="session")
def small_data():
    return gen_dataset(2, 1, T=4, size=32, preset="easy", seed=1000)


@pytest.fixture
def small_cfg(tmp_path):
    def make(*overrides):
        return load_config(None, SMALL + [f"out={tmp_path / 'run'}"] + list(overrides))

    return make


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    def report(number: str, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append((number, bool(ok), detail))
        assert ok, f"criterion {number}: {detail}"

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_LINES, key=lambda r: (len(r[0].rstrip("abcdefgh")), r[0])):
        terminalreporter.write_line(f"criterion {number:<4} {'PASS' if ok else 'FAIL'}  {detail}")
