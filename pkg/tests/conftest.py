import numpy as np
import pytest

from drowzee.data import synth_generate

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    line = f"criterion {number:2d} {status}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth():
    return synth_generate(200, seed=7, snr=5)


@pytest.fixture(scope="session")
def small_synth_file(tmp_path_factory, small_synth):
    from drowzee.data import save_dataset
    path = tmp_path_factory.mktemp("data") / "synth200.bin"
    save_dataset(small_synth, path)
    return path
