import pytest
import torch

from deeppwml.phantom import PhantomConfig, generate_subject

SMALL_SHAPE = (64, 64, 64)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_config():
    return PhantomConfig(volume_shape=SMALL_SHAPE, lesion_count_range=(2, 5))


@pytest.fixture(scope="session")
def pwml_subject(small_config):
    return generate_subject(small_config, "pwml", 3)


@pytest.fixture(scope="session")
def control_subject(small_config):
    return generate_subject(small_config, "control", 7)


# ---- acceptance bookkeeping: one pass/fail line per criterion in the terminal summary

_CRITERIA = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = ""):
    _CRITERIA[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, passed, detail = _CRITERIA[n]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}" + (f"  ({detail})" if detail else ""))
