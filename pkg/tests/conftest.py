import pytest
import torch

from gridscreen.case_model import load_case

torch.set_num_threads(1)

CASES = ("case6ww", "case14", "case30")


@pytest.fixture(scope="session")
def case6():
    return load_case("case6ww")


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case30():
    return load_case("case30")


@pytest.fixture(scope="session", params=CASES)
def any_case(request):
    return load_case(request.param)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
