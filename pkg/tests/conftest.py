import numpy as np
import pytest


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    from lrs.data import mnist_subset_to_idx

    out = tmp_path_factory.mktemp("mnist")
    mnist_subset_to_idx(out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = __import__("sys").modules.get("test_acceptance")
    lines = getattr(module, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
