import numpy as np
import pytest
import torch

from radssl.encoder import EncoderConfig
from radssl.features import from_array


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_config():
    return EncoderConfig(n_blocks=1, n_heads=2, d_model=10, d_embed=3, d_recon_hidden=6)


@pytest.fixture
def small_dataset(rng):
    x = rng.normal(size=(6, 5, 4))
    return from_array(x, labels=[0, 1, 0, 1, 0, 1])


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance_line(request):
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
