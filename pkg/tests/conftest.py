import numpy as np
import pytest
import torch

from isoem.synth import generate_phantom_volume

from acceptance_log import RESULTS

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def phantom64():
    return generate_phantom_volume(64, seed=7)


@pytest.fixture(scope="session")
def phantom32():
    return generate_phantom_volume(32, seed=11)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
