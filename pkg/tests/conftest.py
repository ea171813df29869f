import numpy as np
import pytest
import torch

from mvcaug.shapes import generate_shapes

torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def shapes_manifest(tmp_path_factory):
    """Small 16x16 shapes dataset, 6 images per class."""
    return generate_shapes(tmp_path_factory.mktemp("shapes"), count=6, size=16, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
