import logging

import numpy as np
import pytest
import torch

from lipmotion.core_types import load_topology
from lipmotion.synth_data import load_dataset, make_dataset

logging.getLogger("lipmotion").setLevel(logging.WARNING)


@pytest.fixture(scope="session")
def topo():
    return load_topology("desk-48")


@pytest.fixture(scope="session")
def small_ds(tmp_path_factory):
    """4 identities x 2 clips x 12 frames; fast enough for unit tests."""
    root = tmp_path_factory.mktemp("small_ds")
    return load_dataset(make_dataset(root, n_ids=4, clips_per_id=2, frames_per_clip=12, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
