import numpy as np
import pytest
import torch

from lipdiff.condnet import UNetConfig
from lipdiff.dataset import TrainingPairs, load_split
from lipdiff.schedule import make_linear_schedule
from lipdiff.synthgen import make_dataset


def tiny_unet(size=32, **kw):
    base = dict(image_size=size, inner_channels=16, channel_multiples=(1, 2), res_blocks_per_stage=1,
                attention_resolutions=(), dropout=0.0)
    base.update(kw)
    return UNetConfig(**base)


@pytest.fixture
def unet_cfg():
    return tiny_unet()


@pytest.fixture
def short_schedule():
    return make_linear_schedule(20, 1e-3, 0.3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    make_dataset(2, 1, 0.4, 32, root, seed=3, n_holdout=1)
    return root


@pytest.fixture(scope="session")
def tiny_pairs(tiny_dataset):
    clips, stats = load_split(tiny_dataset, "train")
    return TrainingPairs(clips), stats


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
