import pytest
import torch

from sacdnet import synthetic
from sacdnet.config import Config
from sacdnet.encoder import load_backbone
from sacdnet.pseudochange import AugmentConfig


def small_config(**train) -> Config:
    cfg = Config()
    cfg.encoder.adapter_channels = 16
    cfg.decoder.base_channels = 16
    cfg.train.batch_size = 8
    cfg.train.crop_size = None
    cfg.train.val_fraction = 0.0
    cfg.augment = AugmentConfig.disabled()
    for k, v in train.items():
        setattr(cfg.train, k, v)
    return cfg


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture(scope="session")
def encoder():
    return load_backbone(None, "synthetic-test", seed=7)


@pytest.fixture
def seeded():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy_cd")
    synthetic.write_change_dataset(root, synthetic.change_pairs(4, 64, seed=3))
    return root


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
