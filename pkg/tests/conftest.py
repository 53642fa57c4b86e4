import numpy as np
import pytest

from basis_selection.checkpoint import save_checkpoint
from basis_selection.harness import HarnessConfig, pretrain_from_config

TINY = dict(width=8, hidden=32, depth=2, context=8, batch_size=64, pretrain_lines=3000,
            target_lines=600, pretrain_epochs=1.0, finetune_epochs=0.5,
            pretrain_loss_threshold=3.0, fisher_batches=4)


@pytest.fixture(scope="session")
def tiny_cfg():
    return HarnessConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_cfg):
    model, _ = pretrain_from_config(tiny_cfg, seed=0)
    return model


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_pretrained, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.bsck"
    save_checkpoint(path, tiny_pretrained)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
