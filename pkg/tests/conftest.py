import numpy as np
import pytest
import torch

from gaprppg.synth import DatasetSpec, generate_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 domains x 3 subjects x 2 clips of 12 s: enough for protocol plumbing tests."""
    root = tmp_path_factory.mktemp("small_ds")
    generate_dataset(DatasetSpec(n_subjects=3, n_clips=2, duration_s=12.0), root, seed=3)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


FAST = {"window": 256, "stride": 50, "rows": 32}


@pytest.fixture(scope="session")
def trained(small_dataset):
    """A few-step MSSDG run on the small dataset with dom3 held out."""
    from gaprppg.protocols import MssdgConfig, train_mssdg

    cfg = MssdgConfig(heldout_domain="dom3", iterations=6, batch_size=4, eval_every=3, seed=0, **FAST)
    return train_mssdg(small_dataset, cfg)
