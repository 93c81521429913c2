import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from eqfusion import RunConfig, load_dataset, make_synthetic_dataset, synthetic_spec
from eqfusion.trainer import Trainer

TINY_PLAN = (4, 8, 8, 8, 8)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    make_synthetic_dataset(root, categories=10, images_per_category=20, image_size=32, seed=7)
    return root


@pytest.fixture(scope="session")
def synthetic_dataset(synthetic_root):
    spec = synthetic_spec(synthetic_root, categories=10, images_per_category=20, image_size=32)
    return load_dataset(spec, seed=0)


def tiny_run_config(root, **overrides):
    base = dict(
        iterations=4,
        batch_size=2,
        k=3,
        image_size=32,
        channel_plan=TINY_PLAN,
        seed=0,
        log_interval=1,
        checkpoint_interval=2,
        data_root=str(root),
        total_categories=10,
        seen_count=8,
        unseen_count=2,
        images_per_category=20,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, synthetic_root, synthetic_dataset):
    """A briefly trained checkpoint shared by evaluation and CLI tests."""
    out = tmp_path_factory.mktemp("tiny_ckpt")
    config = tiny_run_config(synthetic_root, iterations=6)
    trainer = Trainer(config, synthetic_dataset, out_dir=out)
    for _ in range(config.iterations):
        trainer.step()
    path = trainer.save_checkpoint(out / "tiny.pt")
    return path


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
