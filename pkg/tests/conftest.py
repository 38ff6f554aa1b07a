import numpy as np
import pytest

from delaypipe.config import DatasetConfig, ExperimentConfig, SgdSection
from delaypipe.datasets import save_idx
from delaypipe.retimer import StagePartition


@pytest.fixture
def per_layer8():
    return StagePartition.per_layer(8)


@pytest.fixture
def tiny_config(tmp_path):
    """A config small enough to train every strategy in well under a second."""
    return ExperimentConfig(
        dataset=DatasetConfig("spiral", classes=3, samples=300, noise=0.1),
        layers=[2, 16, 16, 3],
        partition="per-layer",
        strategy="ema-pipeline",
        strategies=["sequential", "stash", "ema-pipeline"],
        sgd=SgdSection(lr=0.05),
        epochs=2,
        batch_size=16,
        seed=0,
        out=str(tmp_path / "runs"),
    )


@pytest.fixture
def idx_dir(tmp_path):
    """Directory with a tiny IDX train/test split (4x4 images, 3 classes)."""
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 30), ("t10k", 12)):
        save_idx(tmp_path / f"{prefix}-images-idx3-ubyte", rng.integers(0, 256, size=(n, 4, 4)))
        save_idx(tmp_path / f"{prefix}-labels-idx1-ubyte", np.arange(n) % 3)
    return tmp_path
