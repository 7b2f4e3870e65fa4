import numpy as np
import pytest

from daspl.config import ModelConfig, RunConfig, TrainConfig, DataConfig, DecodeConfig
from daspl.dataset import generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_model_cfg():
    return ModelConfig(
        image_size=16, patch_size=8, d_model=8, heads=2, gpsa_blocks=1,
        feature_dim=8, hidden_size=8, embed_dim=6, label_hidden=5,
    )


@pytest.fixture
def toy_run_cfg(toy_model_cfg):
    return RunConfig(
        model=toy_model_cfg,
        decode=DecodeConfig(beam_width=2, max_len=8),
        data=DataConfig(folds=2, eval_folds=1, seed=0),
        train=TrainConfig(epochs=1, batch_size=2, progress=False, output_dir=""),
    )


@pytest.fixture
def samples():
    return generate_dataset(6, seed=3)
