import numpy as np
import pytest
import torch

from cm3ae.config import toy_config
from cm3ae.data import collate, generate_dataset
from cm3ae.masking import sample_mask_plans
from cm3ae.training import build_model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_cfg():
    return toy_config()


@pytest.fixture
def toy_model(toy_cfg):
    return build_model(toy_cfg, seed=0)


@pytest.fixture(scope="session")
def toy_pairs():
    return generate_dataset(4, seed=7)


@pytest.fixture
def toy_batch(toy_pairs, toy_cfg):
    rgb, event, voxels, labels = collate(toy_pairs)
    plans = sample_mask_plans(len(toy_pairs), toy_cfg.num_patches, 0.75, np.random.default_rng(3))
    return rgb, event, voxels, plans


@pytest.fixture
def toy_batch64(toy_pairs, toy_cfg):
    rgb, event, voxels, labels = collate(toy_pairs, dtype=torch.float64)
    plans = sample_mask_plans(len(toy_pairs), toy_cfg.num_patches, 0.75, np.random.default_rng(3))
    return rgb, event, voxels, plans


@pytest.fixture(scope="session")
def paper_model():
    from cm3ae.config import paper_config

    return build_model(paper_config(), seed=0).eval()
