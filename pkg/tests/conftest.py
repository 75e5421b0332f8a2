"""
Shared fixtures: small-dimension configs, seeded generators and a small cohort.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.config import Center, CohortConfig, RunConfig  # noqa: E402
from src.synth import generate_cohort, split_cohort  # noqa: E402

SMALL_COUNTS = {
    Center.TCGA: 60,
    Center.BRATS: 20,
    Center.RJ: 15,
    Center.XH: 10,
    Center.TH: 10,
    Center.HS: 60,
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_run_config():
    """D=16 split into 4 tokens of width 4, two heads of width 2."""
    return RunConfig(
        latent_dim=16, raw_dim=8, num_tokens=4, num_heads=2,
        batch_size=16, pretrain_steps=20, finetune_steps=20,
        learning_rate=1e-2, pretrain_learning_rate=1e-2, log_every=5,
    )


@pytest.fixture
def small_cohort_config():
    return CohortConfig(counts=dict(SMALL_COUNTS), raw_dim=8, latent_factors=6, seed=7)


@pytest.fixture
def small_cohort(small_cohort_config):
    return generate_cohort(small_cohort_config)


@pytest.fixture
def small_plan(small_cohort):
    return split_cohort(small_cohort, seed=0)
