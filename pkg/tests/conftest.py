"""Shared pytest fixtures for batchmiss tests."""

import numpy as np
import pytest

from batchmiss.models import BatchDesign, FeatureBatchData, ModelParameters
from batchmiss.simulation import Scenario


def reference_design(p: int = 4, k: int = 1) -> BatchDesign:
    """Intercept-only (k=1) or intercept + reference (k=2) design, reference on row 0."""
    x = np.ones((p, k))
    if k > 1:
        x[:, 1] = 0.0
        x[0, 1] = 1.0
    return BatchDesign(x=x, z=np.ones((p, 1)), reference_channel=0)


@pytest.fixture
def paper_params() -> ModelParameters:
    """X α = 10·1, D = 3, σ₀² = 2, σ² = 4 on an intercept-only design."""
    return ModelParameters(alpha=[10.0], sigma0_sq=2.0, sigma_sq=4.0, d=[[3.0]])


@pytest.fixture
def small_scenario() -> Scenario:
    return Scenario(name="small", q=10, a=0.7, n_replicates=2, seed=7)


@pytest.fixture
def complete_feature() -> tuple[FeatureBatchData, tuple[BatchDesign, ...]]:
    """Fully observed random-intercept data on 12 batches of 4 samples."""
    rng = np.random.default_rng(11)
    designs = []
    batches = []
    for i in range(12):
        x = np.column_stack([np.ones(4), [1.0, 0.0, 0.0, 0.0], [0.0, i % 2, (i + 1) % 2, 1.0]])
        designs.append(BatchDesign(x=x, z=np.ones((4, 1)), reference_channel=0))
        batches.append(x @ [10.0, -0.5, 0.8] + rng.normal(0, 1.5) + rng.normal(0, 1.0, 4))
    return FeatureBatchData.from_values(batches, feature_id="complete"), tuple(designs)
