"""Shared fixtures: small phantom grids, tiny networks and throwaway cohorts."""

import numpy as np
import pytest

from ageatlas.agenet import AgeNet, NetConfig, TrainConfig
from ageatlas.phantom import PhantomParams, generate_cohort
from ageatlas.volume import Volume3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def ramp_volume():
    """4x4x4 volume with value x + 10y + 100z."""
    x, y, z = np.meshgrid(np.arange(4), np.arange(4), np.arange(4), indexing="ij")
    return Volume3((x + 10 * y + 100 * z).astype(np.float32))


@pytest.fixture
def small_params():
    return PhantomParams(dims=(16, 32, 12), seed=7)


@pytest.fixture
def tiny_net_config():
    return NetConfig(channels=(2, 3, 4), hidden=4, input_dims=(8, 8, 8), seed=3)


@pytest.fixture
def tiny_net(tiny_net_config):
    return AgeNet(tiny_net_config, mean_age=60.0)


@pytest.fixture
def quick_train():
    return TrainConfig(epochs=2, accumulation=4, seed=0)


@pytest.fixture
def small_cohort(tmp_path, small_params):
    """12/6/12 cohort on a 16x32x12 grid written to a temporary directory."""
    return generate_cohort(small_params, 12, 6, 12, tmp_path / "cohort")


SMALL_RUN = (
    "phantom.dims=[16,32,12]",
    "net.input_dims=[16,32,12]",
    "net.channels=[2,3,4]",
    "net.hidden=4",
    "cohort.n_train=12",
    "cohort.n_val=6",
    "cohort.n_test=12",
    "train.epochs=1",
    "train.accumulation=4",
    "registration.levels=[2,1]",
    "registration.affine_iterations=5",
    "registration.deformable_iterations=5",
    'atlas.slices={"axial": [8, 16], "coronal": [3, 6], "sagittal": [4, 8]}',
)


@pytest.fixture(scope="session")
def small_run():
    """Overrides for a pipeline run that finishes in seconds."""
    return SMALL_RUN
