from fractions import Fraction

import numpy as np
import pytest
import torch

from acceptance_fixtures import RESULTS
from lungct_gan.config import DiscriminatorConfig, GeneratorConfig
from lungct_gan.discriminator import build_discriminator
from lungct_gan.generators import build_generator
from lungct_gan.patches import PatchDataset
from lungct_gan.phantoms import phantom_dataset

SMALL = Fraction(1, 8)


@pytest.fixture(scope="session")
def phantom_volumes():
    return phantom_dataset(8, seed=0)


@pytest.fixture(scope="session")
def phantom_data(phantom_volumes):
    return PatchDataset(phantom_volumes)


@pytest.fixture(scope="session")
def small_generators():
    return {f: build_generator(GeneratorConfig(f, SMALL, seed=3)) for f in ("dcgan3d", "stylegan3d", "biggan3d")}


@pytest.fixture
def small_disc():
    return build_discriminator(DiscriminatorConfig(True, SMALL, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for criterion, passed, detail in RESULTS:
            terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}")
