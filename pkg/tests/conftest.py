import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from difflab import diffusion as dif  # noqa: E402
from difflab import nn  # noqa: E402
from difflab.harness.datasets import DatasetSpec, make_dataset  # noqa: E402
from difflab.numerics import RngStream  # noqa: E402


class Toy:
    """2-D four-class mixture with a trained denoiser and classifier."""

    def __init__(self):
        self.data = make_dataset(DatasetSpec(kind="gaussian_mixture", dim=2, classes=4, spread=0.1,
                                             radius=1.0, train_size=2000, test_size=500, seed=0))
        self.centers = self.data.spec.class_centers()
        r = RngStream(0)
        self.model = dif.train_denoiser(
            dif.DiffusionModel.create(2, r.derive("dm"), hidden=(64, 64)), self.data.x_train, 150, r.derive("dt"),
            lr=3e-3)
        self.classifier = nn.train_classifier(nn.Mlp.init([2, 32, 4], r.derive("clf")), self.data.x_train,
                                              self.data.y_train, epochs=20, rng=r.derive("ct"), lr=1e-2)


@pytest.fixture(scope="session")
def toy():
    return Toy()


def oracle_model(sched, eps_table):
    """Diffusion model whose denoiser returns the noise actually used."""
    return dif.DiffusionModel(sched, lambda x, t: eps_table, data_dim=eps_table.shape[-1])


@pytest.fixture
def small_schedule():
    return dif.build_schedule(20, 1e-3, 0.2)


@pytest.fixture
def rng():
    return RngStream(1234)


def nearest_center_distance(x, centers):
    return np.min(np.linalg.norm(x[:, None, :] - centers[None], axis=-1), axis=1)



def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
