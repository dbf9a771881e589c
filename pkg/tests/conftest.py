import numpy as np
import pytest

from elmpc import elm, plant, sysid

LENGTHS = {"train": 16000, "test": 7000, "msap": 2400}


@pytest.fixture(scope="session")
def synthetic():
    return plant.SyntheticPlant()


@pytest.fixture(scope="session")
def splits(synthetic):
    """Default noise-free identification data, seeded as the CLI does with seed 0."""
    return {name: plant.identification_data(synthetic, n, seed)
            for seed, (name, n) in enumerate(LENGTHS.items())}


@pytest.fixture(scope="session")
def hcci_model(splits):
    u, y = splits["train"]
    data = sysid.build_narx(u, y, sysid.NarxConfig(1, 1, 3, 6))
    return elm.fit(data.X, data.Y, 20, 1e-3, 0)


@pytest.fixture(scope="session")
def hcci_plant(hcci_model):
    return plant.ElmPlant(hcci_model)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_model(rng, d_in=4, d_out=3, n_h=12, n=200):
    X = rng.uniform(-2, 3, (n, d_in))
    Y = np.column_stack([np.sin(X @ rng.normal(size=d_in)) for _ in range(d_out)])
    return elm.fit(X, Y, n_h, 1e-3, int(rng.integers(1 << 30)))
