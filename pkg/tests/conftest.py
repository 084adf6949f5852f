import time

import numpy as np
import pytest

from embshard import harness, tables
from embshard.tables import TableConfig


def make_table(id="t", dim=64, hash_size=100_000, pooling_factor=10.0, skew=0.5, **kw):
    return TableConfig(id, dim, hash_size, pooling_factor, skew, **kw)


def random_tables(rng, n, dims=(4, 8, 16, 32, 64, 128), prefix="r"):
    return [
        TableConfig(f"{prefix}{i}", int(rng.choice(dims)), int(10 ** rng.uniform(4, 7)),
                    float(10 ** rng.uniform(0, 2)), float(rng.uniform(0, 2)))
        for i in range(n)
    ]


@pytest.fixture(scope="session")
def pool():
    return tables.gen_pool(856, seed=0)


@pytest.fixture(scope="session")
def small_pool():
    return tables.gen_pool(120, seed=11)


@pytest.fixture(scope="session")
def quick_models_d4(small_pool, tmp_path_factory):
    """Lightly trained 4-device models for structural search tests."""
    models, _ = harness.build_models(small_pool, tmp_path_factory.mktemp("quick4"), count=1500,
                                     epochs=25, seed=5, num_devices=4)
    return models


@pytest.fixture(scope="session")
def quick_models_d2(small_pool, tmp_path_factory):
    models, _ = harness.build_models(small_pool, tmp_path_factory.mktemp("quick2"), count=1500,
                                     epochs=25, seed=6, num_devices=2)
    return models


@pytest.fixture(scope="session")
def trained(pool, tmp_path_factory):
    """Full-recipe models: 10k noiseless samples per kind, 200 epochs, 4 devices.

    Returns ``(models, metrics, directory, build_seconds)``.
    """
    out = tmp_path_factory.mktemp("trained")
    t0 = time.perf_counter()
    models, metrics = harness.build_models(pool, out, count=10_000, epochs=200, seed=0,
                                           num_devices=4)
    return models, metrics, out, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
