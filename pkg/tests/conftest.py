import json
import os
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pytest

from app.schemas.config import AlgorithmConfig, NetworkArch, PartitionSpec
from app.services.data import make_blobs, partition_dataset, train_test_split

SNAPSHOT_DIR = Path(__file__).parent / "snapshots"
FIXTURE_DIR = Path(__file__).parent / "fixtures"


def pytest_collection_modifyitems(config, items):
    """Skip slow trend checks unless FEDSIM_RUN_SLOW=1."""
    if os.environ.get("FEDSIM_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set FEDSIM_RUN_SLOW=1 to run slow trend checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Deterministic generator for building test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_arch():
    """A network small enough for finite-difference checks."""
    return NetworkArch(input_dim=3, encoder_widths=(4,), projection_dim=3, num_classes=3)


@pytest.fixture(scope="session")
def blobs_split():
    """Three well separated classes in 4-d, split 80/20."""
    full = make_blobs(num_classes=3, samples_per_class=40, dim=4, spread=1.0, seed=7)
    return train_test_split(full, 0.2, seed=7)


@pytest.fixture
def toy_arch(blobs_split):
    train, _ = blobs_split
    return NetworkArch(
        input_dim=train.dim, encoder_widths=(8,), projection_dim=4, num_classes=train.num_classes
    )


@pytest.fixture
def toy_partition(blobs_split):
    train, _ = blobs_split
    return partition_dataset(train, PartitionSpec(num_parties=5, beta=0.5, seed=3))


@pytest.fixture
def make_cfg():
    """Factory for small, fast algorithm configs."""

    def factory(**overrides) -> AlgorithmConfig:
        values = dict(local_epochs=1, rounds=3, batch_size=16, learning_rate=0.05, master_seed=11)
        values.update(overrides)
        return AlgorithmConfig(**values)

    return factory


@pytest.fixture
def snapshot():
    """Golden-value oracle stored as tests/snapshots/<name>.json.

    `build` produces the value. A stored snapshot must match it exactly. When
    none is stored yet, `build` runs a second time, both results must agree,
    and the value is recorded. FEDSIM_SNAPSHOT_STRICT=1 makes a missing
    snapshot a failure instead.
    """

    def check(name: str, build: Callable[[], Any]) -> None:
        value = json.loads(json.dumps(build()))
        path = SNAPSHOT_DIR / f"{name}.json"
        if path.exists():
            assert json.loads(path.read_text(encoding="utf-8")) == value
            return
        if os.environ.get("FEDSIM_SNAPSHOT_STRICT") == "1":
            pytest.fail(f"snapshot {path.name} is missing")
        assert json.loads(json.dumps(build())) == value
        SNAPSHOT_DIR.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(value, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    return check
