"""Shared fixtures: tiny tasks and configs sized for fast unit tests."""

from __future__ import annotations

import numpy as np
import pytest

from vbfl.datasets import make_blobs_task
from vbfl.learning import DataShard, TrainSpec
from vbfl.orchestrator import DatasetConfig, SimConfig


TINY_DATASET = DatasetConfig(
    dim=8,
    classes=4,
    train_per_class=60,
    test_per_class=30,
    spread=0.5,
    feature_scale=1.0,
)


@pytest.fixture
def tiny_dataset() -> DatasetConfig:
    return TINY_DATASET


@pytest.fixture
def tiny_config(tiny_dataset) -> SimConfig:
    """20 devices on an easy task; a full round runs in well under a second."""
    return SimConfig(
        rounds=3,
        master_seed=11,
        dataset=tiny_dataset,
        arch="softmax",
        train=TrainSpec(epochs=2, learning_rate=0.05, batch_size=10),
    )


@pytest.fixture
def two_class_task():
    return make_blobs_task(
        dim=4,
        classes=2,
        train_per_class=30,
        test_per_class=30,
        spread=0.5,
        feature_scale=1.0,
        seed=42,
    )


@pytest.fixture
def two_class_shards(two_class_task):
    t = two_class_task
    train = DataShard(t.train_x, t.train_y, shard_of=b"train")
    test = DataShard(t.test_x, t.test_y, shard_of=b"test")
    return train, test


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
