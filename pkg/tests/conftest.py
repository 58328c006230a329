"""Shared test fixtures: deterministic torch setup and small data helpers."""

from __future__ import annotations

import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _single_thread():
    # Bit-identical float reductions need a fixed thread count.
    torch.set_num_threads(1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_logits(rng: np.random.Generator, shape: tuple[int, ...],
                  scale: float = 3.0) -> torch.Tensor:
    return torch.from_numpy(
        rng.normal(0.0, scale, size=shape).astype(np.float32))


def random_labels(rng: np.random.Generator, shape: tuple[int, ...],
                  n_classes: int) -> torch.Tensor:
    return torch.from_numpy(
        rng.integers(0, n_classes, size=shape).astype(np.int64))
