from typing import Tuple

import pytest
import torch

from purifycert.tensor_table import TensorTable


class WeightedPoints(TensorTable):
    """Small table with two tensor columns and metadata."""

    positions: torch.Tensor  # (K, d)
    weights: torch.Tensor  # (K,)
    name: str = "points"
    tags: Tuple[str, ...] = ()


@pytest.fixture
def weighted_points():
    return WeightedPoints(
        positions=torch.arange(8, dtype=torch.float64).reshape(4, 2),
        weights=torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64),
        name="demo",
        tags=("a", "b"),
    )
