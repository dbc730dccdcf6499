"""Tests for TensorTable construction, validation and unsafe construction."""

import dataclasses

import pytest
import torch

from purifycert.tensor_table import TensorTable
from tests.tensor_table.conftest import WeightedPoints


class TestConstruction:
    """
    Tests TensorTable subclass construction.

    This suite verifies that:
    - Subclasses become keyword-only dataclasses
    - The leading shape is inferred from the first tensor field
    - Mismatched leading dimensions are rejected
    - The reserved `shape` field cannot be redeclared
    """

    def test_shape_is_inferred(self, weighted_points):
        """The table shape is the first tensor's leading dimension."""
        assert weighted_points.shape == torch.Size([4])
        assert len(weighted_points) == 4

    def test_keyword_only(self):
        """Positional construction is rejected."""
        with pytest.raises(TypeError):
            WeightedPoints(torch.zeros(2, 2), torch.zeros(2))

    def test_is_dataclass(self, weighted_points):
        """Subclasses are dataclasses carrying the implicit shape field."""
        names = [f.name for f in dataclasses.fields(weighted_points)]
        assert {"positions", "weights", "name", "tags", "shape"} == set(names)

    def test_mismatched_rows_raise(self):
        """Columns with different component counts fail validation."""
        with pytest.raises(RuntimeError, match="weights"):
            WeightedPoints(positions=torch.zeros(3, 2), weights=torch.zeros(4))

    def test_reserved_shape_field(self):
        """Declaring `shape` in a subclass is a TypeError."""
        with pytest.raises(TypeError, match="shape"):

            class Broken(TensorTable):
                shape: torch.Size

    def test_eq_true_rejected(self):
        """Tables compare by identity; eq=True is refused."""
        with pytest.raises(TypeError, match="eq=False"):

            class Broken(TensorTable, eq=True):
                values: torch.Tensor


class TestUnsafeConstruction:
    """
    Tests the unsafe_construction context manager.

    This suite verifies that:
    - Validation is skipped inside the block
    - Validation is restored after the block, also after an exception
    - Nested blocks restore the outer state
    """

    def test_skips_validation(self):
        """Mismatched tables can be built inside the block."""
        with TensorTable.unsafe_construction():
            table = WeightedPoints(positions=torch.zeros(3, 2), weights=torch.zeros(5))
        assert table.shape == torch.Size([3])

    def test_restored_after_block(self):
        """Validation is active again once the block exits."""
        with TensorTable.unsafe_construction():
            pass
        with pytest.raises(RuntimeError):
            WeightedPoints(positions=torch.zeros(3, 2), weights=torch.zeros(5))

    def test_restored_after_exception(self):
        """An exception inside the block does not leave validation disabled."""
        with pytest.raises(ValueError):
            with TensorTable.unsafe_construction():
                raise ValueError("boom")
        with pytest.raises(RuntimeError):
            WeightedPoints(positions=torch.zeros(3, 2), weights=torch.zeros(5))

    def test_nested_blocks(self):
        """Leaving an inner block keeps the outer block's state."""
        with TensorTable.unsafe_construction():
            with TensorTable.unsafe_construction():
                pass
            table = WeightedPoints(positions=torch.zeros(3, 2), weights=torch.zeros(5))
        assert len(table) == 3
