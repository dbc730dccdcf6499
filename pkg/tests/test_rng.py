"""Tests for counter-based seed streams and work chunking."""

import pytest
import torch

from purifycert.rng import SeedStream, chunks, derive_seed


class TestSeedStream:
    """
    Tests seed derivation.

    This suite verifies that:
    - Seeds are a pure function of (master seed, path)
    - Different paths and master seeds give different streams
    - child() extends the path
    """

    def test_deterministic(self):
        """Equal inputs give equal seeds and equal draws."""
        assert derive_seed(5, "certify", 3) == derive_seed(5, "certify", 3)
        a = torch.randn(4, generator=SeedStream(5, ("x",)).generator())
        b = torch.randn(4, generator=SeedStream(5, ("x",)).generator())
        assert torch.equal(a, b)

    @pytest.mark.parametrize(
        "left, right",
        [((1, "a"), (1, "b")), ((1, "a"), (2, "a")), ((1, 0, 1), (1, 1, 0)), ((1, "0"), (1, 0))],
    )
    def test_distinct(self, left, right):
        """Changing any path element changes the seed."""
        assert derive_seed(*left) != derive_seed(*right)

    def test_child_path(self):
        """child() appends keys to the path."""
        stream = SeedStream(9).child("certify", 2).child("noise")
        assert stream.path == ("certify", 2, "noise")
        assert stream == SeedStream(9, ("certify", 2, "noise"))

    def test_seed_range(self):
        """Derived seeds fit torch's 64-bit seed range."""
        seed = derive_seed(2**64 - 1, "a")
        assert 0 <= seed < 2**63


class TestChunks:
    """
    Tests fixed-size chunking.

    This suite verifies that:
    - Chunks cover the range exactly once, in order
    - The last chunk may be short
    """

    @pytest.mark.parametrize("total, size", [(10, 3), (9, 3), (1, 5), (0, 4)])
    def test_cover(self, total, size):
        """Concatenated chunks are range(total)."""
        pieces = list(chunks(total, size))
        covered = [i for _, start, stop in pieces for i in range(start, stop)]
        assert covered == list(range(total))
        assert [index for index, _, _ in pieces] == list(range(len(pieces)))

    def test_default_size(self):
        """Without a size the configured chunk size is used."""
        pieces = list(chunks(2500))
        assert [(start, stop) for _, start, stop in pieces] == [(0, 1024), (1024, 2048), (2048, 2500)]
