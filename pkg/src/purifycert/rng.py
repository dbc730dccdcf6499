"""Counter-based random streams.

Every draw in purifycert comes from a `torch.Generator` whose seed is a
hash of (master seed, stream path). A path names the consumer, e.g.
("certify", point_index, "noise", chunk_index), so no result depends on
the order in which independent pieces of work are executed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterator, Tuple, Union

import torch

from purifycert import config

Key = Union[str, int]

_SEED_MASK = (1 << 63) - 1


def derive_seed(seed: int, *path: Key) -> int:
    """63-bit seed for the stream `path` under `seed`."""
    payload = json.dumps([int(seed), *path], separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big") & _SEED_MASK


@dataclass(frozen=True)
class SeedStream:
    seed: int
    path: Tuple[Key, ...] = ()

    def child(self, *keys: Key) -> SeedStream:
        return SeedStream(self.seed, self.path + tuple(keys))

    def generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(derive_seed(self.seed, *self.path))
        return g


def chunks(total: int, size: int = 0) -> Iterator[Tuple[int, int, int]]:
    """Yields (chunk_index, start, stop) covering range(total) in fixed-size pieces."""
    size = size or config.chunk_size
    for index, start in enumerate(range(0, total, size)):
        yield index, start, min(start + size, total)
