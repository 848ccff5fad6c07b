"""Partition of chunk indices into autoregressive blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BlockPlan:
    """Block sizes along the chunk axis (default: first 6, then 8s)."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.sizes) == 0:
            raise ValueError("block plan must contain at least one block")
        if any(s < 1 for s in self.sizes):
            raise ValueError(f"all blocks must be non-empty, got {self.sizes}")

    @classmethod
    def default(cls, n_blocks: int, first_block: int = 6, subsequent_block: int = 8) -> "BlockPlan":
        if n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        return cls((first_block,) + (subsequent_block,) * (n_blocks - 1))

    @classmethod
    def uniform(cls, n_blocks: int, block_size: int) -> "BlockPlan":
        return cls((block_size,) * n_blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.sizes)

    @property
    def total_chunks(self) -> int:
        return sum(self.sizes)

    @property
    def starts(self) -> tuple[int, ...]:
        out, acc = [], 0
        for s in self.sizes:
            out.append(acc)
            acc += s
        return tuple(out)

    def block_of(self) -> np.ndarray:
        """Block index of every chunk, shape (total_chunks,)."""
        return np.repeat(np.arange(self.n_blocks), self.sizes)

    def chunk_range(self, block: int) -> tuple[int, int]:
        start = self.starts[block]
        return start, start + self.sizes[block]
