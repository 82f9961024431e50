"""Square-grid partition of a C×H×W latent into b equal blocks.

Block ``i`` sits at grid cell ``(i // g, i % g)``.  Every other module
(database shards, conditioning, sampling) relies on this ordering.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BlockLayout:
    b: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        g = math.isqrt(self.b) if self.b > 0 else 0
        if self.b < 1 or g * g != self.b:
            raise ValueError(f"block count b must be a perfect square, got {self.b}")
        if self.height % g or self.width % g:
            raise ValueError(
                f"latent {self.height}x{self.width} is not divisible by the {g}x{g} block grid"
            )
        if self.channels < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")

    @property
    def g(self) -> int:
        return math.isqrt(self.b)

    @property
    def block_h(self) -> int:
        return self.height // self.g

    @property
    def block_w(self) -> int:
        return self.width // self.g

    @property
    def block_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.block_h, self.block_w)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def block_dim(self) -> int:
        return self.channels * self.block_h * self.block_w

    def cell(self, i: int) -> tuple[int, int]:
        if not 0 <= i < self.b:
            raise IndexError(f"block index {i} outside 0..{self.b - 1}")
        return divmod(i, self.g)

    def to_manifest(self) -> dict:
        return {"b": self.b, "channels": self.channels, "height": self.height, "width": self.width}

    @classmethod
    def from_manifest(cls, d: dict) -> "BlockLayout":
        return cls(int(d["b"]), int(d["channels"]), int(d["height"]), int(d["width"]))


def partition_stack(layout: BlockLayout, z: np.ndarray) -> np.ndarray:
    """Blocks of ``z`` stacked as ``(b, C, H/g, W/g)``; a batch ``(N, C, H, W)`` gives ``(N, b, ...)``."""
    z = np.asarray(z)
    if z.shape[-3:] != layout.latent_shape or z.ndim not in (3, 4):
        raise ValueError(f"latent shape {z.shape} does not match layout {layout.latent_shape}")
    g, bh, bw = layout.g, layout.block_h, layout.block_w
    lead = z.shape[:-3]
    c = layout.channels
    v = z.reshape(lead + (c, g, bh, g, bw))
    # ... C, row, bh, col, bw -> ... row, col, C, bh, bw
    n = len(lead)
    order = tuple(range(n)) + (n + 1, n + 3, n, n + 2, n + 4)
    return np.ascontiguousarray(v.transpose(order)).reshape(lead + (layout.b, c, bh, bw))


def partition(layout: BlockLayout, z: np.ndarray) -> list[np.ndarray]:
    return list(partition_stack(layout, z))


def reassemble(layout: BlockLayout, blocks) -> np.ndarray:
    """Inverse of :func:`partition`; accepts a list or a stacked array of blocks."""
    if isinstance(blocks, np.ndarray):
        arr = blocks
    else:
        if len(blocks) != layout.b:
            raise ValueError(f"expected {layout.b} blocks, got {len(blocks)}")
        arr = np.stack([np.asarray(blk) for blk in blocks])
    if arr.shape[-4:] != (layout.b,) + layout.block_shape:
        raise ValueError(
            f"blocks have shape {arr.shape}, expected {layout.b} blocks of {layout.block_shape}"
        )
    g, bh, bw, c = layout.g, layout.block_h, layout.block_w, layout.channels
    lead = arr.shape[:-4]
    n = len(lead)
    v = arr.reshape(lead + (g, g, c, bh, bw))
    order = tuple(range(n)) + (n + 2, n, n + 3, n + 1, n + 4)
    return np.ascontiguousarray(v.transpose(order)).reshape(lead + layout.latent_shape)


def flatten_block(block: np.ndarray) -> np.ndarray:
    return np.asarray(block).reshape(-1).copy()


def unflatten_block(layout: BlockLayout, vec: np.ndarray) -> np.ndarray:
    return np.asarray(vec).reshape(layout.block_shape)
