"""Deterministic data streams and layout sources.

Every stream is addressed by ``(seed, tag, index)`` so any batch can be
regenerated without replaying earlier ones, which is what makes resumed runs
bit-identical to uninterrupted ones.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np
import torch

from .world import Box, Expression, Layout, LayoutItem, WorldConfig, render, sample_layout

TRAIN, HELDOUT, STAGE2, STAGE3, POOL, SCRIPTED = 1, 2, 3, 4, 5, 6
LAYOUT_SOURCES = ("heldout_real_like", "random", "scripted")


def rng_for(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, tag, index])


def torch_gen(rng: np.random.Generator) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(rng.integers(0, 2**62)))
    return g


def train_pairs(world: WorldConfig, seed: int, step: int, n: int,
                tag: int = TRAIN) -> tuple[list[Layout], np.ndarray]:
    rng = rng_for(seed, tag, step)
    layouts = [sample_layout(rng, world) for _ in range(n)]
    return layouts, np.stack([render(l, world) for l in layouts])


def heldout_layouts(world: WorldConfig, seed: int, n: int) -> list[Layout]:
    rng = rng_for(seed, HELDOUT)
    return [sample_layout(rng, world) for _ in range(n)]


def scripted_layout(world: WorldConfig, index: int) -> Layout:
    """Regular arrangements: boxes on a lattice, colours and qualifiers cycled.

    Every colour appears once, so any qualifier resolves; qualifiers cycle
    through the closed vocabulary.
    """
    from .world import QUALIFIERS, check_layout

    rng = rng_for(world.seed, SCRIPTED, index)
    side = world.min_box_side
    k = 2 + index % (world.K_max - 1)
    cols = max(1, world.W // (side + 1))
    rows = max(1, world.H // (side + 1))
    slots = rng.permutation(rows * cols)[:k]
    colors = rng.permutation(world.C)[:k] if world.C >= k else None
    items = []
    for j, s in enumerate(slots):
        r, c = divmod(int(s), cols)
        box = Box(c * (side + 1), r * (side + 1), c * (side + 1) + side, r * (side + 1) + side)
        color = int(colors[j]) if colors is not None else j % world.C
        items.append(LayoutItem(Expression(color, QUALIFIERS[(index + j) % len(QUALIFIERS)]), box))
    lay = Layout(tuple(items))
    try:
        check_layout(lay, world)
    except ValueError:
        return sample_layout(rng, world)
    return lay


class LayoutSource:
    """Layouts only: the stage-3 loop never sees a ground-truth image."""

    def __init__(self, kind: str, world: WorldConfig, seed: int, pool_size: int = 2048):
        if kind not in LAYOUT_SOURCES:
            raise ValueError(f"unknown layout source {kind!r}")
        self.kind = kind
        self.world = world
        self.seed = seed
        self._pool: list[Layout] | None = None
        self.pool_size = pool_size

    def _pool_layouts(self) -> list[Layout]:
        # a fixed finite corpus drawn from the pre-training distribution
        if self._pool is None:
            rng = rng_for(self.seed, POOL)
            self._pool = [sample_layout(rng, self.world) for _ in range(self.pool_size)]
        return self._pool

    def batch(self, step: int, n: int) -> list[Layout]:
        if self.kind == "random":
            rng = rng_for(self.seed, STAGE3, step)
            return [sample_layout(rng, self.world) for _ in range(n)]
        if self.kind == "scripted":
            return [scripted_layout(self.world, step * n + i) for i in range(n)]
        pool = self._pool_layouts()
        idx = rng_for(self.seed, POOL, step + 1).integers(0, len(pool), size=n)
        return [pool[int(i)] for i in idx]

    def __iter__(self) -> Iterator[Layout]:
        step = 0
        while True:
            yield from self.batch(step, 1)
            step += 1
