"""Synthetic grid-world: layouts, rendered grid images and exact oracles.

A layout is an ordered list of (expression, box) items.  Rendering paints each
box with its colour token; the oracles invert that map exactly, which is what
makes every later stage checkable by brute force.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

QUALIFIERS = ("none", "leftmost", "rightmost", "topmost", "bottommost", "largest", "smallest")
BACKGROUND = 0


class WorldError(ValueError):
    pass


class OverlapError(WorldError):
    pass


class OutOfBounds(WorldError):
    pass


class NotFound(WorldError):
    pass


class Ambiguous(WorldError):
    pass


class SamplingExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    H: int = 16
    W: int = 16
    C: int = 6
    K_max: int = 5
    min_box_side: int = 2
    max_box_side: int | None = None
    seed: int = 0
    retry_budget: int = 1000

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError("grid dimensions must be positive")
        if self.C < 1:
            raise ValueError("need at least one colour")
        if self.K_max < 2:
            raise ValueError("K_max must be >= 2")
        if self.min_box_side < 1 or self.min_box_side > min(self.H, self.W):
            raise ValueError("min_box_side out of range")
        if self.max_box_side is not None and self.max_box_side < self.min_box_side:
            raise ValueError("max_box_side < min_box_side")

    @property
    def v_img(self) -> int:
        """Codebook size: background plus one id per colour."""
        return self.C + 1

    @property
    def n_cells(self) -> int:
        return self.H * self.W

    @property
    def box_side_cap(self) -> int:
        if self.max_box_side is not None:
            return min(self.max_box_side, self.H, self.W)
        return max(self.min_box_side, min(self.H, self.W) // 2)

    def to_dict(self) -> dict:
        return {
            "H": self.H, "W": self.W, "C": self.C, "K_max": self.K_max,
            "min_box_side": self.min_box_side, "max_box_side": self.max_box_side,
            "seed": self.seed, "retry_budget": self.retry_budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(**d)


@dataclass(frozen=True, order=True)
class Box:
    """Half-open cell rectangle [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return max(0, self.x1 - self.x0) * max(0, self.y1 - self.y0)

    def is_valid(self, H: int, W: int) -> bool:
        return 0 <= self.x0 < self.x1 <= W and 0 <= self.y0 < self.y1 <= H

    def check(self, H: int, W: int) -> None:
        if not self.is_valid(H, W):
            raise OutOfBounds(f"{self} does not fit a {H}x{W} grid")

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def touches(self, other: "Box") -> bool:
        """True if the boxes overlap or share an edge (4-neighbourhood)."""
        gap_x = max(self.x0, other.x0) - min(self.x1, other.x1)
        gap_y = max(self.y0, other.y0) - min(self.y1, other.y1)
        # corner contact (gap 0 on both axes) is not 4-connected
        return (gap_x < 0 and gap_y <= 0) or (gap_x <= 0 and gap_y < 0)

    def overlaps(self, other: "Box") -> bool:
        return (max(self.x0, other.x0) < min(self.x1, other.x1)
                and max(self.y0, other.y0) < min(self.y1, other.y1))


@dataclass(frozen=True)
class Expression:
    color: int
    qualifier: str = "none"

    def __post_init__(self):
        if self.qualifier not in QUALIFIERS:
            raise ValueError(f"unknown qualifier {self.qualifier!r}")
        if self.color < 0:
            raise ValueError("colour id must be non-negative")


@dataclass(frozen=True)
class LayoutItem:
    expr: Expression
    box: Box


@dataclass(frozen=True)
class Layout:
    items: tuple[LayoutItem, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    @property
    def boxes(self) -> list[Box]:
        return [it.box for it in self.items]

    @property
    def exprs(self) -> list[Expression]:
        return [it.expr for it in self.items]


def iou(a: Box, b: Box) -> float:
    ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def render(layout: Layout, cfg: WorldConfig) -> np.ndarray:
    """Paint every box with colour id ``color + 1`` on a zero background."""
    img = np.zeros((cfg.H, cfg.W), dtype=np.int64)
    boxes = layout.boxes
    for i, item in enumerate(layout.items):
        item.box.check(cfg.H, cfg.W)
        if not 0 <= item.expr.color < cfg.C:
            raise WorldError(f"colour {item.expr.color} outside palette of {cfg.C}")
        for other in boxes[:i]:
            if item.box.overlaps(other):
                raise OverlapError(f"{item.box} overlaps {other}")
        b = item.box
        img[b.y0:b.y1, b.x0:b.x1] = item.expr.color + 1
    return img


def components(image: np.ndarray, color: int) -> list[tuple[Box, int]]:
    """4-connected components of one colour as (bounding box, cell count)."""
    labels, n = ndimage.label(np.asarray(image) == color + 1)
    if n == 0:
        return []
    out = []
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = sl
        out.append((Box(xs.start, ys.start, xs.stop, ys.stop), int(counts[idx])))
    return out


def _qualifier_key(qualifier: str, box: Box) -> tuple:
    tie = (box.y0, box.x0)
    if qualifier == "leftmost":
        return (box.x0,) + tie
    if qualifier == "rightmost":
        return (-box.x1,) + tie
    if qualifier == "topmost":
        return (box.y0,) + tie
    if qualifier == "bottommost":
        return (-box.y1,) + tie
    if qualifier == "largest":
        return (-box.area,) + tie
    if qualifier == "smallest":
        return (box.area,) + tie
    raise ValueError(qualifier)


def select(boxes: Sequence[Box], qualifier: str) -> Box:
    """Pick the box a qualifier refers to among same-coloured candidates."""
    if not boxes:
        raise NotFound("no candidate")
    if qualifier == "none":
        if len(boxes) > 1:
            raise Ambiguous(f"{len(boxes)} candidates for an unqualified expression")
        return boxes[0]
    return min(boxes, key=lambda b: _qualifier_key(qualifier, b))


def ground_oracle(image: np.ndarray, expr: Expression) -> Box:
    comps = components(image, expr.color)
    if not comps:
        raise NotFound(f"colour {expr.color} absent")
    return select([b for b, _ in comps], expr.qualifier)


def _strictly_selects(qualifier: str, target: Box, peers: Sequence[Box]) -> bool:
    if qualifier == "none":
        return len(peers) == 1
    key = _qualifier_key(qualifier, target)[0]
    return all(_qualifier_key(qualifier, b)[0] > key for b in peers if b != target)


def check_layout(layout: Layout, cfg: WorldConfig) -> None:
    """Raise if a layout breaks any world invariant."""
    if not 2 <= len(layout) <= cfg.K_max:
        raise WorldError(f"layout has {len(layout)} items, expected 2..{cfg.K_max}")
    items = layout.items
    for i, it in enumerate(items):
        it.box.check(cfg.H, cfg.W)
        if not 0 <= it.expr.color < cfg.C:
            raise WorldError(f"colour {it.expr.color} outside palette")
        for other in items[:i]:
            if it.box.overlaps(other.box):
                raise OverlapError(f"{it.box} overlaps {other.box}")
            if it.expr.color == other.expr.color and it.box.touches(other.box):
                raise OverlapError(f"same-colour boxes {it.box} and {other.box} touch")
    for it in items:
        peers = [o.box for o in items if o.expr.color == it.expr.color]
        if select(peers, it.expr.qualifier) != it.box:
            raise Ambiguous(f"{it.expr} does not resolve to {it.box}")
        if not _strictly_selects(it.expr.qualifier, it.box, peers):
            raise Ambiguous(f"{it.expr} only resolves to {it.box} via tie-break")


def _place_boxes(rng: np.random.Generator, cfg: WorldConfig, k: int) -> list[Box] | None:
    lo, hi = cfg.min_box_side, cfg.box_side_cap
    boxes: list[Box] = []
    for _ in range(k):
        for _try in range(50):
            w = int(rng.integers(lo, hi + 1))
            h = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(0, cfg.W - w + 1))
            y0 = int(rng.integers(0, cfg.H - h + 1))
            cand = Box(x0, y0, x0 + w, y0 + h)
            if not any(cand.overlaps(b) for b in boxes):
                boxes.append(cand)
                break
        else:
            return None
    return boxes


def _assign_expressions(rng: np.random.Generator, cfg: WorldConfig,
                        boxes: list[Box]) -> list[Expression] | None:
    colors = [int(c) for c in rng.integers(0, cfg.C, size=len(boxes))]
    for i in range(len(boxes)):
        for j in range(i):
            if colors[i] == colors[j] and boxes[i].touches(boxes[j]):
                return None
    exprs = []
    for i, box in enumerate(boxes):
        peers = [b for b, c in zip(boxes, colors) if c == colors[i]]
        valid = [q for q in QUALIFIERS if _strictly_selects(q, box, peers)]
        if not valid:
            return None
        exprs.append(Expression(colors[i], valid[int(rng.integers(len(valid)))]))
    return exprs


def sample_layout(rng: np.random.Generator, cfg: WorldConfig) -> Layout:
    """Rejection-sample a layout satisfying every world invariant."""
    for _ in range(cfg.retry_budget):
        k = int(rng.integers(2, cfg.K_max + 1))
        boxes = _place_boxes(rng, cfg, k)
        if boxes is None:
            continue
        exprs = _assign_expressions(rng, cfg, boxes)
        if exprs is None:
            continue
        # placement order is biased (early boxes meet fewer obstacles); present items in random order
        order = rng.permutation(k)
        return Layout(tuple(LayoutItem(exprs[i], boxes[i]) for i in order))
    raise SamplingExhausted(f"no valid layout after {cfg.retry_budget} attempts")


def sample_layouts(rng: np.random.Generator, cfg: WorldConfig, n: int) -> list[Layout]:
    return [sample_layout(rng, cfg) for _ in range(n)]


# -- JSON documents ---------------------------------------------------------

def layout_to_dict(layout: Layout, cfg: WorldConfig, image: np.ndarray | None = None) -> dict:
    doc = {
        "H": cfg.H,
        "W": cfg.W,
        "items": [
            {"color": it.expr.color, "qual": it.expr.qualifier, "box": it.box.as_list()}
            for it in layout.items
        ],
    }
    if image is not None:
        doc["cells"] = [int(v) for v in np.asarray(image).ravel()]
    return doc


def layout_from_dict(doc: dict) -> tuple[Layout, np.ndarray | None]:
    items = tuple(
        LayoutItem(Expression(int(it["color"]), it["qual"]), Box(*map(int, it["box"])))
        for it in doc["items"]
    )
    cells = doc.get("cells")
    image = None
    if cells is not None:
        image = np.asarray(cells, dtype=np.int64).reshape(doc["H"], doc["W"])
    return Layout(items), image

