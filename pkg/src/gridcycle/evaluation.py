"""Desk-scale evaluation: detection AP on generated images, grounding accuracy,
cycle consistency and cell fidelity."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import data
from .net import TinyDecoder
from .seqcodec import Vocab
from .tasks import box_ious, generate_images, ground, ground_layouts
from .world import Box, Expression, Layout, WorldConfig, components, ground_oracle, iou, render

IOU_GRID = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)

Detection = tuple[int, Box, float]      # colour, box, score
Truth = tuple[int, Box]                 # colour, box
Grounder = Callable[[np.ndarray, list[Expression]], list[Box | None]]


def detect_oracle(image: np.ndarray) -> list[Detection]:
    """One detection per connected component; score is its solidity."""
    image = np.asarray(image)
    dets = []
    for c in np.unique(image):
        if c == 0:
            continue
        for box, cells in components(image, int(c) - 1):
            dets.append((int(c) - 1, box, cells / box.area))
    return dets


def _class_ap(dets: list[tuple[float, int, Box]], truths: dict[int, list[Box]], thr: float) -> float:
    n_gt = sum(len(v) for v in truths.values())
    order = sorted(range(len(dets)), key=lambda j: -dets[j][0])  # stable
    used = {i: [False] * len(v) for i, v in truths.items()}
    tp = np.zeros(len(dets))
    for rank, j in enumerate(order):
        _, img, box = dets[j]
        best, best_iou = -1, thr
        for g, gbox in enumerate(truths.get(img, [])):
            if used[img][g]:
                continue
            v = iou(box, gbox)
            if v >= best_iou:
                best, best_iou = g, v
        if best >= 0:
            used[img][best] = True
            tp[rank] = 1
    if not len(dets):
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # interpolated precision: running max from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def average_precision(dets: Sequence[Sequence[Detection]], truths: Sequence[Sequence[Truth]],
                      iou_threshold: float) -> float:
    """COCO-style 101-point interpolated AP, averaged over classes present in the truth."""
    classes = sorted({c for t in truths for c, _ in t})
    if not classes:
        return 0.0
    aps = []
    for c in classes:
        cd = [(s, i, b) for i, d in enumerate(dets) for cc, b, s in d if cc == c]
        ct: dict[int, list[Box]] = {}
        for i, t in enumerate(truths):
            boxes = [b for cc, b in t if cc == c]
            if boxes:
                ct[i] = boxes
        aps.append(_class_ap(cd, ct, iou_threshold))
    return float(np.mean(aps))


def ap_family(dets, truths) -> dict[str, float]:
    per = {t: average_precision(dets, truths, t) for t in IOU_GRID}
    return {"AP": float(np.mean(list(per.values()))), "AP50": per[0.5], "AP75": per[0.75]}


# -- grounding -----------------------------------------------------------------

@dataclass
class GroundingQueries:
    images: np.ndarray
    exprs: list[Expression]
    boxes: list[Box]

    def __len__(self) -> int:
        return len(self.exprs)


def queries_from_layouts(layouts: list[Layout], world: WorldConfig) -> GroundingQueries:
    imgs, exprs, boxes = [], [], []
    for lay in layouts:
        img = render(lay, world)
        for it in lay.items:
            imgs.append(img)
            exprs.append(it.expr)
            boxes.append(it.box)
    return GroundingQueries(np.asarray(imgs), exprs, boxes)


def grounding_queries(world: WorldConfig, seed: int, n: int) -> GroundingQueries:
    """The first ``n`` (image, expression, box) queries of the held-out split."""
    layouts = data.heldout_layouts(world, seed, n)  # >= n items since K >= 2
    q = queries_from_layouts(layouts, world)
    return GroundingQueries(q.images[:n], q.exprs[:n], q.boxes[:n])


def grounding_accuracy(grounder: Grounder, queries: GroundingQueries,
                       thresholds: Sequence[float] = (0.5, 0.75, 0.9)) -> dict[str, float]:
    """Acc@t = share of queries with IoU >= t; mAcc averages the 0.50:0.95 grid."""
    pred = grounder(queries.images, queries.exprs)
    ious = np.asarray(box_ious(pred, queries.boxes))
    out = {f"Acc@{t:.2f}": float((ious >= t - 1e-12).mean()) for t in thresholds}
    out["mAcc"] = float(np.mean([(ious >= t - 1e-12).mean() for t in IOU_GRID]))
    out["parse_failure_rate"] = float(np.mean([p is None for p in pred]))
    return out


def model_grounder(model: TinyDecoder, vocab: Vocab, world: WorldConfig) -> Grounder:
    def fn(images, exprs):
        with torch.no_grad():
            return ground(model, images, exprs, vocab, world)
    return fn


def oracle_grounder(images, exprs) -> list[Box | None]:
    out = []
    for img, e in zip(images, exprs):
        try:
            out.append(ground_oracle(img, e))
        except ValueError:
            out.append(None)
    return out


# -- full report -----------------------------------------------------------------

@dataclass
class EvalReport:
    AP: float
    AP50: float
    AP75: float
    acc50: float
    acc75: float
    acc90: float
    mAcc: float
    cycle_iou: float
    cell_accuracy: float
    parse_failure_rate: float
    n_samples: int
    seed: int

    FIELDS = ("AP", "AP50", "AP75", "acc50", "acc75", "acc90", "mAcc", "cycle_iou",
              "cell_accuracy", "parse_failure_rate", "n_samples", "seed")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        lines = []
        for f in self.FIELDS:
            v = getattr(self, f)
            lines.append(f"{f:<20}{v:>12.4f}" if isinstance(v, float) else f"{f:<20}{v:>12d}")
        return "\n".join(lines)


def cycle_ious(model: TinyDecoder, layouts: list[Layout], images: np.ndarray, vocab: Vocab,
               world: WorldConfig) -> tuple[list[list[float]], float]:
    """Per-item IoUs of grounding each layout's expressions on its image."""
    preds = ground_layouts(model, images, layouts, vocab, world)
    ious = [box_ious(p, lay.boxes) for p, lay in zip(preds, layouts)]
    flat = [b for p in preds for b in p]
    return ious, float(np.mean([b is None for b in flat])) if flat else 0.0


@torch.no_grad()
def evaluate(model: TinyDecoder, world: WorldConfig, vocab: Vocab, n_samples: int = 256,
             seed: int = 0, chunk: int = 128) -> EvalReport:
    model.eval()
    layouts = data.heldout_layouts(world, seed, n_samples)
    gen = np.concatenate([generate_images(model, layouts[s:s + chunk], vocab, world)[0]
                          for s in range(0, n_samples, chunk)]) if layouts else np.zeros((0, world.H, world.W))
    truth_imgs = np.stack([render(l, world) for l in layouts])
    dets = [detect_oracle(g) for g in gen]
    truths = [[(it.expr.color, it.box) for it in l.items] for l in layouts]
    aps = ap_family(dets, truths)
    acc = grounding_accuracy(model_grounder(model, vocab, world), queries_from_layouts(layouts, world))
    ious, fail = cycle_ious(model, layouts, gen, vocab, world)
    return EvalReport(
        AP=aps["AP"], AP50=aps["AP50"], AP75=aps["AP75"],
        acc50=acc["Acc@0.50"], acc75=acc["Acc@0.75"], acc90=acc["Acc@0.90"], mAcc=acc["mAcc"],
        cycle_iou=float(np.mean([np.mean(v) for v in ious])),
        cell_accuracy=float((gen == truth_imgs).mean()),
        parse_failure_rate=fail,
        n_samples=n_samples, seed=seed,
    )


def cycle_iou_fn(model: TinyDecoder, world: WorldConfig, vocab: Vocab, seed: int, n: int):
    """Closure for periodic held-out cycle IoU during training."""
    layouts = data.heldout_layouts(world, seed, n)

    def fn(step: int) -> dict:
        was = model.training
        model.eval()
        with torch.no_grad():
            gen = generate_images(model, layouts, vocab, world)[0]
            ious, _ = cycle_ious(model, layouts, gen, vocab, world)
        model.train(was)
        return {"cycle_iou_holdout": float(np.mean([np.mean(v) for v in ious]))}

    return fn
