"""Layout-to-image generation and image-to-layout grounding on a trained model."""

from __future__ import annotations

import numpy as np
import torch

from .net import Rollout, TensorBatch, TinyDecoder, sample
from .seqcodec import (BOS, G1, G2, IMG, OBJ_OPEN, Vocab, build_sequence, collate,
                       encode_layout, encode_image, parse_box)
from .world import Box, Expression, Layout, WorldConfig, iou


def generation_batch(layouts: list[Layout], vocab: Vocab, world: WorldConfig,
                     images: np.ndarray | None = None) -> tuple[TensorBatch, int]:
    """Left-padded [G1, IMG] batch; image slots hold background ids when ``images`` is None."""
    n = world.n_cells
    seqs = []
    for i, lay in enumerate(layouts):
        img = images[i].ravel() if images is not None else np.zeros(n, dtype=np.int64)
        seqs.append(build_sequence([(G1, encode_layout(lay, vocab)), (IMG, (img + vocab.img_lo).tolist())],
                                   loss_segments=(IMG,)))
    tb = TensorBatch.from_batch(collate(seqs, left_pad=True))
    return tb, tb.tokens.shape[1] - n


def generate_images(model: TinyDecoder, layouts: list[Layout], vocab: Vocab, world: WorldConfig, *,
                    greedy: bool = True, temperature: float = 1.0,
                    generator: torch.Generator | None = None) -> tuple[np.ndarray, Rollout, TensorBatch, int]:
    """Decode one image per layout, choosing only among codebook ids."""
    tb, start = generation_batch(layouts, vocab, world)
    ro = sample(model, tb, start, greedy=greedy, temperature=temperature, generator=generator,
                vocab_range=(vocab.img_lo, vocab.size))
    cells = (ro.tokens[:, start:] - vocab.img_lo).numpy().reshape(-1, world.H, world.W)
    return cells, ro, tb, start


QUERY_PROMPT = 4  # BOS OBJ_OPEN colour qualifier


def grounding_batch(images: np.ndarray, exprs: list[Expression], vocab: Vocab) -> tuple[TensorBatch, int]:
    seqs = []
    for img, e in zip(images, exprs):
        g2 = [BOS, OBJ_OPEN, vocab.color(e.color), vocab.qualifier(e.qualifier), 0, 0, 0, 0]
        seqs.append(build_sequence([(IMG, encode_image(img, vocab)), (G2, g2)]))
    tb = TensorBatch.from_batch(collate(seqs))
    return tb, tb.tokens.shape[1] - 4


def ground(model: TinyDecoder, images: np.ndarray, exprs: list[Expression], vocab: Vocab,
           world: WorldConfig, chunk: int = 256) -> list[Box | None]:
    """Greedy box for each (image, expression) query; ``None`` when unparseable."""
    out: list[Box | None] = []
    for s in range(0, len(exprs), chunk):
        tb, start = grounding_batch(images[s:s + chunk], exprs[s:s + chunk], vocab)
        ro = sample(model, tb, start, greedy=True)
        for row in ro.tokens[:, start:].tolist():
            out.append(parse_box(row, vocab, world.H, world.W))
    return out


def ground_layouts(model: TinyDecoder, images: np.ndarray, layouts: list[Layout], vocab: Vocab,
                   world: WorldConfig) -> list[list[Box | None]]:
    """Ground every expression of ``layouts[i]`` on ``images[i]``."""
    imgs, exprs, owner = [], [], []
    for i, lay in enumerate(layouts):
        for e in lay.exprs:
            imgs.append(images[i])
            exprs.append(e)
            owner.append(i)
    boxes = ground(model, np.asarray(imgs), exprs, vocab, world) if exprs else []
    per: list[list[Box | None]] = [[] for _ in layouts]
    for i, b in zip(owner, boxes):
        per[i].append(b)
    return per


def box_ious(pred: list[Box | None], truth: list[Box]) -> list[float]:
    return [0.0 if p is None else iou(p, t) for p, t in zip(pred, truth)]
