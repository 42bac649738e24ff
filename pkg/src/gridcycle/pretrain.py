"""Stage 1: parallel multi-task pre-training on packed [G1, IMG, G2] sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data
from .net import EmptyMask, TensorBatch, TinyDecoder, make_optimizer, token_nll
from .seqcodec import G2, IMG, Vocab, collate, pack_pretrain
from .training import MetricsLog, check_finite, run_loop
from .world import Layout, WorldConfig


@dataclass
class Stage1Config:
    steps: int = 20000
    batch: int = 32
    lr: float = 1e-3
    eval_every: int = 500
    eval_queries: int = 256
    data_seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")


def pack_batch(layouts: list[Layout], images: np.ndarray, vocab: Vocab) -> TensorBatch:
    return TensorBatch.from_batch(collate([pack_pretrain(l, i, vocab) for l, i in zip(layouts, images)]))


def segment_ce(logits, tb: TensorBatch, seg: int):
    """Mean CE over target positions inside one segment, or None if there are none."""
    sel = tb.loss_mask[:, 1:] & (tb.segment[:, 1:] == seg)
    n = sel.sum()
    if n.item() == 0:
        return None
    return (token_nll(logits, tb.tokens) * sel).sum() / n


def stage1_loss(model: TinyDecoder, tb: TensorBatch):
    """Unweighted sum of the image CE and the grounding CE; returns (loss, L_img, L_gnd)."""
    logits = model.run_batch(tb)
    l_img = segment_ce(logits, tb, IMG)
    l_gnd = segment_ce(logits, tb, G2)
    terms = [t for t in (l_img, l_gnd) if t is not None]
    if not terms:
        raise EmptyMask("no supervised positions in batch")
    return sum(terms), l_img, l_gnd


def run_stage1(model: TinyDecoder, cfg: Stage1Config, world: WorldConfig, vocab: Vocab, *,
               log: MetricsLog | None = None, start: int = 0, optimizer=None,
               checkpoint_fn=None, checkpoint_every: int = 0, stop_after: int | None = None,
               eval_fn=None) -> int:
    """Train in place; returns the next step index."""
    opt = optimizer or make_optimizer(model, cfg.lr)

    def step_fn(step: int) -> dict:
        model.train()
        layouts, images = data.train_pairs(world, cfg.data_seed, step, cfg.batch)
        tb = pack_batch(layouts, images, vocab)
        loss, l_img, l_gnd = stage1_loss(model, tb)
        check_finite(loss.item(), step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        return {"loss": loss.item(), "L_img": l_img.item(), "L_gnd": l_gnd.item()}

    return run_loop(cfg.steps, step_fn, start=start, log=log, log_every=cfg.log_every,
                    eval_fn=eval_fn, eval_every=cfg.eval_every, checkpoint_fn=checkpoint_fn,
                    checkpoint_every=checkpoint_every, stop_after=stop_after,
                    timing_key="examples_per_sec", batch_size=cfg.batch)


def unshared_batches(layouts: list[Layout], images: np.ndarray, vocab: Vocab) -> tuple[TensorBatch, TensorBatch]:
    """The same supervision split into separate [G1, IMG] and [IMG, G2] examples."""
    from .seqcodec import pack_generation, pack_grounding

    gen = TensorBatch.from_batch(collate([pack_generation(l, vocab, i) for l, i in zip(layouts, images)]))
    gnd = TensorBatch.from_batch(collate([pack_grounding(i, vocab, l) for l, i in zip(layouts, images)]))
    gnd.loss_mask = gnd.loss_mask & (gnd.segment == G2)
    return gen, gnd


def unshared_loss(model: TinyDecoder, gen: TensorBatch, gnd: TensorBatch):
    l_img = segment_ce(model.run_batch(gen), gen, IMG)
    l_gnd = segment_ce(model.run_batch(gnd), gnd, G2)
    return l_img + l_gnd, l_img, l_gnd


def grounding_holdout_fn(model: TinyDecoder, world: WorldConfig, vocab: Vocab, seed: int, n: int):
    """Closure computing Acc@0.5 on ``n`` held-out oracle-rendered queries."""
    from .evaluation import grounding_queries, grounding_accuracy, model_grounder

    queries = grounding_queries(world, seed, n)

    def fn(step: int) -> dict:
        was = model.training
        model.eval()
        acc = grounding_accuracy(model_grounder(model, vocab, world), queries, thresholds=(0.5,))
        model.train(was)
        return {"acc50_holdout": acc["Acc@0.50"]}

    return fn

