"""Stage 2: dual joint optimisation over the layout -> image -> layout loop.

The generation pass decodes every image cell with a Gumbel-softmax sample.  In
straight-through mode the next step (and the grounding pass) consumes the hard
one-hot while gradients flow through the relaxed sample, so the grounding
loss reaches the generator through all H*W decode steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import data
from .net import KVCache, TensorBatch, TinyDecoder, make_optimizer, token_nll
from .pretrain import segment_ce
from .seqcodec import G2, IMG, Vocab, collate, pack_grounding
from .tasks import generation_batch
from .training import MetricsLog, check_finite, run_loop
from .world import Layout, WorldConfig

import numpy as np


@dataclass
class AnnealSchedule:
    tau0: float = 1.0
    alpha: float = 0.9995
    tau_min: float = 0.1

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0 < self.tau_min <= self.tau0:
            raise ValueError("need 0 < tau_min <= tau0")


def anneal(k: int, s: AnnealSchedule) -> float:
    if k < 0:
        raise ValueError("step index must be non-negative")
    return max(s.tau_min, s.tau0 * s.alpha ** k)


@dataclass
class DjoConfig:
    lam: float = 1.0
    steps: int = 6000
    batch: int = 32
    loop_batch: int | None = None
    lr: float = 5e-5
    schedule: AnnealSchedule = field(default_factory=AnnealSchedule)
    aux_i2l: bool = False
    loop_only: bool = False
    data_seed: int = 0
    eval_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("loop weight lambda must be > 0")
        if self.steps < 0 or self.batch < 1:
            raise ValueError("steps must be >= 0 and batch >= 1")
        if isinstance(self.schedule, dict):
            self.schedule = AnnealSchedule(**self.schedule)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, soft, hard):
        return hard.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32):
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    tiny = torch.finfo(torch.float64).tiny
    u = u.clamp(tiny, 1.0 - 1e-16)
    return (-torch.log(-torch.log(u))).to(dtype)


def gumbel_st_sample(logits, tau: float, generator: torch.Generator | None = None, noise=None):
    """Return (soft, hard, st): relaxed sample, its one-hot argmax, and the
    straight-through tensor whose value is ``hard`` and whose gradient is ``soft``'s."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if noise is None:
        noise = gumbel_noise(logits.shape, generator, logits.dtype)
    soft = ((logits + noise) / tau).softmax(-1)
    hard = F.one_hot(soft.argmax(-1), soft.shape[-1]).to(soft.dtype)
    return soft, hard, _StraightThrough.apply(soft, hard)


def grounding_targets(layouts: list[Layout], vocab: Vocab, world: WorldConfig) -> TensorBatch:
    """[IMG placeholder, G2 = layout] batch; targets are the G2 tokens after BOS."""
    blank = np.zeros((world.H, world.W), dtype=np.int64)
    tb = TensorBatch.from_batch(collate([pack_grounding(blank, vocab, l) for l in layouts]))
    tb.loss_mask = (tb.segment == G2) & (tb.positions > 0)
    return tb


def loop_loss(model: TinyDecoder, layouts: list[Layout], vocab: Vocab, world: WorldConfig, tau: float,
              generator: torch.Generator | None = None, noise=None, straight_through: bool = True,
              return_images: bool = False):
    """CE of reconstructing each layout from its own sampled image.

    ``noise`` (B, H*W, V_img) freezes the Gumbel draws.  With
    ``straight_through=False`` the relaxed samples are fed forward instead of
    the hard ones, giving a smooth function of the parameters.
    """
    n = world.n_cells
    lo, hi = vocab.img_lo, vocab.size
    tb, start = generation_batch(layouts, vocab, world)
    B = len(layouts)
    emb_img = model.tok_emb.weight[lo:hi]
    cache = KVCache(len(model.blocks))
    out = model.forward(tb.tokens[:, :start], tb.segment[:, :start], tb.positions[:, :start],
                        tb.attn_mask[:, :start, :start], tb.deep_mask[:, :start, :start], cache)
    last = out[:, -1, lo:hi]
    if noise is None:
        noise = gumbel_noise((B, n, hi - lo), generator, last.dtype)
    picks = []
    for j in range(n):
        soft, hard, st = gumbel_st_sample(last, tau, noise=noise[:, j])
        picks.append(st if straight_through else soft)
        if j == n - 1:
            break
        t = start + j
        s = slice(t, t + 1)
        h = model.trunk((picks[-1] @ emb_img)[:, None], tb.segment[:, s], tb.positions[:, s],
                        tb.attn_mask[:, s, :t + 1], tb.deep_mask[:, s, :t + 1], cache)
        last = model.head(h)[:, -1, lo:hi]
    img_mix = torch.stack(picks, dim=1)                      # (B, n, V_img)

    gt = grounding_targets(layouts, vocab, world)
    x = torch.cat([img_mix @ emb_img, model.tok_emb(gt.tokens[:, n:])], dim=1)
    h = model.trunk(x, gt.segment, gt.positions, gt.attn_mask, gt.deep_mask)
    logits = model.head(h)
    sel = gt.loss_mask[:, 1:]
    loss = (token_nll(logits, gt.tokens) * sel).sum() / sel.sum()
    if return_images:
        return loss, img_mix.detach().argmax(-1)
    return loss


@torch.no_grad()
def heldout_loop_loss(model: TinyDecoder, world: WorldConfig, vocab: Vocab, seed: int, n: int,
                      chunk: int = 64) -> float:
    """Loop loss on held-out layouts with Gumbel draws fixed per chunk, so two models compare fairly."""
    was = model.training
    model.eval()
    layouts = data.heldout_layouts(world, seed, n)
    total = 0.0
    for s in range(0, n, chunk):
        part = layouts[s:s + chunk]
        g = data.torch_gen(data.rng_for(seed, data.HELDOUT, 1 + s))
        total += loop_loss(model, part, vocab, world, 1.0, generator=g).item() * len(part)
    model.train(was)
    return total / max(n, 1)


def l2i_loss(model: TinyDecoder, layouts: list[Layout], images: np.ndarray, vocab: Vocab,
             world: WorldConfig):
    tb, _ = generation_batch(layouts, vocab, world, images)
    return segment_ce(model.run_batch(tb), tb, IMG)


def i2l_loss(model: TinyDecoder, layouts: list[Layout], images: np.ndarray, vocab: Vocab):
    tb = TensorBatch.from_batch(collate([pack_grounding(i, vocab, l) for l, i in zip(layouts, images)]))
    tb.loss_mask = tb.loss_mask & (tb.segment == G2)
    return segment_ce(model.run_batch(tb), tb, G2)


def djo_loss(model: TinyDecoder, layouts: list[Layout], images: np.ndarray, vocab: Vocab,
             world: WorldConfig, k: int, cfg: DjoConfig, generator: torch.Generator | None = None,
             lam: float | None = None, noise=None,
             straight_through: bool = True) -> tuple[torch.Tensor, dict]:
    """J = L_L2I + lam * L_loop (plus the optional auxiliary grounding term)."""
    lam = cfg.lam if lam is None else lam
    tau = anneal(k, cfg.schedule)
    nl = cfg.loop_batch or len(layouts)
    l_loop = loop_loss(model, layouts[:nl], vocab, world, tau, generator, noise=noise,
                       straight_through=straight_through)
    l_l2i = l2i_loss(model, layouts, images, vocab, world)
    J = lam * l_loop if cfg.loop_only else l_l2i + lam * l_loop
    parts = {"L_L2I": l_l2i.item(), "L_loop": l_loop.item(), "tau": tau}
    if cfg.aux_i2l:
        l_i2l = i2l_loss(model, layouts, images, vocab)
        J = J + l_i2l
        parts["L_I2L"] = l_i2l.item()
    parts["J"] = J.item()
    return J, parts


def run_stage2(model: TinyDecoder, cfg: DjoConfig, world: WorldConfig, vocab: Vocab, *,
               log: MetricsLog | None = None, start: int = 0, optimizer=None,
               checkpoint_fn=None, checkpoint_every: int = 0, stop_after: int | None = None,
               eval_fn=None) -> int:
    opt = optimizer or make_optimizer(model, cfg.lr)

    def step_fn(step: int) -> dict:
        model.train()
        layouts, images = data.train_pairs(world, cfg.data_seed, step, cfg.batch, tag=data.STAGE2)
        gen = data.torch_gen(data.rng_for(cfg.data_seed, data.STAGE2 + 100, step))
        J, parts = djo_loss(model, layouts, images, vocab, world, step, cfg, gen)
        check_finite(J.item(), step)
        opt.zero_grad(set_to_none=True)
        J.backward()
        opt.step()
        return parts

    return run_loop(cfg.steps, step_fn, start=start, log=log, log_every=cfg.log_every,
                    eval_fn=eval_fn, eval_every=cfg.eval_every, checkpoint_fn=checkpoint_fn,
                    checkpoint_every=checkpoint_every, stop_after=stop_after)
