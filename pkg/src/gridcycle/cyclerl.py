"""Stage 3: critic-free policy optimisation of the image generator.

Each layout is rolled out G times into images, the model grounds every
expression back on its own sample, and the negated box discrepancy is the
reward.  No paired image is ever read.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch

from . import data
from .net import TensorBatch, TinyDecoder, make_optimizer
from .seqcodec import Vocab
from .tasks import box_ious, generate_images, ground_layouts
from .training import MetricsLog, check_finite, run_loop
from .world import Box, Layout, WorldConfig

RATIO_MIN, RATIO_MAX = 1e-4, 1e4
DISCREPANCIES = ("one_minus_iou", "l1_normalized")


@dataclass
class RewardSpec:
    discrepancy: str = "one_minus_iou"
    unparseable: float = 1.0   # discrepancy charged for a box that failed to parse

    def __post_init__(self):
        if self.discrepancy not in DISCREPANCIES:
            raise ValueError(f"unknown discrepancy {self.discrepancy!r}")
        if not 0.0 <= self.unparseable <= 1.0:
            raise ValueError("unparseable penalty must lie in [0, 1]")


@dataclass
class GrpoConfig:
    G: int = 8
    eps: float = 0.2
    beta: float = 0.02
    temperature: float = 1.0
    steps: int = 2000
    lr: float = 5e-5
    batch: int = 4            # layouts per update; each yields G rollouts
    inner_epochs: int = 1
    reward: RewardSpec = field(default_factory=RewardSpec)
    data_seed: int = 0
    eval_every: int = 100
    log_every: int = 10

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("group size must be >= 2")
        if not 0 < self.eps < 1:
            raise ValueError("clip eps must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.temperature <= 0 or self.inner_epochs < 1 or self.batch < 1:
            raise ValueError("temperature, inner_epochs and batch must be positive")
        if isinstance(self.reward, dict):
            self.reward = RewardSpec(**self.reward)


def discrepancy(pred: Box | None, truth: Box, spec: RewardSpec, H: int, W: int) -> float:
    if pred is None:
        return spec.unparseable
    if spec.discrepancy == "one_minus_iou":
        return 1.0 - box_ious([pred], [truth])[0]
    d = (abs(pred.x0 - truth.x0) / W + abs(pred.x1 - truth.x1) / W
         + abs(pred.y0 - truth.y0) / H + abs(pred.y1 - truth.y1) / H) / 4
    return min(1.0, d)


def reward_from_boxes(preds: list[Box | None], layout: Layout, spec: RewardSpec,
                      H: int, W: int) -> tuple[float, list[float]]:
    """Reward = -(1/K) sum_k d(pred_k, box_k); also returns per-box IoUs."""
    d = [discrepancy(p, t, spec, H, W) for p, t in zip(preds, layout.boxes)]
    return -float(np.mean(d)), box_ious(preds, layout.boxes)


def cycle_rewards(model: TinyDecoder, layouts: list[Layout], images: np.ndarray, vocab: Vocab,
                  world: WorldConfig, spec: RewardSpec | None = None):
    """Rewards for many (layout, generated image) pairs; grounding is greedy under ``model``."""
    spec = spec or RewardSpec()
    images = np.asarray(images)
    if images.shape[1:] != (world.H, world.W):
        images = images.reshape(len(layouts), world.H, world.W)
    with torch.no_grad():
        preds = ground_layouts(model, images, layouts, vocab, world)
    out = [reward_from_boxes(p, l, spec, world.H, world.W) for p, l in zip(preds, layouts)]
    fails = [b is None for p in preds for b in p]
    return [r for r, _ in out], [i for _, i in out], float(np.mean(fails)) if fails else 0.0


def cycle_reward(model: TinyDecoder, layout: Layout, image_tokens, vocab: Vocab, world: WorldConfig,
                 spec: RewardSpec | None = None) -> tuple[float, list[float]]:
    cells = np.asarray(image_tokens).ravel()
    if cells.size != world.n_cells:
        raise ValueError(f"expected {world.n_cells} image tokens, got {cells.size}")
    if cells.min() >= vocab.img_lo:
        cells = cells - vocab.img_lo
    r, i, _ = cycle_rewards(model, [layout], cells[None], vocab, world, spec)
    return r[0], i[0]


def grpo_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or len(r) < 2:
        raise ValueError("need a group of at least two rewards")
    return r - r.mean()


@dataclass
class GrpoGroup:
    """One batch of rollouts: ``B`` queries times ``G`` samples, row-major by query."""
    template: TensorBatch          # filled [G1, IMG] sequences
    start: int                     # first image position
    rewards: np.ndarray            # (B*G,)
    advantages: np.ndarray         # (B*G,)
    logp_old: torch.Tensor | None = None   # (B*G, H*W)
    ious: list = field(default_factory=list)


def policy_logprobs(model: TinyDecoder, grp: GrpoGroup, lo: int, hi: int, temperature: float = 1.0):
    """Per-token log pi(o_t) and the full restricted log-distribution at each visited state."""
    tb = grp.template
    logits = model.run_batch(tb)[:, grp.start - 1:-1, lo:hi] / temperature
    logp_all = logits.log_softmax(-1)
    chosen = (tb.tokens[:, grp.start:] - lo).unsqueeze(-1)
    return logp_all.gather(-1, chosen).squeeze(-1), logp_all


def grpo_surrogate(model: TinyDecoder, grp: GrpoGroup, ref: TinyDecoder, cfg: GrpoConfig,
                   vocab: Vocab) -> tuple[torch.Tensor, dict]:
    """Clipped surrogate minus beta * KL(pi_theta || pi_ref); to be maximised."""
    lo, hi = vocab.img_lo, vocab.size
    logp, logp_all = policy_logprobs(model, grp, lo, hi, cfg.temperature)
    old = grp.logp_old.to(logp.dtype) if grp.logp_old is not None else logp.detach()
    raw = torch.exp(logp - old)
    rho = raw.clamp(RATIO_MIN, RATIO_MAX)
    A = torch.as_tensor(grp.advantages, dtype=logp.dtype)[:, None]
    term = torch.minimum(rho * A, rho.clamp(1 - cfg.eps, 1 + cfg.eps) * A)
    clipped = term.mean()
    with torch.no_grad():
        _, ref_all = policy_logprobs(ref, grp, lo, hi, cfg.temperature)
    kl = (logp_all.exp() * (logp_all - ref_all.to(logp_all.dtype))).sum(-1).clamp_min(0.0).mean()
    obj = clipped - cfg.beta * kl if cfg.beta else clipped
    stats = {
        "kl_to_ref": kl.item(),
        "clip_fraction": float(((rho - 1).abs() > cfg.eps).double().mean()),
        "ratio_clamped": int(((raw < RATIO_MIN) | (raw > RATIO_MAX)).sum()),
    }
    return obj, stats


def collect_group(model: TinyDecoder, layouts: list[Layout], cfg: GrpoConfig, vocab: Vocab,
                  world: WorldConfig, generator: torch.Generator | None = None) -> GrpoGroup:
    """Roll out G images per layout under the current parameters (pi_old) and score them."""
    model.eval()
    rep = [l for l in layouts for _ in range(cfg.G)]
    with torch.no_grad():
        cells, ro, tb, start = generate_images(model, rep, vocab, world, greedy=False,
                                               temperature=cfg.temperature, generator=generator)
    tb.tokens = ro.tokens
    rewards, ious, fail = cycle_rewards(model, rep, cells, vocab, world, cfg.reward)
    rewards = np.asarray(rewards)
    adv = np.concatenate([grpo_advantages(rewards[i:i + cfg.G]) for i in range(0, len(rep), cfg.G)])
    grp = GrpoGroup(tb, start, rewards, adv, None, ious)
    grp.parse_failure_rate = fail
    return grp


def _all_zero_grad(model: torch.nn.Module) -> bool:
    return all(p.grad is None or not bool(p.grad.any()) for p in model.parameters())


def run_stage3(model: TinyDecoder, cfg: GrpoConfig, world: WorldConfig, vocab: Vocab,
               source: data.LayoutSource, *, ref: TinyDecoder | None = None,
               log: MetricsLog | None = None, start: int = 0, optimizer=None,
               checkpoint_fn=None, checkpoint_every: int = 0, stop_after: int | None = None,
               eval_fn=None) -> int:
    """GRPO updates in place.  ``ref`` defaults to a frozen copy taken on entry."""
    if ref is None:
        ref = copy.deepcopy(model)
    ref.eval()
    for p in ref.parameters():
        p.requires_grad_(False)
    opt = optimizer or make_optimizer(model, cfg.lr)

    def step_fn(step: int) -> dict:
        layouts = source.batch(step, cfg.batch)
        gen = data.torch_gen(data.rng_for(cfg.data_seed, data.STAGE3 + 100, step))
        grp = collect_group(model, layouts, cfg, vocab, world, gen)
        model.train()
        stats: dict = {}
        for epoch in range(cfg.inner_epochs):
            obj, stats = grpo_surrogate(model, grp, ref, cfg, vocab)
            check_finite(obj.item(), step)
            if epoch == 0 and cfg.inner_epochs > 1:
                with torch.no_grad():
                    grp.logp_old = policy_logprobs(model, grp, vocab.img_lo, vocab.size, cfg.temperature)[0]
            opt.zero_grad(set_to_none=True)
            (-obj).backward()
            if not _all_zero_grad(model):   # a null objective leaves the parameters untouched
                opt.step()
        return {
            "mean_reward": float(grp.rewards.mean()),
            "mean_cycle_iou": float(np.mean([np.mean(i) for i in grp.ious])),
            "kl_to_ref": stats["kl_to_ref"],
            "clip_fraction": stats["clip_fraction"],
            "parse_failure_rate": grp.parse_failure_rate,
            "ratio_clamped": stats["ratio_clamped"],
        }

    return run_loop(cfg.steps, step_fn, start=start, log=log, log_every=cfg.log_every,
                    eval_fn=eval_fn, eval_every=cfg.eval_every, checkpoint_fn=checkpoint_fn,
                    checkpoint_every=checkpoint_every, stop_after=stop_after)


def heldout_reward_fn(model: TinyDecoder, world: WorldConfig, vocab: Vocab, seed: int, n: int,
                      spec: RewardSpec | None = None):
    """Closure: mean greedy-rollout reward and cycle IoU on held-out layouts."""
    layouts = data.heldout_layouts(world, seed, n)

    def fn(step: int) -> dict:
        was = model.training
        model.eval()
        with torch.no_grad():
            cells = generate_images(model, layouts, vocab, world)[0]
        r, ious, _ = cycle_rewards(model, layouts, cells, vocab, world, spec)
        model.train(was)
        return {"heldout_reward": float(np.mean(r)),
                "cycle_iou_holdout": float(np.mean([np.mean(i) for i in ious]))}

    return fn
