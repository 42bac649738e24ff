"""Central finite-difference checks of every training objective on micro models.

All suites run in float64 on a 2x2 world whose vocabulary has 15 ids.  The
check perturbs every element of every trainable tensor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .cyclerl import GrpoConfig, GrpoGroup, grpo_surrogate, policy_logprobs
from .djo import DjoConfig, djo_loss, gumbel_noise
from .net import ModelConfig, TinyDecoder, build_model, ce_loss
from .pretrain import pack_batch, stage1_loss
from .seqcodec import Vocab
from .tasks import generation_batch
from .world import Box, Expression, Layout, LayoutItem, WorldConfig

MICRO_WORLD = WorldConfig(H=2, W=2, C=2, K_max=2, min_box_side=1)
MICRO_VOCAB = Vocab(n_colors=2, n_coords=3, v_img=3, n_quals=1)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    n_checked: int
    seconds: float
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag}  {self.name:<10} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e} "
                f"elements={self.n_checked} ({self.seconds:.1f}s) worst={self.worst}")


def micro_model(seed: int = 0, max_positions: int = 12) -> TinyDecoder:
    cfg = ModelConfig(MICRO_VOCAB.size, d_model=8, n_layers=1, n_heads=2, max_positions=max_positions,
                      init_std=0.3)
    model = build_model(cfg, seed=seed, dtype=torch.float64)
    # non-trivial LayerNorm affine parameters so their gradients are exercised too
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "ln" in name or name.endswith("bias"):
                p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return model


def micro_layouts() -> list[Layout]:
    return [
        Layout((LayoutItem(Expression(0), Box(0, 0, 1, 2)),)),
        Layout((LayoutItem(Expression(1), Box(1, 0, 2, 1)),)),
    ]


def micro_images() -> np.ndarray:
    return np.array([[[1, 0], [1, 0]], [[0, 2], [0, 0]]])


def finite_difference_check(fn: Callable[[], torch.Tensor], model: torch.nn.Module, *,
                            h: float = 1e-5, floor: float = 1e-6, corrupt: bool = False
                            ) -> tuple[float, int, str]:
    """Max over all parameter elements of |g_a - g_n| / max(|g_a|, |g_n|, floor)."""
    model.zero_grad(set_to_none=True)
    fn().backward()
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    analytic = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in params}
    if corrupt:
        # deliberately wrong gradient: the check must notice
        n0 = params[0][0]
        analytic[n0].view(-1)[0] += 1e-2 * (1 + analytic[n0].view(-1)[0].abs())
    worst, worst_name, count = 0.0, "", 0
    with torch.no_grad():
        for name, p in params:
            flat = p.view(-1)
            ga = analytic[name].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                gn = (fp - fm) / (2 * h)
                a = ga[i].item()
                err = abs(a - gn) / max(abs(a), abs(gn), floor)
                count += 1
                if err > worst:
                    worst, worst_name = err, f"{name}[{i}]"
    return worst, count, worst_name


def _run(name: str, fn, model, tol: float, corrupt: bool) -> CheckResult:
    t0 = time.perf_counter()
    err, n, where = finite_difference_check(fn, model, corrupt=corrupt)
    return CheckResult(name, err, tol, n, time.perf_counter() - t0, where)


def check_ce(corrupt: bool = False) -> CheckResult:
    model = micro_model(0)
    g = torch.Generator().manual_seed(3)
    T = 10
    tokens = torch.randint(0, MICRO_VOCAB.size, (2, T), generator=g)
    seg = torch.zeros(2, T, dtype=torch.long)
    pos = torch.arange(T).expand(2, T)
    mask = torch.tril(torch.ones(T, T, dtype=torch.bool)).expand(2, T, T)
    lm = torch.rand(2, T, generator=g) > 0.3
    lm[:, 1] = True
    return _run("net_ce", lambda: ce_loss(model(tokens, seg, pos, mask), tokens, lm), model, 1e-4, corrupt)


def check_stage1(corrupt: bool = False) -> CheckResult:
    model = micro_model(1)
    tb = pack_batch(micro_layouts(), micro_images(), MICRO_VOCAB)
    assert tb.tokens.shape[1] <= 24
    return _run("stage1", lambda: stage1_loss(model, tb)[0], model, 1e-4, corrupt)


def check_loop(corrupt: bool = False) -> CheckResult:
    """Full joint objective with frozen Gumbel draws, relaxed samples fed forward."""
    model = micro_model(2)
    lays, imgs = micro_layouts(), micro_images()
    noise = gumbel_noise((len(lays), MICRO_WORLD.n_cells, MICRO_VOCAB.v_img),
                         torch.Generator().manual_seed(4), torch.float64)
    cfg = DjoConfig(lam=0.7)

    def fn():
        return djo_loss(model, lays, imgs, MICRO_VOCAB, MICRO_WORLD, 300, cfg, noise=noise,
                        straight_through=False)[0]
    return _run("loop", fn, model, 1e-3, corrupt)


def micro_group(model: TinyDecoder, seed: int = 5) -> GrpoGroup:
    """Frozen rollouts with old log-probs offset so ratios land on both clip branches."""
    g = torch.Generator().manual_seed(seed)
    lays = micro_layouts() * 2
    tb, start = generation_batch(lays, MICRO_VOCAB, MICRO_WORLD)
    n = MICRO_WORLD.n_cells
    tb.tokens[:, start:] = MICRO_VOCAB.img_lo + torch.randint(0, MICRO_VOCAB.v_img, (len(lays), n), generator=g)
    grp = GrpoGroup(tb, start, np.zeros(len(lays)), np.array([0.6, -0.2, -0.9, 0.5]))
    with torch.no_grad():
        logp, _ = policy_logprobs(model, grp, MICRO_VOCAB.img_lo, MICRO_VOCAB.size)
    offsets = torch.tensor([0.05, -0.1, 0.4, -0.45, 0.0, 0.12, -0.3, 0.25], dtype=torch.float64)
    grp.logp_old = logp - offsets[torch.arange(logp.numel()) % 8].view_as(logp)
    return grp


def check_grpo(corrupt: bool = False) -> CheckResult:
    model = micro_model(3)
    ref = micro_model(4)
    grp = micro_group(model)
    cfg = GrpoConfig(G=2, eps=0.2, beta=0.5)
    return _run("grpo", lambda: grpo_surrogate(model, grp, ref, cfg, MICRO_VOCAB)[0], model, 1e-4, corrupt)


SUITES = {"net_ce": check_ce, "stage1": check_stage1, "loop": check_loop, "grpo": check_grpo}


def run_all(corrupt: bool = False, only: list[str] | None = None) -> list[CheckResult]:
    return [SUITES[k](corrupt) for k in (only or SUITES)]
