import copy

import numpy as np
import pytest
import torch

from gridcycle import data
from gridcycle.cyclerl import (GrpoConfig, RewardSpec, cycle_reward, grpo_advantages,
                               grpo_surrogate, policy_logprobs, reward_from_boxes, run_stage3)
from gridcycle.gradcheck import MICRO_VOCAB, MICRO_WORLD, check_grpo, micro_group, micro_model
from gridcycle.net import param_distance
from gridcycle.world import Box, Expression, Layout, LayoutItem


def layout2():
    return Layout([LayoutItem(Expression(0), Box(0, 0, 2, 2)), LayoutItem(Expression(1), Box(3, 3, 5, 5))])


def test_reward_examples():
    lay = layout2()
    assert reward_from_boxes(lay.boxes, lay, RewardSpec(), 8, 8)[0] == 0.0
    assert reward_from_boxes([None, None], lay, RewardSpec(), 8, 8)[0] == -1.0
    r, ious = reward_from_boxes([Box(0, 0, 2, 2), Box(4, 4, 6, 6)], lay, RewardSpec(), 8, 8)
    assert ious == [1.0, pytest.approx(1 / 7)]
    assert r == pytest.approx(-3 / 7)
    r1, _ = reward_from_boxes([Box(0, 0, 2, 2), Box(4, 4, 6, 6)], lay, RewardSpec("l1_normalized"), 8, 8)
    assert -1.0 <= r1 < 0.0
    with pytest.raises(ValueError):
        RewardSpec("hamming")


def test_cycle_reward_is_finite_on_garbage():
    m = micro_model(0).float()
    lay = Layout([LayoutItem(Expression(0), Box(0, 0, 1, 2))])
    r, ious = cycle_reward(m, lay, [MICRO_VOCAB.img_lo] * 4, MICRO_VOCAB, MICRO_WORLD)
    assert -1.0 <= r <= 0.0 and np.isfinite(r)
    with pytest.raises(ValueError):
        cycle_reward(m, lay, [MICRO_VOCAB.img_lo] * 3, MICRO_VOCAB, MICRO_WORLD)


def test_advantages():
    assert grpo_advantages([1, 2, 3]).tolist() == [-1, 0, 1]
    assert grpo_advantages([0.4] * 5).tolist() == [0.0] * 5
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        a = grpo_advantages(rng.normal(size=int(rng.integers(2, 12))))
        assert abs(a.sum()) < 1e-9
    with pytest.raises(ValueError):
        grpo_advantages([1.0])


def surrogate_value(rho, A, eps):
    rho, A = torch.tensor(rho, dtype=torch.float64), torch.tensor(A, dtype=torch.float64)
    return torch.minimum(rho * A, rho.clamp(1 - eps, 1 + eps) * A).item()


def test_clip_arithmetic_via_surrogate():
    """Build a one-token group whose ratio is set through logp_old and read back the objective."""
    m = micro_model(0)
    grp = micro_group(m)
    cfg = GrpoConfig(G=2, eps=0.2, beta=0.0)
    with torch.no_grad():
        logp, _ = policy_logprobs(m, grp, MICRO_VOCAB.img_lo, MICRO_VOCAB.size)
    for rho, A, expected in ((1.5, 1.0, 1.2), (0.5, -1.0, -0.8)):
        grp.logp_old = logp - np.log(rho)
        grp.advantages = np.full(len(grp.advantages), A)
        with torch.no_grad():
            obj, _ = grpo_surrogate(m, grp, m, cfg, MICRO_VOCAB)
        assert obj.item() == pytest.approx(expected, abs=1e-9)
        assert surrogate_value(rho, A, 0.2) == pytest.approx(expected)


def test_clip_bound():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        rho, A = float(rng.uniform(0, 3)), float(rng.normal())
        v = surrogate_value(rho, A, 0.2)
        if v != rho * A:                      # the clipped branch was selected
            assert abs(v) <= 1.2 * abs(A) + 1e-12


def test_on_policy_identity():
    m = micro_model(0)
    grp = micro_group(m)
    grp.logp_old = None
    cfg = GrpoConfig(G=2, beta=0.3)
    obj, stats = grpo_surrogate(m, grp, m, cfg, MICRO_VOCAB)
    # theta == pi_old == ref: ratios are one, KL is zero, objective is mean(A) = 0
    assert obj.item() == pytest.approx(float(np.mean(grp.advantages)), abs=1e-12)
    assert stats["kl_to_ref"] == pytest.approx(0.0, abs=1e-12)
    assert stats["clip_fraction"] == 0.0
    obj.backward()
    g_obj = {n: p.grad.clone() for n, p in m.named_parameters()}
    # plain policy gradient: d/dtheta mean_t A * logp_t
    m.zero_grad()
    logp, _ = policy_logprobs(m, grp, MICRO_VOCAB.img_lo, MICRO_VOCAB.size)
    A = torch.as_tensor(grp.advantages, dtype=logp.dtype)[:, None]
    (A * logp).mean().backward()
    for n, p in m.named_parameters():
        assert torch.allclose(g_obj[n], p.grad, atol=1e-12), n


def test_null_update_and_kl_nonnegative():
    m = micro_model(0)
    ref = micro_model(1)
    grp = micro_group(m)
    grp.advantages = np.zeros_like(grp.advantages)
    obj, stats = grpo_surrogate(m, grp, ref, GrpoConfig(G=2, beta=0.0), MICRO_VOCAB)
    obj.backward()
    assert all(not p.grad.any() for p in m.parameters())
    assert stats["kl_to_ref"] >= 0.0


def test_grpo_gradcheck_micro():
    res = check_grpo()
    assert res.passed, res.line()


def test_equal_rewards_leave_params_untouched(monkeypatch):
    """With beta=0 and equal rewards across the group the optimiser step is a no-op."""
    import gridcycle.cyclerl as cr

    m = micro_model(0).float()
    before = copy.deepcopy(m)
    monkeypatch.setattr(cr, "cycle_rewards", lambda model, lays, *a, **k: ([0.5] * len(lays), [[1.0]] * len(lays), 0.0))
    src = data.LayoutSource("random", MICRO_WORLD, 0)
    monkeypatch.setattr(src, "batch", lambda step, n: [Layout([LayoutItem(Expression(0), Box(0, 0, 1, 2))])] * n)
    run_stage3(m, GrpoConfig(G=4, beta=0.0, steps=3, batch=2, lr=1e-2), MICRO_WORLD, MICRO_VOCAB, src)
    assert param_distance(m, before) == 0.0


def test_config_validation():
    for bad in ({"G": 1}, {"eps": 1.0}, {"beta": -0.1}, {"temperature": 0.0}):
        with pytest.raises(ValueError):
            GrpoConfig(**bad)
