import math

import numpy as np
import pytest
import torch

from gridcycle import data
from gridcycle.gradcheck import check_stage1
from gridcycle.net import ModelConfig, build_model, ce_loss, param_distance
from gridcycle.pretrain import (Stage1Config, pack_batch, run_stage1, stage1_loss, unshared_batches,
                                unshared_loss)
from gridcycle.seqcodec import G2, IMG, Vocab
from gridcycle.training import MetricsLog
from gridcycle.world import WorldConfig

WORLD = WorldConfig(H=6, W=6, C=3, K_max=3)
VOCAB = Vocab.for_world(WORLD)


def model(seed=0, std=0.02):
    return build_model(ModelConfig(VOCAB.size, d_model=32, n_layers=2, max_positions=48, init_std=std,
                                   grid=(6, 6)), seed=seed)


def batch(n=8, step=0):
    lays, imgs = data.train_pairs(WORLD, 0, step, n)
    return lays, imgs, pack_batch(lays, imgs, VOCAB)


def test_fresh_model_losses_near_uniform():
    _, _, tb = batch()
    with torch.no_grad():
        _, l_img, l_gnd = stage1_loss(model(), tb)
    lnV = math.log(VOCAB.size)
    assert abs(l_img.item() - lnV) < 0.1 * lnV
    assert abs(l_gnd.item() - lnV) < 0.1 * lnV


def test_loss_is_sum_of_segment_losses():
    m = model(std=0.3)
    _, _, tb = batch()
    with torch.no_grad():
        loss, l_img, l_gnd = stage1_loss(m, tb)
        logits = m.run_batch(tb)
        ref_img = ce_loss(logits, tb.tokens, tb.loss_mask & (tb.segment == IMG))
        ref_gnd = ce_loss(logits, tb.tokens, tb.loss_mask & (tb.segment == G2))
    assert torch.allclose(loss, ref_img + ref_gnd)
    assert torch.allclose(l_img, ref_img) and torch.allclose(l_gnd, ref_gnd)

    tb.loss_mask = tb.loss_mask & (tb.segment != G2)
    with torch.no_grad():
        loss2, _, none = stage1_loss(m, tb)
    assert none is None and torch.allclose(loss2, l_img)


def test_packed_and_unshared_losses_agree():
    m = model(std=0.3).double()
    lays, imgs, tb = batch(4)
    gen, gnd = unshared_batches(lays, imgs, VOCAB)
    with torch.no_grad():
        packed = stage1_loss(m, tb)
        split = unshared_loss(m, gen, gnd)
    for a, b in zip(packed, split):
        assert torch.allclose(a, b, atol=1e-10)


def test_zero_steps_leaves_params():
    m = model()
    before = {k: v.clone() for k, v in m.state_dict().items()}
    run_stage1(m, Stage1Config(steps=0), WORLD, VOCAB)
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_short_run_loss_decreases():
    m = model()
    log = MetricsLog()
    run_stage1(m, Stage1Config(steps=150, batch=16, lr=3e-3, log_every=1, eval_every=0), WORLD, VOCAB, log=log)
    losses = np.array([r["loss"] for r in log.rows])
    avg = np.convolve(losses, np.ones(50) / 50, mode="valid")
    assert avg[-1] < avg[0] - 0.3
    assert np.all(np.diff(avg[::25]) < 0)


def test_stage1_gradcheck_micro():
    res = check_stage1()
    assert res.passed, res.line()


def test_resumed_run_matches_uninterrupted():
    cfg = Stage1Config(steps=6, batch=4, lr=1e-3, log_every=1, eval_every=0)
    a = model()
    run_stage1(a, cfg, WORLD, VOCAB)

    from gridcycle.net import make_optimizer
    b = model()
    opt = make_optimizer(b, cfg.lr)
    nxt = run_stage1(b, cfg, WORLD, VOCAB, optimizer=opt, stop_after=3)
    assert nxt == 3
    run_stage1(b, cfg, WORLD, VOCAB, optimizer=opt, start=3)
    assert param_distance(a, b) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        Stage1Config(batch=0)
