import numpy as np
import pytest
import torch

from gridcycle.djo import (AnnealSchedule, DjoConfig, anneal, djo_loss, gumbel_noise, gumbel_st_sample,
                           l2i_loss, loop_loss, run_stage2)
from gridcycle.gradcheck import MICRO_VOCAB, MICRO_WORLD, check_loop, micro_images, micro_layouts, micro_model
from gridcycle.net import ModelConfig, TensorBatch, build_model, make_optimizer, token_nll
from gridcycle.pretrain import pack_batch, stage1_loss
from gridcycle.seqcodec import G2, collate, pack_grounding


def test_anneal_examples():
    s = AnnealSchedule(1.0, 0.999, 0.1)
    assert anneal(0, s) == 1.0
    assert anneal(100, s) == pytest.approx(0.999 ** 100, abs=1e-12)
    assert anneal(100, s) == pytest.approx(0.904792, abs=1e-6)
    assert anneal(10**6, s) == 0.1
    with pytest.raises(ValueError):
        anneal(-1, s)
    with pytest.raises(ValueError):
        AnnealSchedule(alpha=1.0)


def test_config_rejects_nonpositive_lambda():
    with pytest.raises(ValueError):
        DjoConfig(lam=0.0)
    assert DjoConfig(schedule={"tau0": 2.0, "alpha": 0.5, "tau_min": 0.5}).schedule.tau0 == 2.0


def test_saturated_logits_give_one_hot():
    z = torch.zeros(1, 5, dtype=torch.float64)
    z[0, 2] = 50.0
    soft, hard, _ = gumbel_st_sample(z, 0.1, noise=torch.zeros_like(z))
    assert (soft - hard).abs().max().item() < 1e-9


def test_uniform_argmax_frequencies():
    n, V = 100_000, 4
    g = torch.Generator().manual_seed(0)
    _, hard, _ = gumbel_st_sample(torch.zeros(n, V, dtype=torch.float64), 1.0, generator=g)
    counts = hard.sum(0).numpy()
    sigma = np.sqrt(n * 0.25 * 0.75)
    assert np.all(np.abs(counts - n / V) < 3 * sigma)


def test_straight_through_identity_and_gradient():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(6, 5, dtype=torch.float64, generator=g, requires_grad=True)
    w = torch.randn(5, 3, dtype=torch.float64, generator=g)
    noise = gumbel_noise(z.shape, g, torch.float64)
    soft, hard, st = gumbel_st_sample(z, 0.7, noise=noise)
    assert torch.equal(st, hard)
    f_st = ((st @ w) ** 2).sum()
    assert torch.equal(f_st, ((hard @ w) ** 2).sum())
    f_st.backward()
    g_st = z.grad.clone()
    # the gradient equals that of the same function evaluated at the hard value but routed via soft
    z2 = z.detach().clone().requires_grad_(True)
    s2 = ((z2 + noise) / 0.7).softmax(-1)
    (((s2 - s2.detach() + hard) @ w) ** 2).sum().backward()
    assert torch.allclose(g_st, z2.grad)


def test_soft_path_gradient_fd():
    g = torch.Generator().manual_seed(2)
    z0 = torch.randn(3, 4, dtype=torch.float64, generator=g)
    w = torch.randn(4, dtype=torch.float64, generator=g)
    noise = gumbel_noise(z0.shape, g, torch.float64)

    def f(z):
        return (gumbel_st_sample(z, 1.0, noise=noise)[0] @ w).pow(3).sum()

    z = z0.clone().requires_grad_(True)
    f(z).backward()
    h = 1e-5
    for i in range(3):
        for j in range(4):
            zp, zm = z0.clone(), z0.clone()
            zp[i, j] += h
            zm[i, j] -= h
            num = (f(zp) - f(zm)).item() / (2 * h)
            a = z.grad[i, j].item()
            assert abs(a - num) / max(abs(a), abs(num), 1e-9) < 1e-5


def test_loss_components_and_lambda():
    m = micro_model(0)
    lays, imgs = micro_layouts(), micro_images()
    noise = gumbel_noise((2, MICRO_WORLD.n_cells, MICRO_VOCAB.v_img), torch.Generator().manual_seed(0),
                         torch.float64)
    cfg = DjoConfig(lam=1.0)
    J, parts = djo_loss(m, lays, imgs, MICRO_VOCAB, MICRO_WORLD, 0, cfg, noise=noise)
    assert J.item() == pytest.approx(parts["L_L2I"] + parts["L_loop"], rel=1e-12)
    J0, parts0 = djo_loss(m, lays, imgs, MICRO_VOCAB, MICRO_WORLD, 0, cfg, noise=noise, lam=0.0)
    assert J0.item() == parts0["L_L2I"]
    Jl, pl = djo_loss(m, lays, imgs, MICRO_VOCAB, MICRO_WORLD, 0, DjoConfig(loop_only=True, lam=2.0), noise=noise)
    assert Jl.item() == pytest.approx(2.0 * pl["L_loop"], rel=1e-12)


def test_loop_gradcheck_micro():
    res = check_loop()
    assert res.passed, res.line()


def test_gradient_reaches_generator_through_every_cell():
    """The loop loss depends on the generator: the layout tokens feeding generation get gradient."""
    m = micro_model(1)
    lays = micro_layouts()
    noise = gumbel_noise((2, MICRO_WORLD.n_cells, MICRO_VOCAB.v_img), torch.Generator().manual_seed(3),
                         torch.float64)
    loop_loss(m, lays, MICRO_VOCAB, MICRO_WORLD, 0.5, noise=noise).backward()
    assert m.tok_emb.weight.grad[MICRO_VOCAB.coord_lo:MICRO_VOCAB.img_lo].abs().sum() > 0


def trained_micro(steps=400):
    """A micro model whose generation and grounding are both exact on the two micro layouts."""
    cfg = ModelConfig(MICRO_VOCAB.size, d_model=32, n_layers=2, n_heads=4, max_positions=12, init_std=0.1)
    m = build_model(cfg, seed=0, dtype=torch.float64)
    tb = pack_batch(micro_layouts(), micro_images(), MICRO_VOCAB)
    opt = make_optimizer(m, 1e-2, weight_decay=0.0)
    for _ in range(steps):
        loss = stage1_loss(m, tb)[0]
        opt.zero_grad()
        loss.backward()
        opt.step()
    return m


def test_loop_loss_near_zero_at_consistent_model():
    m = trained_micro()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        assert l2i_loss(m, micro_layouts(), micro_images(), MICRO_VOCAB, MICRO_WORLD).item() < 1e-3
        assert loop_loss(m, micro_layouts(), MICRO_VOCAB, MICRO_WORLD, 0.1, generator=g).item() < 0.01


def test_loop_loss_prefers_aligned_targets():
    m = trained_micro()
    lays = micro_layouts()
    g = torch.Generator().manual_seed(0)
    noise = gumbel_noise((2, MICRO_WORLD.n_cells, MICRO_VOCAB.v_img), g, torch.float64)
    with torch.no_grad():
        aligned = loop_loss(m, lays, MICRO_VOCAB, MICRO_WORLD, 0.1, noise=noise)
        _, imgs = loop_loss(m, lays, MICRO_VOCAB, MICRO_WORLD, 0.1, noise=noise, return_images=True)
        # ground each generated image against the other layout's tokens
        seqs = [pack_grounding(imgs[i].reshape(2, 2).numpy(), MICRO_VOCAB, lays[1 - i]) for i in range(2)]
        tb = TensorBatch.from_batch(collate(seqs))
        sel = ((tb.segment == G2) & (tb.positions > 0))[:, 1:]
        shuffled = (token_nll(m.run_batch(tb), tb.tokens) * sel).sum() / sel.sum()
    assert shuffled.item() > aligned.item()


def test_zero_step_stage2_is_identity():
    m = micro_model(0)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    run_stage2(m, DjoConfig(steps=0), MICRO_WORLD, MICRO_VOCAB)
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())
