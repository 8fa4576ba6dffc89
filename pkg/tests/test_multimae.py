import math

import numpy as np
import pytest
import torch

from pickmae import multimae as mm

TINY = mm.TokenGridConfig(input_size=16, grid=2, embed_dim=16, depth=1, heads=2,
                          mlp_ratio=2.0, dec_depth=1, dec_dim=8,
                          class_embed_dim=4, num_classes=9)


def _images(grid_cfg, batch=2, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    s = grid_cfg.input_size
    q = grid_cfg.semantic_downsample
    return {
        "rgb": torch.tensor(rng.random((batch, 3, s, s)), dtype=dtype),
        "depth": torch.tensor(rng.random((batch, 1, s, s)), dtype=dtype),
        "semantic": torch.tensor(
            rng.integers(0, grid_cfg.num_classes, (batch, s // q, s // q))),
    }


# ---------------------------------------------------------------------------
# positional embeddings, patchify, mask plans
# ---------------------------------------------------------------------------


def test_posembed_matches_formula():
    g, d = 4, 16
    pe = mm.sincos_posembed_2d(g, d)
    assert pe.shape == (g * g, d)
    quarter = d // 4
    for token, di in [(0, 0), (7, 3), (13, 2), (15, 1)]:
        r, c = divmod(token, g)
        omega = 1.0 / 10000.0 ** (di / quarter)
        # first half encodes the row coordinate, second half the column
        assert pe[token, di] == pytest.approx(math.sin(r * omega), abs=1e-15)
        assert pe[token, quarter + di] == pytest.approx(math.cos(r * omega), abs=1e-15)
        assert pe[token, 2 * quarter + di] == pytest.approx(math.sin(c * omega), abs=1e-15)
        assert pe[token, 3 * quarter + di] == pytest.approx(math.cos(c * omega), abs=1e-15)
    with pytest.raises(mm.ShapeError):
        mm.sincos_posembed_2d(4, 10)


def test_patchify_layout_and_inverse():
    img = torch.arange(2 * 2 * 4 * 4, dtype=torch.float64).reshape(2, 2, 4, 4)
    x = mm.patchify_tensor(img, 2)
    assert x.shape == (2, 4, 8)
    # token 1 = top-right patch, flattened channel-major (C, p, p)
    expected = img[0, :, 0:2, 2:4].reshape(-1)
    assert torch.equal(x[0, 1], expected)
    back = mm.unpatchify_tensor(x, 2, 2)
    assert torch.equal(back, img)
    with pytest.raises(mm.ShapeError):
        mm.patchify_tensor(img[:, :, :3], 2)


def test_largest_remainder_hand_case():
    counts = mm._largest_remainder(np.array([1.2, 2.5, 2.3]), 6, cap=4)
    assert counts == [1, 3, 2]
    # cap binds: everything routed to the other slots
    counts = mm._largest_remainder(np.array([5.9, 0.05, 0.05]), 6, cap=4)
    assert sum(counts) == 6 and max(counts) <= 4


def test_mask_plan_invariants():
    mods = ["rgb", "depth", "semantic"]
    tokens, budget = 16, 8
    plan = mm.sample_mask_plan(3, mods, tokens, budget)
    plan.check(tokens)
    assert sum(len(plan.visible[m]) for m in mods) == budget
    for m in mods:
        assert len(plan.visible[m]) + len(plan.masked[m]) == tokens
        assert set(plan.visible[m]).isdisjoint(plan.masked[m])
        assert list(plan.visible[m]) == sorted(plan.visible[m])
    # determinism
    again = mm.sample_mask_plan(3, mods, tokens, budget)
    assert again == plan
    assert mm.sample_mask_plan(4, mods, tokens, budget) != plan
    with pytest.raises(mm.ShapeError):
        mm.sample_mask_plan(0, mods, tokens, budget=3 * 16 + 1)


def test_mask_plan_equal_allocation_and_dirichlet_mean():
    mods = ["rgb", "depth", "semantic"]
    plan = mm.sample_mask_plan(0, mods, 16, 9, equal_allocation=True)
    assert [len(plan.visible[m]) for m in mods] == [3, 3, 3]
    # Dirichlet(1) budget shares average budget/M
    counts = np.zeros(3)
    n = 300
    for s in range(n):
        p = mm.sample_mask_plan(s, mods, 16, 12, alpha=1.0)
        counts += [len(p.visible[m]) for m in mods]
    assert np.allclose(counts / n, 4.0, atol=0.5)


# ---------------------------------------------------------------------------
# model forward / losses
# ---------------------------------------------------------------------------


def _model(grid_cfg=TINY, mods=("rgb", "depth", "semantic")):
    torch.manual_seed(0)
    return mm.MultiMae(grid_cfg, modalities=mods, dtype=torch.float64)


def test_encode_appends_global_token_last():
    cfg0 = mm.TokenGridConfig(input_size=16, grid=2, embed_dim=16, depth=0,
                              heads=2, dec_depth=1, dec_dim=8)
    model = _model(cfg0)
    tokens = torch.randn(2, 5, 16, dtype=torch.float64)
    out = model.encode(tokens)
    assert out.shape == (2, 6, 16)
    # depth 0 = identity encoder: inputs pass through, global token last
    assert torch.equal(out[:, :5], tokens)
    assert torch.equal(out[0, 5], model.global_token)
    with pytest.raises(mm.ShapeError):
        model.encode(tokens[:, :0])


def test_tokenize_shapes_and_errors():
    model = _model()
    toks = model.tokenize(_images(TINY))
    for m in ("rgb", "depth", "semantic"):
        assert toks[m].shape == (2, TINY.tokens, TINY.embed_dim)
    with pytest.raises(mm.ShapeError, match="no adapter"):
        model.tokenize({"thermal": torch.zeros(1, 1, 16, 16, dtype=torch.float64)})


def test_pretrain_losses_with_zeroed_decoders_match_hand_values():
    """Zero decoder parameters force zero predictions; each loss then has a
    closed form computed independently here."""
    model = _model()
    with torch.no_grad():
        for p in model.decoder.parameters():
            p.zero_()
    images = _images(TINY, seed=1)
    plan = mm.sample_mask_plan(5, list(model.modalities), TINY.tokens, 2)
    losses, decoded = model.forward_pretrain(images, plan)
    losses = {k: v.detach() for k, v in losses.items()}
    # semantic: uniform logits over 9 classes -> CE = ln 9
    assert float(losses["semantic"]) == pytest.approx(math.log(9.0), abs=1e-12)
    # depth: raw MSE against the target patches -> mean of target^2
    masked = list(plan.masked["depth"])
    tgt = mm.patchify_tensor(images["depth"], TINY.patch)[:, masked]
    assert float(losses["depth"]) == pytest.approx(float((tgt ** 2).mean()), abs=1e-12)
    # rgb: MSE against per-patch-normalized targets -> mean of normalized^2
    masked = list(plan.masked["rgb"])
    tgt = mm.patchify_tensor(images["rgb"], TINY.patch)[:, masked]
    norm = (tgt - tgt.mean(-1, keepdim=True)) / torch.sqrt(
        tgt.var(-1, unbiased=False, keepdim=True) + 1e-6)
    assert float(losses["rgb"]) == pytest.approx(float((norm ** 2).mean()), abs=1e-12)
    assert float(losses["total"]) == pytest.approx(
        float(losses["rgb"] + losses["depth"] + losses["semantic"]), abs=1e-12)
    for m in model.modalities:
        assert decoded[m].shape[1] == TINY.tokens


def test_mask_locality_exact():
    """Changing inputs at visible target positions only moves tokens the
    encoder sees, never the loss targets; perturbing *reconstruction targets*
    at visible positions must leave every loss bit-identical."""
    model = _model()
    images = _images(TINY, seed=2)
    plan = mm.sample_mask_plan(9, list(model.modalities), TINY.tokens, 6)

    perturbed = {m: v.clone() for m, v in images.items()}
    p, q = TINY.patch, TINY.sem_patch
    g = TINY.grid
    for m in model.modalities:
        pp = q if m == "semantic" else p
        for t in plan.visible[m]:
            r, c = divmod(t, g)
            if m == "semantic":
                block = perturbed[m][:, r * pp:(r + 1) * pp, c * pp:(c + 1) * pp]
                block += 1
                block %= TINY.num_classes
            else:
                perturbed[m][:, :, r * pp:(r + 1) * pp, c * pp:(c + 1) * pp] += 7.0

    # same predictions, targets perturbed only at visible positions: every
    # reconstruction loss must be bit-identical
    for m in model.modalities:
        toks = model.tokenize({m: images[m]})[m]
        vis = torch.as_tensor(plan.visible[m], dtype=torch.long)
        enc = model.encode(toks.index_select(1, vis))[:, :-1]
        pred = model.decoder[m](enc, plan.visible[m], TINY.tokens)
        masked = torch.as_tensor(plan.masked[m], dtype=torch.long)
        a = model._recon_loss(m, pred, images[m], masked).detach()
        b = model._recon_loss(m, pred, perturbed[m], masked).detach()
        assert float(a) == float(b)


def test_preview_contract():
    model = _model()
    images = _images(TINY, seed=3)
    plan = mm.sample_mask_plan(11, list(model.modalities), TINY.tokens, 2)
    out = model.reconstruct_preview(images, plan)
    g, p = TINY.grid, TINY.patch
    for m in ("rgb", "depth"):
        assert out[m].shape == images[m].shape
        for t in plan.visible[m]:
            r, c = divmod(t, g)
            assert torch.equal(
                out[m][:, :, r * p:(r + 1) * p, c * p:(c + 1) * p],
                images[m][:, :, r * p:(r + 1) * p, c * p:(c + 1) * p].to(out[m].dtype))
    sem = out["semantic"]
    assert sem.shape == images["semantic"].shape
    assert int(sem.max()) < TINY.num_classes
    q = TINY.sem_patch
    for t in plan.visible["semantic"]:
        r, c = divmod(t, g)
        assert torch.equal(
            sem[:, r * q:(r + 1) * q, c * q:(c + 1) * q].long(),
            images["semantic"][:, r * q:(r + 1) * q, c * q:(c + 1) * q].long())


def test_grid_config_validation():
    with pytest.raises(mm.ShapeError):
        mm.TokenGridConfig(input_size=15, grid=2)
    with pytest.raises(mm.ShapeError):
        mm.TokenGridConfig(input_size=16, grid=8)   # semantic plane 4 % 8
    with pytest.raises(mm.ShapeError):
        mm.TokenGridConfig(embed_dim=10, heads=4)


def test_encode_full_and_param_shapes(cfg):
    grid_cfg = mm.TokenGridConfig.from_config(cfg)
    torch.manual_seed(0)
    model = mm.MultiMae(grid_cfg, dtype=torch.float32)
    images = {m: v.to(torch.float32) if v.is_floating_point() else v
              for m, v in _images(grid_cfg, batch=1).items()}
    out = model.encode_full(images, order=("rgb", "depth", "semantic"))
    assert out.shape == (1, 3 * grid_cfg.tokens + 1, grid_cfg.embed_dim)
    shapes = model.param_shapes()
    assert shapes["global_token"] == (grid_cfg.embed_dim,)
    assert all(isinstance(v, tuple) for v in shapes.values())
