import numpy as np
import pytest

import oracles
from dgseg import tensor as T
from dgseg.errors import ConfigurationError, ContractError, DimensionError
from dgseg.losses import mim_loss, seg_loss
from dgseg.model import (BackboneConfig, CrossAttentionInjector, FFNInjector, GeoSemanticExtractor, ModelBundle,
                         ModelConfig, gse_strides, injector_forward)
from dgseg.nn import AdamW
from dgseg.tensor import Tensor

F64 = np.float64


def small(**kw):
    bb = kw.pop("backbone", {})
    return ModelConfig(backbone=BackboneConfig(**{"dim": 16, "heads": 2, "depth": 3, "taps": (0, 1, 2), **bb}),
                       gse_channels=(4, 8, 8), decoder_channels=8, aspp_channels=4, **kw)


def image(seed=0, n=None, size=32):
    rng = np.random.default_rng(seed)
    shape = (3, size, size) if n is None else (n, 3, size, size)
    return rng.random(shape).astype(np.float32)


def perturb(module, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for _, p in module.named_parameters():
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)


# -- config ------------------------------------------------------------------

@pytest.mark.parametrize("kw", [{"dim": 10, "heads": 3}, {"taps": (1, 0)}, {"taps": (0, 4)}, {"inject": (2, 2)},
                                {"image_size": (30, 32)}])
def test_backbone_config_rejects(kw):
    base = {"depth": 4}
    with pytest.raises(ConfigurationError):
        BackboneConfig(**{**base, **kw})


def test_model_config_rejects():
    with pytest.raises(ConfigurationError):
        ModelConfig(injector="mlp")
    with pytest.raises(ConfigurationError):
        ModelConfig(mim_decoder="aspp", backbone=BackboneConfig(taps=()))


def test_tokens_patch8():
    cfg = small(backbone={"patch": 8})
    m = ModelBundle(cfg)
    feats = m.backbone_forward(image(), inject=False)
    assert len(feats) == 3 and all(f.shape == (1, 16, 16) for f in feats)


def test_non_divisible_image():
    m = ModelBundle(small())
    with pytest.raises(ConfigurationError):
        m.backbone_forward(np.zeros((3, 30, 30), np.float32))


# -- trainable set -------------------------------------------------------------

def test_trainable_set_contract():
    m = ModelBundle(small())
    groups = m.groups()
    assert set(groups) == {"backbone", "gse", "injectors", "seg_decoder", "mim_decoder", "prompt"}
    expect = {n for g, names in groups.items() if g != "backbone" for n in names}
    assert m.trainable_names() == expect
    assert not any(p.requires_grad for _, p in m.backbone.named_parameters())
    m2 = ModelBundle(small(train_visual_prompt=False))
    assert m2.trainable_names() == expect - {"prompt.v"}


def test_backbone_bit_identical_after_step():
    m = ModelBundle(small())
    before = {n: p.data.copy() for n, p in m.backbone.named_parameters()}
    logits = m.seg_forward(image())
    seg_loss(logits, np.random.default_rng(0).integers(0, 3, (32, 32))).backward()
    (rec,) = m.mim_forward(image(1))
    mim_loss(rec, image(1)).backward()
    AdamW(m.named_parameters(), lr=0.1).step()
    for n, p in m.backbone.named_parameters():
        assert np.array_equal(p.data, before[n]) and p.grad is None


def test_component_init_streams_independent():
    a = ModelBundle(small(use_gse=True, mim_decoder="aspp"), seed=3)
    b = ModelBundle(small(use_gse=False, mim_decoder="none"), seed=3)
    for (n, p), (_, q) in zip(a.backbone.named_parameters(), b.backbone.named_parameters()):
        assert np.array_equal(p.data, q.data)
    for (n, p), (_, q) in zip(a.seg_decoder.named_parameters(), b.seg_decoder.named_parameters()):
        assert np.array_equal(p.data, q.data)


# -- GSE -----------------------------------------------------------------------

@pytest.mark.parametrize("patch,expect", [(4, [1, 2, 2, 1, 1]), (8, [1, 2, 2, 2, 1]), (16, [1, 2, 2, 2, 2]),
                                          (32, [1, 2, 2, 2, 4]), (6, [1, 2, 3, 1, 1])])
def test_gse_strides(patch, expect):
    s = gse_strides(patch)
    assert sorted(s[1:], reverse=True) == sorted(expect[1:], reverse=True) and np.prod(s) == patch and s[0] == 1


def test_gse_zero_input_zero_bias():
    g = GeoSemanticExtractor(3, 16, 4, np.random.default_rng(0))
    q = g(Tensor(np.zeros((1, 3, 32, 32), np.float32)))
    assert q.shape == (1, 64, 16) and np.all(q.data == 0)


@pytest.mark.parametrize("patch,size", [(4, 32), (8, 32), (4, 24)])
def test_gse_shape_and_count(patch, size):
    g = GeoSemanticExtractor(3, 16, patch, np.random.default_rng(0), channels=(4, 8, 8))
    q = g(Tensor(np.random.default_rng(1).random((2, 3, size, size)).astype(np.float32)))
    assert q.shape == (2, (size // patch) ** 2, 16)
    plan = [3, 4, 8, 8, 16, 16]
    closed = sum(9 * a * b + b for a, b in zip(plan, plan[1:]))
    assert g.num_parameters() == closed == GeoSemanticExtractor.expected_count(plan)


# -- injectors -----------------------------------------------------------------

def test_injector_zero_init_and_single_token():
    rng = np.random.default_rng(0)
    inj = CrossAttentionInjector(8, 2, rng, dtype=F64)
    q = Tensor(rng.standard_normal((4, 8)), dtype=F64)
    feat = Tensor(rng.standard_normal((1, 8)), dtype=F64)
    assert np.all(injector_forward(q, feat, inj).data == 0)
    pre = inj.attn.attend(q, feat, feat).data
    vrow = inj.attn.v_proj(feat).data
    np.testing.assert_allclose(pre, np.repeat(vrow, 4, axis=0), atol=1e-12)


def test_injector_vs_loop_oracle():
    rng = np.random.default_rng(2)
    inj = CrossAttentionInjector(8, 2, rng, dtype=F64)
    perturb(inj, 3)
    a = inj.attn
    q, feat = rng.standard_normal((4, 8)), rng.standard_normal((6, 8))
    got = injector_forward(Tensor(q, dtype=F64), Tensor(feat, dtype=F64), inj).data
    p = lambda lin: (lin.weight.data, lin.bias.data)  # noqa: E731
    ref = oracles.attention(q, feat, feat, *p(a.q_proj), *p(a.k_proj), *p(a.v_proj), *p(a.out_proj), a.heads)
    np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)


def test_injector_width_mismatch():
    inj = CrossAttentionInjector(8, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        inj(Tensor(np.zeros((4, 6))), Tensor(np.zeros((5, 8))))


def test_ffn_variant():
    rng = np.random.default_rng(0)
    ffn = FFNInjector(8, rng, dtype=F64)
    feat = Tensor(rng.standard_normal((5, 8)), dtype=F64)
    assert np.all(ffn(Tensor(rng.standard_normal((5, 8))), feat).data == 0)
    perturb(ffn, 1)
    a = ffn(Tensor(rng.standard_normal((5, 8)), dtype=F64), feat).data
    b = ffn(Tensor(rng.standard_normal((5, 8)), dtype=F64), feat).data
    assert np.array_equal(a, b)


def test_dispatch_cross_attention_bit_exact():
    m = ModelBundle(small(injector="cross_attention"), seed=4)
    perturb(m.injectors[0], 5)
    x = Tensor(image()[None])
    q = m.gse(x)
    feat = m.backbone_forward(x, inject=False)[0]
    assert np.array_equal(injector_forward(q, feat, m.injectors[0]).data, m.injectors[0].attn(q, feat, feat).data)


# -- segmentation flow ----------------------------------------------------------

@pytest.mark.parametrize("injector", ["cross_attention", "ffn"])
def test_identity_at_init(injector):
    m = ModelBundle(small(injector=injector), seed=1)
    x = image(3)
    with_inj = m.seg_forward(x).data
    feats_on = [f.data for f in m.backbone_forward(x, inject=True)]
    gse, m.gse = m.gse, None
    without = m.seg_forward(x).data
    m.gse = gse
    feats_off = [f.data for f in m.backbone_forward(x, inject=False)]
    assert np.array_equal(with_inj, without)
    for a, b in zip(feats_on, feats_off):
        assert np.max(np.abs(a - b)) == 0


def test_seg_shapes_and_gate():
    m = ModelBundle(small(num_classes=5))
    assert m.seg_forward(image()).shape == (5, 32, 32)
    assert m.seg_forward(image(n=2)).shape == (2, 5, 32, 32)
    poisoned = np.full((3, 32, 32), np.nan, np.float32)
    assert np.array_equal(m.seg_forward(image(), 0, poisoned).data, m.seg_forward(image()).data)
    with pytest.raises(ContractError):
        m.seg_forward(image(), 1)
    assert np.array_equal(m.seg_forward(image(), 1, image(9)).data, m.seg_forward(image(9)).data)


def _warm(m, steps=1):
    opt = AdamW(m.named_parameters(), lr=1e-2)
    lab = np.random.default_rng(0).integers(0, 3, (32, 32))
    for _ in range(steps):
        seg_loss(m.seg_forward(image()), lab).backward()
        opt.step()
        opt.zero_grad()


def test_injected_path_live_after_warmup():
    m = ModelBundle(small(), seed=2)
    _warm(m)
    base = m.seg_forward(image(1)).data
    perturb(m.injectors[-1], 0, scale=0.0)
    assert np.array_equal(m.seg_forward(image(1)).data, base)
    perturb(m.injectors[-1], 0, scale=0.1)
    assert not np.allclose(m.seg_forward(image(1)).data, base)


@pytest.mark.parametrize("seed", range(5))
def test_gradient_flow_after_warmup(seed):
    m = ModelBundle(small(), seed=seed)
    _warm(m)
    m.zero_grad()
    seg_loss(m.seg_forward(image(seed + 10)), np.random.default_rng(seed).integers(0, 3, (32, 32))).backward()
    for group in (m.gse, m.injectors[0], m.seg_decoder):
        assert any(p.grad is not None and np.any(p.grad != 0) for _, p in group.named_parameters())


# -- reconstruction flow ----------------------------------------------------------

@pytest.mark.parametrize("decoder", ["aspp", "linear"])
def test_mim_shapes_and_branches(decoder):
    m = ModelBundle(small(mim_decoder=decoder))
    a, b = m.mim_forward(image(0), image(1))
    assert a.shape == b.shape == (3, 32, 32)
    (c,) = m.mim_forward(image(n=2))
    assert c.shape == (2, 3, 32, 32)
    if decoder == "aspp":
        assert len(m.mim_decoder.branches) == len(m.cfg.backbone.taps)
        assert [br.dilation for br in m.mim_decoder.branches] == [1, 2, 4]


@pytest.mark.parametrize("decoder", ["aspp", "linear"])
def test_mim_ignores_gse_and_injectors(decoder):
    m = ModelBundle(small(mim_decoder=decoder))
    _warm(m, 2)
    x = image(4)
    (a,) = m.mim_forward(x)
    perturb(m.gse, 1)
    perturb(m.injectors[0], 2)
    (b,) = m.mim_forward(x)
    assert np.max(np.abs(a.data - b.data)) == 0
    m.zero_grad()
    (rec,) = m.mim_forward(x)
    mim_loss(rec, x).backward()
    for group in (m.gse, *m.injectors):
        assert all(p.grad is None or not np.any(p.grad) for _, p in group.named_parameters())


def test_mim_without_decoder():
    m = ModelBundle(small(mim_decoder="none"))
    with pytest.raises(ConfigurationError):
        m.mim_forward(image())


def test_forward_shapes_matrix():
    for patch in (4, 8):
        for depth, taps in ((2, (1,)), (3, (0, 2))):
            cfg = small(backbone={"patch": patch, "depth": depth, "taps": taps})
            m = ModelBundle(cfg)
            feats = m.backbone_forward(image())
            assert len(feats) == len(taps)
            assert all(f.shape == (1, (32 // patch) ** 2, 16) for f in feats)
            assert m.seg_forward(image()).shape == (3, 32, 32)
            assert m.mim_forward(image())[0].shape == (3, 32, 32)
