import itertools

import numpy as np
import pytest

from mfcl.autodiff import Tensor, no_grad
from mfcl.autodiff import functional as F
from mfcl.generator import (BPFA, SDFF, Branch, Generator, GeneratorConfig, MaskedFeature, SKConv,
                            Stream, bpa_range, bpa_spatial, contextual_attention, min_pool_mask,
                            partial_conv)
from mfcl.imaging import generate_center_mask, generate_irregular_mask

from oracles import (bpa_range_loops, bpa_spatial_loops, conv2d_loops, contextual_attention_loops,
                     partial_conv_loops)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def conv1x1(x, conv):
    return np.einsum("oc,nchw->nohw", conv.weight.data[:, :, 0, 0], x) + conv.bias.data[None, :, None, None]


@pytest.fixture(scope="module")
def gen64():
    return Generator(GeneratorConfig(image_size=64, base_channels=16), seed=0)


@pytest.fixture(scope="module")
def batch64():
    rng = np.random.default_rng(7)
    img = rng.uniform(size=(2, 3, 64, 64))
    mask = np.stack([generate_center_mask(64, 64)[None], generate_irregular_mask(64, 64, "20-30", 1)[None]])
    return img, mask


# -- encoder / reorganization ---------------------------------------------------


def test_encoder_shapes(gen64, batch64):
    img, mask = batch64
    with no_grad():
        feats = gen64.encode(Tensor(img), mask)
    b = 16
    expected = [(b, 32, 32), (2 * b, 16, 16)] + [(4 * b, 8, 8)] * 4
    assert [f.shape[1:] for f in feats] == expected


def test_encoder_rejects_bad_size(gen64):
    with pytest.raises(ValueError, match="divisible by 8"):
        gen64.encode(Tensor(np.zeros((1, 3, 60, 60))), np.ones((1, 1, 60, 60)))


def test_encoder_zero_input_gives_zero_features(gen64):
    # zero image with an all-hole mask makes every input channel zero; biases start at zero
    with no_grad():
        feats = gen64.encode(Tensor(np.zeros((1, 3, 64, 64))), np.zeros((1, 1, 64, 64)))
    assert max(np.abs(f.data).max() for f in feats) == 0.0


def test_encoder_hole_pixels_are_ignored(gen64, batch64):
    img, mask = batch64
    noisy = img + (1 - mask) * 5.0
    with no_grad():
        a = gen64.encode(Tensor(img), mask)
        b = gen64.encode(Tensor(noisy), mask)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa.data, fb.data)


def test_forward_deterministic(gen64, batch64):
    img, mask = batch64
    with no_grad():
        a = gen64(img, mask).raw.data
        b = gen64(img, mask).raw.data
    np.testing.assert_array_equal(a, b)


def test_reorganize_shapes_and_layer1_probe(gen64, batch64):
    img, mask = batch64
    with no_grad():
        feats = gen64.encode(Tensor(img), mask)
        te, st = gen64.reorganize(feats)
        probe = [Tensor(np.zeros_like(feats[0].data))] + feats[1:]
        te2, st2 = gen64.reorganize(probe)
    assert te.shape == st.shape == (2, 64, 16, 16)
    assert np.abs(te.data - te2.data).max() > 1e-6
    np.testing.assert_array_equal(st.data, st2.data)


def test_reorganize_constant_features_give_constant_output(gen64):
    feats = [Tensor(np.full(s, 0.3)) for s in [(1, 16, 32, 32), (1, 32, 16, 16)] + [(1, 64, 8, 8)] * 4]
    with no_grad():
        te, st = gen64.reorganize(feats)
    for t in (te, st):
        spread = t.data.max(axis=(2, 3)) - t.data.min(axis=(2, 3))
        assert spread.max() < 1e-12


# -- partial convolution ----------------------------------------------------------


@pytest.mark.parametrize("stride, pad", [(1, 1), (1, 0), (2, 1)])
def test_partial_conv_matches_loops(rng, stride, pad):
    x = rng.normal(size=(2, 3, 6, 6))
    m = (rng.uniform(size=(2, 1, 6, 6)) > 0.5).astype(float)
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = partial_conv(MaskedFeature(Tensor(x), m), Tensor(w), Tensor(b), stride, pad)
    ref, ref_m = partial_conv_loops(x, m, w, b, stride, pad)
    assert np.abs(out.feature.data - ref).max() <= 1e-10
    np.testing.assert_array_equal(out.validity, ref_m)


def test_partial_conv_all_valid_equals_conv(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = partial_conv(MaskedFeature(Tensor(x), np.ones((2, 1, 6, 6))), Tensor(w), Tensor(b), 1, 1)
    assert np.abs(out.feature.data - conv2d_loops(x, w, b, 1, 1)).max() <= 1e-12


def test_partial_conv_three_of_nine_valid(rng):
    x = rng.normal(size=(1, 1, 3, 3))
    m = np.zeros((1, 1, 3, 3))
    m[0, 0, 0, :] = 1.0
    w = rng.normal(size=(1, 1, 3, 3))
    out = partial_conv(MaskedFeature(Tensor(x), m), Tensor(w), Tensor(np.array([0.25])), 1, 0)
    expected = (x[0, 0, 0] * w[0, 0, 0]).sum() * 9 / 3 + 0.25
    assert out.feature.data[0, 0, 0, 0] == pytest.approx(expected, abs=1e-12)
    assert out.validity[0, 0, 0, 0] == 1.0


def test_partial_conv_all_invalid_window_gives_bias(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    w = rng.normal(size=(3, 2, 3, 3))
    b = np.array([0.5, -1.0, 2.0])
    out = partial_conv(MaskedFeature(Tensor(x), np.zeros((1, 1, 3, 3))), Tensor(w), Tensor(b), 1, 0)
    np.testing.assert_array_equal(out.feature.data[0, :, 0, 0], b)
    assert out.validity[0, 0, 0, 0] == 0.0


def test_partial_conv_validity_is_monotone(rng):
    m = (rng.uniform(size=(1, 1, 12, 12)) > 0.7).astype(float)
    mf = MaskedFeature(Tensor(rng.normal(size=(1, 2, 12, 12))), m)
    w = Tensor(rng.normal(size=(2, 2, 3, 3)))
    for _ in range(4):
        nxt = partial_conv(mf, w, None, 1, 1)
        assert np.all(nxt.validity >= mf.validity)
        mf = nxt
    assert mf.validity.all()


def test_masked_feature_shape_check():
    with pytest.raises(ValueError, match="disagree"):
        MaskedFeature(Tensor(np.zeros((1, 1, 4, 4))), np.ones((1, 1, 3, 3)))


# -- branches ---------------------------------------------------------------------


def test_branch_shape_and_pc_degeneration(rng):
    branch = Branch(np.random.default_rng(1), 8, 4)
    x = Tensor(rng.normal(size=(2, 8, 8, 8)))
    ones = np.ones((2, 1, 8, 8))
    with no_grad():
        on = branch(x, ones, use_pc=True)
        off = branch(x, ones, use_pc=False)
    assert on.shape == x.shape
    assert np.abs(on.data - off.data).max() <= 1e-12


def test_branch_pc_matters_with_holes(rng):
    branch = Branch(np.random.default_rng(1), 4, 4)
    x = Tensor(rng.normal(size=(1, 4, 8, 8)))
    m = np.ones((1, 1, 8, 8))
    m[..., 2:6, 2:6] = 0
    with no_grad():
        assert np.abs(branch(x, m, True).data - branch(x, m, False).data).max() > 1e-3


@pytest.mark.parametrize("k, rf", [(3, 11), (5, 21), (7, 31)])
def test_stream_receptive_field(k, rf):
    s = Stream(np.random.default_rng(0), 2, 2, k)
    assert s.receptive_field == rf
    # empirical: response to a centre impulse spreads exactly rf pixels with all-positive kernels
    for layer in s.layers:
        layer.weight.data = np.abs(layer.weight.data)
    x = np.zeros((1, 2, 41, 41))
    x[..., 20, 20] = 1.0
    with no_grad():
        y = s(MaskedFeature(Tensor(x), np.ones((1, 1, 41, 41))), use_pc=False).feature.data
    cols = np.where(np.abs(y).sum(axis=(0, 1, 2)) > 0)[0]
    assert cols[-1] - cols[0] + 1 == rf


def test_min_pool_mask():
    m = np.ones((1, 1, 8, 8))
    m[0, 0, 3, 5] = 0
    pooled = min_pool_mask(m, 4)
    assert pooled.shape == (1, 1, 2, 2)
    assert pooled.tolist() == [[[[1.0, 0.0], [1.0, 1.0]]]]


def test_branch_to_image(gen64, rng):
    feat = Tensor(np.zeros((1, 64, 16, 16)))
    with no_grad():
        img = gen64.branch_to_image(feat, "structure")
    assert img.shape == (1, 3, 64, 64)
    assert np.abs(img.data).max() == 0.0


def test_branch_to_image_gradients_reach_branch(rng):
    gen = Generator(GeneratorConfig(image_size=16, base_channels=2), seed=0)
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))
    out = gen.branch_to_image(gen.branch_fill(x, np.ones((1, 1, 4, 4)), "texture"), "texture")
    F.sum(out * out).backward()
    grads = [p.grad for p in gen.branch_te.parameters()]
    assert all(g is not None and np.abs(g).max() > 0 for g in grads)


# -- SDFF ---------------------------------------------------------------------------


@pytest.fixture
def sdff():
    return SDFF(np.random.default_rng(3), 4, 2)


def gate_oracle(gate, cst, cte):
    cat = np.concatenate([cst, cte], axis=1)
    h = conv2d_loops(cat, gate.conv.weight.data, gate.conv.bias.data, 1, 1)
    pooled = h.mean(axis=(2, 3), keepdims=True)
    s = np.maximum(conv1x1(pooled, gate.se.reduce), 0)
    scale = sigmoid(conv1x1(s, gate.se.expand))
    return sigmoid(h * scale)


def test_sdff_gate_range_and_oracle(sdff, rng):
    cst = rng.normal(size=(2, 4, 5, 5))
    cte = rng.normal(size=(2, 4, 5, 5))
    for which, gate in (("te", sdff.gate_te), ("st", sdff.gate_st)):
        g = sdff.gate(Tensor(cst), Tensor(cte), which).data
        assert np.all((g > 0) & (g < 1))
        assert np.abs(g - gate_oracle(gate, cst, cte)).max() <= 1e-10


def test_sdff_gate_half_on_zero_inputs(sdff):
    z = Tensor(np.zeros((1, 4, 3, 3)))
    np.testing.assert_array_equal(sdff.gate(z, z, "st").data, 0.5)
    with pytest.raises(ValueError):
        sdff.gate(z, z, "xx")


def test_sdff_exchange_formula(sdff, rng):
    sdff.alpha.data[...] = 0.7
    sdff.beta.data[...] = -1.3
    sdff.gamma.data[...] = 0.4
    cst = rng.normal(size=(1, 4, 5, 5))
    cte = rng.normal(size=(1, 4, 5, 5))
    new_cst, new_cte = sdff.exchange(Tensor(cst), Tensor(cte))
    g_te = gate_oracle(sdff.gate_te, cst, cte)
    g_st = gate_oracle(sdff.gate_st, cst, cte)
    assert np.abs(new_cte.data - (0.7 * (-1.3 * g_te * cte) * cst + cte)).max() <= 1e-10
    assert np.abs(new_cst.data - (0.4 * g_st * cte + cst)).max() <= 1e-10


def test_sdff_alpha_gamma_zero_identities(sdff, rng):
    sdff.alpha.data[...] = 0.0
    sdff.gamma.data[...] = 0.0
    cst = Tensor(rng.normal(size=(1, 4, 5, 5)))
    cte = Tensor(rng.normal(size=(1, 4, 5, 5)))
    new_cst, new_cte = sdff.exchange(cst, cte)
    np.testing.assert_array_equal(new_cte.data, cte.data)
    np.testing.assert_array_equal(new_cst.data, cst.data)


def test_sdff_zero_texture_stays_zero(sdff, rng):
    _, new_cte = sdff.exchange(Tensor(rng.normal(size=(1, 4, 5, 5))), Tensor(np.zeros((1, 4, 5, 5))))
    assert np.abs(new_cte.data).max() == 0.0


def test_sdff_zero_scalars_equal_disabled_path(sdff, rng):
    for p in (sdff.alpha, sdff.beta, sdff.gamma):
        p.data[...] = 0.0
    cst = Tensor(rng.normal(size=(2, 4, 5, 5)))
    cte = Tensor(rng.normal(size=(2, 4, 5, 5)))
    assert np.abs(sdff(cst, cte, True).data - sdff(cst, cte, False).data).max() <= 1e-12


# -- SK conv -------------------------------------------------------------------------


def test_sk_attention_sums_to_one(rng):
    sk = SKConv(np.random.default_rng(0), 6, 2)
    att = sk.attention(Tensor(rng.normal(size=(3, 6, 4, 4)))).data
    assert att.shape == (3, 2, 6, 1, 1)
    assert np.abs(att.sum(axis=1) - 1).max() <= 1e-12


def test_sk_identical_branches(rng):
    sk = SKConv(np.random.default_rng(0), 4, 2)
    w5 = np.zeros_like(sk.branch5.weight.data)
    w5[:, :, 1:4, 1:4] = sk.branch3.weight.data
    sk.branch5.weight.data = w5
    x = Tensor(rng.normal(size=(1, 4, 6, 6)))
    out = sk(x).data
    b3 = np.maximum(conv2d_loops(x.data, sk.branch3.weight.data, sk.branch3.bias.data, 1, 1), 0)
    assert np.abs(out - b3).max() <= 1e-12


def test_sk_composition_oracle(rng):
    sk = SKConv(np.random.default_rng(2), 4, 2)
    x = rng.normal(size=(2, 4, 5, 5))
    b3 = np.maximum(conv2d_loops(x, sk.branch3.weight.data, sk.branch3.bias.data, 1, 1), 0)
    b5 = np.maximum(conv2d_loops(x, sk.branch5.weight.data, sk.branch5.bias.data, 1, 2), 0)
    z = np.maximum(conv1x1((b3 + b5).mean(axis=(2, 3), keepdims=True), sk.squeeze), 0)
    l3, l5 = conv1x1(z, sk.select3), conv1x1(z, sk.select5)
    a = np.exp(l3) / (np.exp(l3) + np.exp(l5))
    expected = a * b3 + (1 - a) * b5
    assert np.abs(sk(Tensor(x)).data - expected).max() <= 1e-10


# -- contextual attention and bilateral propagation ---------------------------------


def test_ca_single_patch_is_identity(rng):
    x = rng.normal(size=(1, 3, 3, 3))
    np.testing.assert_allclose(contextual_attention(Tensor(x)).data, x, atol=1e-15)


def test_ca_two_identical_patches(rng):
    p = rng.normal(size=(1, 2, 3, 3))
    x = np.concatenate([p, p], axis=3)
    np.testing.assert_allclose(contextual_attention(Tensor(x)).data, x, atol=1e-14)


@pytest.mark.parametrize("shape", [(1, 4, 6, 6), (2, 3, 6, 3), (1, 1, 3, 6)])
def test_ca_matches_loops(rng, shape):
    x = rng.normal(size=shape)
    assert np.abs(contextual_attention(Tensor(x)).data - contextual_attention_loops(x)).max() <= 1e-10


def test_ca_zero_patch_is_finite(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    x[..., :3, :3] = 0
    out = contextual_attention(Tensor(x)).data
    assert np.isfinite(out).all()
    assert np.abs(out - contextual_attention_loops(x)).max() <= 1e-10


def test_ca_rejects_non_divisible():
    with pytest.raises(ValueError, match="divisible"):
        contextual_attention(Tensor(np.zeros((1, 1, 4, 6))))


def test_bpa_range_constant_and_zero():
    c = np.full((1, 3, 5, 5), 0.8)
    np.testing.assert_allclose(bpa_range(Tensor(c)).data, c, atol=1e-14)
    assert np.abs(bpa_range(Tensor(np.zeros((1, 2, 4, 4)))).data).max() == 0.0


@pytest.mark.parametrize("shape", [(1, 3, 5, 5), (2, 4, 6, 4), (1, 1, 2, 6)])
def test_bpa_range_matches_loops(rng, shape):
    x = rng.normal(size=shape)
    assert np.abs(bpa_range(Tensor(x)).data - bpa_range_loops(x)).max() <= 1e-10


def test_bpa_spatial_constant():
    c = np.full((1, 2, 6, 6), -0.4)
    np.testing.assert_allclose(bpa_spatial(Tensor(c), 2.0).data, c, atol=1e-14)


def test_bpa_spatial_tiny_sigma_is_identity(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    np.testing.assert_allclose(bpa_spatial(Tensor(x), 1e-3).data, x, atol=1e-12)


@pytest.mark.parametrize("shape, sigma", [((1, 2, 6, 6), 2.0), ((1, 4, 5, 3), 0.7)])
def test_bpa_spatial_matches_loops(rng, shape, sigma):
    x = rng.normal(size=shape)
    assert np.abs(bpa_spatial(Tensor(x), sigma).data - bpa_spatial_loops(x, sigma)).max() <= 1e-10


def test_bpfa_combine_is_linear(rng):
    bpfa = BPFA(np.random.default_rng(0), 4, GeneratorConfig(image_size=16, base_channels=1))
    a = rng.normal(size=(1, 4, 4, 4))
    b = rng.normal(size=(1, 4, 4, 4))
    one = bpfa.combine(Tensor(a), Tensor(b)).data
    two = bpfa.combine(Tensor(2 * a), Tensor(2 * b)).data
    np.testing.assert_allclose(two, 2 * one, atol=1e-12)
    zero = bpfa.aggregate(Tensor(np.zeros((1, 4, 4, 4))), Tensor(np.zeros((1, 4, 4, 4))))
    assert zero.shape == (1, 4, 4, 4) and np.abs(zero.data).max() == 0.0


def test_bpfa_attend_resizes_non_divisible(rng):
    bpfa = BPFA(np.random.default_rng(0), 2, GeneratorConfig(image_size=16, base_channels=1))
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    assert bpfa.attend(x).shape == (1, 2, 4, 4)
    y = Tensor(rng.normal(size=(1, 2, 6, 6)))
    np.testing.assert_array_equal(bpfa.attend(y).data, contextual_attention(y).data)


# -- decoder and ablations ------------------------------------------------------------


def test_decode_composite_and_range(gen64, batch64):
    img, mask = batch64
    with no_grad():
        out = gen64(img, mask)
    raw, comp = out.raw.data, out.composited.data
    assert raw.shape == comp.shape == img.shape
    assert np.all((raw > 0) & (raw < 1))
    valid = np.broadcast_to(mask, img.shape) == 1
    np.testing.assert_array_equal(comp[valid], img[valid])
    np.testing.assert_array_equal(comp[~valid], raw[~valid])
    assert out.branch_structure.shape == out.branch_texture.shape == img.shape


FLAG_NAMES = ("enable_sdff", "enable_ca", "enable_sknet", "enable_bpfa", "enable_pc")


@pytest.mark.parametrize("flags", list(itertools.product([True, False], repeat=5)))
def test_every_ablation_combination_is_finite(flags):
    cfg = GeneratorConfig(image_size=16, base_channels=2, **dict(zip(FLAG_NAMES, flags)))
    gen = Generator(cfg, seed=1)
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(1, 3, 16, 16))
    mask = generate_center_mask(16, 16)[None, None]
    out = gen(img, mask)
    loss = F.l1_norm(out.raw, Tensor(img)) + F.l1_norm(out.branch_texture, Tensor(img))
    assert out.raw.shape == (1, 3, 16, 16)
    assert np.isfinite(loss.item())
    loss.backward()
    assert all(np.isfinite(p.grad).all() for p in gen.parameters() if p.grad is not None)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible by 8"):
        GeneratorConfig(image_size=60)
    cfg = GeneratorConfig(image_size=64)
    assert cfg.bottleneck_size == 16 and cfg.sigma == 4.0 and cfg.stream_width == 16


def test_end_to_end_gradcheck_micro():
    from mfcl.gradsuite import run_suite

    (report,), seconds = run_suite(names=["end_to_end_total_loss"])
    assert report.n_checked == 20
    assert report.passed, report.line()
