"""Registered finite-difference checks for every differentiable op plus the end-to-end loss."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from . import losses as L
from .autodiff import Tensor, check_entries, sample_entries
from .autodiff import functional as F
from .config import TrainConfig

CHECKS: dict[str, Callable] = {}


def register(name: str):
    def deco(fn):
        CHECKS[name] = fn
        return fn
    return deco


def _leaf(rng, shape, lo=-1.0, hi=1.0, away=0.0) -> Tensor:
    """Uniform random leaf; ``away`` keeps entries that far from zero (kinks)."""
    x = rng.uniform(lo, hi, size=shape)
    if away:
        x = np.sign(x) * (away + np.abs(x))
    return Tensor(x, requires_grad=True)


def _project(y: Tensor, seed: int) -> Tensor:
    """Scalarize with a fixed random projection so every output entry matters."""
    r = Tensor(np.random.default_rng(seed).normal(size=y.shape))
    return F.sum(y * r)


def _unary(op, **leaf_kw):
    def build(rng):
        x = _leaf(rng, (2, 3, 4), **leaf_kw)
        return (lambda: _project(op(x), 0)), [x]
    return build


for _name, _op, _kw in [
    ("exp", F.exp, {}),
    ("log", F.log, {"lo": 0.2, "hi": 2.0}),
    ("sqrt", F.sqrt, {"lo": 0.2, "hi": 2.0}),
    ("abs", F.abs, {"away": 0.05}),
    ("power", lambda x: F.power(x, 3.0), {}),
    ("sigmoid", F.sigmoid, {"lo": -4, "hi": 4}),
    ("relu", F.relu, {"away": 0.05}),
    ("leaky_relu", lambda x: F.leaky_relu(x, 0.2), {"away": 0.05}),
    ("clamp_min", lambda x: F.clamp_min(x, 0.1), {"away": 0.05}),
    ("sum_axis", lambda x: F.sum(x, axis=1), {}),
    ("mean_axis", lambda x: F.mean(x, axis=(0, 2), keepdims=True), {}),
    ("reshape_transpose", lambda x: F.transpose(F.reshape(x, (4, 3, 2)), (2, 0, 1)), {}),
    ("index", lambda x: x[:, 1:, ::2], {}),
    ("softmax", lambda x: F.softmax(x, axis=1), {}),
]:
    register(_name)(_unary(_op, **_kw))


@register("binary_arith")
def _binary(rng):
    a = _leaf(rng, (2, 3, 4))
    b = _leaf(rng, (2, 3, 1), lo=0.5, hi=1.5)
    c = _leaf(rng, ())
    return (lambda: _project((a + b) * a - b / (a * a + 1.0) - c * a, 1)), [a, b, c]


@register("l1_norm")
def _l1(rng):
    a = _leaf(rng, (2, 3, 4))
    b = Tensor(a.data + np.sign(rng.normal(size=a.shape)) * rng.uniform(0.05, 0.5, size=a.shape))
    return (lambda: F.l1_norm(a, b)), [a]


@register("concat_pad")
def _concat(rng):
    a = _leaf(rng, (1, 2, 3, 3))
    b = _leaf(rng, (1, 1, 3, 3))
    return (lambda: _project(F.pad2d(F.concat([a, b], axis=1), 1), 2)), [a, b]


@register("matmul")
def _matmul(rng):
    a = _leaf(rng, (2, 3, 4))
    b = _leaf(rng, (2, 4, 5))
    return (lambda: _project(F.matmul(a, b), 3)), [a, b]


@register("global_avg_pool")
def _gap(rng):
    x = _leaf(rng, (2, 3, 4, 4))
    return (lambda: _project(F.global_avg_pool(x), 4)), [x]


def _conv_check(stride, pad, k):
    def build(rng):
        x = _leaf(rng, (2, 3, 6, 6))
        w = _leaf(rng, (4, 3, k, k))
        b = _leaf(rng, (4,))
        return (lambda: _project(F.conv2d(x, w, b, stride, pad), 5)), [x, w, b]
    return build


register("conv2d_s1")(_conv_check(1, 1, 3))
register("conv2d_s2")(_conv_check(2, 1, 4))


@register("unfold_fold")
def _unfold(rng):
    x = _leaf(rng, (1, 2, 5, 5))
    return (lambda: _project(F.fold(F.unfold(x, 3, 1, 1) * 0.5, x.shape, 3, 1, 1), 6)), [x]


@register("patches")
def _patches(rng):
    x = _leaf(rng, (1, 2, 6, 6))
    return (lambda: _project(F.fold_patches(F.extract_patches(x, 3, 3) * 2.0, x.shape, 3, 3),
                             7)), [x]


@register("resample")
def _resample(rng):
    x = _leaf(rng, (1, 2, 4, 4))
    return (lambda: _project(F.upsample_nearest(F.bilinear_resize(x, 6, 5), 2), 8)), [x]


@register("partial_conv")
def _pconv(rng):
    from .generator import MaskedFeature, partial_conv

    x = _leaf(rng, (1, 2, 6, 6))
    w = _leaf(rng, (3, 2, 3, 3))
    b = _leaf(rng, (3,))
    m = (rng.uniform(size=(1, 1, 6, 6)) > 0.4).astype(float)
    return (lambda: _project(partial_conv(MaskedFeature(x, m), w, b, 1, 1).feature, 9)), [x, w, b]


@register("contextual_attention")
def _ca(rng):
    from .generator import contextual_attention

    x = _leaf(rng, (1, 2, 6, 6))
    return (lambda: _project(contextual_attention(x, 3), 10)), [x]


@register("bpa_range")
def _bpr(rng):
    from .generator import bpa_range

    x = _leaf(rng, (1, 3, 5, 5))
    return (lambda: _project(bpa_range(x, 3), 11)), [x]


@register("bpa_spatial")
def _bps(rng):
    from .generator import bpa_spatial

    x = _leaf(rng, (1, 3, 5, 5))
    return (lambda: _project(bpa_spatial(x, 1.5), 12)), [x]


@register("spectral_norm")
def _sn(rng):
    from .discriminator import SpectralState, spectral_normalize

    w = _leaf(rng, (4, 3, 2, 2))
    st = SpectralState.init(rng, 4, 12)
    st.power_iterate(w.data.reshape(4, -1), 5)
    return (lambda: _project(spectral_normalize(w, st, n_iter=0), 13)), [w]


@register("loss_perc_style")
def _perc(rng):
    fx = L.FeatureExtractor(channels=(4, 4, 6, 6, 8), seed=3)
    a = _leaf(rng, (1, 3, 16, 16), lo=0.0, hi=1.0)
    b = rng.uniform(size=(1, 3, 16, 16))
    return (lambda: L.loss_perc(a, b, fx) + L.loss_style(a, b, fx) * 50.0), [a]


@register("loss_adv")
def _adv(rng):
    r = _leaf(rng, (4,), lo=-2, hi=2)
    f = _leaf(rng, (4,), lo=-2, hi=2)
    return (lambda: L.loss_adv_g(r, f) + L.loss_adv_d(r, f) * 0.5), [r, f]


MICRO_CONFIG = dict(image_size=16, base_channels=2, batch=2, dtype="float64", seed=0)


def micro_problem(rng=None, n_entries: int = 20):
    """End-to-end total loss of a 16x16 micro model; samples generator and critic entries."""
    from .imaging import generate_center_mask, structure_smooth
    from .training import adversarial, build_state, generator_components

    rng = rng or np.random.default_rng(0)
    cfg = TrainConfig(**MICRO_CONFIG)
    state = build_state(cfg)
    state.fx = L.FeatureExtractor(channels=(4, 4, 6, 6, 8), seed=3)
    yy, xx = np.mgrid[0:16, 0:16] / 15.0
    img = np.stack([np.stack([yy, xx, 0.5 + 0.3 * np.sin(3 * (xx + yy + k))]) for k in range(2)])
    img = np.clip(img + 0.05 * rng.normal(size=img.shape), 0, 1)
    st = np.stack([structure_smooth(i.transpose(1, 2, 0)).transpose(2, 0, 1) for i in img])
    mask = np.stack([generate_center_mask(16, 16)[None]] * 2)

    def f():
        _, comps = generator_components(state, img, st, mask)
        total = L.loss_total(comps, cfg.weights)
        d = adversarial(state.critics, Tensor(img), Tensor(img[::-1] * 0.9), mask, L.loss_adv_d)
        return total + d

    params = state.generator.parameters() + state.critics.parameters()
    entries = sample_entries(params, n_entries, rng)
    return f, params, entries


# Central differences on an O(10) loss carry ~1e-10 of round-off, so gradients
# below this floor are compared absolutely instead of relatively.
E2E_ATOL = 1e-6


@register("end_to_end_total_loss")
def _e2e(rng):
    f, params, entries = micro_problem(rng)
    return f, params, entries, E2E_ATOL


def run_suite(h: float = 1e-4, tol: float = 1e-4, names=None, seed: int = 0, on_report=None):
    """Run the registered checks in double precision. Returns (reports, seconds)."""
    t0 = time.perf_counter()
    reports = []
    for name in names or CHECKS:
        built = CHECKS[name](np.random.default_rng([seed, len(name)]))
        f, params = built[0], built[1]
        entries = built[2] if len(built) > 2 else None
        atol = built[3] if len(built) > 3 else 1e-8
        rep = check_entries(f, params, entries, h=h, tol=tol, atol=atol, name=name)
        reports.append(rep)
        if on_report:
            on_report(rep)
    return reports, time.perf_counter() - t0
