"""Inpainting generator: mutual encoder, structure/texture branches, SDFF fusion,
BPFA aggregation and a skip-connected decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .nn import Conv2d, Module, Parameter

LEAKY = 0.2
NORM_EPS = 1e-8


@dataclass
class GeneratorConfig:
    image_size: int = 64
    base_channels: int = 16
    stream_channels: int | None = None  # per-stream width inside the branches; None -> base_channels
    enable_sdff: bool = True
    enable_ca: bool = True
    enable_sknet: bool = True
    enable_bpfa: bool = True
    enable_pc: bool = True
    ca_patch: int = 3
    bpa_neighborhood: int = 3
    spatial_sigma: float | None = None  # None -> bottleneck height / 4
    se_reduction: int = 4
    sk_reduction: int = 4

    def __post_init__(self):
        if self.image_size % 8:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.bpa_neighborhood % 2 == 0:
            raise ValueError("bpa_neighborhood must be odd")

    @property
    def stream_width(self) -> int:
        return self.stream_channels or self.base_channels

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 4

    @property
    def sigma(self) -> float:
        return self.spatial_sigma if self.spatial_sigma is not None else self.bottleneck_size / 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskedFeature:
    feature: Tensor
    validity: np.ndarray  # N,1,H,W in {0, 1}

    def __post_init__(self):
        if self.feature.shape[2:] != self.validity.shape[2:]:
            raise ValueError(
                f"feature {self.feature.shape} and validity {self.validity.shape} disagree spatially")


@dataclass
class GeneratorOutput:
    raw: Tensor
    composited: Tensor
    branch_structure: Tensor
    branch_texture: Tensor
    extras: dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# kernels


def partial_conv(mf: MaskedFeature, weight: Tensor, bias: Tensor | None,
                 stride: int = 1, pad: int = 0) -> MaskedFeature:
    """Mask-renormalized convolution with validity update.

    Each output is ``W.(x*m) * k*k / sum(m_win) + b``; windows without any
    valid pixel yield the bias and become invalid. Zero padding beyond the
    map border counts as valid, so an all-valid mask reproduces
    :func:`conv2d` exactly and only holes trigger renormalization.
    """
    k = weight.shape[-1]
    m = mf.validity
    mp = np.pad(m, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=1.0) if pad else m
    win = np.lib.stride_tricks.sliding_window_view(mp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    msum = win.sum(axis=(4, 5))
    valid = msum > 0
    ratio = np.where(valid, (k * k) / np.where(valid, msum, 1.0), 0.0).astype(mf.feature.dtype)
    masked = mf.feature * m.astype(mf.feature.dtype)
    out = F.conv2d(masked, weight, None, stride, pad) * ratio
    if bias is not None:
        out = out + F.reshape(bias, (1, -1, 1, 1))
    return MaskedFeature(out, valid.astype(m.dtype))


def contextual_attention(x: Tensor, patch: int = 3, eps: float = NORM_EPS) -> Tensor:
    """Recombine non-overlapping patches by softmax over cosine similarity."""
    p = F.extract_patches(x, patch, patch)  # N, L, C*k*k
    sq = F.sum(p * p, axis=-1, keepdims=True)
    norm = F.sqrt(F.clamp_min(sq, eps * eps))
    unit = p / norm
    sim = F.matmul(unit, F.transpose(unit, (0, 2, 1)))
    att = F.softmax(sim, axis=-1)
    return F.fold_patches(F.matmul(att, p), x.shape, patch, patch)


def _neighbour_bias(h: int, w: int, k: int, dtype) -> np.ndarray:
    ones = Tensor(np.ones((1, 1, h, w), dtype=dtype))
    inside = F.unfold(ones, k, 1, (k - 1) // 2).data  # 1, k*k, L
    return np.where(inside > 0, 0.0, -1e30).astype(dtype)


def bpa_range(x: Tensor, k: int = 3) -> Tensor:
    """Range-domain propagation: dot-product softmax over each k x k neighbourhood.

    Out-of-map neighbours are excluded from the softmax support.
    """
    n, c, h, w = x.shape
    nb = F.reshape(F.unfold(x, k, 1, (k - 1) // 2), (n, c, k * k, h * w))
    centre = F.reshape(x, (n, c, 1, h * w))
    dots = F.sum(nb * centre, axis=1)  # N, k*k, L
    wts = F.softmax(dots + _neighbour_bias(h, w, k, x.dtype), axis=1)
    y = F.sum(nb * F.reshape(wts, (n, 1, k * k, h * w)), axis=2)
    return F.reshape(y, (n, c, h, w))


def spatial_kernel(h: int, w: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """Row-normalized Gaussian of the L1 distance between all pixel pairs, (HW, HW)."""
    yy, xx = np.divmod(np.arange(h * w), w)
    d = np.abs(yy[:, None] - yy[None, :]) + np.abs(xx[:, None] - xx[None, :])
    g = np.exp(-(d.astype(np.float64) ** 2) / (2.0 * sigma * sigma))
    return (g / g.sum(axis=1, keepdims=True)).astype(dtype)


def bpa_spatial(x: Tensor, sigma: float) -> Tensor:
    """Spatial-domain propagation over the whole map, per channel."""
    n, c, h, w = x.shape
    kern = spatial_kernel(h, w, sigma, x.dtype)
    y = F.matmul(F.reshape(x, (n, c, h * w)), Tensor(np.ascontiguousarray(kern.T)))
    return F.reshape(y, (n, c, h, w))


def min_pool_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    n, c, h, w = mask.shape
    return mask.reshape(n, c, h // factor, factor, w // factor, factor).min(axis=(3, 5))


# ---------------------------------------------------------------------------
# modules


class PartialConv2d(Conv2d):
    def forward(self, mf: MaskedFeature, use_pc: bool = True) -> MaskedFeature:
        if not use_pc:
            return MaskedFeature(F.conv2d(mf.feature, self.weight, self.bias, self.stride, self.pad),
                                 mf.validity)
        return partial_conv(mf, self.weight, self.bias, self.stride, self.pad)


class Stream(Module):
    def __init__(self, rng, c_in: int, width: int, k: int, depth: int = 5, dtype=np.float64):
        self.k = k
        self.layers = [PartialConv2d(rng, c_in if i == 0 else width, width, k, dtype=dtype)
                       for i in range(depth)]

    @property
    def receptive_field(self) -> int:
        return (self.k - 1) * len(self.layers) + 1

    def forward(self, mf: MaskedFeature, use_pc: bool) -> MaskedFeature:
        for layer in self.layers:
            mf = layer(mf, use_pc)
            mf = MaskedFeature(F.leaky_relu(mf.feature, LEAKY), mf.validity)
        return mf


class Branch(Module):
    """Three parallel 5-layer streams (3x3, 5x5, 7x7) merged back by a 1x1 conv."""

    def __init__(self, rng, channels: int, width: int, dtype=np.float64):
        self.streams = [Stream(rng, channels, width, k, dtype=dtype) for k in (3, 5, 7)]
        self.merge = Conv2d(rng, 3 * width, channels, 1, dtype=dtype)

    def forward(self, x: Tensor, validity: np.ndarray, use_pc: bool = True) -> Tensor:
        outs = [s(MaskedFeature(x, validity), use_pc).feature for s in self.streams]
        return self.merge(F.concat(outs, axis=1))


class SqueezeExcite(Module):
    def __init__(self, rng, channels: int, reduction: int, dtype=np.float64):
        hidden = max(channels // reduction, 1)
        self.reduce = Conv2d(rng, channels, hidden, 1, dtype=dtype)
        self.expand = Conv2d(rng, hidden, channels, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        s = F.relu(self.reduce(F.global_avg_pool(x)))
        return x * F.sigmoid(self.expand(s))


class SoftGate(Module):
    """sigmoid(SE(conv3x3([F_cst, F_cte])))"""

    def __init__(self, rng, channels: int, reduction: int, dtype=np.float64):
        self.conv = Conv2d(rng, 2 * channels, channels, 3, dtype=dtype)
        self.se = SqueezeExcite(rng, channels, reduction, dtype)

    def forward(self, f_cst: Tensor, f_cte: Tensor) -> Tensor:
        return F.sigmoid(self.se(self.conv(F.concat([f_cst, f_cte], axis=1))))


class SDFF(Module):
    """Soft-gating dual feature fusion of structure and texture branch outputs."""

    def __init__(self, rng, channels: int, reduction: int, dtype=np.float64):
        self.gate_te = SoftGate(rng, channels, reduction, dtype)
        self.gate_st = SoftGate(rng, channels, reduction, dtype)
        self.alpha = Parameter(np.array(1.0, dtype=dtype))
        self.beta = Parameter(np.array(1.0, dtype=dtype))
        self.gamma = Parameter(np.array(1.0, dtype=dtype))
        self.fuse = Conv2d(rng, 2 * channels, channels, 1, dtype=dtype)

    def gate(self, f_cst: Tensor, f_cte: Tensor, which: str) -> Tensor:
        if which == "te":
            return self.gate_te(f_cst, f_cte)
        if which == "st":
            return self.gate_st(f_cst, f_cte)
        raise ValueError(f"gate must be 'te' or 'st', got {which!r}")

    def exchange(self, f_cst: Tensor, f_cte: Tensor) -> tuple[Tensor, Tensor]:
        """Return (F'_cst, F'_cte)."""
        g_te = self.gate_te(f_cst, f_cte)
        g_st = self.gate_st(f_cst, f_cte)
        cte = (((g_te * f_cte) * self.beta) * f_cst) * self.alpha + f_cte
        cst = (g_st * f_cte) * self.gamma + f_cst
        return cst, cte

    def forward(self, f_cst: Tensor, f_cte: Tensor, enabled: bool = True) -> Tensor:
        if enabled:
            f_cst, f_cte = self.exchange(f_cst, f_cte)
        return self.fuse(F.concat([f_cst, f_cte], axis=1))


class SKConv(Module):
    """Selective-kernel channel mixing of a 3x3 and a 5x5 branch."""

    def __init__(self, rng, channels: int, reduction: int, dtype=np.float64):
        hidden = max(channels // reduction, 4)
        self.branch3 = Conv2d(rng, channels, channels, 3, dtype=dtype)
        self.branch5 = Conv2d(rng, channels, channels, 5, dtype=dtype)
        self.squeeze = Conv2d(rng, channels, hidden, 1, dtype=dtype)
        self.select3 = Conv2d(rng, hidden, channels, 1, dtype=dtype)
        self.select5 = Conv2d(rng, hidden, channels, 1, dtype=dtype)

    def attention(self, u: Tensor) -> Tensor:
        """Per-channel branch weights, shape (N, 2, C, 1, 1), summing to 1 over axis 1."""
        z = F.relu(self.squeeze(F.global_avg_pool(u)))
        n, c = u.shape[:2]
        logits = F.concat([F.reshape(self.select3(z), (n, 1, c, 1, 1)),
                           F.reshape(self.select5(z), (n, 1, c, 1, 1))], axis=1)
        return F.softmax(logits, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        b3 = F.relu(self.branch3(x))
        b5 = F.relu(self.branch5(x))
        att = self.attention(b3 + b5)
        n, c = x.shape[:2]
        a = F.reshape(att[:, 0], (n, c, 1, 1))
        b = F.reshape(att[:, 1], (n, c, 1, 1))
        return a * b3 + b * b5


class BPFA(Module):
    """Selective kernel -> contextual attention -> bilateral propagation -> 1x1 fusions."""

    def __init__(self, rng, channels: int, cfg: GeneratorConfig, dtype=np.float64):
        self.cfg = cfg
        self.sk = SKConv(rng, channels, cfg.sk_reduction, dtype)
        self.q = Conv2d(rng, 2 * channels, channels, 1, dtype=dtype)
        self.z = Conv2d(rng, 2 * channels, channels, 1, dtype=dtype)

    def attend(self, x: Tensor) -> Tensor:
        """Contextual attention, resizing to the next multiple of the patch size if needed."""
        p = self.cfg.ca_patch
        _, _, h, w = x.shape
        hp, wp = -(-h // p) * p, -(-w // p) * p
        if (hp, wp) == (h, w):
            return contextual_attention(x, p)
        y = contextual_attention(F.bilinear_resize(x, hp, wp), p)
        return F.bilinear_resize(y, h, w)

    def combine(self, y_s: Tensor, y_r: Tensor) -> Tensor:
        return self.q(F.concat([y_s, y_r], axis=1))

    def aggregate(self, f_fu_prime: Tensor, f_sr: Tensor) -> Tensor:
        return self.z(F.concat([f_fu_prime, f_sr], axis=1))

    def forward(self, f_fu: Tensor) -> Tensor:
        cfg = self.cfg
        x = self.sk(f_fu) if cfg.enable_sknet else f_fu
        att = self.attend(x) if cfg.enable_ca else x
        y_s = bpa_spatial(att, cfg.sigma)
        y_r = bpa_range(att, cfg.bpa_neighborhood)
        return self.aggregate(x, self.combine(y_s, y_r))


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig | None = None, seed: int = 0, dtype=np.float64):
        self.cfg = cfg = cfg or GeneratorConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        b = cfg.base_channels
        c4 = 4 * b
        self.enc = [
            Conv2d(rng, 4, b, 3, stride=2, dtype=dtype),
            Conv2d(rng, b, 2 * b, 3, stride=2, dtype=dtype),
            Conv2d(rng, 2 * b, c4, 3, stride=2, dtype=dtype),
            Conv2d(rng, c4, c4, 3, dtype=dtype),
            Conv2d(rng, c4, c4, 3, dtype=dtype),
            Conv2d(rng, c4, c4, 3, dtype=dtype),
        ]
        self.reorg_te = Conv2d(rng, b + 2 * b + c4, c4, 1, dtype=dtype)
        self.reorg_st = Conv2d(rng, 3 * c4, c4, 1, dtype=dtype)
        self.branch_st = Branch(rng, c4, cfg.stream_width, dtype)
        self.branch_te = Branch(rng, c4, cfg.stream_width, dtype)
        self.to_image_st = Conv2d(rng, c4, 3, 1, dtype=dtype)
        self.to_image_te = Conv2d(rng, c4, 3, 1, dtype=dtype)
        self.sdff = SDFF(rng, c4, cfg.se_reduction, dtype)
        self.bpfa = BPFA(rng, c4, cfg, dtype)
        self.dec = [
            Conv2d(rng, c4 + c4, 2 * b, 3, dtype=dtype),
            Conv2d(rng, 2 * b + 2 * b, b, 3, dtype=dtype),
            Conv2d(rng, b + b, b, 3, dtype=dtype),
        ]
        self.out = Conv2d(rng, b, 3, 3, dtype=dtype)

    # -- stages -------------------------------------------------------------

    def encode(self, image: Tensor, mask: np.ndarray) -> list[Tensor]:
        _, _, h, w = image.shape
        if h % 8 or w % 8:
            raise ValueError(f"input size {h}x{w} is not divisible by 8")
        m = mask.astype(self.dtype)
        x = F.concat([image * m, Tensor(m)], axis=1)
        feats = []
        for layer in self.enc:
            x = F.leaky_relu(layer(x), LEAKY)
            feats.append(x)
        return feats

    def reorganize(self, feats: list[Tensor]) -> tuple[Tensor, Tensor]:
        """(F_te, F_st) at quarter resolution."""
        s = feats[1].shape[2]
        te = F.concat([F.bilinear_resize(f, s, s) for f in feats[:3]], axis=1)
        st = F.concat([F.bilinear_resize(f, s, s) for f in feats[3:]], axis=1)
        return self.reorg_te(te), self.reorg_st(st)

    def branch_fill(self, x: Tensor, validity: np.ndarray, kind: str) -> Tensor:
        branch = {"structure": self.branch_st, "texture": self.branch_te}[kind]
        return branch(x, validity, self.cfg.enable_pc)

    def branch_to_image(self, feat: Tensor, kind: str) -> Tensor:
        conv = {"structure": self.to_image_st, "texture": self.to_image_te}[kind]
        size = self.cfg.image_size
        return F.bilinear_resize(conv(feat), size, size)

    def fuse(self, f_cst: Tensor, f_cte: Tensor) -> Tensor:
        return self.sdff(f_cst, f_cte, self.cfg.enable_sdff)

    def aggregate(self, f_fu: Tensor) -> Tensor:
        return self.bpfa(f_fu) if self.cfg.enable_bpfa else f_fu

    def decode(self, f_sc: Tensor, feats: list[Tensor], image: Tensor, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """Return (raw, composited)."""
        s8 = feats[5].shape[2]
        x = F.bilinear_resize(f_sc, s8, s8)
        for conv, skip in zip(self.dec, (feats[5], feats[1], feats[0])):
            x = F.upsample_nearest(F.concat([x, skip], axis=1), 2)
            x = F.leaky_relu(conv(x), LEAKY)
        raw = F.sigmoid(self.out(x))
        m = mask.astype(self.dtype)
        composited = image * m + raw * (1.0 - m)
        return raw, composited

    def forward(self, image, mask: np.ndarray) -> GeneratorOutput:
        image = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        feats = self.encode(image, mask)
        f_te, f_st = self.reorganize(feats)
        validity = min_pool_mask(mask, 4)
        f_cst = self.branch_fill(f_st, validity, "structure")
        f_cte = self.branch_fill(f_te, validity, "texture")
        f_fu = self.fuse(f_cst, f_cte)
        f_sc = self.aggregate(f_fu)
        raw, comp = self.decode(f_sc, feats, image, mask)
        return GeneratorOutput(raw, comp,
                               self.branch_to_image(f_cst, "structure"),
                               self.branch_to_image(f_cte, "texture"),
                               extras={"f_fu": f_fu, "f_sc": f_sc})
