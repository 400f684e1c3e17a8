"""Training objectives: pixel, perceptual, style, relativistic adversarial, and their weighted sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .nn import Conv2d, Module

LOG_EPS = 1e-8
COMPONENTS = ("rec", "perc", "style", "adv", "rte", "rst")


@dataclass
class LossWeights:
    rec: float = 1.0
    perc: float = 0.2
    style: float = 250.0
    adv: float = 0.2
    rte: float = 1.0
    rst: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: v * factor for k, v in asdict(self).items()})

    def to_dict(self) -> dict:
        return asdict(self)


class FeatureExtractor(Module):
    """Frozen five-stage convolutional pyramid standing in for a pretrained backbone.

    Stage i emits a ReLU activation map at stride 2**i (1, 2, 4, 8, 16).
    Weights come from a fixed seed and never receive gradients.
    """

    def __init__(self, channels=(16, 32, 64, 64, 64), seed: int = 1234, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        chans = (3,) + self.channels
        self.stages = [Conv2d(rng, chans[i], chans[i + 1], 3, stride=1 if i == 0 else 2, dtype=dtype)
                       for i in range(5)]
        for p in self.parameters():
            p.requires_grad = False

    def forward(self, image: Tensor) -> list[Tensor]:
        feats = []
        x = image
        for stage in self.stages:
            x = F.relu(stage(x))
            feats.append(x)
        return feats

    def load_weights(self, state: dict[str, np.ndarray]) -> None:
        """Install externally supplied weights (same names/shapes as :meth:`state_dict`)."""
        self.load_state_dict(state)
        for p in self.parameters():
            p.requires_grad = False


def _check_same(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _const(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=None if like is None else like.dtype))


def l1_loss(pred: Tensor, target) -> Tensor:
    target = _const(target, pred)
    _check_same(pred, target)
    return F.l1_norm(pred, target)


def loss_rst(structure_image: Tensor, structure_target) -> Tensor:
    """Structure-branch pixel loss; input is already mapped to image space by the 1x1 head."""
    return l1_loss(structure_image, structure_target)


def loss_rte(texture_image: Tensor, image_target) -> Tensor:
    return l1_loss(texture_image, image_target)


def loss_rec(output: Tensor, image_target) -> Tensor:
    return l1_loss(output, image_target)


def _features(fx: FeatureExtractor, x, like: Tensor | None = None):
    if isinstance(x, (list, tuple)):
        return x
    return fx(_const(x, like))


def perc_from_features(fo, ft) -> Tensor:
    total = None
    for a, b in zip(fo, ft):
        term = F.l1_norm(a, b)
        total = term if total is None else total + term
    return total


def gram(feat: Tensor) -> Tensor:
    """Per-sample Gram matrix normalized by C*H*W."""
    n, c, h, w = feat.shape
    flat = F.reshape(feat, (n, c, h * w))
    return F.matmul(flat, F.transpose(flat, (0, 2, 1))) * (1.0 / (c * h * w))


def style_from_features(fo, ft) -> Tensor:
    total = None
    for a, b in zip(fo, ft):
        term = F.l1_norm(gram(a), gram(b))
        total = term if total is None else total + term
    return total


def loss_perc(output: Tensor, target, fx: FeatureExtractor) -> Tensor:
    """Sum over the five stages of the feature-map MAE. ``target`` may be an image or its feature list."""
    return perc_from_features(fx(output), _features(fx, target, output))


def loss_style(output: Tensor, target, fx: FeatureExtractor) -> Tensor:
    return style_from_features(fx(output), _features(fx, target, output))


def _safe_log(x: Tensor) -> Tensor:
    return F.log(F.clamp_min(x, LOG_EPS))


def relativistic(a: Tensor, b: Tensor) -> Tensor:
    """sigmoid(D(a) - mean D(b)) per item of ``a``."""
    return F.sigmoid(a - F.mean(b))


def _check_scores(real: Tensor, fake: Tensor) -> None:
    if real.size == 0 or fake.size == 0:
        raise ValueError("adversarial loss needs non-empty score batches")


def loss_adv_g(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    """Generator side: -E_r[log(1 - D_ra(x_r, x_f))] - E_f[log D_ra(x_f, x_r)]."""
    scores_real, scores_fake = _const(scores_real), _const(scores_fake)
    _check_scores(scores_real, scores_fake)
    real_rel = relativistic(scores_real, scores_fake)
    fake_rel = relativistic(scores_fake, scores_real)
    return -F.mean(_safe_log(1.0 - real_rel)) - F.mean(_safe_log(fake_rel))


def loss_adv_d(scores_real: Tensor, scores_fake: Tensor) -> Tensor:
    """Critic side: -E_r[log D_ra(x_r, x_f)] - E_f[log(1 - D_ra(x_f, x_r))]."""
    scores_real, scores_fake = _const(scores_real), _const(scores_fake)
    _check_scores(scores_real, scores_fake)
    real_rel = relativistic(scores_real, scores_fake)
    fake_rel = relativistic(scores_fake, scores_real)
    return -F.mean(_safe_log(real_rel)) - F.mean(_safe_log(1.0 - fake_rel))


def loss_total(components: dict, w: LossWeights):
    """Weighted sum of the six components; zero-weighted terms are dropped entirely."""
    total = None
    for name in COMPONENTS:
        weight = getattr(w, name)
        if weight == 0:
            continue
        term = components[name] * weight
        total = term if total is None else total + term
    if total is None:
        first = components[COMPONENTS[0]]
        return first * 0.0
    return total
