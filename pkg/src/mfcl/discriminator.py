"""Global and local critics with spectrally normalized convolutions."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F
from .imaging import hole_bbox
from .nn import Module, Parameter, kaiming_uniform

SN_EPS = 1e-8


@dataclass(frozen=True)
class CriticConfig:
    input_size: int = 64
    base_channels: int = 16
    layers: int = 6
    kernel: int = 4
    stride: int = 2
    leaky_slope: float = 0.2
    power_iterations: int = 1

    def __post_init__(self):
        if (self.layers, self.kernel, self.stride, self.leaky_slope) != (6, 4, 2, 0.2):
            raise ValueError("critic layer count, kernel, stride and slope are fixed at 6, 4, 2, 0.2")

    @property
    def channels(self) -> list[int]:
        b = self.base_channels
        return [b, 2 * b, 4 * b, 8 * b, 8 * b, 8 * b]

    def to_dict(self) -> dict:
        return asdict(self)


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), SN_EPS)


class SpectralState:
    """Left/right singular vector estimates for one weight."""

    def __init__(self, u: np.ndarray, v: np.ndarray):
        self.u = u
        self.v = v

    @classmethod
    def init(cls, rng: np.random.Generator, rows: int, cols: int, dtype=np.float64) -> "SpectralState":
        return cls(_unit(rng.normal(size=rows)).astype(dtype), _unit(rng.normal(size=cols)).astype(dtype))

    def power_iterate(self, w: np.ndarray, n_iter: int = 1) -> None:
        for _ in range(n_iter):
            self.v = _unit(w.T @ self.u)
            self.u = _unit(w @ self.v)


def spectral_normalize(weight: Tensor, state: SpectralState, n_iter: int = 1) -> Tensor:
    """Update ``state`` by ``n_iter`` power iterations, then return W / (u^T W v).

    With ``n_iter=0`` the state is used as-is (frozen evaluation). The
    returned tensor is differentiable w.r.t. ``weight``; u and v are constants.
    """
    rows = weight.shape[0]
    mat = F.reshape(weight, (rows, -1))
    if n_iter:
        state.power_iterate(mat.data, n_iter)
    u = Tensor(state.u[:, None].astype(weight.dtype))
    v = Tensor(state.v[None, :].astype(weight.dtype))
    sigma = F.clamp_min(F.sum(u * mat * v), SN_EPS)
    return weight / sigma


def estimated_sigma(weight: np.ndarray, state: SpectralState) -> float:
    mat = weight.reshape(weight.shape[0], -1)
    return float(state.u @ mat @ state.v)


class SNConv2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, k: int, dtype=np.float64):
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))
        self.state = SpectralState.init(rng, c_out, c_in * k * k, dtype)
        # one iteration up front so u^T W v = |W v| > 0 even before training starts
        self.state.power_iterate(self.weight.data.reshape(c_out, -1))

    def forward(self, x: Tensor, stride: int, pad: int) -> Tensor:
        w = spectral_normalize(self.weight, self.state, n_iter=0)
        return F.conv2d(x, w, self.bias, stride, pad)


def _pad_for(size: int, k: int, stride: int) -> int:
    """Padding 1, widened only when the input is too small to give a 1x1 output."""
    pad = 1
    while (size + 2 * pad - k) // stride + 1 < 1:
        pad += 1
    return pad


class Critic(Module):
    """Six stride-2 convolutions, leaky ReLU between them, spatially averaged linear score."""

    def __init__(self, cfg: CriticConfig | None = None, in_channels: int = 3, seed: int = 0,
                 dtype=np.float64):
        self.cfg = cfg = cfg or CriticConfig()
        rng = np.random.default_rng(seed)
        chans = [in_channels] + cfg.channels[:-1] + [1]
        self.convs = [SNConv2d(rng, chans[i], chans[i + 1], cfg.kernel, dtype) for i in range(cfg.layers)]

    def spectral_states(self) -> dict[str, SpectralState]:
        return {f"convs.{i}": c.state for i, c in enumerate(self.convs)}

    def update_spectral(self) -> None:
        """Advance every layer's power iteration once (one call per training step)."""
        for conv in self.convs:
            mat = conv.weight.data.reshape(conv.weight.shape[0], -1)
            conv.state.power_iterate(mat, self.cfg.power_iterations)

    def forward(self, x: Tensor, return_trace: bool = False):
        cfg = self.cfg
        trace = []
        for i, conv in enumerate(self.convs):
            x = conv(x, cfg.stride, _pad_for(x.shape[2], cfg.kernel, cfg.stride))
            trace.append(x.shape[2])
            if i < len(self.convs) - 1:
                x = F.leaky_relu(x, cfg.leaky_slope)
        score = F.reshape(F.mean(x, axis=(1, 2, 3)), (x.shape[0],))
        return (score, trace) if return_trace else score


def local_crop_matrices(masks: np.ndarray, out_size: int, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (rows, cols) resampling matrices cropping the hole bounding box.

    ``masks`` is N,1,H,W. The box is resized bilinearly to ``out_size`` square.
    """
    n, _, h, w = masks.shape
    rows = np.zeros((n, out_size, h), dtype=dtype)
    cols = np.zeros((n, out_size, w), dtype=dtype)
    for i in range(n):
        top, bottom, left, right = hole_bbox(masks[i, 0])
        rows[i, :, top:bottom] = F.resize_matrix(bottom - top, out_size, dtype=dtype)
        cols[i, :, left:right] = F.resize_matrix(right - left, out_size, dtype=dtype)
    return rows, cols


def local_crop(images: Tensor, masks: np.ndarray, out_size: int | None = None) -> Tensor:
    out_size = out_size or images.shape[2] // 2
    rows, cols = local_crop_matrices(masks, out_size, images.dtype)
    return F.resample(images, rows, cols)


class CriticPair(Module):
    def __init__(self, image_size: int, base_channels: int = 16, seed: int = 0, dtype=np.float64):
        self.global_critic = Critic(CriticConfig(image_size, base_channels), seed=seed + 101, dtype=dtype)
        self.local_critic = Critic(CriticConfig(image_size // 2, base_channels), seed=seed + 202, dtype=dtype)

    def update_spectral(self) -> None:
        self.global_critic.update_spectral()
        self.local_critic.update_spectral()

    def spectral_states(self) -> dict[str, SpectralState]:
        out = {}
        for name, critic in (("global_critic", self.global_critic), ("local_critic", self.local_critic)):
            for key, st in critic.spectral_states().items():
                out[f"{name}.{key}"] = st
        return out

    def critic_forward(self, images: Tensor, which: str, masks: np.ndarray | None = None) -> Tensor:
        if which == "global":
            return self.global_critic(images)
        if which == "local":
            if masks is None:
                raise ValueError("local critic needs the hole mask")
            return self.local_critic(local_crop(images, masks, images.shape[2] // 2))
        raise ValueError(f"critic must be 'global' or 'local', got {which!r}")


def spatial_trace(size: int, layers: int = 6, k: int = 4, stride: int = 2) -> list[int]:
    out = []
    for _ in range(layers):
        size = (size + 2 * _pad_for(size, k, stride) - k) // stride + 1
        out.append(size)
    return out


__all__ = [
    "CriticConfig", "SpectralState", "spectral_normalize", "estimated_sigma", "SNConv2d",
    "Critic", "CriticPair", "local_crop", "local_crop_matrices", "spatial_trace",
]
