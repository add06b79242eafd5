"""Generative block (RAW -> RGB U-Net), Retinex enhancer and a denoising head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import ParameterVector, Tensor


def _conv_params(rng, name, c_in, c_out, k=3, scale=1.0):
    std = scale * np.sqrt(2.0 / (c_in * k * k))
    return [(f"{name}.w", Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)))),
            (f"{name}.b", Tensor(np.zeros(c_out)))]


def _conv(x, p: ParameterVector, name: str) -> Tensor:
    return T.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=1, padding=1)


@dataclass(frozen=True)
class GBConfig:
    widths: tuple[int, ...] = (8, 16, 16, 16)
    in_channels: int = 4
    out_channels: int = 3


def init_generative_block(cfg: GBConfig, rng: np.random.Generator) -> ParameterVector:
    w = cfg.widths
    segs = []
    c_in = cfg.in_channels
    for i, c in enumerate(w):
        segs += _conv_params(rng, f"enc{i}", c_in, c)
        c_in = c
    for i in reversed(range(len(w) - 1)):
        segs += _conv_params(rng, f"dec{i}", c_in + w[i], w[i])
        c_in = w[i]
    segs += _conv_params(rng, "out", c_in, cfg.out_channels)
    return ParameterVector(segs)


def zeros_like_params(p: ParameterVector) -> ParameterVector:
    return p.unflatten(np.zeros(p.total_len))


def generative_block_forward(raw: Tensor, omega: ParameterVector, levels: int | None = None) -> Tensor:
    """Packed RAW (N, 4, h, w) -> RGB (N, 3, 2h, 2w) in (0, 1).

    Encoder: ``levels`` conv+relu stages with a 2x average-pool before every
    stage but the first.  Decoder: nearest 2x upsample, concatenate the
    matching encoder features, conv+relu.  A final 2x upsample and conv map
    to three channels at full Bayer resolution, squashed by a sigmoid.
    """
    if raw.ndim != 4 or raw.shape[1] != omega["enc0.w"].shape[1]:
        raise ValueError(f"raw batch shape {raw.shape} does not match the generative block input")
    levels = levels or sum(1 for n in omega if n.startswith("enc") and n.endswith(".w"))
    feats = []
    h = raw
    for i in range(levels):
        if i:
            h = T.avg_pool2x(h)
        h = T.relu(_conv(h, omega, f"enc{i}"))
        feats.append(h)
    for i in reversed(range(levels - 1)):
        h = T.concat([T.upsample_nearest2x(h), feats[i]], axis=1)
        h = T.relu(_conv(h, omega, f"dec{i}"))
    return T.sigmoid(_conv(T.upsample_nearest2x(h), omega, "out"))


@dataclass(frozen=True)
class EnhancerConfig:
    width: int = 8
    s_min: float = 0.05

    def __post_init__(self):
        if not 0 < self.s_min < 1:
            raise ValueError("s_min must lie in (0, 1)")


def init_three_conv(width: int, rng: np.random.Generator, channels: int = 3, last_scale: float = 0.1) -> ParameterVector:
    return ParameterVector(
        _conv_params(rng, "conv1", channels, width)
        + _conv_params(rng, "conv2", width, width)
        + _conv_params(rng, "conv3", width, channels, scale=last_scale)
    )


def _three_conv(x: Tensor, p: ParameterVector) -> Tensor:
    h = T.relu(_conv(x, p, "conv1"))
    h = T.relu(_conv(h, p, "conv2"))
    return _conv(h, p, "conv3")


def enhancer_forward(x: Tensor, theta: ParameterVector, s_min: float = 0.05) -> tuple[Tensor, Tensor]:
    """Retinex enhancement: illumination ``s`` and enhanced ``y = x / s``.

    ``s = clamp(sigmoid(conv3(relu(conv2(relu(conv1 x)))) + x), s_min, 1)``;
    the single skip adds the input before the activation.
    """
    s = T.clamp(T.sigmoid(_three_conv(x, theta) + x), s_min, 1.0)
    return s, T.safe_div(x, s)


def denoise_forward(x: Tensor, theta: ParameterVector) -> Tensor:
    """Residual three-conv head used by the transfer task."""
    return _three_conv(x, theta) + x
