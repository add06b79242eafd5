from __future__ import annotations

from .. import tensor as T
from ..tensor import Tensor


def loss_upper_l1(pred: Tensor, ref) -> Tensor:
    """Mean absolute error."""
    ref = T.as_tensor(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return T.reduce_mean(T.absolute(pred - ref))


def channel_max(x: Tensor) -> Tensor:
    """Per-pixel maximum over the channel axis, repeated to every channel."""
    m = T.reduce_max(x, axis=-3, keepdims=True)
    return T.concat([m] * x.shape[-3], axis=-3)


def total_variation(s: Tensor) -> Tensor:
    """Mean absolute forward difference, vertical plus horizontal."""
    dv = s[..., 1:, :] - s[..., :-1, :]
    dh = s[..., :, 1:] - s[..., :, :-1]
    return T.reduce_mean(T.absolute(dv)) + T.reduce_mean(T.absolute(dh))


def loss_lower_illum(x: Tensor, s: Tensor, w_fidelity: float = 1.0, w_smooth: float = 0.1) -> Tensor:
    """Self-supervised illumination loss.

    ``w_fidelity * mean((s - maxchan(x))^2) + w_smooth * TV(s)``: the
    illumination should follow the brightest channel and vary smoothly.
    """
    if s.shape != x.shape:
        raise ValueError(f"illumination shape {s.shape} != image shape {x.shape}")
    diff = s - channel_max(x)
    loss = T.reduce_mean(diff * diff) * w_fidelity
    if w_smooth:
        loss = loss + total_variation(s) * w_smooth
    return loss
