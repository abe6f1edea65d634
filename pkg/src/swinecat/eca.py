"""Efficient Channel Attention over a ``[B, H, W, C]`` token grid.

The gate is computed in three steps: spatial mean per channel, a bias-free
odd-width 1-D convolution across the channel index followed by a sigmoid,
and multiplication of every channel by its weight.  There is no residual
path and no fully connected layer; one module owns exactly ``k`` weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor, conv1d_channels, mean, mul, reshape, sigmoid


@dataclass(frozen=True)
class EcaConfig:
    gamma: int = 2
    b: int = 1
    explicit_k: int | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigurationError(f"eca gamma must be positive, got {self.gamma}")
        if self.b < 0:
            raise ConfigurationError(f"eca b must be non-negative, got {self.b}")
        if self.explicit_k is not None and (self.explicit_k < 1 or self.explicit_k % 2 == 0):
            raise ConfigurationError(f"explicit eca kernel size must be a positive odd integer, got {self.explicit_k}")


def adaptive_kernel_size(channels: int, cfg: EcaConfig = EcaConfig()) -> int:
    """Odd kernel width for a ``channels``-wide descriptor.

    ``t = (log2(C) + b) / gamma`` is rounded half-up to an integer; an even
    result steps down to the odd number below it.  So 96 and 192 channels
    get 3, 384 and 768 get 5 under the default ``gamma=2, b=1``.
    """
    if channels < 1:
        raise ConfigurationError(f"channel count must be >= 1, got {channels}")
    if cfg.explicit_k is not None:
        return cfg.explicit_k
    t = (math.log2(channels) + cfg.b) / cfg.gamma
    r = math.floor(t + 0.5)
    k = r if r % 2 == 1 else r - 1
    return max(k, 1)


def global_average_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the two spatial axes: ``[B, H, W, C] -> [B, C]``."""
    if x.ndim != 4:
        raise DimensionError(f"expected a [B, H, W, C] grid, got shape {x.shape}")
    return mean(x, axis=(1, 2))


def channel_weights(z: Tensor, kernel: Tensor) -> Tensor:
    return sigmoid(conv1d_channels(z, kernel))


def apply_eca(x: Tensor, kernel: Tensor, cfg: EcaConfig | None = None) -> Tensor:
    """Gate the channels of ``x`` (``[B, H, W, C]``) with learned ``kernel``.

    When ``cfg`` is given the kernel width is checked against the adaptive
    rule for this channel count.
    """
    channels = x.shape[-1]
    if cfg is not None and kernel.shape[0] != adaptive_kernel_size(channels, cfg):
        raise ConfigurationError(
            f"eca kernel of width {kernel.shape[0]} does not fit {channels} channels "
            f"(expected {adaptive_kernel_size(channels, cfg)})"
        )
    w = channel_weights(global_average_pool(x), kernel)
    return mul(x, reshape(w, (x.shape[0], 1, 1, channels)))
