"""Windowed self-attention, the Swin block, patch embedding and patch merging.

Token grids are ``[B, H, W, C]`` tensors throughout.  Block parameters are
plain mappings from local names (``norm1.weight``, ``attn.qkv.weight`` ...)
to tensors; see :func:`swinecat.model.param_specs` for the full list.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .errors import ConfigurationError
from .tensor import (
    Tensor,
    add,
    dropout,
    gelu,
    getitem,
    layer_norm,
    linear,
    matmul,
    permute,
    reshape,
    roll,
    scale,
    softmax,
)

MASK_NEG = -100.0


def patch_embed(images: Tensor, weight: Tensor, bias: Tensor, patch_size: int,
                norm_weight: Tensor | None = None, norm_bias: Tensor | None = None) -> Tensor:
    """Project non-overlapping ``P x P`` patches of ``[B, 3, H, W]`` images.

    ``weight`` is ``[3*P*P, D]`` with inputs ordered (channel, row, col),
    i.e. a stride-``P`` convolution.  Returns a ``[B, H/P, W/P, D]`` grid.
    """
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigurationError(f"image size {h}x{w} is not divisible by patch size {p}")
    x = reshape(images, (b, c, h // p, p, w // p, p))
    x = permute(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (b, h // p, w // p, c * p * p))
    x = linear(x, weight, bias)
    if norm_weight is not None:
        x = layer_norm(x, norm_weight, norm_bias)
    return x


def window_partition(x: Tensor, window: int) -> Tensor:
    """``[B, H, W, C] -> [B * nW, M*M, C]`` with windows in row-major order."""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ConfigurationError(f"grid {h}x{w} is not divisible by window size {window}")
    x = reshape(x, (b, h // window, window, w // window, window, c))
    x = permute(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, window * window, c))


def window_reverse(windows: Tensor, window: int, height: int, width: int) -> Tensor:
    c = windows.shape[-1]
    x = reshape(windows, (-1, height // window, width // window, window, window, c))
    x = permute(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, height, width, c))


def cyclic_shift(x: Tensor, shift: int) -> Tensor:
    """Roll the grid by ``(-shift, -shift)``; ``reverse_shift`` undoes it."""
    if shift == 0:
        return x
    return roll(x, (-shift, -shift), (1, 2))


def reverse_shift(x: Tensor, shift: int) -> Tensor:
    if shift == 0:
        return x
    return roll(x, (shift, shift), (1, 2))


def build_attention_mask(height: int, width: int, window: int, shift: int) -> np.ndarray:
    """Additive ``[nW, M*M, M*M]`` mask for attention on a shifted grid.

    Before shifting, each axis is cut into three bands at ``size - M`` and
    ``size - shift``; token pairs from different bands get ``MASK_NEG``.
    """
    if not 0 <= shift < window:
        raise ConfigurationError(f"shift {shift} must lie in [0, {window})")
    n_windows = (height // window) * (width // window)
    if shift == 0:
        return np.zeros((n_windows, window * window, window * window))
    labels = np.zeros((height, width))
    cuts = ((0, -window), (-window, -shift), (-shift, None))
    region = 0
    for hs in cuts:
        for ws in cuts:
            labels[slice(*hs), slice(*ws)] = region
            region += 1
    lw = labels.reshape(height // window, window, width // window, window)
    lw = lw.transpose(0, 2, 1, 3).reshape(n_windows, window * window)
    diff = lw[:, None, :] - lw[:, :, None]
    return np.where(diff != 0, MASK_NEG, 0.0)


def relative_position_index(window: int) -> np.ndarray:
    """``[M*M, M*M]`` map from a token pair to its row in the bias table.

    The row is ``(dr + M - 1) * (2M - 1) + (dc + M - 1)`` for the pair's
    row and column offsets ``dr``, ``dc``.
    """
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def window_attention(windows: Tensor, params: Mapping[str, Tensor], num_heads: int,
                     mask: np.ndarray | None = None, rel_index: np.ndarray | None = None,
                     return_weights: bool = False):
    """Multi-head scaled dot-product attention inside each window.

    ``windows`` is ``[B * nW, N, C]``.  ``mask`` is ``[nW, N, N]`` and is
    tiled across the batch.  Uses ``attn.qkv``, ``attn.proj`` and, when
    present, ``attn.relative_position_bias_table`` from ``params``.
    """
    bw, n, c = windows.shape
    if c % num_heads:
        raise ConfigurationError(f"{c} channels cannot be split across {num_heads} heads")
    d = c // num_heads
    qkv = linear(windows, params["attn.qkv.weight"], params["attn.qkv.bias"])
    qkv = permute(reshape(qkv, (bw, n, 3, num_heads, d)), (2, 0, 3, 1, 4))
    q, k, v = getitem(qkv, 0), getitem(qkv, 1), getitem(qkv, 2)
    attn = matmul(scale(q, d ** -0.5), permute(k, (0, 1, 3, 2)))

    table = params.get("attn.relative_position_bias_table")
    if table is not None:
        if rel_index is None:
            rel_index = relative_position_index(int(round(np.sqrt(n))))
        bias = getitem(table, rel_index.reshape(-1))
        bias = permute(reshape(bias, (n, n, num_heads)), (2, 0, 1))
        attn = add(attn, bias)
    if mask is not None:
        nw = mask.shape[0]
        attn = reshape(attn, (bw // nw, nw, num_heads, n, n))
        attn = add(attn, Tensor(mask[None, :, None], dtype=attn.dtype))
        attn = reshape(attn, (bw, num_heads, n, n))
    weights = softmax(attn, axis=-1)

    out = matmul(weights, v)
    out = reshape(permute(out, (0, 2, 1, 3)), (bw, n, c))
    out = linear(out, params["attn.proj.weight"], params["attn.proj.bias"])
    if return_weights:
        return out, weights
    return out


def mlp(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    h = gelu(linear(x, params["mlp.fc1.weight"], params["mlp.fc1.bias"]))
    return linear(h, params["mlp.fc2.weight"], params["mlp.fc2.bias"])


def swin_block(x: Tensor, params: Mapping[str, Tensor], num_heads: int, window: int, shift: int = 0,
               drop_rate: float = 0.0, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Pre-norm residual block: windowed attention then MLP.

    ``shift > 0`` selects the shifted-window variant with its mask.
    """
    b, h, w, c = x.shape
    shortcut = x
    y = layer_norm(x, params["norm1.weight"], params["norm1.bias"])
    y = cyclic_shift(y, shift)
    mask = build_attention_mask(h, w, window, shift) if shift else None
    y = window_attention(window_partition(y, window), params, num_heads, mask=mask)
    y = reverse_shift(window_reverse(y, window, h, w), shift)
    x = add(shortcut, dropout(y, drop_rate, training, rng))

    y = mlp(layer_norm(x, params["norm2.weight"], params["norm2.bias"]), params)
    return add(x, dropout(y, drop_rate, training, rng))


def patch_merge(x: Tensor, norm_weight: Tensor, norm_bias: Tensor, reduction: Tensor) -> Tensor:
    """``[B, H, W, C] -> [B, H/2, W/2, 2C]``.

    The four tokens of each 2x2 cell are concatenated in the order
    (0,0), (1,0), (0,1), (1,1) as (row, col) offsets, normalized, and
    projected by the bias-free ``reduction`` (``[4C, 2C]``).
    """
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"patch merging needs an even grid, got {h}x{w}")
    x = reshape(x, (b, h // 2, 2, w // 2, 2, c))
    x = permute(x, (0, 1, 3, 4, 2, 5))
    x = reshape(x, (b, h // 2, w // 2, 4 * c))
    x = layer_norm(x, norm_weight, norm_bias)
    return linear(x, reduction)
