"""Dense numeric kernels for the MSCNN layer set.

Tensors are plain ``numpy.ndarray`` objects laid out channels-first
(``C x H x W`` for activations, ``Cout x Cin x K x K`` for filter banks).
Every routine preserves the floating dtype of its inputs, so float64 arrays
can be pushed through the same code for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

# Upper bound on im2col buffer elements; larger convolutions run in row bands.
_COL_BUDGET = 1 << 24


@dataclass
class ConvLayer:
    """Stride-1, zero-padded 2-D convolution parameters."""

    weights: np.ndarray
    bias: np.ndarray
    pad: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2] != self.weights.shape[3]:
            raise ValueError(f"conv weights must be Cout x Cin x K x K, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} output channels"
            )
        if self.pad < 0:
            raise ValueError(f"pad must be non-negative, got {self.pad}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


def _check_input(x: np.ndarray, layer: ConvLayer) -> tuple[int, int]:
    if x.ndim not in (3, 4) or x.shape[-3] != layer.in_channels:
        raise ValueError(
            f"conv input shape {x.shape} incompatible with weights {layer.weights.shape}"
        )
    h_out = x.shape[-2] + 2 * layer.pad - layer.kernel + 1
    w_out = x.shape[-1] + 2 * layer.pad - layer.kernel + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"conv input shape {x.shape} too small for weights {layer.weights.shape} with pad {layer.pad}"
        )
    return h_out, w_out


def _row_bands(h_out: int, w_out: int, cols_per_pixel: int):
    rows = max(1, _COL_BUDGET // max(1, w_out * cols_per_pixel))
    for r0 in range(0, h_out, rows):
        yield r0, min(h_out, r0 + rows)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return x
    h, w = x.shape[-2:]
    xp = np.zeros(x.shape[:-2] + (h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[..., p:p + h, p:p + w] = x
    return xp


def _im2col(xp: np.ndarray, k: int, r0: int, r1: int, w_out: int) -> np.ndarray:
    """Patch matrix of shape (C*k*k, N*(r1-r0)*w_out) for output rows [r0, r1).

    ``xp`` is a padded ``N x C x H x W`` batch.
    """
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp[:, :, r0:], shape=(c, k, k, n, r1 - r0, w_out),
        strides=(sc, sh, sw, sn, sh, sw), writeable=False,
    )
    return windows.reshape(c * k * k, n * (r1 - r0) * w_out)


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Zero-padded stride-1 convolution of a ``C x H x W`` tensor or ``N x C x H x W`` batch."""
    h_out, w_out = _check_input(x, layer)
    batched = x.ndim == 4
    xb = x if batched else x[None]
    n = xb.shape[0]
    k = layer.kernel
    xp = _pad(xb, layer.pad)
    wmat = layer.weights.reshape(layer.out_channels, -1)
    dtype = np.result_type(x, layer.weights)
    out = np.empty((n, layer.out_channels, h_out, w_out), dtype=dtype)
    for r0, r1 in _row_bands(h_out, n * w_out, wmat.shape[1]):
        cols = _im2col(xp, k, r0, r1, w_out)
        band = (wmat @ cols).reshape(layer.out_channels, n, r1 - r0, w_out)
        out[:, :, r0:r1] = band.transpose(1, 0, 2, 3)
    out += layer.bias[:, None, None]
    return out if batched else out[0]


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)`` for ``conv2d_forward``."""
    if x.ndim != 3:
        raise ValueError(f"conv2d_backward expects a C x H x W input, got {x.shape}")
    h_out, w_out = _check_input(x, layer)
    expected = (layer.out_channels, h_out, w_out)
    if grad_out.shape != expected:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match conv output {expected}")
    k, p = layer.kernel, layer.pad
    c = layer.in_channels
    xp = _pad(x, p)[None]
    wmat = layer.weights.reshape(layer.out_channels, -1)
    gflat = grad_out.reshape(layer.out_channels, -1)
    dtype = np.result_type(x, layer.weights, grad_out)

    grad_w = np.zeros(wmat.shape, dtype=dtype)
    grad_xp = np.zeros(xp.shape[1:], dtype=dtype)
    for r0, r1 in _row_bands(h_out, w_out, wmat.shape[1]):
        g = gflat[:, r0 * w_out:r1 * w_out]
        grad_w += g @ _im2col(xp, k, r0, r1, w_out).T
        dcols = (wmat.T @ g).reshape(c, k, k, r1 - r0, w_out)
        for i in range(k):
            for j in range(k):
                grad_xp[:, r0 + i:r1 + i, j:j + w_out] += dcols[:, i, j]
    grad_b = grad_out.sum(axis=(1, 2), dtype=dtype)
    grad_x = grad_xp[:, p:p + x.shape[1], p:p + x.shape[2]] if p else grad_xp
    return np.ascontiguousarray(grad_x), grad_w.reshape(layer.weights.shape), grad_b


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if x.shape != grad_out.shape:
        raise ValueError(f"relu grad shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def maxpool2x2_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping 2x2 max pooling.

    Returns the pooled tensor and, per output cell, the row-major index
    (0..3) of the winning element inside its window. Ties go to the first
    maximal element in scan order.
    """
    if x.ndim not in (3, 4):
        raise ValueError(f"maxpool expects C x H x W or N x C x H x W, got {x.shape}")
    lead, (h, w) = x.shape[:-2], x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool needs even spatial extents, got {h}x{w}")
    windows = x.reshape(*lead, h // 2, 2, w // 2, 2).swapaxes(-3, -2).reshape(*lead, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.uint8)


def maxpool2x2_backward(indices: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if indices.shape != grad_out.shape:
        raise ValueError(f"pool indices {indices.shape} do not match grad_out {grad_out.shape}")
    lead, (h2, w2) = grad_out.shape[:-2], grad_out.shape[-2:]
    windows = np.zeros(grad_out.shape + (4,), dtype=grad_out.dtype)
    np.put_along_axis(windows, indices[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    windows = windows.reshape(*lead, h2, w2, 2, 2).swapaxes(-3, -2)
    return windows.reshape(*lead, 2 * h2, 2 * w2)


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    lead, spatial = parts[0].shape[:-3], parts[0].shape[-2:]
    for i, part in enumerate(parts):
        if part.ndim != len(lead) + 3 or part.shape[:-3] != lead or part.shape[-2:] != spatial:
            raise ValueError(f"part {i} has shape {part.shape}, expected (*, {spatial[0]}, {spatial[1]})")
    return np.concatenate(parts, axis=-3)


def split_channels(grad_out: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    """Backward of ``concat_channels``: slice ``grad_out`` back into branch gradients."""
    if sum(sizes) != grad_out.shape[-3]:
        raise ValueError(f"channel sizes {sizes} do not sum to {grad_out.shape[-3]}")
    bounds = np.cumsum(sizes)[:-1]
    return np.split(grad_out, bounds, axis=-3)


@dataclass
class OptimizerState:
    """Momentum buffers for SGD, one per parameter array."""

    velocity: list[np.ndarray]
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    names: list[str] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float, momentum: float = 0.9,
                   weight_decay: float = 0.0005, names: list[str] | None = None) -> "OptimizerState":
        if not (np.isfinite(lr) and lr >= 0):
            raise ValueError(f"lr must be finite and non-negative, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        if not (np.isfinite(weight_decay) and weight_decay >= 0):
            raise ValueError(f"weight_decay must be finite and non-negative, got {weight_decay}")
        return cls([np.zeros_like(p) for p in params], lr, momentum, weight_decay, list(names or []))


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState) -> None:
    """In-place SGD update with L2 decay folded into the gradient.

    ``v <- momentum * v - lr * (grad + weight_decay * param)``, then
    ``param <- param + v``.
    """
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ValueError(
            f"got {len(params)} params, {len(grads)} grads, {len(state.velocity)} velocity buffers"
        )
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocity)):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"parameter {_label(state, i)}: shapes {p.shape}, {g.shape}, {v.shape} disagree")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {_label(state, i)}")
    for p, g, v in zip(params, grads, state.velocity):
        scalar = p.dtype.type
        step = g.astype(p.dtype, copy=False) + scalar(state.weight_decay) * p
        v *= scalar(state.momentum)
        v -= scalar(state.lr) * step
        p += v


def _label(state: OptimizerState, i: int) -> str:
    return state.names[i] if i < len(state.names) else str(i)
