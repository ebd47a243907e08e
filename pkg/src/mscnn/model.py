"""The multi-scale crowd-counting network.

A single column: a 9x9 feature-remap convolution, five multi-scale blobs
(parallel convolutions of different kernel sizes, concatenated) with two 2x2
max pools, and a 1x1 regression head. Every convolution, including the last,
is followed by a ReLU, so predicted densities are non-negative.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor_core as tc

PUBLISHED_PARAMS = 2_900_000
CHECKPOINT_MAGIC = b"MSCN1"


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int
    relu: bool = True

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2

    @property
    def out(self) -> int:
        return self.out_channels


@dataclass(frozen=True)
class MSBSpec:
    branch_kernels: tuple[int, ...]
    filters_per_branch: int
    in_channels: int

    @property
    def out(self) -> int:
        return len(self.branch_kernels) * self.filters_per_branch

    def branches(self) -> list[ConvSpec]:
        return [ConvSpec(self.in_channels, self.filters_per_branch, k, relu=False)
                for k in self.branch_kernels]


@dataclass(frozen=True)
class PoolSpec:
    size: int = 2


LayerSpec = Union[ConvSpec, MSBSpec, PoolSpec]


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    input_channels: int = 1

    def __post_init__(self):
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be positive, got {self.input_channels}")
        channels = self.input_channels
        convs = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, PoolSpec):
                if layer.size != 2:
                    raise ValueError(f"layer {i}: only 2x2 pooling is supported")
                continue
            if layer.in_channels != channels:
                raise ValueError(f"layer {i}: expects {layer.in_channels} input channels, gets {channels}")
            kernels = layer.branch_kernels if isinstance(layer, MSBSpec) else (layer.kernel,)
            filters = layer.filters_per_branch if isinstance(layer, MSBSpec) else layer.out_channels
            if not kernels or any(k < 1 or k % 2 == 0 for k in kernels):
                raise ValueError(f"layer {i}: kernel sizes must be odd and positive, got {kernels}")
            if filters < 1:
                raise ValueError(f"layer {i}: filter count must be positive, got {filters}")
            channels = layer.out
            convs.append(layer)
        if not convs or channels != 1:
            raise ValueError("the network must end in a single-channel convolution")

    @property
    def downsample(self) -> int:
        return 2 ** sum(isinstance(layer, PoolSpec) for layer in self.layers)


def default_spec(input_channels: int = 1, divisor: int = 1) -> ModelSpec:
    """The reference architecture, optionally with every filter count divided by ``divisor``."""

    def n(filters: int) -> int:
        return max(1, filters // divisor)

    c0 = n(64)
    m1 = MSBSpec((9, 7, 5, 3), n(16), c0)
    m2 = MSBSpec((9, 7, 5, 3), n(32), m1.out)
    m3 = MSBSpec((9, 7, 5, 3), n(32), m2.out)
    m4 = MSBSpec((7, 5, 3), n(64), m3.out)
    m5 = MSBSpec((7, 5, 3), n(64), m4.out)
    mlp = ConvSpec(m5.out, n(1000), 1)
    return ModelSpec(
        (ConvSpec(input_channels, c0, 9), m1, PoolSpec(), m2, m3, PoolSpec(), m4, m5, mlp,
         ConvSpec(mlp.out, 1, 1)),
        input_channels,
    )


@dataclass
class Model:
    spec: ModelSpec
    layers: list = field(repr=False)  # per spec layer: ConvLayer, list[ConvLayer] for MSB, None for pools
    rng_seed: int = 0

    def conv_layers(self) -> list[tuple[str, tc.ConvLayer]]:
        named = []
        for i, (layer_spec, layer) in enumerate(zip(self.spec.layers, self.layers)):
            if isinstance(layer_spec, ConvSpec):
                named.append((f"layer{i}.conv{layer_spec.kernel}x{layer_spec.kernel}", layer))
            elif isinstance(layer_spec, MSBSpec):
                named.extend((f"layer{i}.msb{k}x{k}", conv)
                             for k, conv in zip(layer_spec.branch_kernels, layer))
        return named

    def parameters(self) -> list[np.ndarray]:
        params = []
        for _, conv in self.conv_layers():
            params.extend((conv.weights, conv.bias))
        return params

    def parameter_names(self) -> list[str]:
        names = []
        for name, _ in self.conv_layers():
            names.extend((f"{name}.weight", f"{name}.bias"))
        return names

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return forward(self, image)


def _new_conv(spec: ConvSpec, std: float, rng: np.random.Generator, dtype) -> tc.ConvLayer:
    shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    weights = (rng.standard_normal(shape) * std).astype(dtype)
    return tc.ConvLayer(weights, np.zeros(spec.out_channels, dtype=dtype), spec.pad)


def build_mscnn(spec: ModelSpec | None = None, init_std: float = 0.01, seed: int = 0,
                dtype=tc.DEFAULT_DTYPE, rng: np.random.Generator | None = None) -> Model:
    """Instantiate ``spec`` with N(0, init_std^2) weights and zero biases."""
    if not init_std > 0:
        raise ValueError(f"init_std must be positive, got {init_std}")
    spec = spec or default_spec()
    rng = rng if rng is not None else np.random.default_rng(seed)
    layers = []
    for layer_spec in spec.layers:
        if isinstance(layer_spec, ConvSpec):
            layers.append(_new_conv(layer_spec, init_std, rng, dtype))
        elif isinstance(layer_spec, MSBSpec):
            layers.append([_new_conv(b, init_std, rng, dtype) for b in layer_spec.branches()])
        else:
            layers.append(None)
    return Model(spec, layers, seed)


def msb_forward(x: np.ndarray, branches: list[tc.ConvLayer]) -> np.ndarray:
    """Run every branch on ``x`` and stack the results channel-wise (pre-activation)."""
    return tc.concat_channels([tc.conv2d_forward(x, conv) for conv in branches])


def _check_image(model: Model, image: np.ndarray) -> None:
    factor = model.spec.downsample
    if image.ndim != 3 or image.shape[0] != model.spec.input_channels:
        raise ValueError(
            f"expected a {model.spec.input_channels} x H x W image, got shape {image.shape}"
        )
    if image.shape[1] % factor or image.shape[2] % factor:
        raise ValueError(f"image extents {image.shape[1:]} must be divisible by {factor}")


def forward_with_cache(model: Model, image: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass that also returns the per-layer state ``backward`` needs."""
    _check_image(model, image)
    x = image.astype(model.dtype, copy=False)
    cache = []
    for layer_spec, layer in zip(model.spec.layers, model.layers):
        if isinstance(layer_spec, PoolSpec):
            y, idx = tc.maxpool2x2_forward(x)
            cache.append(idx)
            x = y
            continue
        pre = tc.conv2d_forward(x, layer) if isinstance(layer_spec, ConvSpec) else msb_forward(x, layer)
        cache.append((x, pre))
        x = tc.relu_forward(pre) if layer_activation(layer_spec) else pre
    return x, cache


def forward(model: Model, image: np.ndarray) -> np.ndarray:
    return forward_with_cache(model, image)[0]


def layer_activation(layer_spec: LayerSpec) -> bool:
    """Whether a ReLU follows this layer."""
    return layer_spec.relu if isinstance(layer_spec, ConvSpec) else isinstance(layer_spec, MSBSpec)


def run_layers(model: Model, x: np.ndarray, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Apply layers ``[start, stop)`` to a tensor or an ``N x C x H x W`` batch, keeping no cache."""
    for layer_spec, layer in list(zip(model.spec.layers, model.layers))[start:stop]:
        if isinstance(layer_spec, PoolSpec):
            x = tc.maxpool2x2_forward(x)[0]
            continue
        x = tc.conv2d_forward(x, layer) if isinstance(layer_spec, ConvSpec) else msb_forward(x, layer)
        if layer_activation(layer_spec):
            x = tc.relu_forward(x)
    return x


def backward(model: Model, image: np.ndarray | None, grad_out: np.ndarray,
             cache: list | None = None) -> list[np.ndarray]:
    """Gradients of every parameter, ordered like ``model.parameters()``.

    Pass the ``cache`` from ``forward_with_cache`` to skip recomputing the
    forward pass.
    """
    if cache is None:
        out, cache = forward_with_cache(model, image)
    else:
        out = None
    if out is not None and grad_out.shape != out.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output {out.shape}")
    if grad_out.ndim != 3 or grad_out.shape[0] != 1:
        raise ValueError(f"grad_out must be 1 x H x W, got {grad_out.shape}")

    g = grad_out.astype(model.dtype, copy=False)
    grads_per_layer = []
    for layer_spec, layer, state in reversed(list(zip(model.spec.layers, model.layers, cache))):
        if isinstance(layer_spec, PoolSpec):
            g = tc.maxpool2x2_backward(state, g)
            continue
        x, pre = state
        if pre.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match activation {pre.shape}")
        if layer_activation(layer_spec):
            g = tc.relu_backward(pre, g)
        if isinstance(layer_spec, ConvSpec):
            g, gw, gb = tc.conv2d_backward(x, layer, g)
            grads_per_layer.append([gw, gb])
        else:
            sizes = [conv.out_channels for conv in layer]
            g_in = np.zeros_like(x, dtype=g.dtype)
            branch_grads = []
            for conv, gb_out in zip(layer, tc.split_channels(g, sizes)):
                gx, gw, gb = tc.conv2d_backward(x, conv, gb_out)
                g_in += gx
                branch_grads.extend((gw, gb))
            grads_per_layer.append(branch_grads)
            g = g_in
    return [g for layer_grads in reversed(grads_per_layer) for g in layer_grads]


def loss_and_grad(pred: np.ndarray, target: np.ndarray, batch_count: int = 1) -> tuple[float, np.ndarray]:
    """Halved squared Euclidean distance divided by the batch size ``N``.

    Returns ``(loss, d loss / d pred)`` for one sample of the batch.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match target {target.shape}")
    if batch_count < 1:
        raise ValueError(f"batch_count must be >= 1, got {batch_count}")
    residual = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.sum(residual * residual) / (2 * batch_count))
    return loss, (residual / batch_count).astype(pred.dtype)


def param_count(model_or_spec) -> tuple[int, list[tuple[str, int]]]:
    """Total learnable weights and biases, with a per-convolution breakdown."""
    spec = model_or_spec.spec if isinstance(model_or_spec, Model) else model_or_spec
    rows = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvSpec):
            convs = [(f"layer{i}.conv{layer.kernel}x{layer.kernel}", layer)]
        elif isinstance(layer, MSBSpec):
            convs = [(f"layer{i}.msb{b.kernel}x{b.kernel}", b) for b in layer.branches()]
        else:
            continue
        for name, conv in convs:
            rows.append((name, conv.out_channels * conv.in_channels * conv.kernel ** 2 + conv.out_channels))
    return sum(n for _, n in rows), rows


# -- checkpoints ------------------------------------------------------------
# Layout (all integers little-endian uint32 unless noted):
#   b"MSCN1", seed (int64), input_channels, layer count,
#   per layer: kind byte (0 conv, 1 msb, 2 pool) then
#     conv: in, out, kernel, relu byte | msb: in, filters, n_branches, kernels... | pool: size
#   parameter count, then per tensor: ndim, dims..., float32 data.

_CONV, _MSB, _POOL = 0, 1, 2


def _u32(*values: int) -> bytes:
    return struct.pack(f"<{len(values)}I", *values)


def save_checkpoint(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<q", model.rng_seed))
    buf.write(_u32(model.spec.input_channels, len(model.spec.layers)))
    for layer in model.spec.layers:
        if isinstance(layer, ConvSpec):
            buf.write(bytes([_CONV]) + _u32(layer.in_channels, layer.out_channels, layer.kernel)
                      + bytes([int(layer.relu)]))
        elif isinstance(layer, MSBSpec):
            buf.write(bytes([_MSB]) + _u32(layer.in_channels, layer.filters_per_branch,
                                           len(layer.branch_kernels), *layer.branch_kernels))
        else:
            buf.write(bytes([_POOL]) + _u32(layer.size))
    params = model.parameters()
    buf.write(_u32(len(params)))
    for p in params:
        buf.write(_u32(p.ndim, *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        values = struct.unpack(f"<{count}I", self.take(4 * count))
        return values if count > 1 else values[0]


def load_checkpoint(path, dtype=tc.DEFAULT_DTYPE) -> Model:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an MSCN1 checkpoint")
    (seed,) = struct.unpack("<q", r.take(8))
    input_channels, n_layers = r.u32(2)
    layers: list[LayerSpec] = []
    for _ in range(n_layers):
        kind = r.take(1)[0]
        if kind == _CONV:
            cin, cout, k = r.u32(3)
            layers.append(ConvSpec(cin, cout, k, relu=bool(r.take(1)[0])))
        elif kind == _MSB:
            cin, filters, n = r.u32(3)
            kernels = r.u32(n) if n > 1 else (r.u32(),)
            layers.append(MSBSpec(tuple(kernels), filters, cin))
        elif kind == _POOL:
            layers.append(PoolSpec(r.u32()))
        else:
            raise ValueError(f"unknown layer kind {kind} at byte {r.pos - 1}")
    spec = ModelSpec(tuple(layers), input_channels)
    model = build_mscnn(spec, seed=seed, dtype=dtype)
    params = model.parameters()
    if r.u32() != len(params):
        raise ValueError(f"{path}: parameter tensor count does not match the stored architecture")
    for p in params:
        ndim = r.u32()
        shape = r.u32(ndim) if ndim > 1 else (r.u32(),)
        if tuple(shape) != p.shape:
            raise ValueError(f"{path}: tensor shape {tuple(shape)} does not match expected {p.shape}")
        p[...] = np.frombuffer(r.take(4 * p.size), dtype="<f4").reshape(p.shape)
    if r.pos != len(r.data):
        raise ValueError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return model
