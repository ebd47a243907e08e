"""Training samples, the two augmentation schemes, SGD training and k-fold splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import tensor_core as tc
from .density import DensityMap, HeadAnnotations, KernelParams, downsample_sum, render_density_map
from .rng import stream

log = logging.getLogger(__name__)

STRIDE = 4


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 1
    batch_size: int = 1
    seed: int = 0
    init_std: float = 0.01
    subtract_mean: bool = False

    def __post_init__(self):
        for name in ("lr", "momentum", "weight_decay", "init_std"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class Sample:
    """An image (``1 x H x W`` in [0, 1]) with its head annotations."""

    image: np.ndarray
    annotations: HeadAnnotations
    id: str = ""
    kernel: KernelParams = field(default_factory=KernelParams)
    _target: DensityMap | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.image.ndim != 3:
            raise ValueError(f"sample image must be C x H x W, got {self.image.shape}")
        h, w = self.image.shape[1:]
        if self.annotations.image_size != (w, h):
            raise ValueError(
                f"annotations sized {self.annotations.image_size} for a {w}x{h} image"
            )

    @property
    def size(self) -> tuple[int, int]:
        """``(width, height)``."""
        return self.image.shape[2], self.image.shape[1]

    @property
    def count(self) -> int:
        return len(self.annotations)

    @property
    def target(self) -> DensityMap:
        """Ground-truth density sum-pooled to the network's output resolution."""
        if self._target is None:
            w, h = self.size
            if w % STRIDE or h % STRIDE:
                raise ValueError(f"sample {self.id!r} is {w}x{h}; extents must be multiples of {STRIDE}")
            self._target = downsample_sum(render_density_map(self.annotations, self.kernel), STRIDE)
        return self._target


def crop(sample: Sample, x0: int, y0: int, w: int, h: int, suffix: str = "") -> Sample:
    """Cut a ``w x h`` patch at ``(x0, y0)``, zero-filling anything past the image edge."""
    img_w, img_h = sample.size
    patch = np.zeros(sample.image.shape[:1] + (h, w), dtype=sample.image.dtype)
    src = sample.image[:, y0:min(y0 + h, img_h), x0:min(x0 + w, img_w)]
    patch[:, :src.shape[1], :src.shape[2]] = src
    pts = sample.annotations.points
    keep = (pts[:, 0] >= x0) & (pts[:, 0] < x0 + w) & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + h)
    moved = pts[keep] - np.array([x0, y0], dtype=np.float64)
    return Sample(patch, HeadAnnotations(moved, (w, h)), sample.id + suffix, sample.kernel)


def hflip(sample: Sample, suffix: str = "f") -> Sample:
    w, h = sample.size
    pts = sample.annotations.points.copy()
    # mirror pixel columns j -> w-1-j; points in the last half pixel clamp to column 0
    pts[:, 0] = np.maximum(w - 1 - pts[:, 0], 0.0)
    image = np.ascontiguousarray(sample.image[:, :, ::-1])
    return Sample(image, HeadAnnotations(pts, (w, h)), sample.id + suffix, sample.kernel)


def fit_to_stride(sample: Sample, stride: int = STRIDE) -> Sample:
    """Centre-crop to the largest box whose extents are multiples of ``stride``."""
    w, h = sample.size
    fw, fh = w - w % stride, h - h % stride
    if fw == 0 or fh == 0:
        raise ValueError(f"sample {sample.id!r} ({w}x{h}) is smaller than {stride}x{stride}")
    if (fw, fh) == (w, h):
        return sample
    return crop(sample, (w - fw) // 2, (h - fh) // 2, fw, fh)


def augment_ninecrop(sample: Sample) -> list[Sample]:
    """Nine 90%-size patches anchored on a 3x3 grid, each also mirrored (18 samples)."""
    w, h = sample.size
    if w < 10 or h < 10:
        raise ValueError(f"nine-crop needs at least a 10x10 image, got {w}x{h}")
    cw, ch = int(math.floor(0.9 * w)), int(math.floor(0.9 * h))
    xs = (0, (w - cw) // 2, w - cw)
    ys = (0, (h - ch) // 2, h - ch)
    out = []
    for iy, y0 in enumerate(ys):
        for ix, x0 in enumerate(xs):
            patch = crop(sample, x0, y0, cw, ch, f"/c{3 * iy + ix}")
            out.extend((patch, hflip(patch)))
    return out


def augment_randomcrop(sample: Sample, n: int, size: int, rng: np.random.Generator) -> list[Sample]:
    """``n`` uniformly placed square patches and their mirrors (``2n`` samples).

    ``size`` is trimmed down to a multiple of 4; images smaller than the patch
    are zero-padded on the bottom/right.
    """
    s = size - size % STRIDE
    if s < STRIDE or n < 1:
        raise ValueError(f"need n >= 1 and size >= {STRIDE}, got n={n}, size={size}")
    w, h = sample.size
    out = []
    for i in range(n):
        x0 = int(rng.integers(0, max(w - s, 0) + 1))
        y0 = int(rng.integers(0, max(h - s, 0) + 1))
        patch = crop(sample, x0, y0, s, s, f"/r{i}")
        out.extend((patch, hflip(patch)))
    return out


def model_input(image: np.ndarray, subtract_mean: bool = False) -> np.ndarray:
    return image - image.mean() if subtract_mean else image


@dataclass(frozen=True)
class LossRecord:
    iteration: int
    epoch: int
    sample_id: str
    loss: float


def train(model: mdl.Model, samples: list[Sample], config: TrainConfig,
          state: tc.OptimizerState | None = None) -> tuple[mdl.Model, list[LossRecord]]:
    """Minimise the density-map loss with momentum SGD, one step per minibatch.

    Samples are visited in a freshly shuffled order each epoch. The model is
    updated in place and returned together with one loss record per step.
    """
    if not samples:
        raise ValueError("train needs at least one sample")
    prepared = [fit_to_stride(s) for s in samples]
    params = model.parameters()
    if state is None:
        state = tc.OptimizerState.for_params(params, config.lr, config.momentum,
                                             config.weight_decay, model.parameter_names())
    order_rng = stream(config.seed, "shuffle")
    history: list[LossRecord] = []
    iteration = 0
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(prepared))
        for b0 in range(0, len(order), config.batch_size):
            batch = [prepared[i] for i in order[b0:b0 + config.batch_size]]
            total = [np.zeros_like(p) for p in params]
            loss = 0.0
            for s in batch:
                pred, cache = mdl.forward_with_cache(model, model_input(s.image, config.subtract_mean))
                target = s.target.grid[None].astype(pred.dtype)
                sample_loss, g = mdl.loss_and_grad(pred, target, len(batch))
                loss += sample_loss
                for acc, grad in zip(total, mdl.backward(model, None, g, cache=cache)):
                    acc += grad
            if not math.isfinite(loss):
                raise TrainingDiverged(iteration, loss)
            tc.sgd_step(params, total, state)
            history.append(LossRecord(iteration, epoch, ";".join(s.id for s in batch), loss))
            if iteration % 100 == 0:
                log.info("iter %d epoch %d loss %.6g", iteration, epoch, loss)
            iteration += 1
    return model, history


def write_loss_csv(history: list[LossRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "epoch", "sample_id", "loss"])
        for r in history:
            writer.writerow([r.iteration, r.epoch, r.sample_id, repr(r.loss)])


def moving_average(values, window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        raise ValueError(f"need at least {window} values, got {len(values)}")
    return np.convolve(values, np.ones(window) / window, mode="valid")


def kfold_splits(samples: list, k: int, seed: int = 0) -> list[tuple[list, list]]:
    """Shuffle once, cut into ``k`` near-equal folds (extras go to the first folds).

    Returns ``(train, validation)`` pairs, one per fold.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(samples):
        raise ValueError(f"cannot make {k} folds from {len(samples)} samples")
    order = stream(seed, "folds").permutation(len(samples))
    base, extra = divmod(len(samples), k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(order[start:start + size])
        start += size
    out = []
    for i, fold in enumerate(folds):
        held = set(fold.tolist())
        train_idx = [j for j in order if j not in held]
        out.append(([samples[j] for j in train_idx], [samples[j] for j in fold]))
    return out
