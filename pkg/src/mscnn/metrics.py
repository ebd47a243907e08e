"""Count-error metrics and evaluation reports.

``mse`` follows the crowd-counting convention: despite the name it is the
root of the mean squared count error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .trainer import Sample, fit_to_stride, model_input

# Published PARAMS figures (millions of parameters) used as context in reports.
REFERENCE_PARAMS = {"MCNN": 19.2e6, "Zhang et al.": 7.1e6, "CrowdNet": 14.8e6, "MSCNN": 2.9e6}

# Published count errors for the full-scale datasets. They are echoed for
# context only; desk-scale synthetic runs cannot reproduce them.
REFERENCE_RESULTS = {
    "ShanghaiTech Part_A": {"mae": 83.8, "mse": 127.4},
    "ShanghaiTech Part_B": {"mae": 17.7, "mse": 30.2},
    "UCF_CC_50": {"mae": 363.7, "mse": 468.4},
}

MSE_DEFINITION = "mse = sqrt(mean((truth - estimate)^2)), i.e. root-mean-square count error"


def _residuals(truth, est) -> np.ndarray:
    t = np.asarray(truth, dtype=np.float64)
    e = np.asarray(est, dtype=np.float64)
    if t.shape != e.shape or t.ndim != 1:
        raise ValueError(f"truth and estimate lengths differ: {t.shape} vs {e.shape}")
    if t.size == 0:
        raise ValueError("metrics need at least one image")
    return t - e


def mae(truth, est) -> float:
    return float(np.mean(np.abs(_residuals(truth, est))))


def mse(truth, est) -> float:
    r = _residuals(truth, est)
    return math.sqrt(float(np.mean(r * r)))


@dataclass
class EvalReport:
    mae: float
    mse: float
    params: int
    per_image: list[tuple[str, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mse": self.mse,
            "params": self.params,
            "per_image": [{"id": i, "truth": t, "estimate": e} for i, t, e in self.per_image],
            "mse_definition": MSE_DEFINITION,
            "reference": {
                "note": "published full-dataset results; not reproduced by this run",
                "results": REFERENCE_RESULTS,
                "params": REFERENCE_PARAMS,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())


def _from_pairs(pairs: list[tuple[str, float, float]], params: int) -> EvalReport:
    truth = [t for _, t, _ in pairs]
    est = [e for _, _, e in pairs]
    return EvalReport(mae(truth, est), mse(truth, est), params, pairs)


def evaluate(model, samples: list[Sample], subtract_mean: bool = False) -> EvalReport:
    """Count every sample with ``model`` and aggregate the errors.

    ``model`` is a :class:`~mscnn.model.Model` or any callable mapping an image
    to a density grid. Images are centre-cropped to multiples of 4 and the
    true count is taken inside the same box.
    """
    pairs = []
    for s in samples:
        fitted = fit_to_stride(s)
        try:
            pred = model(model_input(fitted.image, subtract_mean))
        except ValueError as exc:
            raise ValueError(f"image {s.id!r}: {exc}") from None
        pairs.append((s.id, float(fitted.count), float(np.sum(pred, dtype=np.float64))))
    params = mdl.param_count(model)[0] if isinstance(model, mdl.Model) else 0
    return _from_pairs(pairs, params)


def kfold_evaluate(models: list, splits: list[tuple[list, list]], subtract_mean: bool = False) -> EvalReport:
    """Pool each fold's validation estimates, then score the pooled list once."""
    if len(models) != len(splits):
        raise ValueError(f"{len(models)} models for {len(splits)} splits")
    pairs = []
    for m, (_, val) in zip(models, splits):
        pairs.extend(evaluate(m, val, subtract_mean).per_image)
    params = mdl.param_count(models[0])[0] if models and isinstance(models[0], mdl.Model) else 0
    return _from_pairs(pairs, params)
