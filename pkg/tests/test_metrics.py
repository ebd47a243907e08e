import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mscnn import metrics
from mscnn import model as mdl
from mscnn.density import HeadAnnotations
from mscnn.trainer import Sample, fit_to_stride, kfold_splits

finite = st.floats(-1e4, 1e4, allow_nan=False)
pairs = st.lists(st.tuples(finite, finite), min_size=1, max_size=40)


def samples(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        m = int(rng.integers(0, 6))
        pts = rng.uniform(0, size - 1e-6, size=(m, 2))
        out.append(Sample(rng.random((1, size, size), dtype=np.float32), HeadAnnotations(pts, (size, size)), f"img{i}"))
    return out


class TestMAE:
    def test_identity(self):
        assert metrics.mae([3, 4, 5], [3, 4, 5]) == 0

    def test_hand_value(self):
        assert metrics.mae([10, 20], [12, 16]) == 3.0

    def test_single(self):
        assert metrics.mae([100], [90]) == 10

    @pytest.mark.parametrize("t,e", [([], []), ([1, 2], [1])])
    def test_rejects_bad_lengths(self, t, e):
        with pytest.raises(ValueError):
            metrics.mae(t, e)


class TestMSE:
    def test_identity(self):
        assert metrics.mse([3, 4], [3, 4]) == 0

    def test_hand_value(self):
        assert metrics.mse([10, 20], [12, 16]) == pytest.approx(math.sqrt(10), abs=1e-12)

    def test_constant_offset(self):
        truth = np.arange(10.0)
        assert metrics.mse(truth, truth - 2.5) == pytest.approx(2.5)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            metrics.mse([], [])


class TestProperties:
    @settings(max_examples=200)
    @given(pairs)
    def test_symmetric_and_ordered(self, data):
        t, e = zip(*data)
        assert metrics.mae(t, e) == pytest.approx(metrics.mae(e, t))
        assert metrics.mse(t, e) == pytest.approx(metrics.mse(e, t))
        assert 0 <= metrics.mae(t, e) <= metrics.mse(t, e) * (1 + 1e-12) + 1e-12

    @settings(max_examples=100)
    @given(pairs, st.floats(0.01, 100))
    def test_homogeneous(self, data, lam):
        t, e = (np.array(v) for v in zip(*data))
        r = t - e
        assert metrics.mae(lam * r, 0 * r) == pytest.approx(lam * metrics.mae(r, 0 * r), rel=1e-9, abs=1e-9)
        assert metrics.mse(lam * r, 0 * r) == pytest.approx(lam * metrics.mse(r, 0 * r), rel=1e-9, abs=1e-9)


class TestEvaluate:
    def test_oracle_model(self):
        data = samples(4)
        lookup = {s.image.tobytes(): s for s in data}
        report = metrics.evaluate(lambda img: lookup[img.tobytes()].target.grid[None], data)
        assert report.mae == 0 and report.mse == 0

    def test_zero_model(self):
        data = samples(5)
        model = mdl.build_mscnn(mdl.default_spec(divisor=8))
        for p in model.parameters():
            p[...] = 0
        report = metrics.evaluate(model, data)
        assert all(e == 0 for _, _, e in report.per_image)
        assert report.mae == pytest.approx(np.mean([s.count for s in data]))
        assert report.params == mdl.param_count(model)[0]

    def test_centre_crop_recount(self):
        s = Sample(np.zeros((1, 18, 18), np.float32), HeadAnnotations([[0.5, 9], [9, 9]], (18, 18)), "odd")
        report = metrics.evaluate(lambda img: np.zeros((1,) + tuple(d // 4 for d in img.shape[1:])), [s])
        assert report.per_image == [("odd", 1.0, 0.0)]

    def test_error_names_image(self):
        with pytest.raises(ValueError, match="img0"):
            metrics.evaluate(mdl.build_mscnn(mdl.default_spec(input_channels=3, divisor=8)), samples(1))

    def test_json_schema(self):
        report = metrics.EvalReport(1.5, 2.0, 10, [("a", 3.0, 1.5)])
        doc = json.loads(report.to_json())
        assert doc["mae"] == 1.5 and doc["mse"] == 2.0 and doc["params"] == 10
        assert doc["per_image"] == [{"id": "a", "truth": 3.0, "estimate": 1.5}]
        assert "root" in doc["mse_definition"]
        assert doc["reference"]["results"]["ShanghaiTech Part_A"] == {"mae": 83.8, "mse": 127.4}

    def test_reference_params(self):
        assert metrics.REFERENCE_PARAMS == {"MCNN": 19.2e6, "Zhang et al.": 7.1e6, "CrowdNet": 14.8e6,
                                            "MSCNN": 2.9e6}


class TestKFoldEvaluate:
    def offset_model(self, c):
        return lambda img: np.full((1,) + tuple(d // 4 for d in img.shape[1:]), c / (img.shape[1] * img.shape[2] / 16))

    def test_pooled_size(self):
        splits = kfold_splits(samples(50), 5)
        report = metrics.kfold_evaluate([self.offset_model(1.0)] * 5, splits)
        assert len(report.per_image) == 50

    def test_constant_residual_pooled_equals_fold(self):
        data = samples(12)
        # a model that predicts truth + 1 for every image
        lookup = {s.image.tobytes(): s for s in data}

        def plus_one(img):
            grid = fit_to_stride(lookup[img.tobytes()]).target.grid.copy()
            grid[0, 0] += 1.0
            return grid[None]

        splits = kfold_splits(data, 3)
        pooled = metrics.kfold_evaluate([plus_one] * 3, splits)
        fold = metrics.evaluate(plus_one, splits[1][1])
        assert pooled.mae == pytest.approx(fold.mae) == pytest.approx(1.0)

    def test_permutation_invariant(self):
        splits = kfold_splits(samples(15), 3)
        models = [self.offset_model(c) for c in (0.5, 1.0, 3.0)]
        a = metrics.kfold_evaluate(models, splits)
        b = metrics.kfold_evaluate(models[::-1], splits[::-1])
        assert a.mae == pytest.approx(b.mae) and a.mse == pytest.approx(b.mse)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            metrics.kfold_evaluate([self.offset_model(0)], kfold_splits(samples(4), 2))
