"""Tests for the scikit-learn style estimator wrappers."""

import doctest

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from actress import estimators
from actress.estimators import ActressGrounder, SupervisedGrounder, boxes_of, check_boxes, check_samples
from actress.synthdata import GenSpec, generate_dataset

TINY = dict(burn_in_epochs=2, stage_epochs=1, n_stages=1, d_model=16, batch_size=8)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(GenSpec(n=60, seed=5))


def partly_labeled(data, n_labeled):
    y = boxes_of(data)
    y[n_labeled:] = np.nan
    return y


class TestValidation:
    def test_samples(self, data):
        with pytest.raises(ValueError):
            check_samples([])
        with pytest.raises(TypeError):
            check_samples(data[0])
        with pytest.raises(TypeError):
            check_samples([data[0], "x"])
        with pytest.raises(ValueError):
            check_samples([data[0], data[0]])
        assert check_samples(tuple(data[:3])) == data[:3]

    def test_boxes(self):
        good = np.tile([0.5, 0.5, 0.2, 0.2], (3, 1))
        np.testing.assert_array_equal(check_boxes(good, 3), good)
        with pytest.raises(ValueError):
            check_boxes(good, 4)
        partial = good.copy()
        partial[1, 2] = np.nan
        with pytest.raises(ValueError):
            check_boxes(partial, 3)
        outside = good.copy()
        outside[0, 0] = 1.5
        with pytest.raises(ValueError):
            check_boxes(outside, 3)
        missing = good.copy()
        missing[2] = np.nan
        assert np.isnan(check_boxes(missing, 3)[2]).all()
        with pytest.raises(ValueError):
            check_boxes(missing, 3, allow_missing=False)

    def test_no_labeled_rows(self, data):
        with pytest.raises(ValueError):
            ActressGrounder(**TINY).fit(data[:10], np.full((10, 4), np.nan))

    def test_predict_before_fit(self, data):
        with pytest.raises(NotFittedError):
            ActressGrounder().predict(data[:2])


class TestParams:
    def test_get_set_clone(self):
        est = ActressGrounder(n_stages=2, lr=1e-3)
        assert est.get_params()["n_stages"] == 2
        copy = clone(est)
        assert copy.get_params() == est.get_params() and copy is not est
        assert est.set_params(seed=4).seed == 4


class TestFit:
    def test_actress_fit_predict_score(self, data):
        y = partly_labeled(data, 12)
        est = ActressGrounder(**TINY).fit(data, y)
        assert est.n_labeled_ == 12 and est.n_unlabeled_ == 48
        assert [r.kind for r in est.reports_] == ["burn_in", "active"]
        pred = est.predict(data[:5])
        assert pred.shape == (5, 4) and np.all(np.isfinite(pred))
        assert est.predict_quantized(data[:5]).shape == (5, 4)
        assert 0.0 <= est.score(data[:20], boxes_of(data[:20])) <= 1.0

    def test_deterministic(self, data):
        y = partly_labeled(data, 12)
        a = ActressGrounder(**TINY).fit(data, y).predict(data[:4])
        b = ActressGrounder(**TINY).fit(data, y).predict(data[:4])
        np.testing.assert_array_equal(a, b)

    def test_supervised(self, data):
        y = partly_labeled(data, 12)
        est = SupervisedGrounder(**TINY).fit(data, y)
        assert est.predict(data[:3]).shape == (3, 4)
        assert all(r.kind != "active" for r in est.reports_)

    def test_score_requires_labels(self, data):
        est = SupervisedGrounder(**TINY).fit(data, partly_labeled(data, 12))
        with pytest.raises(ValueError):
            est.score(data[:3], partly_labeled(data[:3], 1))


def test_module_doctest():
    result = doctest.testmod(estimators, extraglobs={"np": np})
    assert result.attempted > 0 and result.failed == 0
