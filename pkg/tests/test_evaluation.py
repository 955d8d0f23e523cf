import json
import logging

import numpy as np
import pytest

from corrvae.config import GenConfig, RunConfig
from corrvae.datagen import ground_truth_mask, make_dataset, property_names, truth_pairs
from corrvae.evaluation import (EvalReport, avg_mi, blank_measurement, control_mse, mask_recovery,
                                mi_matrix, normalized_mi, oracle_slack, prediction_mse,
                                property_target, range_battery, value_battery)
from corrvae.model import build_model
from corrvae.moo import ConstraintSpec
from corrvae.numcore import Rng

FAST = GenConfig(restarts=2, steps=40, rounds=2)


@pytest.fixture(scope="module")
def data():
    return make_dataset(5000, seed=7)


@pytest.fixture(scope="module")
def untrained(data):
    cfg = RunConfig.from_flat({"model.hidden": 32, "model.agg_hidden": 8, "model.head_hidden": 8})
    return build_model(cfg, data)


class TestMutualInformation:
    def test_copy_is_fully_dependent(self):
        a = Rng(0).uniform(5000)
        assert normalized_mi(a, a) == pytest.approx(1.0)

    def test_independent_near_zero(self):
        a, b = Rng(1).uniform(5000), Rng(2).uniform(5000)
        assert normalized_mi(a, b) < 0.03

    def test_constant_variable_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert normalized_mi(np.ones(2000), Rng(3).uniform(2000)) == 0.0
        assert "constant" in caplog.text

    def test_copy_matrix(self, data):
        y = data.properties
        M = mi_matrix(y, y)
        np.testing.assert_allclose(np.diag(M), 1.0)
        identity = avg_mi(y, y, np.eye(data.m))
        off = M - np.diag(np.diag(M))
        assert identity == pytest.approx(float((off ** 2).sum()))

    def test_copy_against_property_target(self, data):
        y, names = data.properties, data.property_names
        T = property_target(y, names)
        score = avg_mi(y, y, T)
        # only the estimator bias on truly independent pairs remains
        pairs = truth_pairs(names)
        M = mi_matrix(y, y)
        residual = sum(M[i, j] ** 2 for i in range(len(names)) for j in range(len(names))
                       if i != j and (min(i, j), max(i, j)) not in pairs)
        assert score == pytest.approx(residual, abs=1e-12)
        assert score < 0.05

    def test_shuffled_pairing(self, data):
        y = data.properties
        T = property_target(y, data.property_names)
        shuffled = y[Rng(4).permutation(len(y))]
        M = mi_matrix(shuffled, y)
        assert M.max() < 0.03
        assert avg_mi(shuffled, y, T) == pytest.approx(float((T ** 2).sum()), abs=0.1)
        assert avg_mi(shuffled, y, T) > avg_mi(y, y, T)

    def test_monotone_transform(self, data):
        y = data.properties
        T = property_target(y, data.property_names)
        wp = y + Rng(5).normal(y.shape) * 0.05
        assert abs(avg_mi(np.tanh(wp), y, T) - avg_mi(wp, y, T)) < 0.02

    def test_target_is_symmetric_with_unit_diagonal(self, data):
        T = property_target(data.properties, data.property_names)
        np.testing.assert_array_equal(T, T.T)
        np.testing.assert_array_equal(np.diag(T), 1.0)
        names = data.property_names
        s = names.index("x+y")
        # x and y are each strongly tied to their halved sum but independent of each other
        for k in (names.index("x"), names.index("y")):
            assert 0.1 < T[k, s] < 1.0
        assert T[names.index("x"), names.index("y")] < 0.03

    @pytest.mark.parametrize("n,bins", [(999, 16), (2000, 7)])
    def test_estimator_preconditions(self, n, bins):
        y = Rng(6).uniform((n, 2))
        with pytest.raises(ValueError):
            mi_matrix(y, y, bins)

    def test_unpaired(self):
        with pytest.raises(ValueError):
            mi_matrix(np.zeros((1000, 2)), np.zeros((1001, 2)))

    def test_target_shape_checked(self, data):
        with pytest.raises(ValueError):
            avg_mi(data.properties, data.properties, np.eye(2))


class TestMaskRecovery:
    def test_construction_mask(self):
        names = property_names()
        s = mask_recovery(ground_truth_mask(names), names)
        assert s.precision == 1.0 and s.recall == 1.0
        assert s.recovered == s.expected

    def test_empty_mask(self):
        names = property_names()
        s = mask_recovery(np.zeros((8, 4)), names)
        assert s.precision == 1.0 and s.recall == 0.0

    def test_partial(self):
        names = property_names()
        M = np.zeros((8, 4))
        M[0, [names.index("x"), names.index("x+y")]] = 1
        M[1, [names.index("size"), names.index("y")]] = 1
        s = mask_recovery(M, names)
        assert s.precision == 0.5 and s.recall == pytest.approx(1 / 3)
        assert ("x", "x+y") in s.recovered


class TestPrediction:
    def test_untrained_model_is_constant_predictor(self, untrained, data):
        test = data.subset(slice(0, 1000))
        mse = prediction_mse(untrained, test)
        y = test.properties
        const = untrained.predict_from_images(test.flat_images()[:1])[0]
        np.testing.assert_allclose(mse, y.var(axis=0) + (y.mean(axis=0) - const) ** 2, rtol=1e-10)
        assert np.all(mse >= y.var(axis=0))
        # a uniform property on its own valid range has variance near 1/12
        assert 0.04 < y[:, 1].var() < 0.09

    def test_empty(self, untrained, data):
        with pytest.raises(ValueError):
            prediction_mse(untrained, data.subset(slice(0, 0)))


class TestControl:
    def test_definition(self, untrained, data):
        specs = value_battery(data, 2, Rng(7))
        res = control_mse(untrained, specs, Rng(8), FAST)
        assert res.n == 2 and np.all(res.mse >= 0)
        np.testing.assert_allclose(res.mse, ((res.measured - res.requested) ** 2).mean(axis=0))

    def test_blank_images_are_penalized(self, data):
        cfg = RunConfig.from_flat({"model.hidden": 32, "model.agg_hidden": 8, "model.head_hidden": 8})
        model = build_model(cfg, data)
        model.decoder.layers[-1].bias.data = np.full(model.d_x, -10.0)
        specs = value_battery(data, 1, Rng(9))
        res = control_mse(model, specs, Rng(10), FAST)
        assert res.unmeasurable == 1
        np.testing.assert_array_equal(res.measured[0], blank_measurement(data.property_names))
        np.testing.assert_allclose(res.mse, (res.measured[0] - res.requested[0]) ** 2)

    def test_rejects_non_value_specs(self, untrained, data):
        specs = range_battery(data.property_names, 1, Rng(11))
        with pytest.raises(ValueError):
            control_mse(untrained, specs, Rng(12), FAST)

    def test_batteries(self, data):
        vb = value_battery(data, 5, Rng(13))
        assert all(isinstance(s, ConstraintSpec) and s.all_values for s in vb)
        rb = range_battery(data.property_names, 5, Rng(14))
        for s in rb:
            assert s["x"].kind == s["y"].kind == "range"
            assert s["size"].kind == "free"
            assert 0.15 <= s["x"].lo and s["x"].hi <= 0.85 + 1e-12
        with pytest.raises(ValueError):
            value_battery(data.subset(slice(0, 3)), 5, Rng(0))

    def test_slack_is_half_a_pixel(self):
        assert oracle_slack(16) == 1 / 32


def test_report_files(tmp_path):
    names = ["a", "b"]
    rep = EvalReport(names, [0.1, 0.2], [0.3, 0.4], 0, 2, 1.0, 8, 0.5, [[1, 0], [0, 1]],
                     [[1, 0], [0, 1]], 1.0, 0.5, [("a", "b")], [("a", "b")])
    paths = rep.write(tmp_path)
    assert json.loads(paths["json"].read_text())["avg_mi"] == 0.5
    assert paths["csv"].read_text().startswith("metric,property,value")
    assert paths["mi"].read_text().splitlines()[0] == "bridge,a,b"
