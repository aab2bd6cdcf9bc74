import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmmil.errors import DimensionMismatch, MissingTruthLabel, PilotTooSmall, TargetUnreachable
from gmmil.simulate import default_config, simulate
from gmmil.subsampling import (calibrate_alpha_n, draw_subsample, expected_fraction, gamma_probability,
                               pilot_beta)


@pytest.fixture(scope="module")
def data():
    return simulate(default_config(3, n_bags=60, bag_size=100, seed=21))


class TestGamma:
    def test_half(self):
        assert gamma_probability(np.zeros(2), 0.0, np.zeros(2)) == 0.5

    def test_saturation(self):
        assert gamma_probability(np.zeros(2), 50.0, np.zeros(2)) == pytest.approx(1.0, abs=1e-15)

    def test_quarter(self):
        assert gamma_probability(np.ones(2), math.log(1 / 3), np.zeros(2)) == pytest.approx(0.25, abs=1e-15)

    def test_extreme_logits_finite(self):
        g = gamma_probability(np.array([[1e4], [-1e4]]), 0.0, np.ones(1))
        assert g[0] == 1.0 and g[1] == 0.0

    def test_dimension(self):
        with pytest.raises(DimensionMismatch):
            gamma_probability(np.zeros(3), 0.0, np.zeros(2))

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-3, 3))
    def test_monotone_in_score(self, a, b, alpha_n):
        beta = np.array([1.0])
        ga, gb = gamma_probability(np.array([a]), alpha_n, beta), gamma_probability(np.array([b]), alpha_n, beta)
        assert (ga <= gb) if a <= b else (ga >= gb)


class TestCalibrate:
    def test_uniform_closed_form(self, data):
        assert calibrate_alpha_n(np.zeros(3), data, 0.25) == pytest.approx(math.log(1 / 3), abs=1e-9)

    def test_target_hit(self, data):
        beta = pilot_beta(data, 1.0)
        a = calibrate_alpha_n(beta, data, 0.10)
        assert abs(expected_fraction(a, beta, data) - 0.10) <= 1e-6

    def test_monotone(self, data):
        beta = np.array([0.5, -0.2, 0.8])
        vals = [calibrate_alpha_n(beta, data, t) for t in (0.01, 0.1, 0.3, 0.6, 0.9)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_unreachable(self, data):
        with pytest.raises(TargetUnreachable):
            calibrate_alpha_n(np.full(3, 1e3), data.replace(x=np.abs(data.x) + 10.0), 1e-300 + 1e-12)

    def test_bad_target(self, data):
        with pytest.raises(ValueError):
            calibrate_alpha_n(np.zeros(3), data, 1.0)


class TestPilot:
    def test_zero_is_uniform(self, data):
        np.testing.assert_array_equal(pilot_beta(data, 0.0), np.zeros(3))

    def test_full_pilot_is_full_fit(self, data):
        from gmmil import fit_bmle

        np.testing.assert_array_equal(pilot_beta(data, 1.0), fit_bmle(data).params.beta)

    def test_needs_both_bag_kinds(self):
        d = simulate(default_config(2, n_bags=5, bag_size=5, alpha=1.0))
        with pytest.raises(PilotTooSmall):
            pilot_beta(d, 0.5)

    def test_angle_shrinks_with_pilot_size(self):
        cos = {f: [] for f in (0.1, 0.5, 1.0)}
        for seed in range(20):
            cfg = default_config(3, n_bags=100, bag_size=100, seed=seed)
            d = simulate(cfg)
            true_beta = cfg.truth().beta
            for f in cos:
                b = pilot_beta(d, f, seed=seed)
                cos[f].append(b @ true_beta / np.linalg.norm(b) / np.linalg.norm(true_beta))
        means = [np.mean(cos[f]) for f in (0.1, 0.5, 1.0)]
        assert means[0] < means[1] < means[2]


class TestDraw:
    def test_negative_bags_never_selected(self, data):
        plan = draw_subsample(data, 2.0, np.ones(3), seed=1)
        assert not plan.indicators[data.instance_y == 0].any()
        assert np.all(plan.gamma[data.instance_y == 0] == 0)

    def test_limits(self, data):
        lo = draw_subsample(data, -60.0, np.zeros(3), seed=1)
        hi = draw_subsample(data, 60.0, np.zeros(3), seed=1)
        assert lo.indicators.sum() == 0
        np.testing.assert_array_equal(hi.indicators, (data.instance_y == 1).astype(np.int8))

    def test_realized_fraction_concentrates(self, data):
        beta = np.array([0.3, 0.1, -0.2])
        a = calibrate_alpha_n(beta, data, 0.10)
        fr = [draw_subsample(data, a, beta, seed=s).realized_fraction for s in range(50)]
        n = int(np.sum(data.instance_y == 1))
        assert abs(np.mean(fr) - 0.10) <= 3 * math.sqrt(0.1 * 0.9 / n / 50)

    def test_indicators_ignore_labels(self, data):
        beta = np.array([0.3, 0.1, -0.2])
        shuffled = data.replace(a=np.random.default_rng(0).permutation(data.a))
        np.testing.assert_array_equal(draw_subsample(data, -1.0, beta, 5).indicators,
                                      draw_subsample(shuffled, -1.0, beta, 5).indicators)

    def test_missing_truth(self, data):
        with pytest.raises(MissingTruthLabel):
            draw_subsample(data.without_instance_labels(), 60.0, np.zeros(3), seed=1)

    def test_apply_hides_unselected(self, data):
        plan = draw_subsample(data, -1.0, np.zeros(3), seed=2)
        sub = plan.apply(data)
        sel = plan.indicators == 1
        np.testing.assert_array_equal(sub.a[sel], data.a[sel])
        assert np.all(sub.a[~sel & (data.instance_y == 1)] == -1)
        assert np.all(sub.a[data.instance_y == 0] == 0)
