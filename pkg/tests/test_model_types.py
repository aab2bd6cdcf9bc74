import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_spd
from gmmil.errors import DimensionMismatch, EmptyDataset
from gmmil.model import (Bag, BagDataset, Instance, ModelParams, estimate_alpha, flatten, n_params, unflatten,
                         validate)
from gmmil.simulate import default_config, regime_config, simulate


def tiny(y, labels, s=None, p=1):
    bags = []
    for i, (yy, aa) in enumerate(zip(y, labels)):
        insts = [Instance(m, np.zeros(p), a, 0 if s is None else s[i][m]) for m, a in enumerate(aa)]
        bags.append(Bag(i, yy, insts))
    return BagDataset.from_bags(bags)


class TestValidate:
    def test_clean(self):
        assert validate(tiny([1, 0], [[1, 0], [0, 0]])) == []

    def test_positive_in_negative_bag(self):
        v = validate(tiny([0], [[0, 1]]))
        assert len(v) == 1 and v[0].kind == "positive_in_negative_bag"

    def test_subsampled_unlabeled(self):
        v = validate(tiny([1], [[-1, 0]], s=[[1, 0]]))
        assert len(v) == 1 and v[0].kind == "subsampled_unlabeled"

    @pytest.mark.parametrize("regime", ["Base", "HeteroPi", "SpatialLabels", "SpatialFeatures", "TruncatedLabels"])
    def test_every_generator_is_valid(self, regime):
        base = default_config(3, n_bags=12, bag_size=30)
        for seed in range(10):
            assert validate(simulate(regime_config(base, regime).with_(seed=seed))) == []


class TestAlpha:
    def test_half(self):
        assert estimate_alpha(tiny([1, 0, 1, 0], [[0]] * 4)) == 0.5

    def test_zero(self):
        assert estimate_alpha(tiny([0, 0], [[0], [0]])) == 0.0

    def test_camelyon_style_count(self):
        y = [1] * 88 + [0] * 159
        assert estimate_alpha(tiny(y, [[0]] * 247)) == pytest.approx(0.356, abs=5e-4)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            estimate_alpha(BagDataset(np.zeros((0, 1)), [], [], []))


class TestFlatten:
    @pytest.mark.parametrize("p,q", [(1, 4), (2, 8), (5, 26), (50, 1376)])
    def test_param_count(self, p, q):
        assert n_params(p) == q
        assert n_params(p) == p * p / 2 + 5 * p / 2 + 1

    @pytest.mark.parametrize("p", [1, 2, 5, 10])
    def test_round_trip(self, p):
        r = np.random.default_rng(p)
        for _ in range(5):
            params = ModelParams(r.uniform(0.01, 0.99), r.normal(size=p), r.normal(size=p), random_spd(r, p), 0.4)
            back = unflatten(flatten(params), p, 0.4)
            assert back.pi == params.pi
            np.testing.assert_allclose(back.sigma, params.sigma, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(flatten(back), flatten(params), rtol=1e-10, atol=1e-12)

    def test_order(self):
        params = ModelParams(0.2, [1.0, 2.0], [3.0, 4.0], np.diag([2.0, 4.0]))
        np.testing.assert_allclose(flatten(params), [0.2, 1, 2, 3, 4, 0.5, 0.0, 0.25])

    def test_wrong_length(self):
        with pytest.raises(DimensionMismatch):
            unflatten(np.zeros(5), 2)


class TestParams:
    def test_pi_bounds(self):
        with pytest.raises(ValueError):
            ModelParams(1.0, [0.0], [0.0], [[1.0]])

    def test_dimension_check(self):
        with pytest.raises(DimensionMismatch):
            ModelParams(0.5, [0.0, 1.0], [0.0], [[1.0]])

    def test_beta_and_intercept(self):
        params = ModelParams(0.25, [2.0], [0.0], [[4.0]])
        assert params.beta[0] == pytest.approx(0.5)
        assert params.intercept == pytest.approx(-0.5 * 4.0 / 4.0 + np.log(1 / 3))


class TestDataset:
    @given(st.lists(st.integers(1, 5), min_size=1, max_size=6), st.integers(0, 1000))
    def test_unequal_sizes_and_slices(self, sizes, seed):
        r = np.random.default_rng(seed)
        bags = [Bag(f"b{i}", int(r.integers(2)), [Instance(m, r.normal(size=2), 0) for m in range(n)])
                for i, n in enumerate(sizes)]
        d = BagDataset.from_bags(bags)
        assert d.n_instances == sum(sizes)
        for i, b in enumerate(d.bags):
            assert len(b) == sizes[i]
            np.testing.assert_array_equal(d.x[d.bag_slice(i)], np.array([inst.x for inst in bags[i].instances]))
        assert d.common_bag_size == (sizes[0] if len(set(sizes)) == 1 else None)

    def test_arrays_are_read_only(self):
        d = tiny([1], [[0, 1]])
        with pytest.raises(ValueError):
            d.x[0, 0] = 1.0

    def test_subset(self):
        d = simulate(default_config(2, n_bags=6, bag_size=4))
        sub = d.subset_bags([4, 1])
        assert sub.n_bags == 2
        np.testing.assert_array_equal(sub.x, np.vstack([d.x[d.bag_slice(1)], d.x[d.bag_slice(4)]]))
