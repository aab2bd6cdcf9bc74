import math

import numpy as np
import pytest

from gmmil import EmOptions, ProvidedInit, RandomRestart, fit_bmle
from gmmil.bmle import bag_loglik, em_step, posterior_responsibilities
from gmmil.asymptotics import precision_report
from gmmil.errors import NoPositiveBags
from gmmil.model import Bag, BagDataset, Instance, ModelParams, flatten
from gmmil.simulate import default_config, simulate


def linear_bag_loglik(params, d):
    # p = 1, plain densities multiplied out per instance
    s2 = params.sigma[0, 0]

    def phi(x, m):
        return math.exp(-(x - m) ** 2 / (2 * s2)) / math.sqrt(2 * math.pi * s2)

    total = 0.0
    for k in range(d.n_instances):
        x = d.x[k, 0]
        if d.instance_y[k] == 0:
            total += math.log(phi(x, params.mu0[0]))
        else:
            total += math.log(params.pi * phi(x, params.mu1[0]) + (1 - params.pi) * phi(x, params.mu0[0]))
    return total


def test_single_negative_instance():
    d = BagDataset.from_bags([Bag(0, 0, [Instance(0, [1.0], -1)])])
    assert bag_loglik(ModelParams(0.3, [5.0], [1.0], [[1.0]]), d) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_collapsed_means_independent_of_pi():
    d = simulate(default_config(2, n_bags=10, bag_size=5, seed=1))
    base = ModelParams(0.2, [0.5, 0.5], [0.5, 0.5], np.eye(2))
    assert bag_loglik(base, d) == pytest.approx(bag_loglik(base.replace(pi=0.7), d), rel=1e-14)


def test_matches_linear_domain():
    r = np.random.default_rng(3)
    for seed in range(10):
        d = simulate(default_config(1, n_bags=4, bag_size=int(r.integers(1, 6)), alpha=0.6, pi=0.4, seed=seed))
        params = ModelParams(r.uniform(0.05, 0.95), [r.normal(2)], [r.normal()], [[r.uniform(0.5, 2)]])
        assert bag_loglik(params, d) == pytest.approx(linear_bag_loglik(params, d), abs=1e-9)


def test_symmetric_responsibility():
    d = BagDataset.from_bags([Bag(0, 1, [Instance(0, [0.0], -1)]), Bag(1, 0, [Instance(0, [3.0], -1)])])
    w = posterior_responsibilities(ModelParams(0.5, [1.0], [-1.0], [[1.0]]), d)
    assert w[0] == pytest.approx(0.5, abs=1e-15) and w[1] == 0.0


def test_fixed_point_at_truth():
    cfg = default_config(3, n_bags=200, bag_size=500, seed=2)
    d = simulate(cfg).without_instance_labels()
    truth = cfg.truth()
    new = em_step(truth, d)
    # standard errors of the bag-level estimator from its asymptotic precision
    rep = precision_report(truth, 0.0, np.zeros(3), mc_samples=100_000, seed=1)
    se = np.sqrt(np.diag(np.linalg.inv(rep.omega_bag)) / d.n_instances)
    standardized = (flatten(new) - flatten(truth)) / se
    assert np.sqrt(np.mean(standardized ** 2)) < 1.0


def test_monotone_ascent():
    for seed in range(10):
        d = simulate(default_config(2, n_bags=20, bag_size=40, seed=seed, alpha=0.5, pi=0.2)).without_instance_labels()
        fit = fit_bmle(d, EmOptions(max_iters=50, rel_tol=1e-300))
        assert min(np.diff(fit.loglik_trace)) >= -1e-10


def test_step_ascent_from_arbitrary_start():
    d = simulate(default_config(2, n_bags=20, bag_size=30, seed=3)).without_instance_labels()
    params = ModelParams(0.4, [1.0, -1.0], [0.2, 0.3], np.eye(2) * 3)
    for _ in range(10):
        new = em_step(params, d)
        assert bag_loglik(new, d) >= bag_loglik(params, d) - 1e-10
        params = new


def test_consistency_probe():
    cfg = default_config(5, n_bags=200, bag_size=200, seed=7)
    d = simulate(cfg)
    fit = fit_bmle(d.without_instance_labels())
    rep = precision_report(cfg.truth(), 0.0, np.zeros(5), mc_samples=100_000, seed=2)
    se = np.sqrt(np.diag(np.linalg.inv(rep.omega_bag)) / d.n_instances)[1:6]
    assert np.all(np.abs(fit.params.mu1 - cfg.mu1) < 3 * se)
    assert fit.converged


def test_no_positive_bags():
    with pytest.raises(NoPositiveBags):
        fit_bmle(simulate(default_config(2, n_bags=5, bag_size=5, alpha=0.0)))


def test_ignores_instance_labels():
    d = simulate(default_config(2, n_bags=20, bag_size=30, seed=4))
    a, b = fit_bmle(d), fit_bmle(d.without_instance_labels())
    np.testing.assert_array_equal(a.params.mu1, b.params.mu1)
    np.testing.assert_array_equal(a.params.sigma, b.params.sigma)
    assert a.loglik_trace == b.loglik_trace


def test_negative_bags_break_label_swap():
    for seed in range(5):
        d = simulate(default_config(2, n_bags=30, bag_size=30, seed=seed))
        fit = fit_bmle(d.without_instance_labels()).params
        neg_mean = d.x[d.instance_y == 0].mean(0)
        assert np.linalg.norm(fit.mu0 - neg_mean) < np.linalg.norm(fit.mu1 - neg_mean)


def test_provided_init_and_restarts():
    cfg = default_config(2, n_bags=30, bag_size=30, seed=6)
    d = simulate(cfg).without_instance_labels()
    base = fit_bmle(d)
    warm = fit_bmle(d, EmOptions(init=ProvidedInit(cfg.truth())))
    multi = fit_bmle(d, EmOptions(init=RandomRestart(3, seed=1)))
    assert warm.loglik_trace[-1] == pytest.approx(base.loglik_trace[-1], abs=1e-4)
    assert multi.loglik_trace[-1] >= base.loglik_trace[-1]


def test_options_validation():
    with pytest.raises(ValueError):
        EmOptions(max_iters=0)
    with pytest.raises(ValueError):
        EmOptions(pi_clip=0.5)
