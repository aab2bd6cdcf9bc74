"""Closed-form estimator from fully observed instance labels."""

from __future__ import annotations

import numpy as np

from .errors import FitError, NoPositiveBags, NoPositiveInstances, UnlabeledInstance
from .linalg import log_gaussian_rows, spd_factorize
from .model import UNOBSERVED, BagDataset, FitResult, ModelParams, estimate_alpha


def _labels(dataset: BagDataset) -> np.ndarray:
    if np.any(dataset.a == UNOBSERVED):
        raise UnlabeledInstance(f"{int(np.sum(dataset.a == UNOBSERVED))} instances have no label")
    return dataset.a.astype(float)


def weighted_moments(x, w, n_total):
    """Weighted class means and the pooled scatter divided by ``n_total``.

    ``w`` is the weight of the positive class for each row (labels or
    responsibilities); ``1 - w`` weights the negative class.
    """
    w1 = np.sum(w)
    w0 = x.shape[0] - w1
    mu1 = (w @ x) / w1
    mu0 = ((1.0 - w) @ x) / w0
    d1 = x - mu1
    d0 = x - mu0
    scatter = (d1 * w[:, None]).T @ d1 + (d0 * (1.0 - w)[:, None]).T @ d0
    sigma = scatter / n_total
    return mu1, mu0, 0.5 * (sigma + sigma.T)


def fit_imle(dataset: BagDataset) -> FitResult:
    """Maximize the complete-data likelihood in closed form.

    ``pi`` is the share of positive labels among the instances of positive
    bags (this equals the textbook ``sum A / (M N1)`` when every bag has
    ``M`` instances). Class means are label-weighted averages and the
    covariance is the pooled within-class scatter over all ``n`` instances.
    """
    a = _labels(dataset)
    pos_bag = dataset.instance_y == 1
    if not np.any(dataset.y == 1):
        raise NoPositiveBags("pi and mu1 are not identifiable without positive bags")
    n_pos = float(np.sum(a))
    if n_pos == 0:
        raise NoPositiveInstances("no positive instances")
    if n_pos == dataset.n_instances:
        raise NoPositiveInstances("no negative instances; mu0 is not identifiable")
    pi = n_pos / float(np.sum(pos_bag))
    if pi >= 1.0:
        raise FitError("every instance in positive bags is positive; pi is on the boundary")
    mu1, mu0, sigma = weighted_moments(dataset.x, a, dataset.n_instances)
    ridge_events = int(spd_factorize(sigma).ridge_added > 0)
    params = ModelParams(pi, mu1, mu0, sigma, estimate_alpha(dataset))
    return FitResult(params, "IMLE", (), 0, True, ridge_events)


def instance_loglik(params: ModelParams, dataset: BagDataset) -> float:
    """Complete-data log-likelihood (labels observed for every instance)."""
    a = _labels(dataset)
    if dataset.n_instances == 0:
        return 0.0
    factor = params.factor
    lp1 = log_gaussian_rows(dataset.x, params.mu1, factor)
    lp0 = log_gaussian_rows(dataset.x, params.mu0, factor)
    ypos = dataset.instance_y.astype(float)
    label_term = ypos * (a * np.log(params.pi) + (1.0 - a) * np.log1p(-params.pi))
    dens = np.where(a == 1.0, lp1, lp0)
    return float(np.sum(label_term) + np.sum(dens))
