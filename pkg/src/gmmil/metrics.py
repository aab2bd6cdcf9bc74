"""Instance posteriors, bag probabilities and classification metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import DimensionMismatch, NoPositiveBags
from .linalg import log1m_prod_complement, log_gaussian_rows
from .model import UNOBSERVED, BagDataset, ModelParams

LOG_FLOOR = -745.0
BLOCKS = ("pi", "mu1", "mu0", "omega")


def instance_posterior(params: ModelParams, x) -> np.ndarray | float:
    """P(instance positive | x, positive bag) as ``logistic(intercept + x @ beta)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.p:
        raise DimensionMismatch(f"x has {x.shape[-1]} features, params p={params.p}")
    out = special.expit(params.intercept + x @ params.beta)
    return float(out) if np.ndim(out) == 0 else out


def instance_posterior_mixture(params: ModelParams, x) -> np.ndarray:
    """Same posterior from the mixture ratio of the two class densities."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    j1 = np.log(params.pi) + log_gaussian_rows(x, params.mu1, params.factor)
    j0 = np.log1p(-params.pi) + log_gaussian_rows(x, params.mu0, params.factor)
    return np.exp(j1 - np.logaddexp(j1, j0))


def bag_positive_prob(posteriors) -> float:
    """``1 - prod(1 - posterior)``, evaluated in log space."""
    post = np.asarray(posteriors, dtype=float)
    if np.any((post < 0) | (post > 1)):
        raise ValueError("posteriors must lie in [0, 1]")
    if np.any(post == 1.0):
        return 1.0
    return float(np.exp(log1m_prod_complement(np.log1p(-post))))


@dataclass
class BinaryMetrics:
    auc: float
    auprc: float
    f1: float
    recall: float
    precision: float
    flags: set = field(default_factory=set)

    def as_dict(self):
        return {"auc": self.auc, "auprc": self.auprc, "f1": self.f1, "recall": self.recall,
                "precision": self.precision}


def auc_midrank(scores, labels) -> float:
    """Area under the ROC curve via average ranks (ties count one half)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n1 = int(labels.sum())
    n0 = labels.size - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auprc_step(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Thresholds run over the distinct scores from high to low; each recall
    increment is weighted by the precision at that threshold.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n1 = int(labels.sum())
    if n1 == 0 or n1 == labels.size:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(lab)[last]
    predicted = last + 1
    precision = tp / predicted
    recall = tp / n1
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def binary_metrics(scores, labels, threshold: float = 0.5) -> BinaryMetrics:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DimensionMismatch("scores and labels differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be binary")
    labels = labels.astype(bool)
    flags = set()
    if labels.all() or not labels.any():
        flags.add("SingleClass")
    auc = auc_midrank(scores, labels)
    auprc = auprc_step(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    if tp + fp == 0:
        precision = 0.0
        flags.add("ZeroPredictedPositive")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.add("ZeroActualPositive")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        f1 = 0.0
        flags.add("ZeroF1")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return BinaryMetrics(auc, auprc, f1, recall, precision, flags)


@dataclass
class InstanceReport:
    metrics: dict
    n_bags: int
    skipped: int
    pooled: bool = False


def posteriors_for(params: ModelParams, dataset: BagDataset) -> np.ndarray:
    if params.p != dataset.p:
        raise DimensionMismatch(f"params have p={params.p}, data p={dataset.p}")
    if dataset.n_instances == 0:
        return np.zeros(0)
    return np.atleast_1d(instance_posterior(params, dataset.x))


def bag_probabilities(params: ModelParams, dataset: BagDataset, posteriors=None) -> np.ndarray:
    post = posteriors_for(params, dataset) if posteriors is None else posteriors
    with np.errstate(divide="ignore"):
        log_comp = np.log1p(-post)
    out = np.empty(dataset.n_bags)
    for i in range(dataset.n_bags):
        sl = dataset.bag_slice(i)
        if np.any(post[sl] == 1.0):
            out[i] = 1.0
        else:
            out[i] = np.exp(log1m_prod_complement(log_comp[sl]))
    return out


def instance_level_report(params: ModelParams, dataset: BagDataset, threshold: float = 0.5,
                          pooled: bool = False, posteriors=None) -> InstanceReport:
    """Instance metrics within positive bags, averaged over bags (or pooled).

    Per-bag AUC/AUPRC are undefined when a bag holds a single class; such
    values are skipped and counted in ``skipped``.
    """
    if np.any(dataset.a[dataset.instance_y == 1] == UNOBSERVED):
        raise ValueError("instance-level evaluation needs every label in positive bags")
    pos_bags = np.flatnonzero(dataset.y == 1)
    if pos_bags.size == 0:
        raise NoPositiveBags("instance metrics are only defined on positive bags")
    post = posteriors_for(params, dataset) if posteriors is None else posteriors
    if pooled:
        sel = dataset.instance_y == 1
        m = binary_metrics(post[sel], dataset.a[sel], threshold)
        return InstanceReport(m.as_dict(), int(pos_bags.size), int("SingleClass" in m.flags), True)
    collected = {k: [] for k in ("auc", "auprc", "f1", "recall", "precision")}
    skipped = 0
    for i in pos_bags:
        sl = dataset.bag_slice(i)
        m = binary_metrics(post[sl], dataset.a[sl], threshold)
        if "SingleClass" in m.flags:
            skipped += 1
        for k, v in m.as_dict().items():
            if not np.isnan(v):
                collected[k].append(v)
    means = {k: float(np.mean(v)) if v else float("nan") for k, v in collected.items()}
    return InstanceReport(means, int(pos_bags.size), skipped)


def block_errors(estimate: ModelParams, truth: ModelParams) -> dict:
    """Squared error of each parameter block divided by the block length."""
    from .linalg import vech

    if estimate.p != truth.p:
        raise DimensionMismatch("estimate and truth differ in dimension")
    diffs = {
        "pi": np.array([estimate.pi - truth.pi]),
        "mu1": estimate.mu1 - truth.mu1,
        "mu0": estimate.mu0 - truth.mu0,
        "omega": vech(estimate.omega) - vech(truth.omega),
    }
    return {k: float(d @ d / d.size) for k, d in diffs.items()}


def safe_log(value: float) -> float:
    return max(float(np.log(value)) if value > 0 else -np.inf, LOG_FLOOR)


def mse_report(estimates, truth: ModelParams) -> dict:
    """MSE per block over replications plus natural logs (floored at -745).

    Vector blocks are normalized by their length (p for the means,
    p(p+1)/2 for vech(Omega)); the pi block has length one.
    """
    estimates = list(estimates)
    if not estimates:
        raise ValueError("at least one estimate is required")
    per = [block_errors(e, truth) for e in estimates]
    out = {}
    for b in BLOCKS:
        mse = float(np.mean([r[b] for r in per]))
        out[b] = {"mse": mse, "log_mse": safe_log(mse)}
    return out
