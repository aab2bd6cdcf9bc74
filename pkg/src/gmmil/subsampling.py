"""Posterior-guided selection of instances whose labels get revealed.

Instances of positive bags are selected with probability
``logistic(alpha_n + x @ beta)``, where ``beta`` comes from a pilot bag-level
fit and ``alpha_n`` is tuned to hit a target labeling fraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .bmle import EmOptions, fit_bmle
from .errors import DimensionMismatch, MissingTruthLabel, NoPositiveBags, PilotTooSmall, TargetUnreachable
from .model import UNOBSERVED, BagDataset
from .simulate import bag_rng

ALPHA_N_BOUNDS = (-60.0, 60.0)


@dataclass(frozen=True)
class SubsamplePlan:
    alpha_n: float
    beta: np.ndarray
    gamma: np.ndarray
    indicators: np.ndarray
    realized_fraction: float
    pilot_fraction: float
    seed: int

    def apply(self, dataset: BagDataset) -> BagDataset:
        """Copy of ``dataset`` with labels hidden except where the plan selected them."""
        s = self.indicators.astype(np.int8)
        ypos = dataset.instance_y == 1
        a = np.where(ypos & (s == 0), UNOBSERVED, dataset.a).astype(np.int8)
        return dataset.replace(a=a, s=s)


def gamma_probability(x, alpha_n: float, beta) -> np.ndarray | float:
    """Selection probability ``logistic(alpha_n + x @ beta)``; ``x`` may be one vector or rows."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if x.shape[-1] != beta.shape[0]:
        raise DimensionMismatch(f"x has {x.shape[-1]} features, beta has {beta.shape[0]}")
    out = special.expit(alpha_n + x @ beta)
    return float(out) if np.ndim(out) == 0 else out


def pilot_beta(dataset: BagDataset, pilot_fraction: float, options: EmOptions | None = None,
               seed: int = 0) -> np.ndarray:
    """Estimate the selection direction from a bag-level fit on a random subset of bags.

    ``pilot_fraction == 0`` requests uniform selection and returns a zero
    vector, which makes every selection probability equal.
    """
    if not 0.0 <= pilot_fraction <= 1.0:
        raise ValueError("pilot_fraction must lie in [0, 1]")
    if pilot_fraction == 0.0:
        return np.zeros(dataset.p)
    pos = np.flatnonzero(dataset.y == 1)
    neg = np.flatnonzero(dataset.y == 0)
    if pos.size == 0 or neg.size == 0:
        raise PilotTooSmall("the pilot needs at least one positive and one negative bag")
    if pilot_fraction == 1.0:
        chosen = np.arange(dataset.n_bags)
    else:
        rng = np.random.default_rng(seed)
        n_pilot = max(2, int(round(pilot_fraction * dataset.n_bags)))
        chosen = [rng.choice(pos), rng.choice(neg)]
        rest = np.setdiff1d(np.arange(dataset.n_bags), chosen)
        chosen = np.concatenate([chosen, rng.choice(rest, size=min(n_pilot - 2, rest.size), replace=False)])
    fit = fit_bmle(dataset.subset_bags(chosen), options)
    return fit.params.beta


def _positive_scores(beta, dataset):
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.p,):
        raise DimensionMismatch(f"beta has shape {beta.shape}, data p={dataset.p}")
    x_pos = dataset.x[dataset.instance_y == 1]
    if x_pos.shape[0] == 0:
        raise NoPositiveBags("no positive-bag instances to subsample")
    return x_pos @ beta


def expected_fraction(alpha_n: float, beta, dataset: BagDataset) -> float:
    """Mean selection probability over positive-bag instances."""
    return float(np.mean(special.expit(alpha_n + _positive_scores(beta, dataset))))


def calibrate_alpha_n(beta, dataset: BagDataset, target_fraction: float) -> float:
    """Intercept whose mean selection probability over positive-bag instances is ``target_fraction``."""
    if not 0.0 < target_fraction < 1.0:
        raise ValueError("target_fraction must lie in (0, 1)")
    scores = _positive_scores(beta, dataset)

    def gap(a):
        return float(np.mean(special.expit(a + scores))) - target_fraction

    lo, hi = ALPHA_N_BOUNDS
    if gap(lo) > 0.0 or gap(hi) < 0.0:
        raise TargetUnreachable(f"fraction {target_fraction} not reachable with alpha_n in {ALPHA_N_BOUNDS}")
    root = optimize.brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    if abs(gap(root)) > 1e-6:
        raise TargetUnreachable(f"calibration stalled at fraction error {gap(root):.3g}")
    return float(root)


def draw_subsample(dataset: BagDataset, alpha_n: float, beta, seed: int,
                   pilot_fraction: float = float("nan")) -> SubsamplePlan:
    """Draw selection indicators bag by bag from independent substreams.

    Indicators depend only on features, bag labels, ``alpha_n``, ``beta`` and
    the seed; the labels themselves never enter the draw.
    """
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.p,):
        raise DimensionMismatch(f"beta has shape {beta.shape}, data p={dataset.p}")
    ypos = dataset.instance_y == 1
    gamma = np.where(ypos, special.expit(alpha_n + dataset.x @ beta), 0.0)
    s = np.zeros(dataset.n_instances, dtype=np.int8)
    for i in np.flatnonzero(dataset.y == 1):
        sl = dataset.bag_slice(i)
        u = bag_rng(seed, i, 2).random(sl.stop - sl.start)
        s[sl] = u < gamma[sl]
    if np.any((s == 1) & (dataset.a == UNOBSERVED)):
        raise MissingTruthLabel("a selected instance has no label to reveal")
    n_pos = int(np.sum(ypos))
    realized = float(s.sum() / n_pos) if n_pos else 0.0
    return SubsamplePlan(float(alpha_n), beta, gamma, s, realized, pilot_fraction, int(seed))
