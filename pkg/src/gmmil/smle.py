"""EM estimation from bag labels plus a subsample of revealed instance labels."""

from __future__ import annotations

import numpy as np

from .bmle import EmOptions, _Problem, run_em
from .errors import DimensionMismatch, InconsistentSubsample
from .model import UNOBSERVED, BagDataset, FitResult, ModelParams


def _clamps(dataset: BagDataset):
    if dataset.s is None:
        raise InconsistentSubsample("dataset carries no subsample indicators")
    s = dataset.s.astype(bool)
    ypos = dataset.instance_y == 1
    if np.any(s & ~ypos):
        raise InconsistentSubsample("instances of negative bags cannot be subsampled")
    if np.any(s & (dataset.a == UNOBSERVED)):
        raise InconsistentSubsample("subsampled instances must carry a label")
    return s[ypos], np.where(s, dataset.a, 0)[ypos].astype(float)


def sub_loglik(params: ModelParams, dataset: BagDataset) -> float:
    """Bag log-likelihood plus the conditional log-likelihood of revealed labels.

    For a revealed instance the extra term is ``A log pi_im + (1 - A) log(1 - pi_im)``
    with ``pi_im`` the posterior probability of being positive.
    """
    if params.p != dataset.p:
        raise DimensionMismatch(f"params have p={params.p}, data p={dataset.p}")
    mask, values = _clamps(dataset)
    return _Problem(dataset, mask, values).evaluate(params)[0]


def fit_smle(dataset: BagDataset, options: EmOptions | None = None) -> FitResult:
    """Maximize the subsample likelihood by EM.

    Responsibilities of revealed instances are fixed at their labels; the
    remaining positive-bag instances get the usual mixture posterior. With
    nothing revealed this is exactly :func:`~gmmil.bmle.fit_bmle`; with every
    positive-bag instance revealed it reaches the closed-form instance
    estimator after one M-step.
    """
    mask, values = _clamps(dataset)
    return run_em(dataset, options or EmOptions(), "SMLE", mask, values)
