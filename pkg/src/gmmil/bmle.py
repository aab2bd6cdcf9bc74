"""EM estimation from bag labels (optionally with clamped instance labels).

The same engine serves the bag-only estimator and the subsample estimator:
instances whose label has been revealed simply get their responsibility
clamped to that label. With no revealed labels the two code paths coincide
operation for operation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateResponsibilities, DimensionMismatch, InitFailure, NoPositiveBags
from .imle import weighted_moments
from .linalg import log_gaussian_rows, spd_factorize
from .model import BagDataset, FitResult, ModelParams, estimate_alpha

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MomentInit:
    """Start from negative-bag moments and the most outlying positive-bag instances."""

    pi0: float = 0.1


@dataclass(frozen=True)
class ProvidedInit:
    params: ModelParams


@dataclass(frozen=True)
class RandomRestart:
    """Moment start plus ``k`` randomized starts; the best final likelihood wins."""

    k: int
    seed: int = 0


@dataclass(frozen=True)
class EmOptions:
    max_iters: int = 500
    rel_tol: float = 1e-8
    pi_clip: float = 1e-6
    init: MomentInit | ProvidedInit | RandomRestart = field(default_factory=MomentInit)

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not 0.0 < self.pi_clip < 0.5:
            raise ValueError("pi_clip must lie in (0, 0.5)")


class _Problem:
    """Data split by bag label, plus the clamped labels (if any)."""

    def __init__(self, dataset: BagDataset, clamp_mask=None, clamp_values=None):
        ypos = dataset.instance_y == 1
        self.dataset = dataset
        self.pos_idx = np.flatnonzero(ypos)
        self.x_pos = dataset.x[ypos]
        self.x_neg = dataset.x[~ypos]
        self.n = dataset.n_instances
        if clamp_mask is None:
            self.clamp = None
        else:
            self.clamp = np.asarray(clamp_mask, dtype=bool)
            self.clamp_a = np.asarray(clamp_values, dtype=float)

    def evaluate(self, params: ModelParams):
        """Log-likelihood and positive-bag responsibilities at ``params``."""
        factor = params.factor
        lp1 = log_gaussian_rows(self.x_pos, params.mu1, factor)
        lp0 = log_gaussian_rows(self.x_pos, params.mu0, factor)
        log_pi, log_1mpi = np.log(params.pi), np.log1p(-params.pi)
        joint1 = log_pi + lp1
        joint0 = log_1mpi + lp0
        mix = np.logaddexp(joint1, joint0)
        ll = np.sum(log_gaussian_rows(self.x_neg, params.mu0, factor)) + np.sum(mix)
        w = np.exp(joint1 - mix)
        if self.clamp is not None:
            cond = np.where(self.clamp_a == 1.0, joint1 - mix, joint0 - mix)
            ll = ll + np.sum(np.where(self.clamp, cond, 0.0))
            w = np.where(self.clamp, self.clamp_a, w)
        return float(ll), w, factor.ridge_added > 0

    def m_step(self, w, pi_clip, alpha) -> ModelParams:
        w_all = np.zeros(self.n)
        w_all[self.pos_idx] = w
        total = np.sum(w_all)
        if not total > 1e-300:
            raise DegenerateResponsibilities("all responsibilities vanished; mu1 is undefined")
        if not self.n - total > 1e-300:
            raise DegenerateResponsibilities("all responsibilities equal one; mu0 is undefined")
        pi = min(max(np.sum(w) / w.shape[0], pi_clip), 1.0 - pi_clip)
        mu1, mu0, sigma = weighted_moments(self.dataset.x, w_all, self.n)
        return ModelParams(pi, mu1, mu0, sigma, alpha)


def moment_init(dataset: BagDataset, pi0: float = 0.1) -> ModelParams:
    """Initial parameters that exploit the purity of negative bags."""
    ypos = dataset.instance_y == 1
    x_pos, x_neg = dataset.x[ypos], dataset.x[~ypos]
    p = dataset.p
    ref = x_neg if x_neg.shape[0] > p else dataset.x
    mu0 = ref.mean(axis=0)
    sigma0 = np.atleast_2d(np.cov(ref, rowvar=False, bias=True))
    factor = spd_factorize(sigma0)
    z = factor.whiten((x_pos - mu0).T)
    dist = np.einsum("ij,ij->j", z, z)
    k = max(1, int(np.ceil(pi0 * x_pos.shape[0])))
    top = np.argsort(-dist, kind="stable")[:k]
    mu1 = x_pos[top].mean(axis=0)
    return ModelParams(pi0, mu1, mu0, sigma0, estimate_alpha(dataset))


def _random_start(dataset, rng, base: ModelParams) -> ModelParams:
    x_pos = dataset.x[dataset.instance_y == 1]
    mu1 = x_pos[rng.integers(x_pos.shape[0])]
    return base.replace(pi=float(rng.uniform(0.02, 0.5)), mu1=mu1)


def _run(problem: _Problem, start: ModelParams, options: EmOptions, kind: str) -> FitResult:
    params = start
    ll, w, ridged = problem.evaluate(params)
    trace = [ll]
    ridge_events = int(ridged)
    converged = False
    it = 0
    while it < options.max_iters:
        params = problem.m_step(w, options.pi_clip, start.alpha)
        it += 1
        ll_new, w, ridged = problem.evaluate(params)
        ridge_events += int(ridged)
        trace.append(ll_new)
        if abs(ll_new - ll) <= options.rel_tol * max(abs(ll), 1.0):
            converged = True
            break
        ll = ll_new
    if not converged:
        log.debug("%s EM stopped after %d iterations without converging", kind, it)
    return FitResult(params, kind, tuple(trace), it, converged, ridge_events)


def run_em(dataset: BagDataset, options: EmOptions, kind: str, clamp_mask=None, clamp_values=None) -> FitResult:
    if dataset.n_bags == 0 or not np.any(dataset.y == 1):
        raise NoPositiveBags("pi and mu1 are not identifiable without positive bags")
    problem = _Problem(dataset, clamp_mask, clamp_values)
    init = options.init
    if isinstance(init, ProvidedInit):
        if init.params.p != dataset.p:
            raise DimensionMismatch("initial parameters do not match the data dimension")
        start = init.params.replace(alpha=estimate_alpha(dataset))
        return _run(problem, start, options, kind)
    pi0 = init.pi0 if isinstance(init, MomentInit) else MomentInit().pi0
    try:
        start = moment_init(dataset, pi0)
    except Exception as exc:  # noqa: BLE001 - any numerical failure here is an init failure
        raise InitFailure(f"moment initialization failed: {exc}") from exc
    best = _run(problem, start, options, kind)
    if isinstance(init, RandomRestart):
        rng = np.random.default_rng(init.seed)
        for _ in range(init.k):
            try:
                cand = _run(problem, _random_start(dataset, rng, start), options, kind)
            except DegenerateResponsibilities:
                continue
            if cand.loglik_trace[-1] > best.loglik_trace[-1]:
                best = cand
    return best


def bag_loglik(params: ModelParams, dataset: BagDataset) -> float:
    """Log-likelihood of features given bag labels only."""
    if params.p != dataset.p:
        raise DimensionMismatch(f"params have p={params.p}, data p={dataset.p}")
    return _Problem(dataset).evaluate(params)[0]


def posterior_responsibilities(params: ModelParams, dataset: BagDataset) -> np.ndarray:
    """E-step weights for every instance (zero in negative bags)."""
    problem = _Problem(dataset)
    w_all = np.zeros(dataset.n_instances)
    w_all[problem.pos_idx] = problem.evaluate(params)[1]
    return w_all


def em_step(params: ModelParams, dataset: BagDataset, options: EmOptions | None = None) -> ModelParams:
    """One EM update of the bag-level likelihood."""
    options = options or EmOptions()
    if params.p != dataset.p:
        raise DimensionMismatch(f"params have p={params.p}, data p={dataset.p}")
    problem = _Problem(dataset)
    _, w, _ = problem.evaluate(params)
    alpha = estimate_alpha(dataset) if dataset.n_bags else params.alpha
    return problem.m_step(w, options.pi_clip, alpha)


def fit_bmle(dataset: BagDataset, options: EmOptions | None = None) -> FitResult:
    """Bag-label maximum likelihood by EM; instance labels in ``dataset`` are ignored."""
    return run_em(dataset, options or EmOptions(), "BMLE")
