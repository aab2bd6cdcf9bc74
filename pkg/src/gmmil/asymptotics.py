"""Asymptotic precision matrices and Monte-Carlo checks of the limit theory.

The instance-level precision has a closed block-diagonal form. The losses of
information for the bag-level and subsample estimators are expectations of
weighted outer products of one score-difference vector and are estimated by
Monte Carlo; the bag and subsample precisions follow by subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from ._parallel import ordered_map
from .bmle import EmOptions, fit_bmle
from .errors import GmmilError
from .imle import fit_imle
from .linalg import duplication_matrix
from .model import ModelParams, flatten, n_params
from .simulate import SimConfig, seed_for, simulate
from .smle import fit_smle
from .subsampling import draw_subsample

_CHUNK = 4096


@dataclass(frozen=True)
class BagGap:
    pass


@dataclass(frozen=True)
class SubGap:
    alpha_n: float
    beta: np.ndarray


@dataclass(frozen=True)
class DeltaEstimate:
    matrix: np.ndarray
    standard_errors: np.ndarray
    mc_samples: int

    @property
    def mc_standard_error(self) -> float:
        return float(np.max(self.standard_errors))


@dataclass(frozen=True)
class PrecisionReport:
    omega_ins: np.ndarray
    delta_bag: np.ndarray
    delta_sub: np.ndarray
    omega_bag: np.ndarray
    omega_sub: np.ndarray
    mc_samples: int
    mc_standard_error: float


def block_slices(p: int):
    """Slices of the flattened parameter vector: pi, mu1, mu0, vech(Omega)."""
    return {
        "pi": slice(0, 1),
        "mu1": slice(1, 1 + p),
        "mu0": slice(1 + p, 1 + 2 * p),
        "omega": slice(1 + 2 * p, n_params(p)),
    }


def block_labels(p: int) -> np.ndarray:
    labels = np.empty(n_params(p), dtype=object)
    for name, sl in block_slices(p).items():
        labels[sl] = name
    return labels


def omega_ins(params: ModelParams) -> np.ndarray:
    """Per-instance precision of the instance-level estimator (block diagonal)."""
    alpha, pi = params.alpha, params.pi
    if not np.isfinite(alpha):
        raise ValueError("params.alpha must be set")
    p = params.p
    omega = params.omega
    sigma = params.factor.reconstruct()
    dup = duplication_matrix(p)
    vech_block = 0.5 * (dup.T @ (dup.T @ np.kron(sigma, sigma)).T)
    out = np.zeros((n_params(p), n_params(p)))
    sl = block_slices(p)
    out[sl["pi"], sl["pi"]] = alpha / (pi * (1.0 - pi))
    out[sl["mu1"], sl["mu1"]] = alpha * pi * omega
    out[sl["mu0"], sl["mu0"]] = (1.0 - alpha * pi) * omega
    out[sl["omega"], sl["omega"]] = 0.5 * (vech_block + vech_block.T)
    return out


def _draw_positive(params: ModelParams, n: int, rng: np.random.Generator):
    a = rng.random(n) < params.pi
    z = rng.standard_normal((n, params.p))
    x = np.where(a[:, None], params.mu1, params.mu0) + z @ params.factor.lower_factor.T
    return a, x


def _draw_negative(params: ModelParams, n: int, rng: np.random.Generator):
    z = rng.standard_normal((n, params.p))
    return params.mu0 + z @ params.factor.lower_factor.T


def _posterior(params: ModelParams, x):
    return special.expit(params.intercept + x @ params.beta)


def _half_dup_vec(dup, outer):
    """Rows of ``D^T vec(S)`` for a stack of symmetric matrices ``S`` (n, p, p)."""
    n, p, _ = outer.shape
    return np.asarray((dup.T @ outer.reshape(n, p * p).T).T)


def score_difference(params: ModelParams, x) -> np.ndarray:
    """Per-instance vector multiplying ``(A - posterior)`` in the score gap.

    Components: ``1/(pi (1 - pi))``, ``Omega (x - mu1)``, ``-Omega (x - mu0)``
    and ``-D^T vec(d1 d1^T - d0 d0^T) / 2``.
    """
    x = np.atleast_2d(x)
    p = params.p
    omega = params.omega
    d1 = x - params.mu1
    d0 = x - params.mu0
    dup = duplication_matrix(p)
    outer = d1[:, :, None] * d1[:, None, :] - d0[:, :, None] * d0[:, None, :]
    return np.hstack([
        np.full((x.shape[0], 1), 1.0 / (params.pi * (1.0 - params.pi))),
        d1 @ omega,
        -d0 @ omega,
        -0.5 * _half_dup_vec(dup, outer),
    ])


def _weighted_outer_means(params, weight, n, rng, groups):
    """Group means of ``w * delta delta^T`` over positive-bag draws."""
    q = n_params(params.p)
    sums = np.zeros((groups, q, q))
    counts = np.zeros(groups)
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        _, x = _draw_positive(params, m, rng)
        post = _posterior(params, x)
        w = post * (1.0 - post)
        if isinstance(weight, SubGap):
            w = w * special.expit(weight.alpha_n + x @ np.asarray(weight.beta, dtype=float))
        delta = score_difference(params, x)
        g = (np.arange(done, done + m) * groups) // n
        for k in np.unique(g):
            sel = g == k
            sums[k] += (delta[sel] * w[sel, None]).T @ delta[sel]
            counts[k] += sel.sum()
        done += m
    return sums, counts


def delta_scores(params: ModelParams, mc_samples: int = 100_000, seed: int = 0,
                 weight: BagGap | SubGap = BagGap(), groups: int = 20) -> DeltaEstimate:
    """Monte-Carlo estimate of the information lost relative to full labels.

    Averages ``w * delta delta^T`` over instances drawn from positive bags,
    with ``w = post (1 - post)`` (times the selection probability for
    :class:`SubGap`), and scales by ``alpha``: negative-bag instances have a
    degenerate posterior and contribute nothing. Standard errors come from a
    delete-one-group jackknife.
    """
    if mc_samples < 1000:
        raise ValueError("mc_samples must be at least 1000")
    if not np.isfinite(params.alpha):
        raise ValueError("params.alpha must be set")
    rng = np.random.default_rng(seed)
    sums, counts = _weighted_outer_means(params, weight, mc_samples, rng, groups)
    total = sums.sum(0) / counts.sum()
    loo = (sums.sum(0)[None] - sums) / (counts.sum() - counts)[:, None, None]
    se = np.sqrt((groups - 1) / groups * np.sum((loo - loo.mean(0)) ** 2, axis=0))
    mat = params.alpha * total
    return DeltaEstimate(0.5 * (mat + mat.T), params.alpha * se, mc_samples)


def empirical_information(params: ModelParams, mc_samples: int = 100_000, seed: int = 0):
    """Outer-product-of-scores estimates of the complete-data and bag-level information.

    Returns ``(info_complete, info_bag)``, both per instance. Their difference
    estimates the same quantity as :func:`delta_scores` by a different route:
    per-instance scores are averaged directly, without the score-gap identity.
    """
    rng = np.random.default_rng(seed)
    p = params.p
    q = n_params(p)
    dup = duplication_matrix(p)
    omega, sigma = params.omega, params.factor.reconstruct()
    pi = params.pi

    def score(t, d1, d0):
        o1 = d1[:, :, None] * d1[:, None, :]
        o0 = d0[:, :, None] * d0[:, None, :]
        return np.hstack([
            ((t - pi) / (pi * (1 - pi)))[:, None],
            t[:, None] * (d1 @ omega),
            (1 - t)[:, None] * (d0 @ omega),
            0.5 * _half_dup_vec(dup, sigma[None] - t[:, None, None] * o1 - (1 - t)[:, None, None] * o0),
        ])

    pos_c = np.zeros((q, q))
    pos_b = np.zeros((q, q))
    neg = np.zeros((q, q))
    done = 0
    while done < mc_samples:
        m = min(_CHUNK, mc_samples - done)
        a, x = _draw_positive(params, m, rng)
        d1, d0 = x - params.mu1, x - params.mu0
        sc = score(a.astype(float), d1, d0)
        sb = score(_posterior(params, x), d1, d0)
        pos_c += sc.T @ sc
        pos_b += sb.T @ sb
        xn = _draw_negative(params, m, rng)
        sn = score(np.zeros(m), xn - params.mu1, xn - params.mu0)
        sn[:, 0] = 0.0  # no pi term outside positive bags
        neg += sn.T @ sn
        done += m
    alpha = params.alpha
    info_neg = (1 - alpha) * neg / mc_samples
    return alpha * pos_c / mc_samples + info_neg, alpha * pos_b / mc_samples + info_neg


def precision_report(params: ModelParams, alpha_n: float, beta=None, mc_samples: int = 100_000,
                     seed: int = 0) -> PrecisionReport:
    """All precision matrices for one parameter point and one selection rule."""
    beta = params.beta if beta is None else np.asarray(beta, dtype=float)
    om = omega_ins(params)
    dbag = delta_scores(params, mc_samples, seed, BagGap())
    dsub = delta_scores(params, mc_samples, seed, SubGap(alpha_n, beta))
    omega_bag = om - dbag.matrix
    return PrecisionReport(om, dbag.matrix, dsub.matrix, omega_bag, omega_bag + dsub.matrix, mc_samples,
                           max(dbag.mc_standard_error, dsub.mc_standard_error))


def population_alpha_n(params: ModelParams, target_fraction: float, beta=None, mc_samples: int = 100_000,
                       seed: int = 0) -> float:
    """Intercept giving the target expected selection fraction under the model itself."""
    from scipy import optimize

    beta = params.beta if beta is None else np.asarray(beta, dtype=float)
    _, x = _draw_positive(params, mc_samples, np.random.default_rng(seed))
    scores = x @ beta
    return float(optimize.brentq(lambda a: np.mean(special.expit(a + scores)) - target_fraction, -60, 60,
                                 xtol=1e-12))


def sym_sqrt(matrix) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (matrix + matrix.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


@dataclass
class StudentizedSummary:
    estimator_kind: str
    labels: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    normality_pvalue: np.ndarray
    correlation: np.ndarray
    max_cross_block_corr: float
    replications: int
    failures: int
    failure_messages: list = field(default_factory=list)

    def rows(self):
        for k in range(self.labels.shape[0]):
            yield {"coordinate": k, "block": self.labels[k], "mean": self.mean[k],
                   "variance": self.variance[k], "normality_pvalue": self.normality_pvalue[k]}


def _one_replication(args):
    kind, config, rep_seed, options, alpha_n, beta = args
    data = simulate(config.with_(seed=rep_seed))
    try:
        if kind == "IMLE":
            fit = fit_imle(data)
        elif kind == "BMLE":
            fit = fit_bmle(data.without_instance_labels(), options)
        else:
            plan = draw_subsample(data, alpha_n, beta, seed_for(rep_seed, 7))
            fit = fit_smle(plan.apply(data), options)
    except GmmilError as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return flatten(fit.params), data.n_instances


def sampling_distribution_check(estimator_kind: str, sim_config: SimConfig, replications: int, seed: int,
                                *, options: EmOptions | None = None, fraction: float = 0.1,
                                mc_samples: int = 200_000, threads: int | None = 1) -> StudentizedSummary:
    """Studentize sqrt(NM)(estimate - truth) by the theoretical precision and summarize.

    The precision is the closed form for IMLE and the Monte-Carlo corrected
    forms for BMLE/SMLE (SMLE uses the true selection direction with the
    intercept calibrated to ``fraction`` under the model).
    """
    kind = estimator_kind.upper()
    if kind not in ("IMLE", "BMLE", "SMLE"):
        raise ValueError(f"unknown estimator {estimator_kind}")
    if replications < 100:
        raise ValueError("at least 100 replications are required")
    truth = sim_config.truth()
    p = truth.p
    prec = omega_ins(truth)
    alpha_n = beta = None
    if kind != "IMLE":
        prec = prec - delta_scores(truth, mc_samples, seed_for(seed, 1)).matrix
    if kind == "SMLE":
        beta = truth.beta
        alpha_n = population_alpha_n(truth, fraction, beta, mc_samples, seed_for(seed, 2))
        prec = prec + delta_scores(truth, mc_samples, seed_for(seed, 1), SubGap(alpha_n, beta)).matrix
    root = sym_sqrt(prec)
    theta0 = flatten(truth)
    jobs = [(kind, sim_config, seed_for(seed, 100, r), options or EmOptions(), alpha_n, beta)
            for r in range(replications)]
    results = ordered_map(_one_replication, jobs, threads)
    zs, failures = [], []
    for est, info in results:
        if est is None:
            failures.append(info)
            continue
        zs.append(root @ (np.sqrt(info) * (est - theta0)))
    z = np.array(zs).reshape(-1, n_params(p))
    corr = np.corrcoef(z, rowvar=False) if z.shape[0] > 1 else np.full((z.shape[1],) * 2, np.nan)
    labels = block_labels(p)
    cross = labels[:, None] != labels[None, :]
    normal_p = np.array([stats.normaltest(z[:, k]).pvalue if z.shape[0] >= 20 else np.nan
                         for k in range(z.shape[1])])
    return StudentizedSummary(kind, labels, z.mean(0), z.var(0, ddof=1), normal_p, corr,
                              float(np.max(np.abs(corr[cross]))), replications, len(failures), failures)


__all__ = ["omega_ins", "delta_scores", "BagGap", "SubGap", "PrecisionReport", "precision_report",
           "score_difference", "empirical_information", "sampling_distribution_check", "block_slices",
           "population_alpha_n"]
