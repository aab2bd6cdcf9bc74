"""Synthetic bag generators: the base mixture model and four mis-specified regimes.

Each bag is generated from its own Philox substreams keyed by ``(seed, bag
index, stream)``, so a dataset is bit-identical regardless of the order or
concurrency in which bags are produced. Stream 0 carries the bag label, the
instance-label uniforms and the feature noise; stream 1 carries anything a
regime adds (per-bag prevalence, locations). Regimes at their degenerate
settings therefore reproduce the base dataset exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigTooLarge, InvalidConfig, KernelNotFactorizable, NotFactorizable
from .linalg import spd_factorize
from .model import BagDataset, ModelParams

REGIMES = ("Base", "HeteroPi", "SpatialLabels", "SpatialFeatures", "TruncatedLabels")
MAX_SPATIAL_BAG = 5000

_CORE, _EXTRA = 0, 1


@dataclass(frozen=True)
class BetaWithMean:
    """Per-bag prevalence ~ Beta with mean ``pi`` and the given concentration."""

    concentration: float = 2.0


@dataclass(frozen=True)
class Empirical:
    """Per-bag prevalence drawn uniformly from a list of observed proportions."""

    proportions: tuple[float, ...]


@dataclass(frozen=True)
class PointMass:
    pass


@dataclass(frozen=True)
class HeteroPiParams:
    distribution: BetaWithMean | Empirical | PointMass = BetaWithMean()
    #: Empirical lists are shifted to have mean ``pi`` unless this is False.
    recenter: bool = True


@dataclass(frozen=True)
class SpatialLabelParams:
    floor: float = 0.8
    ceiling: float = 1.0
    #: Optional bag-specific prevalence multiplied by the spatial profile.
    hetero: HeteroPiParams | None = None


@dataclass(frozen=True)
class SpatialFeatureParams:
    radius_coeff: float = 0.03
    range: float = 0.3


@dataclass(frozen=True)
class SimConfig:
    n_bags: int
    bag_size: int
    alpha: float
    pi: float
    mu1: np.ndarray
    mu0: np.ndarray
    sigma: np.ndarray
    sigma_scale: float = 1.0
    seed: int = 0
    regime: str = "Base"
    regime_params: object = None

    def __post_init__(self):
        object.__setattr__(self, "mu1", np.asarray(self.mu1, dtype=float).reshape(-1))
        object.__setattr__(self, "mu0", np.asarray(self.mu0, dtype=float).reshape(-1))
        object.__setattr__(self, "sigma", np.atleast_2d(np.asarray(self.sigma, dtype=float)))

    @property
    def p(self) -> int:
        return self.mu1.shape[0]

    def with_(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def truth(self) -> ModelParams:
        """Parameters the estimators target under this configuration.

        For the spatial-label regime ``pi`` is the average label probability
        over the disk; everything else is taken from the configuration.
        """
        pi = self.pi
        if self.regime == "SpatialLabels":
            rp = self.regime_params or SpatialLabelParams()
            pi = self.pi * spatial_profile_mean(rp.floor, rp.ceiling)
        pi = min(max(pi, 1e-12), 1 - 1e-12)
        return ModelParams(pi, self.mu1, self.mu0, self.sigma_scale * self.sigma, self.alpha)

    def check(self):
        if self.n_bags < 1 or self.bag_size < 1:
            raise InvalidConfig("n_bags and bag_size must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidConfig(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.pi <= 1.0:
            raise InvalidConfig(f"pi must lie in [0, 1], got {self.pi}")
        if self.sigma_scale <= 0.0:
            raise InvalidConfig("sigma_scale must be positive")
        p = self.p
        if self.mu0.shape != (p,) or self.sigma.shape != (p, p):
            raise InvalidConfig("mu1, mu0 and sigma dimensions disagree")
        if self.regime not in REGIMES:
            raise InvalidConfig(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        rp = self.regime_params
        if self.regime == "HeteroPi":
            _check_hetero(rp or HeteroPiParams(), self.pi)
        elif self.regime == "SpatialLabels":
            rp = rp or SpatialLabelParams()
            if not 0.0 <= rp.floor <= rp.ceiling <= 1.0 or (rp.floor == rp.ceiling and rp.ceiling != 1.0):
                raise InvalidConfig("spatial label profile needs 0 <= floor < ceiling <= 1")
            if rp.hetero is not None:
                _check_hetero(rp.hetero, self.pi)
        elif self.regime == "SpatialFeatures":
            rp = rp or SpatialFeatureParams()
            if rp.radius_coeff <= 0.0 or rp.range <= 0.0:
                raise InvalidConfig("radius_coeff and range must be positive")
            if self.bag_size > MAX_SPATIAL_BAG:
                raise ConfigTooLarge(f"bag_size {self.bag_size} exceeds {MAX_SPATIAL_BAG} for spatial features")
        try:
            spd_factorize(self.sigma)
        except NotFactorizable as exc:
            raise InvalidConfig(f"sigma is not positive definite: {exc}") from exc


def _check_hetero(hp: HeteroPiParams, pi: float):
    dist = hp.distribution
    if isinstance(dist, BetaWithMean):
        if dist.concentration <= 0.0 or not 0.0 < pi < 1.0:
            raise InvalidConfig("Beta prevalence needs concentration > 0 and 0 < pi < 1")
    elif isinstance(dist, Empirical):
        props = np.asarray(dist.proportions, dtype=float)
        if props.size == 0 or np.any((props < 0) | (props > 1)):
            raise InvalidConfig("empirical proportions must be non-empty and in [0, 1]")
        if not hp.recenter and abs(props.mean() - pi) > 1e-9:
            raise InvalidConfig("empirical proportions must average to pi")


def bag_rng(seed: int, bag_index: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(bag_index), stream))
    return np.random.Generator(np.random.Philox(ss))


@lru_cache(maxsize=None)
def _profile_range(grid: int = 1001) -> tuple[float, float, float]:
    """Min, max and disk-average of sin(r1) sin(r2) over the unit disk (dense grid)."""
    t = np.linspace(-1.0, 1.0, grid)
    r1, r2 = np.meshgrid(t, t)
    inside = r1 ** 2 + r2 ** 2 <= 1.0
    vals = np.sin(r1[inside]) * np.sin(r2[inside])
    return float(vals.min()), float(vals.max()), float(vals.mean())


def spatial_profile(loc, floor=0.8, ceiling=1.0) -> np.ndarray:
    """sin(r1) sin(r2) rescaled so its range over the unit disk is [floor, ceiling]."""
    lo, hi, _ = _profile_range()
    raw = np.sin(loc[:, 0]) * np.sin(loc[:, 1])
    return np.clip(floor + (ceiling - floor) * (raw - lo) / (hi - lo), floor, ceiling)


def spatial_profile_mean(floor=0.8, ceiling=1.0) -> float:
    lo, hi, mean = _profile_range()
    return floor + (ceiling - floor) * (mean - lo) / (hi - lo)


def uniform_disk(rng: np.random.Generator, n: int, radius: float = 1.0) -> np.ndarray:
    r = radius * np.sqrt(rng.random(n))
    theta = 2.0 * np.pi * rng.random(n)
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def _draw_bag_pi(rng: np.random.Generator, hp: HeteroPiParams, pi: float) -> float:
    dist = hp.distribution
    if isinstance(dist, PointMass):
        return pi
    if isinstance(dist, BetaWithMean):
        k = dist.concentration
        return float(rng.beta(pi * k, (1.0 - pi) * k))
    props = np.asarray(dist.proportions, dtype=float)
    if hp.recenter:
        props = np.clip(props - props.mean() + pi, 0.0, 1.0)
    return float(props[rng.integers(props.size)])


def kernel_factor(loc, corr_range):
    """Cholesky factor of the exponential kernel exp(-dist / corr_range) at ``loc``.

    Returns the factor and the ridge that was needed (0 when none).
    """
    d = np.sqrt(((loc[:, None, :] - loc[None, :, :]) ** 2).sum(-1))
    try:
        f = spd_factorize(np.exp(-d / corr_range))
    except NotFactorizable as exc:
        raise KernelNotFactorizable(str(exc)) from exc
    return f.lower_factor, f.ridge_added


class _Generator:
    """Per-configuration state shared by all bags."""

    def __init__(self, config: SimConfig):
        config.check()
        self.cfg = config
        self.chol_sigma = spd_factorize(config.sigma_scale * config.sigma).lower_factor
        self.means = np.vstack([config.mu0, config.mu1])
        self.ridge_events = 0

    def bag(self, i: int):
        cfg = self.cfg
        m = cfg.bag_size
        core = bag_rng(cfg.seed, i, _CORE)
        y = int(core.random() < cfg.alpha)
        extra = bag_rng(cfg.seed, i, _EXTRA)
        loc = None

        prob = np.full(m, cfg.pi if y else 0.0)
        if cfg.regime == "HeteroPi" and y:
            prob[:] = _draw_bag_pi(extra, cfg.regime_params or HeteroPiParams(), cfg.pi)
        elif cfg.regime == "SpatialLabels":
            rp = cfg.regime_params or SpatialLabelParams()
            loc = uniform_disk(extra, m)
            if y:
                pi_i = _draw_bag_pi(extra, rp.hetero, cfg.pi) if rp.hetero is not None else cfg.pi
                prob = pi_i * spatial_profile(loc, rp.floor, rp.ceiling)

        u = core.random(m)
        a = u < prob
        if cfg.regime == "TruncatedLabels" and y and cfg.pi > 0.0:
            while not a.any():
                a = core.random(m) < prob

        z = core.standard_normal((m, cfg.p))
        if cfg.regime == "SpatialFeatures":
            rp = cfg.regime_params or SpatialFeatureParams()
            loc = uniform_disk(extra, m, rp.radius_coeff * np.sqrt(m))
            low, ridge = kernel_factor(loc, rp.range)
            self.ridge_events += ridge > 0
            z = low @ z
        x = self.means[a.astype(np.intp)] + z @ self.chol_sigma.T
        return y, a.astype(np.int8), x, loc

    def dataset(self) -> BagDataset:
        cfg = self.cfg
        parts = [self.bag(i) for i in range(cfg.n_bags)]
        m = cfg.bag_size
        has_loc = parts[0][3] is not None
        meta = {"regime": cfg.regime, "seed": cfg.seed, "kernel_ridge_events": self.ridge_events,
                "effective_pi": cfg.truth().pi if 0 < cfg.pi < 1 else cfg.pi}
        return BagDataset(
            x=np.vstack([pt[2] for pt in parts]),
            bag=np.repeat(np.arange(cfg.n_bags), m),
            y=np.array([pt[0] for pt in parts], dtype=np.int8),
            a=np.concatenate([pt[1] for pt in parts]),
            s=np.zeros(cfg.n_bags * m, dtype=np.int8),
            loc=np.vstack([pt[3] for pt in parts]) if has_loc else None,
            meta=meta,
        )


def simulate(config: SimConfig) -> BagDataset:
    """Generate a dataset under ``config.regime`` (ground-truth labels are all stored)."""
    return _Generator(config).dataset()


def _expect_regime(config, regime):
    if config.regime != regime:
        raise InvalidConfig(f"expected regime {regime}, got {config.regime}")
    return simulate(config)


def simulate_hetero_pi(config: SimConfig) -> BagDataset:
    return _expect_regime(config, "HeteroPi")


def simulate_spatial_labels(config: SimConfig) -> BagDataset:
    return _expect_regime(config, "SpatialLabels")


def simulate_spatial_features(config: SimConfig) -> BagDataset:
    return _expect_regime(config, "SpatialFeatures")


def simulate_truncated_labels(config: SimConfig) -> BagDataset:
    return _expect_regime(config, "TruncatedLabels")


def ar1_covariance(p: int, rho: float = 0.5) -> np.ndarray:
    idx = np.arange(p)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def default_config(p: int = 5, *, n_bags: int = 100, bag_size: int = 200, separation: float = 3.0,
                   rho: float = 0.5, alpha: float = 0.36, pi: float = 0.06, seed: int = 0,
                   **kw) -> SimConfig:
    """Synthetic stand-in for the real-data parameter tables.

    ``mu0 = 0``, ``Sigma`` is AR(1) with correlation ``rho`` and ``mu1`` points
    along the all-ones direction at Mahalanobis distance ``separation``.
    """
    sigma = ar1_covariance(p, rho)
    direction = np.ones(p)
    scale = separation / np.sqrt(direction @ np.linalg.solve(sigma, direction))
    return SimConfig(n_bags=n_bags, bag_size=bag_size, alpha=alpha, pi=pi, mu1=scale * direction,
                     mu0=np.zeros(p), sigma=sigma, seed=seed, **kw)


def regime_config(base: SimConfig, regime: str, regime_params=None) -> SimConfig:
    defaults = {"HeteroPi": HeteroPiParams(), "SpatialLabels": SpatialLabelParams(),
                "SpatialFeatures": SpatialFeatureParams()}
    return base.with_(regime=regime, regime_params=regime_params or defaults.get(regime))


def seed_for(*key: int) -> int:
    """Derive a 64-bit seed from an integer key path."""
    return int(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key]).generate_state(1, np.uint64)[0])


__all__: Sequence[str] = [
    "BetaWithMean", "Empirical", "PointMass", "HeteroPiParams", "SpatialLabelParams",
    "SpatialFeatureParams", "SimConfig", "simulate", "simulate_hetero_pi", "simulate_spatial_labels",
    "simulate_spatial_features", "simulate_truncated_labels", "default_config", "regime_config",
    "spatial_profile", "spatial_profile_mean", "seed_for", "ar1_covariance", "REGIMES",
]
