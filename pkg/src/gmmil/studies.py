"""Monte-Carlo study runner: replications, estimator fits, per-block errors, CSV emission.

Every replication regenerates its data from ``seed_for(seed, r)`` and reuses
that draw for every grid value, so comparisons across the grid use common
random numbers. Replications are independent and are mapped over a process
pool; rows are emitted in (grid, replication, estimator, block) order, which
makes the output independent of the worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import ordered_map
from .bmle import EmOptions, fit_bmle
from .errors import GmmilError, InvalidConfig
from .imle import fit_imle
from .metrics import BLOCKS, block_errors, safe_log
from .simulate import REGIMES, SimConfig, default_config, regime_config, seed_for, simulate
from .smle import fit_smle
from .subsampling import calibrate_alpha_n, draw_subsample, pilot_beta

STUDIES = ("Study1Sigma", "Study2Fraction", "Study3SampleSize", "Study4Pilot",
           "RobHeteroPi", "RobSpatialLabels", "RobSpatialFeatures", "RobTruncatedLabels")
ROBUST_REGIME = {"RobHeteroPi": "HeteroPi", "RobSpatialLabels": "SpatialLabels",
                 "RobSpatialFeatures": "SpatialFeatures", "RobTruncatedLabels": "TruncatedLabels"}
ESTIMATORS = {"Study1Sigma": ("IMLE", "BMLE"), "Study4Pilot": ("SMLE",)}
ROW_COLUMNS = ["study", "grid", "replication", "estimator", "block", "mse", "log_mse", "status"]
PLOT_COLUMNS = ["study", "grid", "estimator", "block", "n_ok", "mean_log_mse", "se_log_mse",
                "median_log_mse", "mse", "log_mse"]

DESK_GRIDS = {
    "Study1Sigma": (1.0, 2.0, 4.0),
    "Study2Fraction": (0.001, 0.1, 0.5, 0.99),
    "Study3SampleSize": (50, 100, 200),
    "Study4Pilot": (0.0, 0.1, 0.5, 1.0, math.inf),
}
PAPER_GRIDS = {
    "Study1Sigma": (0.5, 1.0, 2.0, 4.0, 8.0),
    "Study2Fraction": (0.001, 0.01, 0.05, 0.1, 0.2, 0.5, 0.8, 0.99),
    "Study3SampleSize": (50, 100, 200, 400, 800),
    "Study4Pilot": (0.0, 0.05, 0.1, 0.2, 0.5, 1.0, math.inf),
}
ROBUST_GRID = {False: (50, 200), True: (50, 100, 200, 400, 800)}


@dataclass(frozen=True)
class StudyConfig:
    study: str
    replications: int
    grid: tuple
    base: SimConfig
    em: EmOptions = field(default_factory=EmOptions)
    output_dir: str | None = None
    threads: int | None = None
    seed: int = 0
    fraction: float = 0.1
    pilot_fraction: float = 0.5

    def __post_init__(self):
        if self.study not in STUDIES:
            raise InvalidConfig(f"unknown study {self.study!r}; expected one of {STUDIES}")
        if self.replications < 1:
            raise InvalidConfig("replications must be >= 1")
        if len(self.grid) == 0:
            raise InvalidConfig("grid must not be empty")
        if not 0.0 < self.fraction < 1.0:
            raise InvalidConfig("fraction must lie in (0, 1)")
        if not (0.0 <= self.pilot_fraction <= 1.0 or math.isinf(self.pilot_fraction)):
            raise InvalidConfig("pilot_fraction must lie in [0, 1] or be inf")
        g = np.asarray(self.grid, dtype=float)
        if self.study == "Study1Sigma" and np.any(g <= 0):
            raise InvalidConfig("sigma grid values must be positive")
        if self.study == "Study2Fraction" and np.any((g < 0) | (g > 1)):
            raise InvalidConfig("fraction grid values must lie in [0, 1]")
        if self.study == "Study4Pilot" and np.any((g < 0) | ((g > 1) & ~np.isinf(g))):
            raise InvalidConfig("pilot grid values must lie in [0, 1] or be inf")
        if self.study in ("Study3SampleSize", *ROBUST_REGIME) and np.any((g < 1) | (g != np.round(g))):
            raise InvalidConfig("sample-size grid values must be positive integers")

    @property
    def estimators(self) -> tuple[str, ...]:
        return ESTIMATORS.get(self.study, ("IMLE", "BMLE", "SMLE"))

    def manifest(self) -> dict:
        b = self.base
        out = {
            "gmmil.version": __version__,
            "study.name": self.study, "study.replications": self.replications,
            "study.grid": ",".join(repr(float(v)) for v in self.grid),
            "study.seed": self.seed, "study.fraction": repr(self.fraction),
            "study.pilot_fraction": repr(self.pilot_fraction),
            "sim.n_bags": b.n_bags, "sim.bag_size": b.bag_size, "sim.p": b.p,
            "sim.alpha": repr(b.alpha), "sim.pi": repr(b.pi), "sim.sigma_scale": repr(b.sigma_scale),
            "sim.regime": b.regime,
            "sim.mu1": ",".join(repr(float(v)) for v in b.mu1),
            "sim.mu0": ",".join(repr(float(v)) for v in b.mu0),
            "sim.sigma": ",".join(repr(float(v)) for v in b.sigma.ravel()),
            "em.max_iters": self.em.max_iters, "em.rel_tol": repr(self.em.rel_tol),
            "em.pi_clip": repr(self.em.pi_clip), "em.init": repr(self.em.init),
        }
        if b.regime_params is not None:
            out["sim.regime_params"] = repr(b.regime_params)
        return out


def default_study(name: str, paper_scale: bool = False, **overrides) -> StudyConfig:
    """Desk-scale (or the larger original-scale) configuration of a named study."""
    if name not in STUDIES:
        raise InvalidConfig(f"unknown study {name!r}; expected one of {STUDIES}")
    if paper_scale:
        base = default_config(50, n_bags=100, bag_size=1000)
        reps = 500
    else:
        base = default_config(5, n_bags=100, bag_size=200)
        reps = 100 if name == "Study1Sigma" else 50
    if name in ROBUST_REGIME:
        base = regime_config(base, ROBUST_REGIME[name])
        grid = ROBUST_GRID[paper_scale]
    else:
        grid = (PAPER_GRIDS if paper_scale else DESK_GRIDS)[name]
    kw = {"study": name, "replications": reps, "grid": grid, "base": base}
    kw.update(overrides)
    return StudyConfig(**kw)


@dataclass
class StudyReport:
    config: StudyConfig
    rows: list
    plot_rows: list
    n_fits: int
    n_failures: int

    @property
    def failure_rate(self) -> float:
        return self.n_failures / self.n_fits if self.n_fits else 0.0

    def frame(self, estimator: str, block: str) -> np.ndarray:
        """(grid, replication) array of per-replication log errors (NaN where the fit failed)."""
        g = len(self.config.grid)
        out = np.full((g, self.config.replications), np.nan)
        index = {float(v): k for k, v in enumerate(self.config.grid)}
        for r in self.rows:
            if r["estimator"] == estimator and r["block"] == block:
                out[index[r["grid"]], r["replication"]] = r["log_mse"]
        return out

    def squared_errors(self, estimator: str, block: str) -> np.ndarray:
        g = len(self.config.grid)
        out = np.full((g, self.config.replications), np.nan)
        index = {float(v): k for k, v in enumerate(self.config.grid)}
        for r in self.rows:
            if r["estimator"] == estimator and r["block"] == block:
                out[index[r["grid"]], r["replication"]] = r["mse"]
        return out


# -- one replication ---------------------------------------------------------

def _smle(data, truth, em, fraction, pilot, pilot_seed, sub_seed, beta_cache):
    if fraction <= 0.0:
        return fit_smle(data.without_instance_labels().replace(s=np.zeros(data.n_instances, np.int8)), em)
    if fraction >= 1.0:
        s = (data.instance_y == 1).astype(np.int8)
        return fit_smle(data.replace(s=s), em)
    if pilot not in beta_cache:
        if math.isinf(pilot):
            beta_cache[pilot] = truth.beta
        else:
            beta_cache[pilot] = pilot_beta(data, pilot, em, pilot_seed)
    beta = beta_cache[pilot]
    plan = draw_subsample(data, calibrate_alpha_n(beta, data, fraction), beta, sub_seed)
    return fit_smle(plan.apply(data), em)


def _config_for(cfg: StudyConfig, value) -> SimConfig:
    if cfg.study == "Study1Sigma":
        return cfg.base.with_(sigma_scale=float(value))
    if cfg.study == "Study3SampleSize" or cfg.study in ROBUST_REGIME:
        return cfg.base.with_(n_bags=int(value))
    return cfg.base


def _replication(args):
    cfg, r = args
    data_seed = seed_for(cfg.seed, r)
    pilot_seed = seed_for(cfg.seed, r, 1)
    sub_seed = seed_for(cfg.seed, r, 2)
    out = []
    cache = {}
    beta_cache = {}
    for value in cfg.grid:
        sim = _config_for(cfg, value).with_(seed=data_seed)
        key = (sim.n_bags, sim.sigma_scale)
        if key not in cache:
            cache.clear()
            beta_cache.clear()
            cache[key] = {"data": simulate(sim)}
        slot = cache[key]
        data, truth = slot["data"], sim.truth()
        for est in cfg.estimators:
            try:
                if est == "IMLE":
                    if "IMLE" not in slot:
                        slot["IMLE"] = fit_imle(data)
                    fit = slot["IMLE"]
                elif est == "BMLE":
                    if "BMLE" not in slot:
                        slot["BMLE"] = fit_bmle(data.without_instance_labels(), cfg.em)
                    fit = slot["BMLE"]
                else:
                    fraction = float(value) if cfg.study == "Study2Fraction" else cfg.fraction
                    pilot = float(value) if cfg.study == "Study4Pilot" else cfg.pilot_fraction
                    fit = _smle(data, truth, cfg.em, fraction, pilot, pilot_seed, sub_seed, beta_cache)
                errs, status = block_errors(fit.params, truth), "ok"
            except GmmilError as exc:
                errs, status = None, f"failed:{type(exc).__name__}"
            for b in BLOCKS:
                mse = errs[b] if errs else math.nan
                out.append({"study": cfg.study, "grid": float(value), "replication": r, "estimator": est,
                            "block": b, "mse": mse, "log_mse": safe_log(mse) if errs else math.nan,
                            "status": status})
    return out


def _summaries(cfg: StudyConfig, rows) -> list:
    plot = []
    for value in cfg.grid:
        for est in cfg.estimators:
            for b in BLOCKS:
                sel = [r for r in rows if r["grid"] == float(value) and r["estimator"] == est
                       and r["block"] == b and r["status"] == "ok"]
                logs = np.array([r["log_mse"] for r in sel])
                sq = np.array([r["mse"] for r in sel])
                n = logs.size
                agg = float(sq.mean()) if n else math.nan
                plot.append({
                    "study": cfg.study, "grid": float(value), "estimator": est, "block": b, "n_ok": n,
                    "mean_log_mse": float(logs.mean()) if n else math.nan,
                    "se_log_mse": float(logs.std(ddof=1) / np.sqrt(n)) if n > 1 else math.nan,
                    "median_log_mse": float(np.median(logs)) if n else math.nan,
                    "mse": agg, "log_mse": safe_log(agg) if n else math.nan,
                })
    return plot


def run_study(cfg: StudyConfig) -> StudyReport:
    """Run every replication, summarize, and write CSVs when ``output_dir`` is set."""
    cfg.base.check()
    per_rep = ordered_map(_replication, [(cfg, r) for r in range(cfg.replications)], cfg.threads)
    order = {float(v): k for k, v in enumerate(cfg.grid)}
    est_order = {e: k for k, e in enumerate(cfg.estimators)}
    rows = sorted((row for rep in per_rep for row in rep),
                  key=lambda x: (order[x["grid"]], x["replication"], est_order[x["estimator"]],
                                 BLOCKS.index(x["block"])))
    n_fits = len(rows) // len(BLOCKS)
    n_fail = sum(1 for x in rows if x["status"] != "ok") // len(BLOCKS)
    report = StudyReport(cfg, rows, _summaries(cfg, rows), n_fits, n_fail)
    if cfg.output_dir is not None:
        write_report(report, cfg.output_dir)
    return report


def write_report(report: StudyReport, out_dir) -> None:
    from .io import format_config, write_rows

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = report.config.manifest()
    (out / "manifest.txt").write_text(format_config(manifest), encoding="utf-8")
    stem = report.config.study.lower()
    write_rows(out / f"{stem}_rows.csv", report.rows, ROW_COLUMNS, manifest)
    write_rows(out / f"{stem}_plot.csv", report.plot_rows, PLOT_COLUMNS, manifest)


def pair_within(mean_a, se_a, mean_b, se_b, k: float = 2.0) -> bool:
    """True when two independent Monte-Carlo means differ by at most ``k`` combined standard errors."""
    return abs(mean_a - mean_b) <= k * math.hypot(se_a, se_b)


__all__ = ["StudyConfig", "StudyReport", "run_study", "default_study", "write_report", "STUDIES",
           "ROBUST_REGIME", "REGIMES", "pair_within"]
