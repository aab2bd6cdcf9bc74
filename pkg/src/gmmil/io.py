"""Dataset CSV, parameter JSON and flat ``key=value`` configuration files."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .bmle import EmOptions, MomentInit, RandomRestart
from .errors import InvalidConfig, ParseError, SchemaError
from .model import UNOBSERVED, BagDataset, FitResult, ModelParams
from .simulate import (BetaWithMean, HeteroPiParams, SimConfig, SpatialFeatureParams,
                       SpatialLabelParams, default_config)

REQUIRED = ("bag_id", "instance_id", "y")
OPTIONAL = ("a", "s", "loc_x", "loc_y")


def _num(v: float) -> str:
    return repr(float(v))


def _parse_id(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def write_dataset(dataset: BagDataset, path) -> None:
    """One row per instance; ``loc`` and ``s`` cells stay empty when absent."""
    p = dataset.p
    header = ["bag_id", "instance_id", "y", "a", "s", "loc_x", "loc_y"] + [f"x{j}" for j in range(p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(dataset.n_instances):
            b = dataset.bag[k]
            s = "" if dataset.s is None else str(int(dataset.s[k]))
            loc = ["", ""] if dataset.loc is None else [_num(v) for v in dataset.loc[k]]
            w.writerow([dataset.bag_ids[b], dataset.instance_ids[k], int(dataset.y[b]), int(dataset.a[k]), s,
                        *loc, *(_num(v) for v in dataset.x[k])])


def read_dataset(path) -> BagDataset:
    """Parse a dataset CSV; rows of one bag need not be adjacent but keep their order."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file", missing=list(REQUIRED) + ["x0"]) from None
        col = {name.strip(): i for i, name in enumerate(header)}
        xcols = sorted((int(n[1:]), i) for n, i in col.items() if n.startswith("x") and n[1:].isdigit())
        missing = [c for c in REQUIRED if c not in col]
        if not xcols:
            missing.append("x0")
        elif [j for j, _ in xcols] != list(range(len(xcols))):
            have = {j for j, _ in xcols}
            missing += [f"x{j}" for j in range(max(have) + 1) if j not in have]
        if missing:
            raise SchemaError(f"missing columns: {', '.join(missing)}", missing=missing)
        xidx = [i for _, i in xcols]

        order: dict = {}
        y_of: dict = {}
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(rec)}", line)

            def cell(name, rec=rec):
                return rec[col[name]].strip() if name in col else ""

            try:
                bag_id = _parse_id(cell("bag_id"))
                y = int(cell("y"))
                a_txt = cell("a")
                a = int(a_txt) if a_txt else UNOBSERVED
                s_txt = cell("s")
                s = int(s_txt) if s_txt else None
                lx, ly = cell("loc_x"), cell("loc_y")
                loc = (float(lx), float(ly)) if lx and ly else None
                x = [float(rec[i]) for i in xidx]
            except ValueError as exc:
                raise ParseError(str(exc), line) from None
            if (lx == "") != (ly == ""):
                raise ParseError("loc_x and loc_y must both be set or both be empty", line)
            if bag_id in y_of and y_of[bag_id] != y:
                raise ParseError(f"bag {bag_id!r} has conflicting labels", line)
            order.setdefault(bag_id, len(order))
            y_of[bag_id] = y
            rows.append((order[bag_id], _parse_id(cell("instance_id")), a, s, loc, x, line))

    if not rows:
        return BagDataset(np.zeros((0, len(xidx))), np.zeros(0, int), np.zeros(0, np.int8), np.zeros(0, np.int8))
    rows.sort(key=lambda r: r[0])
    has_s = [r[3] is not None for r in rows]
    has_loc = [r[4] is not None for r in rows]
    if any(has_s) and not all(has_s):
        raise ParseError("column s is partially filled", rows[has_s.index(False)][6])
    if any(has_loc) and not all(has_loc):
        raise ParseError("location columns are partially filled", rows[has_loc.index(False)][6])
    bag_ids = list(order)
    return BagDataset(
        x=np.array([r[5] for r in rows], dtype=float),
        bag=np.array([r[0] for r in rows]),
        y=np.array([y_of[b] for b in bag_ids]),
        a=np.array([r[2] for r in rows]),
        s=np.array([r[3] for r in rows]) if all(has_s) else None,
        loc=np.array([r[4] for r in rows]) if all(has_loc) else None,
        bag_ids=np.array(bag_ids, dtype=object if any(isinstance(b, str) for b in bag_ids) else np.int64),
        instance_ids=np.array([r[1] for r in rows], dtype=object if any(isinstance(r[1], str) for r in rows)
                              else np.int64),
    )


def params_to_dict(params: ModelParams) -> dict:
    return {"p": params.p, "pi": params.pi, "alpha": None if math.isnan(params.alpha) else params.alpha,
            "mu1": params.mu1.tolist(), "mu0": params.mu0.tolist(), "sigma": params.sigma.tolist()}


def params_from_dict(d: dict) -> ModelParams:
    try:
        alpha = d.get("alpha")
        return ModelParams(float(d["pi"]), d["mu1"], d["mu0"], d["sigma"],
                           float("nan") if alpha is None else float(alpha))
    except KeyError as exc:
        raise SchemaError(f"parameter file lacks {exc.args[0]!r}", missing=[exc.args[0]]) from None


def write_params(params: ModelParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), indent=2) + "\n", encoding="utf-8")


def read_params(path) -> ModelParams:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno) from None
    return params_from_dict(data.get("params", data))


def write_fit_result(result: FitResult, out_dir, manifest: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"estimator": result.estimator_kind, "iterations": result.iterations,
           "converged": result.converged, "ridge_events": result.ridge_events,
           "final_loglik": result.loglik_trace[-1] if result.loglik_trace else None,
           "params": params_to_dict(result.params)}
    if manifest is not None:
        doc["manifest"] = manifest
    (out / "fit.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    with open(out / "trace.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loglik"])
        for k, ll in enumerate(result.loglik_trace):
            w.writerow([k, _num(ll)])


def write_rows(path, rows: list[dict], columns: list[str], manifest: dict | None = None) -> None:
    """CSV rows; a manifest, if given, goes first as ``# key=value`` comment lines."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for k in sorted(manifest or {}):
            fh.write(f"# {k}={manifest[k]}\n")
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _num(v) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})


# -- configuration -----------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """``section.key=value`` lines; ``#`` starts a comment."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {line_no}: expected key=value, got {raw.strip()!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if not key:
            raise InvalidConfig(f"line {line_no}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    try:
        return parse_config_text(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None


def format_config(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def _get(cfg, key, cast, default):
    if key not in cfg or cfg[key] == "":
        return default
    try:
        return cast(cfg[key])
    except ValueError:
        raise InvalidConfig(f"{key}: cannot parse {cfg[key]!r}") from None


def float_list(text: str) -> list[float]:
    return [float("inf") if t.strip().lower() in ("inf", "infinity") else float(t)
            for t in text.split(",") if t.strip()]


def build_sim_config(cfg: dict) -> SimConfig:
    """Simulation settings from ``sim.*`` and ``regime.*`` keys."""
    p = _get(cfg, "sim.p", int, 5)
    base = default_config(
        p,
        n_bags=_get(cfg, "sim.n_bags", int, 100),
        bag_size=_get(cfg, "sim.bag_size", int, 200),
        separation=_get(cfg, "sim.separation", float, 3.0),
        rho=_get(cfg, "sim.rho", float, 0.5),
        alpha=_get(cfg, "sim.alpha", float, 0.36),
        pi=_get(cfg, "sim.pi", float, 0.06),
        seed=_get(cfg, "sim.seed", int, 0),
        sigma_scale=_get(cfg, "sim.sigma_scale", float, 1.0),
    )
    changes = {}
    for key in ("mu1", "mu0"):
        vals = _get(cfg, f"sim.{key}", float_list, None)
        if vals is not None:
            changes[key] = np.array(vals)
    sig = _get(cfg, "sim.sigma", float_list, None)
    if sig is not None:
        if len(sig) != p * p:
            raise InvalidConfig(f"sim.sigma needs {p * p} row-major entries, got {len(sig)}")
        changes["sigma"] = np.array(sig).reshape(p, p)
    regime = cfg.get("sim.regime", "Base") or "Base"
    changes["regime"] = regime
    if regime == "HeteroPi":
        changes["regime_params"] = HeteroPiParams(BetaWithMean(_get(cfg, "regime.concentration", float, 2.0)))
    elif regime == "SpatialLabels":
        changes["regime_params"] = SpatialLabelParams(_get(cfg, "regime.floor", float, 0.8),
                                                      _get(cfg, "regime.ceiling", float, 1.0))
    elif regime == "SpatialFeatures":
        changes["regime_params"] = SpatialFeatureParams(_get(cfg, "regime.radius_coeff", float, 0.03),
                                                        _get(cfg, "regime.range", float, 0.3))
    config = base.with_(**changes)
    config.check()
    return config


def build_em_options(cfg: dict) -> EmOptions:
    restarts = _get(cfg, "em.restarts", int, 0)
    init = RandomRestart(restarts, _get(cfg, "em.restart_seed", int, 0)) if restarts > 0 \
        else MomentInit(_get(cfg, "em.init_pi", float, 0.1))
    try:
        return EmOptions(max_iters=_get(cfg, "em.max_iters", int, 500),
                         rel_tol=_get(cfg, "em.rel_tol", float, 1e-8),
                         pi_clip=_get(cfg, "em.pi_clip", float, 1e-6), init=init)
    except ValueError as exc:
        raise InvalidConfig(str(exc)) from None
