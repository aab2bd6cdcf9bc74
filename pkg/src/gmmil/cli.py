"""Command-line entry point: ``gmmil {simulate,fit,predict,study,asymptotics}``.

Settings come from an optional flat config file (``--config``) and can be
overridden with dotted flags of the same name, e.g. ``--sim.n_bags 50``.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import THREADS_ENV, default_threads
from .errors import ConfigError, DataError, FitError, InvalidConfig
from .io import (build_em_options, build_sim_config, float_list, format_config, load_config, read_dataset,
                 read_params, write_dataset, write_fit_result, write_params, write_rows)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4
FAILURE_THRESHOLD = 0.10

log = logging.getLogger("gmmil")


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    k = 0
    while k < len(extra):
        tok = extra[k]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            raise InvalidConfig(f"unrecognized argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            k += 1
        else:
            if k + 1 >= len(extra):
                raise InvalidConfig(f"{tok} needs a value")
            key, value = tok[2:], extra[k + 1]
            k += 2
        out[key] = value
    return out


def _settings(args, extra) -> dict[str, str]:
    cfg = load_config(args.config) if args.config else {}
    cfg.update(_split_overrides(extra))
    if getattr(args, "seed", None) is not None:
        cfg["sim.seed"] = str(args.seed)
        cfg["study.seed"] = str(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.output_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, cfg: dict, command: str) -> dict:
    manifest = {"gmmil.version": __version__, "command": command, **cfg}
    (out / "manifest.txt").write_text(format_config(manifest), encoding="utf-8")
    return manifest


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    from .simulate import simulate

    if args.paper_scale:
        cfg.setdefault("sim.p", "50")
        cfg.setdefault("sim.bag_size", "1000")
    sim = build_sim_config(cfg)
    data = simulate(sim)
    out = _out_dir(args)
    write_dataset(data, out / "dataset.csv")
    write_params(sim.truth(), out / "truth.json")
    _write_manifest(out, cfg, "simulate")
    print(f"wrote {data.n_bags} bags / {data.n_instances} instances to {out / 'dataset.csv'}")
    return EXIT_OK


def cmd_fit(args, cfg) -> int:
    from .bmle import fit_bmle
    from .imle import fit_imle
    from .model import validate
    from .smle import fit_smle
    from .subsampling import calibrate_alpha_n, draw_subsample, pilot_beta

    data = read_dataset(args.dataset)
    problems = validate(data)
    if problems:
        for v in problems[:10]:
            log.error("%s", v)
        raise DataError(f"dataset has {len(problems)} label violations")
    em = build_em_options(cfg)
    out = _out_dir(args)
    seed = int(cfg.get("sim.seed", 0))
    if args.estimator == "imle":
        result = fit_imle(data)
    elif args.estimator == "bmle":
        result = fit_bmle(data.without_instance_labels(), em)
    else:
        if args.fraction is not None:
            beta = pilot_beta(data, args.pilot_fraction, em, seed)
            plan = draw_subsample(data, calibrate_alpha_n(beta, data, args.fraction), beta, seed + 1,
                                  args.pilot_fraction)
            data = plan.apply(data)
            write_rows(out / "subsample.csv",
                       [{"instance": k, "gamma": float(plan.gamma[k]), "s": int(plan.indicators[k])}
                        for k in range(data.n_instances)], ["instance", "gamma", "s"])
            log.info("alpha_n=%.6g realized fraction=%.4f", plan.alpha_n, plan.realized_fraction)
        result = fit_smle(data, em)
    manifest = _write_manifest(out, {**cfg, "fit.estimator": args.estimator,
                                     "fit.dataset": str(args.dataset)}, "fit")
    write_fit_result(result, out, manifest)
    if args.precision:
        _write_precision(result.params, out, args, cfg)
    print(f"{result.estimator_kind}: pi={result.params.pi:.6g} iterations={result.iterations} "
          f"converged={result.converged}")
    return EXIT_OK


def _write_precision(params, out, args, cfg):
    from .asymptotics import block_labels, precision_report, population_alpha_n

    mc = int(cfg.get("asym.mc_samples", 100_000))
    seed = int(cfg.get("sim.seed", 0))
    fraction = args.fraction if args.fraction is not None else 0.1
    beta = params.beta
    alpha_n = population_alpha_n(params, fraction, beta, mc, seed)
    rep = precision_report(params, alpha_n, beta, mc, seed)
    labels = block_labels(params.p)
    rows = []
    for name in ("omega_ins", "omega_bag", "omega_sub", "delta_bag", "delta_sub"):
        mat = getattr(rep, name)
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                rows.append({"matrix": name, "row": i, "col": j, "row_block": labels[i],
                             "col_block": labels[j], "value": float(mat[i, j])})
    write_rows(out / "precision.csv", rows, ["matrix", "row", "col", "row_block", "col_block", "value"],
               {"asym.mc_samples": mc, "asym.mc_standard_error": rep.mc_standard_error})


def cmd_predict(args, cfg) -> int:
    from .metrics import BinaryMetrics, bag_probabilities, binary_metrics, instance_level_report, posteriors_for
    from .model import UNOBSERVED

    params = read_params(args.params)
    data = read_dataset(args.dataset)
    post = posteriors_for(params, data)
    bag_prob = bag_probabilities(params, data, post)
    out = _out_dir(args)
    write_rows(out / "posteriors.csv",
               [{"bag_id": data.bag_ids[data.bag[k]], "instance_id": data.instance_ids[k],
                 "posterior": float(post[k])} for k in range(data.n_instances)],
               ["bag_id", "instance_id", "posterior"])
    write_rows(out / "bags.csv",
               [{"bag_id": data.bag_ids[i], "y": int(data.y[i]), "bag_prob": float(bag_prob[i]),
                 "predicted": int(bag_prob[i] >= args.threshold)} for i in range(data.n_bags)],
               ["bag_id", "y", "bag_prob", "predicted"])
    rows = []
    bag_m: BinaryMetrics = binary_metrics(bag_prob, data.y, args.threshold)
    for k, v in bag_m.as_dict().items():
        rows.append({"level": "bag", "metric": k, "value": v, "flags": ";".join(sorted(bag_m.flags))})
    has_labels = np.any(data.y == 1) and not np.any(data.a[data.instance_y == 1] == UNOBSERVED)
    if has_labels:
        rep = instance_level_report(params, data, args.threshold, pooled=args.pooled, posteriors=post)
        for k, v in rep.metrics.items():
            rows.append({"level": "instance", "metric": k, "value": v, "flags": f"skipped={rep.skipped}"})
    manifest = _write_manifest(out, {**cfg, "predict.params": str(args.params),
                                     "predict.dataset": str(args.dataset),
                                     "predict.threshold": repr(args.threshold)}, "predict")
    write_rows(out / "metrics.csv", rows, ["level", "metric", "value", "flags"], manifest)
    for r in rows:
        print(f"{r['level']:>8} {r['metric']:<9} {r['value']:.4f}")
    return EXIT_OK


def cmd_study(args, cfg) -> int:
    from .studies import default_study, run_study

    overrides = {"threads": args.threads, "output_dir": str(_out_dir(args))}
    if "study.replications" in cfg:
        overrides["replications"] = int(cfg["study.replications"])
    if "study.grid" in cfg:
        overrides["grid"] = tuple(float_list(cfg["study.grid"]))
    if "study.seed" in cfg:
        overrides["seed"] = int(cfg["study.seed"])
    if args.fraction is not None:
        overrides["fraction"] = args.fraction
    if args.pilot_fraction is not None:
        overrides["pilot_fraction"] = args.pilot_fraction
    if any(k.startswith("em.") for k in cfg):
        overrides["em"] = build_em_options(cfg)
    study = default_study(args.name, args.paper_scale, **overrides)
    if any(k.startswith(("sim.", "regime.")) and k != "sim.seed" for k in cfg):
        base_cfg = dict(cfg)
        base_cfg.setdefault("sim.regime", study.base.regime)
        from dataclasses import replace
        study = replace(study, base=build_sim_config(base_cfg))
    report = run_study(study)
    print(f"{study.study}: {report.n_fits} fits, {report.n_failures} failed; output in {study.output_dir}")
    if report.failure_rate > FAILURE_THRESHOLD:
        log.error("failure rate %.1f%% exceeds %.0f%%", 100 * report.failure_rate, 100 * FAILURE_THRESHOLD)
        return EXIT_FIT
    return EXIT_OK


def cmd_asymptotics(args, cfg) -> int:
    from .asymptotics import sampling_distribution_check

    sim = build_sim_config(cfg)
    out = _out_dir(args)
    replications = int(cfg.get("asym.replications", 500))
    mc = int(cfg.get("asym.mc_samples", 200_000))
    fraction = args.fraction if args.fraction is not None else 0.1
    summary = sampling_distribution_check(args.estimator.upper(), sim, replications, int(cfg.get("sim.seed", 0)),
                                          options=build_em_options(cfg), fraction=fraction,
                                          mc_samples=mc, threads=args.threads)
    manifest = _write_manifest(out, {**cfg, "asym.estimator": args.estimator}, "asymptotics")
    write_rows(out / "studentized.csv", list(summary.rows()),
               ["coordinate", "block", "mean", "variance", "normality_pvalue"], manifest)
    (out / "studentized.json").write_text(json.dumps({
        "estimator": summary.estimator_kind, "replications": summary.replications,
        "failures": summary.failures, "max_cross_block_corr": summary.max_cross_block_corr,
        "correlation": summary.correlation.tolist()}, indent=2) + "\n", encoding="utf-8")
    for r in summary.rows():
        print(f"{r['coordinate']:>3} {r['block']:<6} mean={r['mean']:+.3f} var={r['variance']:.3f}")
    print(f"max |cross-block corr| = {summary.max_cross_block_corr:.3f}; failures = {summary.failures}")
    if replications and summary.failures / replications > FAILURE_THRESHOLD:
        return EXIT_FIT
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("fraction must lie in (0, 1)")
    return v


def _pilot(text: str) -> float:
    v = float(text)
    if not (0.0 <= v <= 1.0 or math.isinf(v)):
        raise argparse.ArgumentTypeError("pilot fraction must lie in [0, 1] or be inf")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker processes (default: ${THREADS_ENV} or 1)")
    common.add_argument("--output-dir", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gmmil", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gmmil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw a dataset from the mixture model")
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit one estimator to a dataset CSV")
    p.add_argument("dataset")
    p.add_argument("--estimator", choices=("imle", "bmle", "smle"), default="bmle")
    p.add_argument("--fraction", type=_fraction, default=None,
                   help="smle: draw a subsample with this expected fraction before fitting")
    p.add_argument("--pilot-fraction", type=_pilot, default=0.5)
    p.add_argument("--precision", action="store_true", help="also write asymptotic precision matrices")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="posteriors, bag probabilities and metrics")
    p.add_argument("params", help="parameter JSON (fit.json or truth.json)")
    p.add_argument("dataset")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--pooled", action="store_true", help="pool instances instead of averaging per bag")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("study", parents=[common], help="run a Monte-Carlo study")
    p.add_argument("name")
    p.add_argument("--fraction", type=_fraction, default=None)
    p.add_argument("--pilot-fraction", type=_pilot, default=None)
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("asymptotics", parents=[common], help="studentized sampling-distribution check")
    p.add_argument("--estimator", choices=("imle", "bmle", "smle"), default="imle")
    p.add_argument("--fraction", type=_fraction, default=None)
    p.set_defaults(func=cmd_asymptotics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    try:
        cfg = _settings(args, extra)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
