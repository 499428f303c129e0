"""Command-line front end: synth, evaluate, optimize, sweep, benchmark.

Exit codes: 0 success, 2 config or validation error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import (
    SensitivityError,
    benchmark_sensitivity,
    bootstrap_ci,
    infer_sensitivity_range,
    worst_case,
)
from .config import RUN_KEYS, SYNTH_KEYS, describe_keys, run_config, synth_spec
from .dataio import (
    ConfigDoc,
    ConfigError,
    DataError,
    config_hash,
    dump_json,
    file_digest,
    load_config,
    load_dataset,
    load_json,
    read_rows,
    write_dataset_csv,
    write_table_csv,
)
from .estimators import REPORT_SCHEMA, score_rows
from .nuisance import SingularFitError, fit_nuisances
from .robust import LinearModel, ObjectiveData, OptimizationError, fit, sweep
from .synth import oracle_binary, oracle_w1, sample_gaussian, sample_world

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_COLUMNS = [
    "s", "status", "L_dr_s", "sigma", "nu", "worst_case", "best_case",
    "ci_low", "ci_high", "worst_case_dr_model", "test_loss", "error",
]


# ------------------------------------------------------------- helpers ----


def _load_doc(args) -> ConfigDoc:
    doc = load_config(args.config) if args.config else ConfigDoc("<defaults>")
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set: expected key=value, got {item!r}")
        key, value = (p.strip() for p in item.split("=", 1))
        doc.override(key, value, f"--set {key}")
    return doc


def _provenance(cfg_dict: dict, inputs: list, seed: int) -> dict:
    return {
        "config_hash": config_hash(cfg_dict),
        "inputs": {Path(p).name: file_digest(p) for p in inputs},
        "seed": seed,
        "version": __version__,
    }


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fit_nuis(cfg, ds, form, eta_fn=None):
    return fit_nuisances(
        ds, cfg.family, form=form, eta_fn=eta_fn, kind=cfg.nuisance_kind,
        holdout_frac=cfg.holdout_frac, clip=cfg.clip, seed=cfg.seed, **cfg.outcome_kwargs(),
    )


def _given_model(cfg, d):
    """Model from the config (weights or model file), or None."""
    fam = cfg.family
    if cfg.model_path:
        try:
            model = LinearModel.from_dict(load_json(cfg.model_path))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"model: cannot read {cfg.model_path}: {exc}") from exc
        if model.family != fam:
            raise ConfigError(f"model: file family {model.family.kind} does not match config family {fam.kind}")
        if model.d != d:
            raise DataError(f"model expects {model.d} features, data has {d}")
        return model, "file"
    if cfg.weights is None:
        return None
    ev = fam.event_shape
    K = ev[0] if ev else 1
    if len(cfg.weights) != d * K:
        raise DataError(f"weights has {len(cfg.weights)} values, data needs d*K = {d * K}")
    W = np.asarray(cfg.weights).reshape((d,) + ev)
    bias = np.zeros(ev) if cfg.bias is None else np.asarray(cfg.bias)
    if bias.size != K:
        raise ConfigError(f"bias: expected {K} value(s), got {bias.size}")
    return LinearModel(W, bias.reshape(ev), fam), "config"


def _glm_data(cfg, ds):
    nuis = _fit_nuis(cfg, ds, "glm")
    return nuis, ObjectiveData.from_nuisances(ds, nuis)


def _train(cfg, data, objective=None, s=None):
    opt = cfg.opt
    if objective is not None:
        opt = replace(opt, objective=objective, s=s if s is not None else opt.s)
    if opt.objective == "worst_case" and opt.s == 0:
        # identical program to DR; normalise so outputs match byte for byte
        opt = replace(opt, objective="dr")
    return fit(data, opt), opt


def _resolve_model(cfg, ds):
    given = _given_model(cfg, ds.d)
    if given is not None:
        return given
    _, data = _glm_data(cfg, ds)
    (model, _), _ = _train(cfg, data, "dr", 0.0)
    return model, "dr_fit"


def _assess(cfg, ds, model):
    """Rows, report and bound pieces for one model under the configured form."""
    nuis = _fit_nuis(cfg, ds, cfg.form, model.eta)
    rows = score_rows(ds, nuis, model.eta)
    rep = rows.report()
    ci = bootstrap_ci(rows, cfg.budget, cfg.bootstrap_B, cfg.seed, cfg.ci_level, cfg.n_jobs)
    wc = worst_case(rep.L_dr_s, cfg.budget, rep.sigma, rep.nu, ci.worst_case)
    boot = {
        "B": ci.B, "level": ci.level, "L_dr_s": list(ci.L_dr_s),
        "worst_case": list(ci.worst_case), "best_case": list(ci.best_case),
    }
    test = None
    if rep.test_loss is not None:
        rng = infer_sensitivity_range(rows, rep.test_loss, cfg.bootstrap_B, cfg.seed, cfg.ci_level, cfg.n_jobs)
        test = {"test_loss": rep.test_loss, "s_star": rng.s_point, "s_range": [rng.s_ci_low, rng.s_ci_high]}
    return nuis, rows, {"eval": rep.to_dict(), "worst_case": wc.to_dict(), "bootstrap": boot, "test": test}


def _model_doc(model, source):
    return {"source": source, "weights": model.weights.tolist(), "bias": model.bias.tolist()}


# ------------------------------------------------------------ commands ----


def cmd_synth(args) -> int:
    doc = _load_doc(args)
    spec = synth_spec(doc, args.seed)
    out = _out_dir(args)
    if spec.world == "gaussian":
        draw = sample_gaussian(spec.gaussian)
        r = spec.gaussian.resolved()
        world_doc = {
            "coefficients": r.beta[: spec.gaussian.k].tolist(),
            "omitted_columns": r.omit.tolist(),
            "observed_columns": r.observed.tolist(),
            "shift": r.shift.tolist(),
        }
    else:
        world = oracle_w1() if spec.world == "w1" else oracle_binary()
        draw = sample_world(world, spec.n, spec.m, spec.seed)
        world_doc = world.to_dict()
    ds = draw.dataset
    yQ = ds.target_labels if spec.target_labels else None
    files = {"source": out / "source.csv", "target": out / "target.csv"}
    write_dataset_csv(files["source"], ds.source_features, ds.source_labels, "P", ds.feature_names)
    write_dataset_csv(files["target"], ds.target_features, yQ, "Q", ds.feature_names)
    if spec.emit_long:
        files["source_long"] = out / "source_long.csv"
        files["target_long"] = out / "target_long.csv"
        write_dataset_csv(files["source_long"], draw.source_long, ds.source_labels, "P", draw.long_names)
        write_dataset_csv(files["target_long"], draw.target_long, yQ, "Q", draw.long_names)
    cfg_dict = spec.to_dict()
    dump_json(
        {
            "schema_version": REPORT_SCHEMA,
            "command": "synth",
            "config": cfg_dict,
            "world": world_doc,
            "outputs": {k: file_digest(p) for k, p in files.items()},
            "provenance": _provenance(cfg_dict, [args.config] if args.config else [], spec.seed),
        },
        out / "synth.json",
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = run_config(_load_doc(args), args.seed)
    ds = load_dataset(args.data, cfg.family)
    out = _out_dir(args)
    model, source = _resolve_model(cfg, ds)
    nuis, _, parts = _assess(cfg, ds, model)
    report = {
        "schema_version": REPORT_SCHEMA,
        "command": "evaluate",
        "family": cfg.family.to_dict(),
        "form": cfg.form,
        "model": _model_doc(model, source),
        "nuisances": nuis.to_dict(),
        **parts,
        "provenance": _provenance(cfg.to_dict(), _inputs(args, cfg), cfg.seed),
    }
    dump_json(report, out / "report.json")
    if args.plot:
        from .plotting import plot_bounds

        plot_bounds(report, out / "report.png")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = run_config(_load_doc(args), args.seed)
    ds = load_dataset(args.data, cfg.family)
    out = _out_dir(args)
    _, data = _glm_data(cfg, ds)
    (model, trace), opt = _train(cfg, data)
    dump_json(model.to_dict(opt.digest()), out / "model.json")
    nuis, _, parts = _assess(cfg, ds, model)
    report = {
        "schema_version": REPORT_SCHEMA,
        "command": "optimize",
        "family": cfg.family.to_dict(),
        "form": cfg.form,
        "objective": {"name": opt.objective, "s": opt.s, "digest": opt.digest()},
        "trace": trace.to_dict(),
        "model": _model_doc(model, "optimize"),
        "nuisances": nuis.to_dict(),
        **parts,
        "provenance": _provenance(cfg.to_dict(), _inputs(args, cfg), cfg.seed),
    }
    dump_json(report, out / "report.json")
    if args.plot:
        from .plotting import plot_trace

        plot_trace(trace.objective, out / "trace.png")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = run_config(_load_doc(args), args.seed)
    ds = load_dataset(args.data, cfg.family)
    out = _out_dir(args)
    nuis, data = _glm_data(cfg, ds)
    test_fn = None
    if ds.target_labels is not None:
        from .robust import target_test_loss

        def test_fn(model):
            return target_test_loss(model, ds)

    opt = replace(cfg.opt, objective="dr", s=0.0)
    table = sweep(data, cfg.s_grid, opt, test_fn)
    rows, models = [], []
    for r in table:
        row = {c: getattr(r, c, None) for c in SWEEP_COLUMNS}
        if r.status == "ok":
            try:
                rws = score_rows(ds, nuis, r.model.eta)
                ci = bootstrap_ci(rws, r.s, cfg.bootstrap_B, cfg.seed, cfg.ci_level, cfg.n_jobs)
                row["ci_low"], row["ci_high"] = ci.worst_case
            except (ValueError, FloatingPointError) as exc:
                row["status"], row["error"] = "ci_failed", str(exc)
            models.append({"s": r.s, "weights": r.model.weights.tolist(), "bias": r.model.bias.tolist()})
        else:
            models.append({"s": r.s, "weights": None, "bias": None})
        rows.append(row)
    write_table_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    bench = load_json(cfg.benchmark_path) if cfg.benchmark_path else None
    bench_s = None if bench is None else bench.get("s")
    dump_json(
        {
            "schema_version": REPORT_SCHEMA,
            "command": "sweep",
            "benchmark_s": bench_s,
            "benchmark": bench,
            "n_rows": len(rows),
            "n_failed": sum(r["status"] != "ok" for r in rows),
            "models": models,
            "provenance": _provenance(cfg.to_dict(), _inputs(args, cfg), cfg.seed),
        },
        out / "sweep.json",
    )
    if args.plot:
        from .plotting import plot_sweep

        plot_sweep(rows, out / "sweep.png", bench_s)
    return EXIT_OK


def _long_short(args, cfg):
    """Load aligned long/short datasets and locate the short columns."""
    names_L, XL, yL, domL = read_rows(args.data_long)
    names_S, XS, yS, domS = read_rows(args.data_short)
    missing = [n for n in names_S if n not in names_L]
    if missing:
        raise DataError(f"short features not contained in long features: {', '.join(missing)}")
    if len(domL) != len(domS) or np.any(domL != domS):
        raise DataError("long and short files must list the same rows in the same order")
    cols = [names_L.index(n) for n in names_S]
    if not np.array_equal(XL[:, cols], XS):
        raise DataError("short feature values differ from the matching long columns")
    if not np.array_equal(np.isnan(yL), np.isnan(yS)) or not np.array_equal(yL[~np.isnan(yL)], yS[~np.isnan(yS)]):
        raise DataError("long and short files carry different labels")
    return load_dataset(args.data_long, cfg.family), load_dataset(args.data_short, cfg.family), cols


def cmd_benchmark(args) -> int:
    cfg = run_config(_load_doc(args), args.seed)
    long_ds, short_ds, cols = _long_short(args, cfg)
    out = _out_dir(args)
    model, source = _resolve_model(cfg, short_ds)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = benchmark_sensitivity(
            long_ds, cols, family=cfg.family, form=cfg.form, eta_fn=model.eta, kind=cfg.nuisance_kind,
            holdout_frac=cfg.holdout_frac, clip=cfg.clip, seed=cfg.seed,
        )
    doc = est.to_dict()
    doc.update(
        command="benchmark",
        form=cfg.form,
        model=_model_doc(model, source),
        short_columns=cols,
        warnings=sorted({str(w.message) for w in caught}),
        provenance=_provenance(cfg.to_dict(), list(args.data_long) + list(args.data_short) + _cfg_inputs(cfg), cfg.seed),
    )
    dump_json(doc, out / "sensitivity.json")
    return EXIT_OK


def _cfg_inputs(cfg):
    return [p for p in (cfg.model_path, cfg.benchmark_path) if p]


def _inputs(args, cfg):
    return list(args.data) + _cfg_inputs(cfg)


# --------------------------------------------------------------- parser ----


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ovbshift",
        description="Sensitivity-bounded evaluation and training under covariate shift.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="exit codes: 0 ok, 2 config/validation error, 3 data error, 4 numerical failure",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, keys=RUN_KEYS):
        sp.formatter_class = argparse.RawDescriptionHelpFormatter
        sp.epilog = "config keys (flat 'key = value' file):\n" + describe_keys(keys)
        sp.add_argument("--config", help="flat key = value config file")
        if data:
            sp.add_argument("--data", nargs="+", required=True, metavar="CSV",
                            help="CSV file(s) with feature_* columns, optional label, domain in {P,Q}")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        sp.add_argument("--plot", action="store_true", help="also render PNG figures next to the data outputs")

    sp = sub.add_parser("synth", help="write source/target CSVs from a synthetic world")
    common(sp, data=False, keys=SYNTH_KEYS)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("evaluate", help="DR loss, bound, intervals and (with target labels) inferred s")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("optimize", help="train a linear model (unadjusted, dr or worst_case)")
    common(sp)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("sweep", help="train one worst-case model per s in s_grid")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("benchmark", help="benchmark (C_Y, C_D, rho) with proxy long features")
    common(sp, data=False)
    sp.add_argument("--data-long", nargs="+", required=True, metavar="CSV", help="CSV(s) with the long feature set")
    sp.add_argument("--data-short", nargs="+", required=True, metavar="CSV", help="CSV(s) with the short feature set")
    sp.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OptimizationError, SensitivityError, SingularFitError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
