"""Command-line entry point: ``apcsmooth {fit,forecast,score,simulate,compare,plot-data}``.

Exit codes: 0 success, 2 invalid input or flags, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .dataset import load_csv, log_rates
from .design import BasisSpec, build_design
from .engines import EngineConfig, default_engines
from .errors import ApcError, GridMismatch, MissingExposure, MissingInput, NumericalError, ValidationError
from .results import FitResult
from .scoring import score_fit
from .simulation import SimConfig, TruthSpec, generate_replicate, run_study

log = logging.getLogger("apcsmooth")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

DEFAULTS = {
    "fit": {
        "engine": "spline", "basis": None, "knots": "10,10,12", "pc_u": None, "pc_alpha": None,
        "train_through": None, "half_count": 0.5, "dump_design": False, "out": "out", "seed": 0,
    },
    "forecast": {
        "engine": "spline", "basis": None, "knots": "10,10,12", "pc_u": None, "pc_alpha": None,
        "train_through": None, "horizon": 1, "out": "out", "seed": 0,
    },
    "score": {"split_year": None, "alpha": 0.05, "scale": "log", "half_count": 0.5, "out": "out"},
    "simulate": {
        "replicates": 20, "seed": 42, "out": "results", "jobs": 1, "knots": "10,10,12",
        "pc_alpha": 0.01, "engines": None, "truth": None, "save_data": False,
    },
    "compare": {"out": "out"},
    "plot_data": {"half_count": 0.5, "out": "out", "fit": []},
}


# ----- argument handling ------------------------------------------------------
def _knots(text) -> tuple:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).split(",")
    try:
        knots = tuple(int(p) for p in parts)
    except ValueError:
        raise ValidationError(f"--knots expects three integers like 10,10,12, got {text!r}") from None
    if len(knots) != 3:
        raise ValidationError(f"--knots expects three integers, got {len(knots)}")
    return knots


def _engine_flags(p):
    p.add_argument("--engine", choices=["spline", "rw2"])
    p.add_argument("--basis", choices=["crs", "bs", "tprs"])
    p.add_argument("--knots", help="knots for age, period, cohort, e.g. 10,10,12")
    p.add_argument("--pc-u", type=float, help="PC prior: P(sigma > U) = alpha")
    p.add_argument("--pc-alpha", type=float)
    p.add_argument("--train-through", type=int, help="last period used for fitting")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apcsmooth", description="Smooth age-period-cohort models for count data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = dict(argument_default=argparse.SUPPRESS)

    p = sub.add_parser("fit", help="fit one engine and write estimates with 95%% bounds", **common)
    p.add_argument("data", help="CSV with age_group, period, deaths, population")
    _engine_flags(p)
    p.add_argument("--half-count", type=float, help="pseudo-count for observed log rates")
    p.add_argument("--dump-design", action="store_true", help="also write the design matrix")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config", help="JSON file of option defaults")

    p = sub.add_parser("forecast", help="fit and write only the forecast periods", **common)
    p.add_argument("data")
    _engine_flags(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("score", help="score a fit against true or observed log rates", **common)
    p.add_argument("--fit", required=True)
    p.add_argument("--truth", required=True, help="CSV with age, period, eta_true (or a count dataset)")
    p.add_argument("--split-year", type=int, help="first period of the prediction window")
    p.add_argument("--alpha", type=float)
    p.add_argument("--scale", choices=["log", "rate"])
    p.add_argument("--half-count", type=float)
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("simulate", help="run the replicated simulation study", **common)
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--knots")
    p.add_argument("--pc-alpha", type=float)
    p.add_argument("--engines", help="comma-separated subset, e.g. CRS,RW2-U1")
    p.add_argument("--truth", help="JSON truth specification")
    p.add_argument("--save-data", action="store_true", help="write each replicate's data and truth")
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("compare", help="pair two fits cell by cell", **common)
    p.add_argument("fit_a")
    p.add_argument("fit_b")
    p.add_argument("--out")
    p.add_argument("--config")

    p = sub.add_parser("plot-data", help="export tidy tables for heatmaps and line plots", **common)
    p.add_argument("data")
    p.add_argument("--fit", action="append", help="fit CSV; repeat for several engines")
    p.add_argument("--half-count", type=float)
    p.add_argument("--out")
    p.add_argument("--config")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, then the config file, then explicit flags."""
    key = args.command.replace("-", "_")
    opts = dict(DEFAULTS[key])
    explicit = {k: v for k, v in vars(args).items() if k not in ("command", "verbose", "config")}
    config_path = getattr(args, "config", None)
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise MissingInput(f"--config file {path} does not exist")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"--config is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ValidationError("--config must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts.update(explicit)
    opts["_explicit"] = sorted(explicit)
    return opts


def engine_from(opts: dict) -> EngineConfig:
    kind = opts["engine"]
    if kind == "rw2" and opts.get("basis") is not None:
        raise ValidationError("--basis applies to --engine spline only")
    if kind == "spline" and (opts.get("pc_u") is not None or opts.get("pc_alpha") is not None):
        raise ValidationError("--pc-u/--pc-alpha apply to --engine rw2 only")
    if kind == "rw2" and "knots" in opts["_explicit"]:
        raise ValidationError("--knots applies to --engine spline only")
    return EngineConfig(
        kind,
        (opts.get("basis") or "tprs") if kind == "spline" else None,
        _knots(opts["knots"]),
        1.0 if opts.get("pc_u") is None else float(opts["pc_u"]),
        0.01 if opts.get("pc_alpha") is None else float(opts["pc_alpha"]),
    )


# ----- manifest ---------------------------------------------------------------
def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(opts: dict, inputs=()) -> str:
    # the output directory does not affect results
    payload = {k: v for k, v in opts.items() if not k.startswith("_") and k != "out"}
    payload["inputs"] = [_file_digest(p) for p in inputs]
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_manifest(out: Path, argv, opts, inputs, started, **extra) -> Path:
    manifest = {
        "command_line": ["apcsmooth", *argv],
        "config": {k: v for k, v in opts.items() if not k.startswith("_")},
        "config_hash": config_hash(opts, inputs),
        "seed": opts.get("seed"),
        "versions": {
            "apcsmooth": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "wall_time_s": time.perf_counter() - started,
        **extra,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return path


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _outdir(opts) -> Path:
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(df: pd.DataFrame, path: Path):
    df.to_csv(path, index=False, float_format="%.17g", encoding="utf-8")


# ----- subcommands ------------------------------------------------------------
def cmd_fit(opts, argv, started) -> int:
    engine = engine_from(opts)
    data = load_csv(opts["data"])
    tt = opts.get("train_through")
    if tt is not None and not data.periods[0] <= int(tt) <= data.periods[-1]:
        raise ValidationError(f"--train-through {tt} is outside the data periods {data.periods[0]}..{data.periods[-1]}")
    out = _outdir(opts)
    result = engine.fit(data, tt)
    result.to_csv(out / "fit.csv")
    if opts.get("dump_design"):
        train = data if tt is None else data.select_periods(last=int(tt))
        if engine.kind == "spline":
            design = build_design(train, "spline", BasisSpec(engine.basis, engine.knots))
        else:
            design = build_design(train, "gmrf")
        _write_csv(design.to_frame(), out / "design.csv")
    if engine.kind == "rw2":
        (out / "hyper.json").write_text(json.dumps(result.hyper, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, argv, opts, [opts["data"]], started, engine=engine.as_dict(),
                   hyperparameters=result.hyper, diagnostics=result.diagnostics)
    print(f"wrote {len(result)} cells to {out / 'fit.csv'}")
    return EXIT_OK


def cmd_forecast(opts, argv, started) -> int:
    engine = engine_from(opts)
    data = load_csv(opts["data"])
    horizon = int(opts["horizon"])
    if horizon < 1:
        raise ValidationError("--horizon must be at least 1")
    tt = opts.get("train_through")
    tt = int(tt) if tt is not None else int(data.periods[-1]) - horizon * data.period_step
    last = tt + horizon * data.period_step
    if last > data.periods[-1]:
        raise MissingExposure(
            f"forecasting to {last} needs exposures for those periods in the input file (data ends {data.periods[-1]})"
        )
    out = _outdir(opts)
    result = engine.fit(data.select_periods(last=last), tt)
    result = result.subset(result.mask("prediction"))
    result.to_csv(out / "forecast.csv")
    write_manifest(out, argv, opts, [opts["data"]], started, engine=engine.as_dict(),
                   hyperparameters=result.hyper, diagnostics=result.diagnostics)
    print(f"wrote {len(result)} forecast cells to {out / 'forecast.csv'}")
    return EXIT_OK


def _truth_values(path, fit: FitResult, half_count: float) -> tuple:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"no such truth file: {path}")
    df = pd.read_csv(path, dtype={"age": str, "age_group": str}, float_precision="round_trip")
    if "eta_true" in df.columns:
        lookup = dict(zip(zip(df["age"].astype(str), df["period"].astype(int)), df["eta_true"]))
        source = "eta_true column"
    else:
        data = load_csv(path)
        lr = log_rates(data, half_count).values
        lookup = {(lab, int(per)): lr[i, j] for i, lab in enumerate(data.labels) for j, per in enumerate(data.periods)}
        source = f"observed log rate with {half_count:g} added to each count"
    try:
        return np.array([lookup[k] for k in fit.key()]), source
    except KeyError as exc:
        raise GridMismatch(f"truth has no value for cell {exc.args[0]}") from None


def cmd_score(opts, argv, started) -> int:
    fit = FitResult.from_csv(opts["fit"])
    truth, source = _truth_values(opts["truth"], fit, float(opts["half_count"]))
    split = opts.get("split_year")
    reports = score_fit(fit, truth, None if split is None else int(split), float(opts["alpha"]), opts["scale"])
    out = _outdir(opts)
    payload = {
        "scores": {w: r.as_dict() for w, r in reports.items()},
        "truth_source": source,
        "interval_score_convention": "mean over cells; multiply by n_cells for the sum",
        "scale": opts["scale"],
    }
    (out / "scores.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_manifest(out, argv, opts, [opts["fit"], opts["truth"]], started)
    print(f"{'window':<11} {'MAE':>9} {'MSE':>9} {'IS':>9} {'width':>9} {'cover':>7}   (x10^-2)")
    for w, r in reports.items():
        s = r.scaled()
        print(f"{w:<11} {s['mae']:9.2f} {s['mse']:9.2f} {s['interval_score']:9.2f} {s['mean_width']:9.2f} {s['coverage']:6.1f}%")
    return EXIT_OK


def cmd_simulate(opts, argv, started) -> int:
    knots = _knots(opts["knots"])
    engines = default_engines(knots, float(opts["pc_alpha"]))
    if opts.get("engines"):
        wanted = [e.strip().upper() for e in str(opts["engines"]).split(",") if e.strip()]
        known = {e.name.upper(): e for e in engines}
        unknown = [w for w in wanted if w not in known]
        if unknown:
            raise ValidationError(f"--engines: unknown {unknown}; choose from {sorted(known)}")
        engines = [known[w] for w in wanted]
    if opts.get("truth"):
        tpath = Path(opts["truth"])
        if not tpath.exists():
            raise MissingInput(f"--truth file {tpath} does not exist")
        spec = TruthSpec.from_dict(json.loads(tpath.read_text(encoding="utf-8")))
    else:
        spec = TruthSpec()
    config = SimConfig(replicates=int(opts["replicates"]), seed=int(opts["seed"]))
    jobs = int(opts["jobs"])
    if jobs < 1:
        raise ValidationError("--jobs must be at least 1")
    out = _outdir(opts)
    study = run_study(spec, config, engines, jobs)
    _write_csv(study.scores, out / "scores.csv")
    summary = study.summary()
    _write_csv(summary, out / "summary.csv")
    if len(study.failures):
        _write_csv(study.failures, out / "failures.csv")
    (out / "truth.json").write_text(json.dumps(spec.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if opts.get("save_data"):
        ddir = out / "replicates"
        ddir.mkdir(exist_ok=True)
        for r in range(config.replicates):
            data, eta = generate_replicate(spec, config, r)
            data.to_frame().to_csv(ddir / f"data_{r:03d}.csv", index=False, float_format="%.17g")
            tdf = pd.DataFrame({
                "age": np.repeat(data.labels, data.n_periods),
                "period": np.tile(data.periods, data.n_ages),
                "eta_true": eta.ravel(),
            })
            _write_csv(tdf, ddir / f"truth_{r:03d}.csv")
    write_manifest(out, argv, opts, [], started, sim_config=config.as_dict(),
                   engines=[e.as_dict() for e in engines], failure_rate=study.failure_rate)
    print(f"{'engine':<8} {'window':<11} {'MAE':>8} {'IS':>9} {'width':>8} {'cover':>7}   (x10^-2)")
    for _, row in summary.iterrows():
        print(f"{row['engine']:<8} {row['window']:<11} {100 * row['mae']:8.2f} {100 * row['interval_score']:9.2f} "
              f"{100 * row['mean_width']:8.2f} {100 * row['coverage']:6.1f}%")
    return EXIT_OK


def compare_fits(a: FitResult, b: FitResult) -> tuple:
    if a.key() != b.key():
        raise GridMismatch("the two fits do not cover the same cells in the same order")
    if not np.array_equal(a.window, b.window):
        raise GridMismatch("the two fits disagree on the estimation/prediction split")
    df = pd.DataFrame({
        "age": a.age, "period": a.period, "window": a.window,
        "eta_a": a.eta_hat, "eta_b": b.eta_hat, "diff": b.eta_hat - a.eta_hat,
    })
    if len(df) > 1 and np.std(a.eta_hat) > 0 and np.std(b.eta_hat) > 0:
        corr = float(np.corrcoef(a.eta_hat, b.eta_hat)[0, 1])
    else:
        corr = 1.0 if np.array_equal(a.eta_hat, b.eta_hat) else float("nan")
    return df, {"correlation": corr, "max_abs_diff": float(np.max(np.abs(df["diff"]))), "n_cells": len(df)}


def cmd_compare(opts, argv, started) -> int:
    a = FitResult.from_csv(opts["fit_a"])
    b = FitResult.from_csv(opts["fit_b"])
    df, summary = compare_fits(a, b)
    out = _outdir(opts)
    _write_csv(df, out / "compare.csv")
    write_manifest(out, argv, opts, [opts["fit_a"], opts["fit_b"]], started, summary=summary)
    print(f"correlation {summary['correlation']:.6f}, max |diff| {summary['max_abs_diff']:.3g} over {summary['n_cells']} cells")
    return EXIT_OK


def _engine_label(path: Path) -> str:
    """Engine name from the manifest written next to a fit, else the file name."""
    manifest = path.parent / "manifest.json"
    if manifest.exists():
        try:
            return json.loads(manifest.read_text(encoding="utf-8"))["engine"]["name"]
        except (KeyError, TypeError, json.JSONDecodeError):
            pass
    return path.stem


def cmd_plot_data(opts, argv, started) -> int:
    data = load_csv(opts["data"])
    lr = log_rates(data, float(opts["half_count"])).values
    heat = pd.DataFrame({
        "age": np.repeat(data.labels, data.n_periods),
        "period": np.tile(data.periods, data.n_ages),
        "observed_log_rate": lr.ravel(),
    })
    out = _outdir(opts)
    _write_csv(heat, out / "heatmap.csv")
    observed = dict(zip(zip(heat["age"], heat["period"]), heat["observed_log_rate"]))
    frames = []
    for path in opts.get("fit") or []:
        fit = FitResult.from_csv(path)
        df = fit.to_frame()
        df.insert(0, "engine", _engine_label(Path(path)))
        df.insert(3, "observed_log_rate", [observed.get(k, np.nan) for k in fit.key()])
        frames.append(df)
    inputs = [opts["data"], *(opts.get("fit") or [])]
    if frames:
        lines = pd.concat(frames, ignore_index=True)
        lines = lines[["engine", "age", "period", "observed_log_rate", "eta_hat", "lower", "upper", "window"]]
        _write_csv(lines, out / "lineplot.csv")
    write_manifest(out, argv, opts, inputs, started)
    print(f"wrote heatmap table ({len(heat)} rows) to {out}")
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "forecast": cmd_forecast,
    "score": cmd_score,
    "simulate": cmd_simulate,
    "compare": cmd_compare,
    "plot-data": cmd_plot_data,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = time.perf_counter()
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts, argv, started)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if getattr(exc, "diagnostics", None):
            print(json.dumps(exc.diagnostics, default=_jsonable), file=sys.stderr)
        return EXIT_NUMERICAL
    except ApcError as exc:  # pragma: no cover - every ApcError is one of the two above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
