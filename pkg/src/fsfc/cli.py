"""Command-line interface: ``fsfc fit | predict | simulate | bench``.

Exit status is 0 on success, 2 for configuration errors, 3 for data or
model-file errors and 4 when the final fit did not converge (artifacts are
still written).  Failures print one line ``error[CODE]: message`` to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .exceptions import ConfigError, DataError, FsfcError, ModelFormatError
from .funcdata import reconstruct_coefficient_curve
from .selection import fit_pipeline, predict
from .simlab import METRICS, ScenarioSpec, generate_scenario, run_replications

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NOT_CONVERGED = 4


class NotConverged(FsfcError):
    code = "NOT_CONVERGED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_fit(args) -> int:
    data = io.read_dataset(args.features, args.labels)
    config = io.read_config(args.config, {"folds": args.folds, "seed": args.seed, "k": args.k,
                                          "n_jobs": args.threads})
    if config.folds > data.panel.n:
        raise ConfigError(f"folds ({config.folds}) exceeds the number of instances ({data.panel.n})")
    model, path = fit_pipeline(data.panel, data.labels, config)
    model.metadata["feature_ids"] = list(data.feature_ids)

    out = _outdir(args.out)
    io.write_model(model, out / "model.json")
    rows = pd.DataFrame({
        "stage": "path",
        "c": path.grid.c_values,
        "lambda1": path.grid.lambda1,
        "lambda2": path.grid.lambda2,
        "active_count": path.active_counts,
        "cv_mean": path.cv_mean,
        "cv_sd": path.cv_sd,
        "kkt_residual": [r.kkt_residual for r in path.records],
        "converged": [int(r.converged) for r in path.records],
        "selected": (np.arange(len(path.records)) == path.selected_index).astype(int),
    })
    refit = pd.DataFrame([{
        "stage": "refit",
        "c": path.selected.c,
        "lambda1": model.lambda1,
        "lambda2": model.lambda2,
        "active_count": model.active.size,
        "cv_mean": path.cv_mean[path.selected_index],
        "cv_sd": path.cv_sd[path.selected_index],
        "kkt_residual": model.metadata["refit_kkt"],
        "converged": int(model.metadata["refit_converged"]),
        "selected": 1,
    }])
    io.write_frame(pd.concat([rows, refit], ignore_index=True), out / "path.csv")

    coef_dir = _outdir(out / "coefficients")
    for stale in coef_dir.glob("*.csv"):
        stale.unlink()
    for j in model.active:
        curve = reconstruct_coefficient_curve(model.B[j], model.bases[j])
        io.write_frame(pd.DataFrame({"t": model.grid.points, "value": curve}),
                       coef_dir / f"{data.feature_ids[j]}.csv")

    if not model.metadata["refit_converged"]:
        raise NotConverged(f"refit stopped with KKT residual {model.metadata['refit_kkt']:.3g}")
    print(f"selected {model.active.size} of {data.panel.p} features; model written to {out / 'model.json'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = io.read_model(args.model)
    panel, instances, features = io.read_features(args.features)
    expected = model.metadata.get("feature_ids")
    if expected is not None:
        missing = [f for f in expected if f not in set(features)]
        if missing:
            raise DataError(f"features missing from {args.features}: {', '.join(missing[:5])}")
        order = {f: j for j, f in enumerate(features)}
        panel = panel.subset(features=[order[f] for f in expected])
    prob, classes = predict(model, panel)
    io.write_frame(pd.DataFrame({"instance_id": instances, "probability": prob, "class": classes}),
                   args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = ScenarioSpec(args.n, args.p, args.p0, grid_size=args.grid_size, n_test=args.n_test,
                        seed=args.seed, margin=args.margin)
    data = generate_scenario(spec)
    out = _outdir(args.out)
    feature_ids = io.default_ids("f", spec.p)
    io.write_dataset(data.train, out / "train_features.csv", data.train_labels, out / "train_labels.csv",
                     io.default_ids("train", spec.n), feature_ids)
    io.write_dataset(data.test, out / "test_features.csv", data.test_labels, out / "test_labels.csv",
                     io.default_ids("test", spec.test_size), feature_ids)
    m = data.train.m
    truth = pd.DataFrame({
        "feature_id": np.repeat(np.array(feature_ids, dtype=object)[data.support], m),
        "t": np.tile(data.train.grid.points, data.support.size),
        "value": data.coefficients[data.support].ravel(),
    })
    io.write_frame(truth, out / "truth.csv")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = io.read_config(args.config, {"n_jobs": args.threads})
    spec = ScenarioSpec(args.n, args.p, args.p0, grid_size=args.grid_size, n_test=args.n_test,
                        seed=args.seed, margin=args.margin)
    rows, summary = run_replications(spec, args.reps, config, n_jobs=config.n_jobs)
    out = _outdir(args.out)
    reps = pd.DataFrame([{
        "rep": r.rep, "seed": r.seed, "ok": int(r.ok), "precision": r.precision, "recall": r.recall,
        "train_accuracy": r.train_accuracy, "test_accuracy": r.test_accuracy,
        "n_selected": r.n_selected, "error": r.error,
    } for r in rows])
    io.write_frame(reps, out / "replications.csv")
    io.write_frame(pd.DataFrame([
        {"metric": m, **summary[m], "reps": summary["reps"], "failed": summary["failed"]} for m in METRICS
    ]), out / "summary.csv")
    # wall-clock numbers vary run to run, so they live apart from the metrics
    timing = pd.DataFrame({"rep": [r.rep for r in rows], "seconds": [r.seconds for r in rows],
                           "cpu_seconds": [r.cpu_seconds for r in rows]})
    io.write_frame(timing, out / "timing.csv")
    print(f"{summary['reps'] - summary['failed']}/{summary['reps']} replications ok; "
          f"mean seconds {summary['seconds']['mean']:.2f}")
    return EXIT_OK


def _scenario_flags(sub):
    sub.add_argument("--n", type=int, required=True)
    sub.add_argument("--p", type=int, required=True)
    sub.add_argument("--p0", type=int, required=True)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--n-test", type=int, default=None)
    sub.add_argument("--grid-size", type=int, default=100)
    sub.add_argument("--margin", choices=("grid", "quadrature"), default="grid")
    sub.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsfc", description="Functional feature selection and classification.")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = subs.add_parser("fit", help="fit the model with CV path search and adaptive refit")
    fit.add_argument("--features", required=True)
    fit.add_argument("--labels", required=True)
    fit.add_argument("--config")
    fit.add_argument("--out", required=True)
    fit.add_argument("--folds", type=int)
    fit.add_argument("--seed", type=int)
    fit.add_argument("--k", type=int)
    fit.add_argument("--threads", type=int)
    fit.set_defaults(func=cmd_fit)

    pred = subs.add_parser("predict", help="score new curves with a saved model")
    pred.add_argument("--model", required=True)
    pred.add_argument("--features", required=True)
    pred.add_argument("--out", required=True)
    pred.set_defaults(func=cmd_predict)

    sim = subs.add_parser("simulate", help="write one synthetic scenario as CSV")
    _scenario_flags(sim)
    sim.set_defaults(func=cmd_simulate)

    bench = subs.add_parser("bench", help="replicate the synthetic benchmark")
    _scenario_flags(bench)
    bench.add_argument("--reps", type=int, required=True)
    bench.add_argument("--config")
    bench.add_argument("--threads", type=int)
    bench.set_defaults(func=cmd_bench)
    return parser


def run_command(argv=None) -> int:
    """Run one subcommand and return its exit status."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except FsfcError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigError):
            return EXIT_CONFIG
        if isinstance(exc, NotConverged):
            return EXIT_NOT_CONVERGED
        if isinstance(exc, (DataError, ModelFormatError)):
            return EXIT_DATA
        return 1
    except OSError as exc:
        print(f"error[IO_ERROR]: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
