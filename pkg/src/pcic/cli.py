"""Command-line front end.

Subcommands
-----------
compute
    Criteria from user-supplied CSV matrices (one row per observation, one
    column per draw), written as a JSON report.
covariate-shift, causal, quasi-bayes
    Run a simulation study from defaults, a TOML config section, and flag
    overrides; write per-replication CSV, aggregate JSON, and plot-data CSV.

All outputs embed the full effective config and master seed, numbers are
serialized with 17 significant digits, JSON keys are sorted, and CSV uses
LF line endings, so identical invocations produce identical bytes.

Exit codes: 0 success, 2 input/config error, 3 too many failed replications.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import fields as dataclass_fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .criteria import EvalBundle, compute_iscv_wq, compute_pcic, compute_waic
from .experiments import (
    CausalConfig,
    CovariateShiftConfig,
    QuasiBayesConfig,
    ReplicationReport,
    run_causal,
    run_covariate_shift,
    run_quasibayes,
)

OUT_DIR_ENV = "PCIC_OUT_DIR"
MAX_FAILURE_FRACTION = 0.02

_EXPERIMENTS = {
    "covariate-shift": (CovariateShiftConfig, run_covariate_shift, "replications"),
    "causal": (CausalConfig, run_causal, "replications"),
    "quasi-bayes": (QuasiBayesConfig, run_quasibayes, "repetitions"),
}


class CliError(Exception):
    """Input or configuration problem; reported on stderr with exit code 2."""


# ---------------------------------------------------------------------------
# Deterministic serialization
# ---------------------------------------------------------------------------

def format_number(value) -> str:
    """17-significant-digit text form; exact round trip for float64."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    f = float(value)
    if math.isnan(f):
        return "NaN"
    if math.isinf(f):
        return "Infinity" if f > 0 else "-Infinity"
    return format(f, ".17g")


def render_json(obj, indent: int = 0) -> str:
    """JSON with sorted keys and 17-significant-digit floats."""
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if obj is None:
        return "null"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, (bool, np.bool_, int, np.integer, float, np.floating)):
        return format_number(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f"{inner}{json.dumps(str(k), ensure_ascii=False)}: {render_json(obj[k], indent + 1)}"
            for k in sorted(obj, key=str)
        ]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{inner}{render_json(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_json(obj) + "\n")


def _write_csv(path, rows, columns):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([
                row[c] if isinstance(row[c], str) else format_number(row[c])
                for c in columns
            ])


# ---------------------------------------------------------------------------
# compute
# ---------------------------------------------------------------------------

def _read_matrix(path) -> np.ndarray:
    rows = []
    width = None
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise CliError(
                    f"{path}: line {lineno}: expected {width} columns, found {len(cells)}"
                )
            parsed = []
            for col, cell in enumerate(cells, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise CliError(
                        f"{path}: row {lineno}, column {col}: not a number: {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise CliError(f"{path}: empty matrix")
    return np.asarray(rows, dtype=float)


def _criterion_dict(value) -> dict:
    return {
        "total": value.total,
        "fit": value.fit,
        "penalty": value.penalty,
        "per_observation": [
            {"fit": float(f), "penalty": float(p)} for f, p in value.per_observation
        ],
        "infinite_rows": list(value.infinite_rows),
        "unstable_rows": list(value.unstable_rows),
    }


def cmd_compute(args) -> int:
    log_pred = _read_matrix(args.log_pred)
    score = _read_matrix(args.score)
    if log_pred.shape != score.shape:
        raise CliError(
            f"shape mismatch: log_pred is {log_pred.shape}, score is {score.shape}"
        )
    n = log_pred.shape[0]
    if args.unit_weights:
        weights = np.ones(n)
    else:
        if args.weights is None:
            raise CliError("provide a weights file or pass --unit-weights")
        wmat = _read_matrix(args.weights)
        if wmat.shape not in ((n, 1), (1, n)):
            raise CliError(
                f"weights must be a length-{n} column, got shape {wmat.shape}"
            )
        weights = wmat.reshape(-1)
        if (weights <= 0).any():
            bad = int(np.argmax(weights <= 0)) + 1
            raise CliError(f"nonpositive weight at row {bad}")
    try:
        bundle = EvalBundle(log_pred=log_pred, score=score, weights=weights)
        report = {
            "n": n,
            "n_draws": log_pred.shape[1],
            "weights": weights.tolist(),
            "pcic": _criterion_dict(compute_pcic(bundle)),
            "waic": _criterion_dict(compute_waic(bundle)),
            "iscv_wq": _criterion_dict(compute_iscv_wq(bundle)),
        }
    except ValueError as err:
        raise CliError(str(err)) from None
    text = render_json(report) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _load_config_section(path, section) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as err:
        raise CliError(f"cannot read config {path}: {err}") from None
    except tomllib.TOMLDecodeError as err:
        raise CliError(f"invalid TOML in {path}: {err}") from None
    sect = data.get(section, {})
    if not isinstance(sect, dict):
        raise CliError(f"[{section}] must be a table")
    return sect


def _build_config(name, args):
    cfg_cls, _, reps_field = _EXPERIMENTS[name]
    allowed = {f.name for f in dataclass_fields(cfg_cls)}
    values = {}
    if args.config:
        section = _load_config_section(args.config, name)
        unknown = set(section) - allowed
        if unknown:
            raise CliError(
                f"unknown config fields for {name}: {', '.join(sorted(unknown))}"
            )
        values.update(section)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.reps is not None:
        values[reps_field] = args.reps
    if args.draws is not None:
        values["n_draws"] = args.draws
    for flag, field_name in (("burn_in", "burn_in"), ("thin", "thin")):
        flag_value = getattr(args, flag)
        if flag_value is None:
            continue
        if field_name not in allowed:
            raise CliError(f"--{flag.replace('_', '-')} does not apply to {name}")
        values[field_name] = flag_value
    try:
        return cfg_cls(**values)
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid {name} config: {err}") from None


def _plot_rows(report: ReplicationReport):
    agg = report.aggregates
    if report.experiment == "covariate-shift":
        cols = ["lambda", "mean_pcic", "mean_waic", "mean_test_error", "mean_oracle_error"]
        return [{c: row[c] for c in cols} for row in agg["per_lambda"]], cols
    if report.experiment == "causal":
        cols = ["candidate", "mean_pcic_w", "mean_wloss_per_n",
                "mean_penalty", "se_pcic_w", "se_wloss_per_n"]
        return [{c: row[c] for c in cols} for row in agg["per_candidate"]], cols
    rows = []
    cols = ["truth", "n", "family", "mean_pcic", "mean_waic", "mean_oracle_error"]
    for row in agg["per_family"]:
        rows.append({c: row.get(c, float("nan")) for c in cols})
    return rows, cols


def _write_report(report: ReplicationReport, out_dir, seed) -> None:
    name = report.experiment.replace("-", "_")
    os.makedirs(out_dir, exist_ok=True)
    if report.records:
        _write_csv(
            os.path.join(out_dir, f"{name}_replications.csv"),
            report.records,
            list(report.records[0].keys()),
        )
    if report.replication_summaries:
        _write_csv(
            os.path.join(out_dir, f"{name}_summary.csv"),
            report.replication_summaries,
            list(report.replication_summaries[0].keys()),
        )
    plot_rows, plot_cols = _plot_rows(report)
    _write_csv(os.path.join(out_dir, f"{name}_plot.csv"), plot_rows, plot_cols)
    _write_json(
        os.path.join(out_dir, f"{name}_aggregates.json"),
        {
            "experiment": report.experiment,
            "master_seed": seed,
            "config": report.config,
            "aggregates": report.aggregates,
            "completed": len(report.replication_summaries),
            "failed": len(report.failures),
        },
    )


def cmd_experiment(name, args) -> int:
    cfg = _build_config(name, args)
    out_dir = args.out or os.environ.get(OUT_DIR_ENV) or "."
    _, runner, reps_field = _EXPERIMENTS[name]
    report = runner(cfg)
    _write_report(report, out_dir, cfg.seed)
    attempted = len(report.replication_summaries) + len(report.failures)
    if report.failures:
        failure_log = os.path.join(
            out_dir, f"{report.experiment.replace('-', '_')}_failures.json"
        )
        _write_json(failure_log, report.failures)
        if len(report.failures) > MAX_FAILURE_FRACTION * attempted:
            sys.stderr.write(
                f"{len(report.failures)}/{attempted} replications failed; "
                f"see {failure_log}\n"
            )
            return 3
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcic",
        description="Predictive criteria from quasi-posterior draws and the "
                    "three simulation studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_compute = sub.add_parser(
        "compute",
        help="criteria from CSV matrices of per-draw evaluations",
        description="Read n x S CSV matrices (no header, one row per "
                    "observation) of log predictive densities and scores, "
                    "plus a length-n weights column, and write a JSON report "
                    "with PCIC, WAIC and IS-CV, each split into fit and "
                    "penalty terms.",
    )
    p_compute.add_argument("log_pred", help="CSV matrix of log h_i(X_i | theta_s)")
    p_compute.add_argument("score", help="CSV matrix of s_i(X_i, theta_s)")
    p_compute.add_argument("weights", nargs="?", help="CSV column of weights w_i")
    p_compute.add_argument("--unit-weights", action="store_true",
                           help="use w_i = 1 instead of a weights file")
    p_compute.add_argument("--out", help="write the JSON report here instead of stdout")
    p_compute.set_defaults(func=cmd_compute)

    for name in _EXPERIMENTS:
        cfg_cls, _, reps_field = _EXPERIMENTS[name]
        defaults = ", ".join(
            f"{f.name}={getattr(cfg_cls(), f.name)!r}" for f in dataclass_fields(cfg_cls)
        )
        p = sub.add_parser(
            name,
            help=f"run the {name} study",
            description=f"Config defaults: {defaults}. Override via a "
                        f"[{name}] section in a TOML --config file or the "
                        "flags below; the effective config is echoed into "
                        "the aggregate JSON.",
        )
        p.add_argument("--config", help=f"TOML file with a [{name}] section")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--reps", type=int, help=f"number of {reps_field}")
        p.add_argument("--draws", type=int, help="retained posterior draws per fit")
        p.add_argument("--burn-in", dest="burn_in", type=int,
                       help="MCMC burn-in iterations (quasi-bayes only)")
        p.add_argument("--thin", type=int, help="MCMC thinning (quasi-bayes only)")
        p.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or .)")
        p.set_defaults(func=lambda a, _n=name: cmd_experiment(_n, a))

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        sys.stderr.write(f"error: {err}\n")
        return 2
    except (ValueError, RuntimeError, ArithmeticError, OSError) as err:
        sys.stderr.write(f"error: {type(err).__name__}: {err}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
