"""``weakiv`` command-line interface.

Results go to standard output or ``--out``; diagnostics go to standard error
only. Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .asymptotics import limit_rejection_rate, model_from_design, sample_limit_batch
from .core import IVDataset
from .covariance import CovarianceSpec
from .empirics import NORMALIZATIONS, eis_report, load_panels, report_csv, report_json
from .errors import (
    ConfigError,
    DataError,
    NonFiniteError,
    NumericalError,
    ParseError,
    SchemaError,
    UsageError,
    WeakIVError,
)
from .estimators import (
    estimate_2sls,
    estimate_kclass,
    estimate_liml,
    robust_covariance,
    two_step_gmm,
)
from .simulation import Design, SimulationConfig, default_threads, run_design, summaries_to_csv
from .stats import effective_f, j_test, kp_test, robust_score, sargan_test

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
TEST_NAMES = ("j", "kp", "score-2sls", "score-liml", "sargan", "feff")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"weakiv: UsageError: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _cols(text: str) -> list[str]:
    out = [c.strip() for c in text.split(",") if c.strip()]
    if not out:
        raise argparse.ArgumentTypeError("empty column list")
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in _cols(text)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from exc


def read_columns(path, names) -> dict:
    """Numeric columns from a CSV file with a header row."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            header = [h.strip() for h in (reader.fieldnames or [])]
            reader.fieldnames = header
            rows = list(reader)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path} has no data rows")
    missing = [n for n in names if n not in header]
    if missing:
        raise SchemaError(f"columns not in file: {', '.join(missing)}")
    out = {}
    for n in names:
        vals = []
        for r in rows:
            t = (r[n] or "").strip()
            try:
                vals.append(float(t) if t else math.nan)
            except ValueError as exc:
                raise ParseError(f"column {n}: not a number {t!r}") from exc
        out[n] = np.array(vals)
    return out


def _dataset(args) -> IVDataset:
    exog = list(args.exog or [])
    names = [args.y] + args.x + args.z + [c for c in exog if c != "const"]
    data = read_columns(args.data, list(dict.fromkeys(names)))
    n = len(data[args.y])
    controls = []
    if args.intercept or "const" in exog:
        controls.append(np.ones(n))
    controls += [data[c] for c in exog if c != "const"]
    d = IVDataset(
        y=data[args.y],
        X=np.column_stack([data[c] for c in args.x]),
        Z=np.column_stack([data[c] for c in args.z]),
        X_exog=np.column_stack(controls) if controls else None,
        names={"y": args.y, "x": args.x, "z": args.z, "exog": exog},
    )
    for name, a in (("y", d.y), ("X", d.X), ("Z", d.Z)):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{name} contains missing or non-finite values")
    return d


def _manifest(command: str, args, started: float, outputs=()) -> dict:
    config = {
        k: (str(v) if isinstance(v, (CovarianceSpec, Design, Path)) else v)
        for k, v in vars(args).items()
        if k not in ("func",)
    }
    return {
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_time": round(time.perf_counter() - started, 6),
        "outputs": [str(p) for p in outputs],
    }


def _emit(payload, out: str | None) -> list:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n", encoding="utf-8")
        return [out]
    sys.stdout.write(text + "\n")
    return []


def _parse_method(text: str):
    t = text.strip().lower()
    if t in ("2sls", "liml", "gmm2"):
        return t, None
    if t.startswith("kclass:"):
        try:
            a = float(t.split(":", 1)[1])
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad k-class alpha in {text!r}") from exc
        return "kclass", a
    raise argparse.ArgumentTypeError(f"unknown method {text!r}")


def _parse_cov(text: str) -> CovarianceSpec:
    try:
        return CovarianceSpec.parse(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def cmd_estimate(args) -> int:
    t0 = time.perf_counter()
    d = _dataset(args)
    method, a = args.method
    if method == "2sls":
        res = estimate_2sls(d)
    elif method == "liml":
        res = estimate_liml(d)
    elif method == "kclass":
        res = estimate_kclass(d, a)
    else:
        _, res = two_step_gmm(d, args.cov)
    V = robust_covariance(d, res, args.cov)
    result = res.to_dict()
    result["cov"] = str(args.cov)
    result["std_errors"] = np.sqrt(np.maximum(np.diag(V), 0.0)).tolist()
    result["covariance"] = V.tolist()
    payload = {"result": result, "manifest": _manifest("estimate", args, t0, [args.out] if args.out else [])}
    _emit(payload, args.out)
    return 0


def cmd_test(args) -> int:
    t0 = time.perf_counter()
    d = _dataset(args)
    tests = args.tests
    unknown = [t for t in tests if t not in TEST_NAMES]
    if unknown:
        raise ConfigError(f"unknown tests: {', '.join(unknown)}")
    records = []
    for t in tests:
        if t == "j":
            first, second = two_step_gmm(d, args.cov)
            r = j_test(d, first, second, args.cov)
        elif t == "kp":
            r = kp_test(d, args.cov, args.partition)
        elif t == "score-2sls":
            r = robust_score(d, estimate_2sls(d), args.cov, args.partition)
        elif t == "score-liml":
            r = robust_score(d, estimate_liml(d), args.cov, args.partition)
        elif t == "sargan":
            r = sargan_test(d, estimate_2sls(d))
        else:
            r = effective_f(d, args.cov)
        records.append(r.to_dict())
    payload = {"results": records, "manifest": _manifest("test", args, t0, [args.out] if args.out else [])}
    _emit(payload, args.out)
    return 0


def _threads(args) -> int:
    return args.threads if args.threads is not None else default_threads()


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    if args.reps < 1:
        raise ConfigError("--reps must be positive")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    written = []
    for mu2 in sorted(args.mu2):
        cfg = SimulationConfig(
            design=args.design,
            n=args.n,
            k_z=args.kz,
            rho=args.rho,
            mu2=mu2,
            replications=args.reps,
            seed=args.seed,
            levels=tuple(args.levels),
            calibration=args.calibration,
        )
        s = run_design(cfg, _threads(args))
        summaries.append(s)
        p = out / f"cell_mu2_{mu2:g}.json"
        p.write_text(s.to_json() + "\n", encoding="utf-8")
        written.append(p)
        if s.flagged:
            print(
                f"weakiv: warning: mu2={mu2:g}: {s.degenerate_count} degenerate replications",
                file=sys.stderr,
            )
    p = out / "summary.csv"
    p.write_text(summaries_to_csv(summaries), encoding="utf-8")
    written.append(p)
    m = out / "manifest.json"
    m.write_text(json.dumps(_manifest("simulate", args, t0, written + [m]), indent=2) + "\n")
    return 0


def cmd_limit(args) -> int:
    t0 = time.perf_counter()
    cfg = SimulationConfig(
        design=args.design, n=args.n, k_z=args.kz, rho=args.rho, mu2=args.mu2,
        seed=args.seed, calibration=args.calibration,
    )
    model = model_from_design(cfg)
    j, kp = limit_rejection_rate(model, args.draws, args.level, seed=args.seed)
    draws = sample_limit_batch(model, args.draws, seed=args.seed)
    qs = (0.1, 0.25, 0.5, 0.75, 0.9)

    def quant(a):
        return {f"{q:g}": float(v) for q, v in zip(qs, np.quantile(a, qs))}

    result = {
        "level": args.level,
        "draws": args.draws,
        "rejection": {"J": j, "KP": kp},
        "degenerate": int(draws["degenerate"]),
        "quantiles": {
            "j_limit": quant(draws["j_limit"]),
            "kp_limit": quant(draws["kp_limit"]),
            "alpha_l": quant(draws["alpha_l"]),
            "beta_2sls": quant(draws["beta_2sls"][:, 0]),
            "beta_liml": quant(draws["beta_liml"][:, 0]),
        },
    }
    payload = {"result": result, "manifest": _manifest("limit", args, t0, [args.out] if args.out else [])}
    _emit(payload, args.out)
    return 0


def cmd_eis(args) -> int:
    t0 = time.perf_counter()
    panels = load_panels(args.data, args.schema, args.instruments)
    norms = NORMALIZATIONS if args.normalization == "both" else (args.normalization,)
    rows = eis_report(panels, norms, args.schema, args.hac_lags)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pc, pj, pm = out / "eis.csv", out / "eis.json", out / "manifest.json"
    pc.write_text(report_csv(rows), encoding="utf-8")
    pj.write_text(report_json(rows) + "\n", encoding="utf-8")
    pm.write_text(json.dumps(_manifest("eis", args, t0, [pc, pj, pm]), indent=2) + "\n")
    return 0


def _data_args(p):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--y", required=True, help="outcome column")
    p.add_argument("--x", required=True, type=_cols, help="endogenous regressor columns")
    p.add_argument("--z", required=True, type=_cols, help="instrument columns")
    p.add_argument("--exog", type=_cols, help="exogenous control columns ('const' for an intercept)")
    p.add_argument("--intercept", action="store_true", help="add and partial out a constant")
    p.add_argument("--cov", type=_parse_cov, default=CovarianceSpec("hc0"),
                   help="hc0, hc1, homo or nw:L (default hc0)")
    p.add_argument("--out", help="write JSON here instead of standard output")


def _design_args(p):
    p.add_argument("--design", required=True, type=Design.parse, help="1:A, 2:A or power:A,W")
    p.add_argument("--kz", type=int, default=2)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--n", type=int, default=120)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calibration", choices=("variance", "trace"), default="variance")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weakiv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"weakiv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="point estimates with robust standard errors")
    _data_args(p)
    p.add_argument("--method", type=_parse_method, default=("2sls", None),
                   help="2sls, liml, kclass:A or gmm2")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("test", help="overidentification and instrument-strength tests")
    _data_args(p)
    p.add_argument("--tests", type=_cols, default=["j", "kp"], help=",".join(TEST_NAMES))
    p.add_argument("--partition", type=lambda s: [int(v) for v in _cols(s)],
                   help="instrument columns (0-based) forming Z2 for score tests")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="Monte Carlo rejection rates and estimator metrics")
    _design_args(p)
    p.add_argument("--mu2", type=_floats, required=True, help="comma-separated grid")
    p.add_argument("--reps", type=int, default=20000)
    p.add_argument("--levels", type=_floats, default=[0.10, 0.05, 0.01])
    p.add_argument("--threads", type=int, default=None, help="worker cap (default WEAKIV_THREADS or all cores)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("limit", help="sample the weak-instrument limit of J and KP")
    _design_args(p)
    p.add_argument("--mu2", type=float, required=True)
    p.add_argument("--draws", type=int, default=20000)
    p.add_argument("--level", type=float, default=0.05)
    p.add_argument("--out")
    p.set_defaults(func=cmd_limit)

    p = sub.add_parser("eis", help="per-country EIS regressions")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True, choices=("yogo", "housing"))
    p.add_argument("--normalization", choices=NORMALIZATIONS + ("both",), default="both")
    p.add_argument("--hac-lags", type=int, default=None, help="default 6 for USA (yogo), else 4")
    p.add_argument("--instruments", choices=("lag1", "lag2"), default="lag1")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eis)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("weakiv: UsageError: --threads must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        code = EXIT_USAGE
        err = exc
    except DataError as exc:
        code = EXIT_DATA
        err = exc
    except NumericalError as exc:
        code = EXIT_NUMERICAL
        err = exc
    except WeakIVError as exc:
        code = EXIT_DATA
        err = exc
    print(f"weakiv: {type(err).__name__}: {err}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
