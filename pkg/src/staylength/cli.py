"""Command-line entry point: individual analysis stages and the full report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import densfit, glm, hurdle, sarima, simgen, wstats
from .ingest import (
    DEFAULT_BOUNDARIES,
    STAY_CAP,
    BookingTable,
    DataError,
    Phase,
    PhaseBoundaries,
    assign_phase,
    load_bookings,
    monthly_aggregate,
    write_bookings,
    write_provenance,
)

log = logging.getLogger("staylength")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
STAGES = ("descriptives", "fit-dist", "fit-nb", "fit-logit", "fit-hurdle", "fit-sarima")
# stages whose inputs come from another stage
DEPENDS = {"fit-sarima": "descriptives"}


class UsageError(Exception):
    pass


class NumericalFailure(ArithmeticError):
    pass


# -- output helpers -------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "NA"
        return f"{v:.10g}"
    return str(v)


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def write_table(out_dir: Path, stem: str, header: Sequence[str], rows: Iterable[Sequence], fmt: str = "csv") -> Path:
    rows = [list(r) for r in rows]
    if fmt == "json":
        path = out_dir / f"{stem}.json"
        records = [{h: _jsonable(v) for h, v in zip(header, r)} for r in rows]
        path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
        return path
    path = out_dir / f"{stem}.csv"
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    input: Path
    out_dir: Path
    boundaries: PhaseBoundaries = DEFAULT_BOUNDARIES
    cap: int = STAY_CAP
    threshold: int = hurdle.LONG_STAY_THRESHOLD
    stages: tuple[str, ...] = STAGES
    fmt: str = "csv"
    collapse: bool = True
    families: tuple[str, ...] = ("lognormal", "pln", "gamma")
    overlay: bool = True
    dummies: bool = True
    emit_collapsed: bool = False

    def validate(self) -> None:
        if not self.input.is_file():
            raise UsageError(f"input file not found: {self.input}")
        if self.cap < 1:
            raise UsageError("--cap must be positive")
        if not 1 < self.threshold <= self.cap:
            raise UsageError(f"--threshold must be in (1, cap={self.cap}]")
        unknown = set(self.stages) - set(STAGES)
        if unknown:
            raise UsageError(f"unknown stage(s): {', '.join(sorted(unknown))}")
        if self.fmt not in ("csv", "json"):
            raise UsageError("--format must be csv or json")
        bad = set(self.families) - set(densfit.FAMILIES)
        if bad:
            raise UsageError(f"unknown famil(ies): {', '.join(sorted(bad))}")


@dataclass
class RunReport:
    status: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    outputs: dict[str, list[str]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)
    exit_code: int = EXIT_OK

    @property
    def manifest(self) -> list[str]:
        return [p for stage in self.outputs.values() for p in stage]

    def summary(self) -> dict:
        # timings are left out so repeated runs write identical summaries
        return {
            "status": self.status,
            "outputs": self.outputs,
            "warnings": self.warnings,
            "errors": self.errors,
            "exit_code": self.exit_code,
        }


# -- monthly series helpers ---------------------------------------------------------

def month_phase(month: str, boundaries: PhaseBoundaries) -> Phase:
    """Phase of a calendar month, taken at its 15th day."""
    y, m = (int(p) for p in month.split("-")[:2])
    return assign_phase(date(y, m, 15), boundaries)


def monthly_series(months: Sequence[str], values: Sequence[float], boundaries: PhaseBoundaries) -> sarima.MonthlySeries:
    ms = np.array(months, dtype="datetime64[M]")
    if ms.size and np.any(np.diff(ms).astype(int) != 1):
        raise DataError("monthly series has gaps or is out of order")
    phases = [month_phase(m, boundaries) for m in months]
    post = [1.0 if p is Phase.POST_VACCINE else 0.0 for p in phases]
    pre = [1.0 if p is Phase.PRE_COVID else 0.0 for p in phases]
    return sarima.MonthlySeries(np.asarray(values, dtype=float), str(ms[0]), np.column_stack([post, pre]),
                                ("Post-COVID", "Pre-COVID"))


def read_monthly(path: Path) -> tuple[list[str], list[float]]:
    months, values = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"month", "wmean"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns month,wmean,wsd,total_weight")
        for i, row in enumerate(reader, start=2):
            try:
                months.append(str(np.datetime64(row["month"].strip(), "M")))
                values.append(float(row["wmean"]))
            except ValueError:
                raise DataError(f"{path}: row {i}: cannot parse {row}") from None
    if not months:
        raise DataError(f"{path}: no monthly rows")
    return months, values


# -- stages -------------------------------------------------------------------------

def stage_descriptives(table: BookingTable, cfg: PipelineConfig, ctx: dict) -> list[Path]:
    desc = wstats.phase_descriptives(table)
    points = monthly_aggregate(table)
    ctx["monthly"] = points
    return [
        write_table(cfg.out_dir, "descriptives", ["phase", "mean", "median", "p25", "p75", "sd", "total_weight"],
                    [(d.phase.value, d.mean, d.median, d.p25, d.p75, d.sd, d.total_weight) for d in desc], cfg.fmt),
        write_table(cfg.out_dir, "monthly", ["month", "wmean", "wsd", "total_weight"],
                    [(p.month, p.wmean, p.wsd, p.total_weight) for p in points], cfg.fmt),
    ]


def stage_fit_dist(table: BookingTable, cfg: PipelineConfig, ctx: dict) -> list[Path]:
    fits = [densfit.fit_weighted(f, table.nights, table.weights) for f in cfg.families]
    for f in fits:
        if not f.converged:
            ctx["warnings"].append(f"{f.name} fit did not converge")
    ranked = densfit.rank_models(fits) if len(fits) > 1 else [densfit.RankedFit(fits[0], 0.0, 0.0)]
    rows = []
    for r in ranked:
        p = r.fit.family.params
        (n1, v1), (n2, v2) = p.items()
        rows.append((r.fit.family.label, r.fit.k, n1, v1, n2, v2, r.fit.loglik, r.fit.aic, r.fit.bic,
                     r.delta_aic, r.fit.converged))
    paths = [write_table(cfg.out_dir, "density_fits",
                         ["family", "k", "param1", "value1", "param2", "value2", "loglik", "aic", "bic",
                          "delta_aic", "converged"], rows, cfg.fmt)]
    if cfg.overlay:
        for f in fits:
            pts = densfit.overlay_points(f, table.nights, table.weights)
            paths.append(write_table(cfg.out_dir, f"overlay_{f.name}", ["y", "ecdf", "fitted_cdf"], pts, cfg.fmt))
    return paths


def _ratio_rows(fit: glm.GlmFit):
    return [(r.label, r.ratio, r.ci_low, r.ci_high, r.meaning) for r in glm.rate_ratios(fit)]


def _check_glm(fit: glm.GlmFit, what: str, ctx: dict):
    ctx["warnings"].extend(f"{what}: {w}" for w in fit.warnings)
    if not fit.converged:
        raise NumericalFailure(f"{what} did not converge")


def stage_fit_nb(table: BookingTable, cfg: PipelineConfig, ctx: dict) -> list[Path]:
    design = glm.design_from_table(table)
    fit = glm.fit_negbin(design, table.nights, table.weights)
    _check_glm(fit, "NB regression", ctx)
    keys = table.year_month.astype(str)
    pred = dict(glm.predict_monthly_mean(fit, design, table.weights, keys))
    obs = {p.month: p.wmean for p in monthly_aggregate(table)}
    return [
        write_table(cfg.out_dir, "nb_irr", ["label", "irr", "ci_low", "ci_high", "meaning"], _ratio_rows(fit), cfg.fmt),
        write_table(cfg.out_dir, "nb_monthly", ["month", "observed", "predicted"],
                    [(m, obs[m], pred[m]) for m in sorted(obs)], cfg.fmt),
    ]


def stage_fit_logit(table: BookingTable, cfg: PipelineConfig, ctx: dict) -> list[Path]:
    design = glm.design_from_table(table)
    long = (table.nights >= cfg.threshold).astype(float)
    if long.min() == long.max():
        raise DataError(f"long-stay indicator (y >= {cfg.threshold}) has a single class")
    fit = glm.fit_logistic(design, long, table.weights)
    _check_glm(fit, "logistic regression", ctx)
    return [write_table(cfg.out_dir, "logit_or", ["label", "odds_ratio", "ci_low", "ci_high", "meaning"],
                        _ratio_rows(fit), cfg.fmt)]


def stage_fit_hurdle(table: BookingTable, cfg: PipelineConfig, ctx: dict) -> list[Path]:
    fit = hurdle.fit_hurdle(table, cfg.threshold)
    _check_glm(fit.logit_part, "hurdle logit part", ctx)
    _check_glm(fit.nb_part, "hurdle NB part", ctx)
    impact = hurdle.combined_impact(fit, Phase.PRE_COVID)
    return [
        write_table(cfg.out_dir, "hurdle_logit_or", ["label", "odds_ratio", "ci_low", "ci_high", "meaning"],
                    _ratio_rows(fit.logit_part), cfg.fmt),
        write_table(cfg.out_dir, "hurdle_nb_irr", ["label", "irr", "ci_low", "ci_high", "meaning"],
                    _ratio_rows(fit.nb_part), cfg.fmt),
        write_table(cfg.out_dir, "hurdle_impact",
                    ["phase", "prevalence", "conditional_mean", "contribution", "excess_vs_pre"],
                    [(r.phase.value, r.prevalence, r.conditional_mean, r.contribution, r.excess_vs_reference)
                     for r in impact], cfg.fmt),
    ]


def sarima_outputs(months: Sequence[str], values: Sequence[float], cfg: PipelineConfig, ctx: dict) -> list[Path]:
    series = monthly_series(months, values, cfg.boundaries)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", sarima.BoundaryWarning)
        fits = {}
        if cfg.dummies:
            fits["full"] = sarima.fit_sarima(series, include_xreg=True)
        fits["null"] = sarima.fit_sarima(series, include_xreg=False)
    for name, f in fits.items():
        ctx["warnings"].extend(f"SARIMA {name}: {w}" for w in f.warnings)
        if not f.converged:
            ctx["warnings"].append(f"SARIMA {name}: optimizer did not report convergence")
    main = fits.get("full", fits["null"])
    diag = sarima.residual_diagnostics(main)
    res_months = [str(np.datetime64(main.start, "M") + i) for i in range(main.residuals.size)]
    paths = [
        write_table(cfg.out_dir, "sarima_coef", ["model", "parameter", "estimate", "se"],
                    [(name, p, e, s) for name, f in fits.items() for p, e, s in f.coefficient_table()], cfg.fmt),
        write_table(cfg.out_dir, "sarima_ic", ["model", "loglik", "k", "n", "aic", "aicc", "bic"],
                    [(name, f.loglik, f.n_params, f.n, f.aic, f.aicc, f.bic) for name, f in fits.items()], cfg.fmt),
        write_table(cfg.out_dir, "sarima_residuals", ["month", "residual"], zip(res_months, main.residuals), cfg.fmt),
        write_table(cfg.out_dir, "sarima_acf", ["lag", "acf", "lower", "upper"],
                    [(i + 1, a, -diag.bound, diag.bound) for i, a in enumerate(diag.acf)], cfg.fmt),
        write_table(cfg.out_dir, "sarima_ljungbox", ["lag", "statistic", "dof", "p_value"],
                    [(lb.lag, lb.statistic, lb.dof, lb.p_value) for lb in diag.ljung_box], cfg.fmt),
        write_table(cfg.out_dir, "sarima_hist", ["bin_low", "bin_high", "count"],
                    zip(diag.hist_edges[:-1], diag.hist_edges[1:], diag.hist_counts), cfg.fmt),
    ]
    if "full" in fits:
        lr = sarima.lr_test(fits["full"], fits["null"])
        paths.append(write_table(cfg.out_dir, "sarima_lrtest", ["statistic", "dof", "p_value"],
                                 [(lr.statistic, lr.dof, lr.p_value)], cfg.fmt))
    return paths


def stage_fit_sarima(table: BookingTable, cfg: PipelineConfig, ctx: dict) -> list[Path]:
    points = ctx.get("monthly") or monthly_aggregate(table)
    return sarima_outputs([p.month for p in points], [p.wmean for p in points], cfg, ctx)


STAGE_FUNCS: dict[str, Callable[[BookingTable, PipelineConfig, dict], list[Path]]] = {
    "descriptives": stage_descriptives,
    "fit-dist": stage_fit_dist,
    "fit-nb": stage_fit_nb,
    "fit-logit": stage_fit_logit,
    "fit-hurdle": stage_fit_hurdle,
    "fit-sarima": stage_fit_sarima,
}


def _classify(exc: Exception) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (NumericalFailure, ArithmeticError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, ValueError, OSError)):
        return EXIT_DATA
    return EXIT_NUMERIC


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Ingest, then run the selected stages in their canonical order."""
    cfg.validate()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport()
    t0 = time.perf_counter()
    try:
        table = load_bookings(cfg.input, cap=cfg.cap, collapse=cfg.collapse, boundaries=cfg.boundaries)
    except (DataError, ValueError, OSError) as exc:
        report.status["ingest"] = "failed"
        report.errors["ingest"] = str(exc)
        report.exit_code = EXIT_DATA
        return report
    report.status["ingest"] = "ok"
    report.timings["ingest"] = time.perf_counter() - t0
    if table.rows_dropped:
        report.warnings.append(f"ingest: dropped {table.rows_dropped} rows outside [1, {cfg.cap}] nights")
    if cfg.emit_collapsed:
        write_bookings(table, cfg.out_dir / "bookings_collapsed.csv")
        write_provenance(table, cfg.out_dir / "provenance.txt")
        report.outputs["ingest"] = ["bookings_collapsed.csv", "provenance.txt"]

    ctx: dict = {"warnings": report.warnings}
    for stage in STAGES:
        if stage not in cfg.stages:
            continue
        dep = DEPENDS.get(stage)
        if dep and report.status.get(dep) == "failed":
            report.status[stage] = "skipped"
            continue
        t = time.perf_counter()
        try:
            paths = STAGE_FUNCS[stage](table, cfg, ctx)
        except Exception as exc:  # noqa: BLE001 - recorded per stage
            log.error("stage %s failed: %s", stage, exc)
            report.status[stage] = "failed"
            report.errors[stage] = f"{type(exc).__name__}: {exc}"
            report.exit_code = max(report.exit_code, _classify(exc))
            continue
        report.status[stage] = "ok"
        report.timings[stage] = time.perf_counter() - t
        report.outputs[stage] = [p.name for p in paths]
        log.info("stage %s done in %.2fs", stage, report.timings[stage])
    return report


# -- argument parsing -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _boundaries(text: str) -> PhaseBoundaries:
    try:
        return PhaseBoundaries.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _common(p: argparse.ArgumentParser, *, needs_input=True):
    if needs_input:
        p.add_argument("--input", required=True, type=Path, help="bookings CSV (nights,weight,created_date)")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--phases", type=_boundaries, default=DEFAULT_BOUNDARIES,
                   help="pre_end=YYYY-MM-DD,restr_end=YYYY-MM-DD")
    p.add_argument("--cap", type=int, default=STAY_CAP, help="longest stay kept, in nights")
    p.add_argument("--threshold", type=int, default=hurdle.LONG_STAY_THRESHOLD, help="long-stay cut, in nights")
    p.add_argument("--format", choices=("csv", "json"), default="csv", dest="fmt")
    p.add_argument("--no-collapse", action="store_true", help="keep duplicate (nights, date) rows")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="staylength", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("descriptives", help="phase descriptives and monthly mean/sd series")
    _common(p)
    p = sub.add_parser("fit-dist", help="weighted density fits ranked by AIC")
    _common(p)
    p.add_argument("--family", choices=("lognormal", "gamma", "pln", "all"), default="all")
    p.add_argument("--overlay", action="store_true", help="also write y,ecdf,fitted_cdf points")
    p = sub.add_parser("fit-nb", help="negative-binomial regression with IRRs")
    _common(p)
    p = sub.add_parser("fit-logit", help="logistic regression for long stays")
    _common(p)
    p = sub.add_parser("fit-hurdle", help="two-part long-stay model")
    _common(p)
    p = sub.add_parser("fit-sarima", help="ARIMA(0,1,1)(0,1,1)12 on the monthly series")
    _common(p)
    p.add_argument("--no-dummies", action="store_true", help="fit only the model without phase dummies")
    p = sub.add_parser("report", help="run the full pipeline")
    _common(p)
    p.add_argument("--stages", default=",".join(STAGES), help="comma-separated subset of stages")
    p.add_argument("--emit-collapsed", action="store_true", help="write the collapsed table and provenance")
    p = sub.add_parser("simulate", help="simulate a weighted booking table")
    p.add_argument("--spec", type=Path, help="key = value simulation spec")
    p.add_argument("--out", required=True, type=Path, help="output CSV path")
    p.add_argument("--seed", type=int)
    return parser


def _config(args, stages: Sequence[str], **kw) -> PipelineConfig:
    return PipelineConfig(
        input=args.input,
        out_dir=args.out,
        boundaries=args.phases,
        cap=args.cap,
        threshold=args.threshold,
        stages=tuple(stages),
        fmt=args.fmt,
        collapse=not args.no_collapse,
        **kw,
    )


def _finish(report: RunReport, cfg: PipelineConfig, write_summary: bool) -> int:
    for w in report.warnings:
        log.warning(w)
    for stage, err in report.errors.items():
        print(f"error in {stage}: {err}", file=sys.stderr)
    if write_summary:
        (cfg.out_dir / "run_summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n",
                                                      encoding="utf-8")
    for stage, secs in report.timings.items():
        log.info("timing %s %.3fs", stage, secs)
    return report.exit_code


def _run_sarima_file(args) -> int:
    cfg = PipelineConfig(input=args.input, out_dir=args.out, boundaries=args.phases, cap=args.cap,
                         threshold=args.threshold, fmt=args.fmt, dummies=not args.no_dummies)
    cfg.validate()
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    months, values = read_monthly(args.input)
    ctx = {"warnings": []}
    sarima_outputs(months, values, cfg, ctx)
    for w in ctx["warnings"]:
        log.warning(w)
    return EXIT_OK


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "simulate":
        spec = (simgen.load_sim_spec(args.spec, seed=args.seed) if args.spec
                else simgen.BookingSimSpec(**({"seed": args.seed} if args.seed is not None else {})))
        table = simgen.simulate_bookings(spec)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_bookings(table, args.out)
        return EXIT_OK
    if cmd == "fit-sarima":
        if _looks_monthly(args.input):
            return _run_sarima_file(args)
        cfg = _config(args, ["fit-sarima"], dummies=not args.no_dummies)
        return _finish(run_pipeline(cfg), cfg, False)
    if cmd == "report":
        stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        cfg = _config(args, stages, emit_collapsed=args.emit_collapsed)
        return _finish(run_pipeline(cfg), cfg, True)
    extra = {}
    if cmd == "fit-dist":
        extra["families"] = ("lognormal", "pln", "gamma") if args.family == "all" else (args.family,)
        extra["overlay"] = args.overlay
    cfg = _config(args, [cmd], **extra)
    return _finish(run_pipeline(cfg), cfg, False)


def _looks_monthly(path: Path) -> bool:
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
    except OSError:
        return False
    return "month" in header and "wmean" in header


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        code = _classify(exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
