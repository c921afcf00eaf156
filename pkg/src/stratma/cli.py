"""Command-line entry point: ``stratma <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .allocation import Allocation, neyman_allocation, parse_budget, proportional_allocation
from .core import ColumnMapping, PopulationTable, StrataAssignment, read_population, validate
from .errors import ConfigError, DataError, StratmaError
from .estimators import estimate_ma_srs, estimate_ma_stratified, estimate_oracle, estimate_subset
from .power import STRATIFIED, SRS, design_from_population, mdes_curve, read_design
from .sampling import SampleDraw
from .simulation import GridConfig, resample_repeats, run_grid, summarize_repeats
from .stratification import (
    DEFAULT_MAX_RATIO,
    DEFAULT_MIN_SIZE,
    generate_candidates,
    oracle_metrics,
    precoding_metrics,
    quantile_cut,
    rank_candidates,
)
from .variance import FINITE_POPULATION, SUPERPOPULATION, bs_ws_decomposition

THREADS_ENV = "STRATMA_THREADS"
CONFIG_SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # pragma: no cover - exercised via main
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Shared helpers


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--format", choices=("table", "csv", "json"), default="csv")
    p.add_argument("--seed", type=int, default=None, help="master seed (64-bit unsigned, default 0)")
    p.add_argument("--threads", type=int, default=_default_threads(), help=f"worker threads (default: ${THREADS_ENV} or 1)")


def _add_columns(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="population CSV")
    p.add_argument("--id-col", default="id")
    p.add_argument("--arm-col", default=None, help="omit for a single-arm study")
    p.add_argument("--yhat-col", default="y_hat")
    p.add_argument("--y-col", default=None)
    p.add_argument("--stratum-col", default=None)
    p.add_argument("--feature-col", action="append", default=[])
    p.add_argument("--na-value", action="append", default=[], help="extra cell text meaning 'not coded'")
    p.add_argument("--strata-var", default=None, help="derive strata from quantiles of this variable")
    p.add_argument("--strata-q", type=int, default=4)


def _mapping(args) -> ColumnMapping:
    feats = list(args.feature_col)
    if args.strata_var and args.strata_var != "y_hat" and args.strata_var not in feats:
        feats.append(args.strata_var)
    return ColumnMapping(
        id_col=args.id_col, yhat_col=args.yhat_col, arm_col=args.arm_col, y_col=args.y_col,
        stratum_col=args.stratum_col, feature_cols=tuple(feats), na_values=tuple(args.na_value),
    )


def _load(args) -> PopulationTable:
    return read_population(args.input, _mapping(args))


def _strata(args, pop: PopulationTable, required: bool = True) -> StrataAssignment | None:
    if args.strata_var:
        values = pop.y_hat if args.strata_var == "y_hat" else np.asarray(pop.features[args.strata_var], dtype=float)
        labels = np.zeros(len(pop), dtype=int)
        for z in pop.arms:
            idx = pop.arm == z
            labels[idx] = quantile_cut(values[idx], args.strata_q)
        return StrataAssignment(labels, pop.arm)
    if pop.stratum is not None:
        return StrataAssignment.from_column(pop)
    if required:
        raise ConfigError("strata needed: pass --stratum-col or --strata-var")
    return None


def _check(pop: PopulationTable, strata: StrataAssignment | None) -> None:
    report = validate(pop, strata)
    if not report.ok:
        raise DataError(report.render())


def _budgets(text: str, pop_sizes: dict[int, int]) -> dict[int, int]:
    return {z: parse_budget(text, n) for z, n in pop_sizes.items()}


def _emit_frame(df: pd.DataFrame, fmt: str) -> str:
    if fmt == "csv":
        return df.to_csv(index=False, lineterminator="\n")
    if fmt == "json":
        return json.dumps(json.loads(df.to_json(orient="records", double_precision=15)), indent=2) + "\n"
    return df.to_string(index=False) + "\n"


def _write(args, text: str, extra_outputs: Sequence[str] = ()) -> None:
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _write_manifest(args, [args.out, *extra_outputs])
    else:
        sys.stdout.write(text)


def _jsonable(v: Any) -> Any:
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    return str(v)


def _write_manifest(args, outputs: Sequence[str]) -> None:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "argv")}
    manifest = {
        "tool": "stratma",
        "version": __version__,
        "subcommand": args.command,
        "argv": list(args.argv),
        "config": config,
        "seed": args.seed,
        "inputs": [p for p in (getattr(args, k, None) for k in ("input", "config_file", "design", "alloc")) if p],
        "outputs": list(outputs),
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    Path(f"{outputs[0]}.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_estimate(args) -> None:
    pop = _load(args)
    method = args.method.replace("-", "_")
    strata = _strata(args, pop, required=method == "ma_stratified")
    _check(pop, strata)
    draw = SampleDraw.from_mask(pop, pop.coded, strata if method == "ma_stratified" else None)
    mode = args.variance_mode
    if method == "oracle":
        rep = estimate_oracle(pop, args.estimand, args.ci, mode)
    elif method == "subset":
        rep = estimate_subset(pop, draw, args.estimand, args.ci)
    elif method == "ma_srs":
        rep = estimate_ma_srs(pop, draw, args.estimand, args.ci, mode)
    else:
        rep = estimate_ma_stratified(pop, strata, draw, None, args.estimand, args.ci, mode)
    if args.format == "json":
        text = json.dumps(rep.to_dict(), indent=2) + "\n"
    elif args.format == "csv":
        text = _emit_frame(pd.DataFrame([rep.flat_row()]), "csv")
    else:
        lo, hi = rep.ci
        lines = [f"{rep.method} estimate of {rep.estimand}: {rep.estimate:.6g}", f"se: {rep.se:.6g}",
                 f"{rep.level:.0%} ci: [{lo:.6g}, {hi:.6g}]", f"coded units: {rep.n_coded}"]
        lines += [f"note: {d}" for d in rep.diagnostics]
        text = "\n".join(lines) + "\n"
    for d in rep.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    _write(args, text)


def _summary_inputs(path: str) -> tuple[dict[int, list[int]], dict[int, list[float]]]:
    df = pd.read_csv(path)
    need = {"arm", "stratum", "N"}
    if need - set(df.columns):
        raise ConfigError(f"summary file needs columns {sorted(need | {'sd'})}")
    sizes, sds = {}, {}
    for z, g in df.sort_values(["arm", "stratum"]).groupby("arm"):
        sizes[int(z)] = g["N"].astype(int).tolist()
        sds[int(z)] = g["sd"].astype(float).tolist() if "sd" in g else [1.0] * len(g)
    return sizes, sds


def cmd_allocate(args) -> None:
    if args.summary:
        sizes, sds = _summary_inputs(args.summary)
    else:
        if not args.input:
            raise ConfigError("pass --summary or --input")
        pop = _load(args)
        strata = _strata(args, pop)
        _check(pop, strata)
        sizes, sds = {}, {}
        for z in pop.arms:
            in_arm = pop.arm == z
            codes = strata.codes(z)
            sizes[z] = strata.sizes(z).tolist()
            coded = pop.coded[in_arm]
            if args.oracle and not coded.all():
                raise DataError("--oracle needs every unit coded")
            resid = np.where(coded, pop.y[in_arm] - pop.y_hat[in_arm], 0.0)
            sd = []
            for k in range(strata.K(z)):
                r = resid[coded & (codes == k)]
                if len(r) < 2:
                    raise DataError(f"arm {z} stratum {k + 1}: fewer than two coded units to estimate the SD")
                sd.append(float(np.std(r, ddof=1)))
            sds[z] = sd
    budget = _budgets(args.budget, {z: sum(s) for z, s in sizes.items()})
    if args.method == "proportional":
        alloc = proportional_allocation(sizes, budget, args.min_floor)
    else:
        alloc = neyman_allocation(sizes, sds, budget, args.min_floor)
    for f in alloc.flags:
        print(f"warning: {f}: all stratum SDs are zero; used proportional allocation", file=sys.stderr)
    df = pd.DataFrame(alloc.rows(), columns=["arm", "stratum", "N", "n"])
    _write(args, _emit_frame(df, args.format))


def cmd_stratify(args) -> None:
    pop = _load(args)
    _check(pop, None)
    variables = [v.strip() for v in args.vars.split(",") if v.strip()]
    cands = generate_candidates(pop, variables, min_cell=args.min_cell)
    metrics = [precoding_metrics(pop, c, args.min_size, args.max_ratio) for c in cands]
    if args.oracle:
        sizes = {z: pop.arm_size(z) for z in pop.arms}
        budget = _budgets(args.budget, sizes)

        def score(cm):
            return oracle_metrics(pop, cm[0], budget, args.allocation, args.min_floor, base=cm[1])

        with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
            metrics = list(pool.map(score, zip(cands, metrics)))
    ranked = rank_candidates(cands, metrics)
    order = {id(c): i + 1 for i, (c, _) in enumerate(ranked)}
    rows = []
    for c, m in sorted(zip(cands, metrics), key=lambda cm: order.get(id(cm[0]), len(cands) + 1)):
        rows.append({"rank": order.get(id(c), ""), "name": c.name, "K": c.total_strata, **m.as_row()})
    text = _emit_frame(pd.DataFrame(rows), args.format)
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
        _write_manifest(args, [args.report])
    if args.out or not args.report:
        _write(args, text)


def _load_grid(path: str) -> GridConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("grid config must be a JSON object")
    version = raw.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"grid config needs schema_version {CONFIG_SCHEMA_VERSION}, got {version!r}")
    return GridConfig.from_dict(raw)


def cmd_simulate(args) -> None:
    if args.repeats:
        pop = _load(args)
        strata = _strata(args, pop)
        _check(pop, strata)
        budget = _budgets(args.budget, {z: pop.arm_size(z) for z in pop.arms})
        table = resample_repeats(pop, strata, budget, args.repeats, args.seed, args.min_floor)
        df = summarize_repeats(table) if args.summary else table
        _write(args, _emit_frame(df, args.format))
        return
    if not args.config_file:
        raise ConfigError("pass --config or --repeats")
    grid = _load_grid(args.config_file)
    if args.seed_given:
        grid = GridConfig(**{**grid.__dict__, "seed": args.seed})
    df = run_grid(grid, threads=max(1, args.threads))
    _write(args, _emit_frame(df, args.format))


def _parse_grid(text: str) -> tuple[float, ...]:
    parts = text.split(":")
    if len(parts) == 3:
        a, b, step = map(float, parts)
        return tuple(float(x) for x in np.round(np.arange(a, b + step / 2, step), 10))
    return tuple(float(x) for x in text.split(","))


def cmd_power(args) -> None:
    grid = _parse_grid(args.h_grid)
    if args.design:
        with open(args.design, encoding="utf-8") as fh:
            design = read_design(fh, args.alpha, args.power, h_grid=grid)
    elif args.input:
        pop = _load(args)
        strata = _strata(args, pop)
        design = design_from_population(pop, strata, args.alpha, args.power, h_grid=grid)
    else:
        raise ConfigError("pass --design or --input")
    srs = mdes_curve(design, SRS)
    strat = mdes_curve(design, STRATIFIED)
    df = pd.DataFrame({"h": [h for h, _ in srs], "mdes_srs": [m for _, m in srs], "mdes_stratified": [m for _, m in strat]})
    _write(args, _emit_frame(df, args.format))


def cmd_decompose(args) -> None:
    pop = _load(args)
    strata = _strata(args, pop)
    _check(pop, strata)
    if not pop.coded.all():
        raise DataError("decompose needs every unit coded")
    sizes = {z: strata.sizes(z).tolist() for z in pop.arms}
    if args.alloc:
        tab = pd.read_csv(args.alloc).sort_values(["arm", "stratum"])
        alloc = Allocation.manual(
            {int(z): g["n"].astype(int).tolist() for z, g in tab.groupby("arm")}, sizes
        )
    else:
        if not args.budget:
            raise ConfigError("pass --alloc or --budget")
        budget = _budgets(args.budget, {z: pop.arm_size(z) for z in pop.arms})
        alloc = proportional_allocation(sizes, budget, args.min_floor)
    dec = bs_ws_decomposition(pop.y - pop.y_hat, strata, alloc)
    rows = [{"arm": str(z), "bs": b, "ws": w, "delta": b - w} for z, (b, w) in dec.per_arm.items()]
    rows.append({"arm": "total", "bs": dec.bs, "ws": dec.ws, "delta": dec.delta})
    _write(args, _emit_frame(pd.DataFrame(rows), args.format))


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    return main(manifest["argv"])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stratma", description="Surrogate-assisted estimation with stratified gold-standard coding.")
    p.add_argument("--version", action="version", version=f"stratma {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    e = sub.add_parser("estimate", help="estimate an effect or mean from a partially coded table")
    _add_columns(e)
    _add_common(e)
    e.add_argument("--method", choices=("oracle", "subset", "ma-srs", "ma-stratified"), required=True)
    e.add_argument("--estimand", choices=("ate", "mean"), default=None)
    e.add_argument("--ci", type=float, default=0.95)
    e.add_argument("--variance-mode", choices=(FINITE_POPULATION, SUPERPOPULATION), default=SUPERPOPULATION)
    e.set_defaults(func=cmd_estimate, format="json")

    a = sub.add_parser("allocate", help="per-stratum coding quotas")
    a.add_argument("--summary", help="CSV with columns arm, stratum, N, sd")
    _add_columns(a)
    a._option_string_actions["--input"].required = False
    _add_common(a)
    a.add_argument("--budget", required=True, help="units per arm, or a fraction such as 0.3 or 0.3N")
    a.add_argument("--method", choices=("proportional", "neyman"), default="neyman")
    a.add_argument("--min-floor", type=int, default=2)
    a.add_argument("--oracle", action="store_true", help="require fully coded data for the SDs (retrospective)")
    a.set_defaults(func=cmd_allocate)

    s = sub.add_parser("stratify", help="generate and rank candidate stratifications")
    _add_columns(s)
    _add_common(s)
    s.add_argument("--vars", default="y_hat", help="comma-separated variables")
    s.add_argument("--budget", default="0.3N")
    s.add_argument("--report", help="write the candidate table here")
    s.add_argument("--oracle", action="store_true", help="add retrospective BS/WS scores (needs full coding)")
    s.add_argument("--allocation", choices=("proportional", "neyman"), default="proportional")
    s.add_argument("--min-floor", type=int, default=2)
    s.add_argument("--min-size", type=int, default=DEFAULT_MIN_SIZE)
    s.add_argument("--max-ratio", type=float, default=DEFAULT_MAX_RATIO)
    s.add_argument("--min-cell", type=int, default=2)
    s.set_defaults(func=cmd_stratify)

    m = sub.add_parser("simulate", help="run a simulation grid or resample a coded dataset")
    m.add_argument("--config", dest="config_file", help="JSON grid config")
    m.add_argument("--repeats", type=int, default=0, help="resample --input this many times instead")
    m.add_argument("--input", default=None)
    for flag, default in (("--id-col", "id"), ("--arm-col", None), ("--yhat-col", "y_hat"), ("--y-col", None),
                          ("--stratum-col", None), ("--strata-var", None)):
        m.add_argument(flag, default=default)
    m.add_argument("--feature-col", action="append", default=[])
    m.add_argument("--na-value", action="append", default=[])
    m.add_argument("--strata-q", type=int, default=4)
    m.add_argument("--budget", default="0.3N")
    m.add_argument("--min-floor", type=int, default=2)
    m.add_argument("--summary", action="store_true", help="with --repeats, print per-estimator summaries")
    _add_common(m)
    m.set_defaults(func=cmd_simulate)

    w = sub.add_parser("power", help="MDES against coding fraction")
    w.add_argument("--design", help="CSV with columns arm, stratum, N, resid_mean, resid_var, y_var")
    _add_columns(w)
    w._option_string_actions["--input"].required = False
    _add_common(w)
    w.add_argument("--alpha", type=float, default=0.05)
    w.add_argument("--power", type=float, default=0.80)
    w.add_argument("--h-grid", default="0.05:0.95:0.05")
    w.set_defaults(func=cmd_power)

    d = sub.add_parser("decompose", help="BS/WS decomposition for fully coded data")
    _add_columns(d)
    _add_common(d)
    d.add_argument("--alloc", help="CSV with columns arm, stratum, n")
    d.add_argument("--budget", default=None)
    d.add_argument("--min-floor", type=int, default=2)
    d.set_defaults(func=cmd_decompose)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"stratma: error: {exc}", file=sys.stderr)
        return 2
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    args.argv = argv
    if hasattr(args, "seed"):
        args.seed_given = args.seed is not None
        args.seed = 0 if args.seed is None else args.seed
    if hasattr(args, "seed") and not 0 <= args.seed < 2**64:
        print("stratma: error: --seed must be a 64-bit unsigned integer", file=sys.stderr)
        return 2
    try:
        code = args.func(args)
    except (StratmaError, ValueError, OSError, KeyError) as exc:
        print(f"stratma: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return int(code or 0)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
