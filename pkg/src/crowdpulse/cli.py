"""Command-line entry point: fit, simulate, gof, select, summarize.

Every run writes ``run_manifest.json`` with the content hashes of its
inputs, the seed, the package version, and the full flag set, so a run can
be reproduced bit-identically. Errors print one machine-parseable line
``ERROR <code>: <message>``; exit codes are 0 (success), 1 (usage),
2 (data error), 3 (numerical failure).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from importlib import metadata

import numpy as np

from . import estimate, gof, ingest, likelihood, simulate
from .errors import DataError, NumericalError
from .intensity import Params, derived_rates

logger = logging.getLogger("crowdpulse")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="crowdpulse",
                     description="Crowdfunding platform dynamics: estimation, "
                                 "simulation, and diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_table_flags(p):
        p.add_argument("--items", required=True, help="items.csv path")
        p.add_argument("--users", required=True, help="users.csv path")
        p.add_argument("--contributions", required=True, help="contributions.csv path")
        p.add_argument("--time-format", choices=("iso", "days"), default="iso")
        p.add_argument("--no-jitter", action="store_true",
                       help="input is already strictly ordered; skip tie-breaking noise")
        p.add_argument("--horizon", type=float, default=None,
                       help="override the observation end (days); default last event")

    def add_common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    p_fit = sub.add_parser("fit", help="maximum-likelihood fit of the full model")
    add_table_flags(p_fit)
    add_common(p_fit)
    p_fit.add_argument("--params", default=None,
                       help="JSON parameter file used as the starting point")
    p_fit.add_argument("--freeze", default="",
                       help="comma-separated parameter names held at their start values")
    p_fit.add_argument("--allow-nonconverged", action="store_true")

    p_sim = sub.add_parser("simulate", help="generate platform trajectories")
    add_common(p_sim)
    p_sim.add_argument("--params", required=True, help="JSON parameter file")
    p_sim.add_argument("--horizon", type=float, required=True)
    p_sim.add_argument("--reps", type=int, default=1)

    p_gof = sub.add_parser("gof", help="time-rescaling goodness-of-fit tests")
    add_table_flags(p_gof)
    add_common(p_gof)
    p_gof.add_argument("--params", required=True, help="JSON parameter file")

    p_sel = sub.add_parser("select", help="fit nested variants and rank by AIC")
    add_table_flags(p_sel)
    add_common(p_sel)
    p_sel.add_argument("--variants", default="full,const-gamma,psi-only,exp-decay")
    p_sel.add_argument("--allow-nonconverged", action="store_true")

    p_sum = sub.add_parser("summarize", help="descriptive dataset summaries")
    add_table_flags(p_sum)
    add_common(p_sum)
    return parser


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("crowdpulse")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_manifest(args, input_paths, outputs):
    payload = {
        "version": _version(),
        "command": args.command,
        "config": {k: v for k, v in sorted(vars(args).items())},
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads", None),
        "inputs": {str(p): _sha256(p) for p in input_paths},
        "outputs": sorted(outputs),
    }
    _write_json(os.path.join(args.out, "run_manifest.json"), payload)


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_params(path) -> Params:
    with open(path, encoding="utf-8") as fh:
        return Params.from_dict(json.load(fh))


def _ingest(args):
    tables = ingest.load_tables(args.items, args.users, args.contributions,
                                time_format=args.time_format)
    seed = None if args.no_jitter else args.seed
    log, report = ingest.jitter_and_merge(tables, seed=seed)
    if args.horizon is not None:
        from .events import EventLog

        log = EventLog(log.events, horizon=args.horizon)
    logger.info("ingested %d events (%s); repeat-pair contributions: %d",
                len(log), report.counts, report.repeat_pair_contributions)
    return log, report


def _cmd_fit(args):
    log, report = _ingest(args)
    stats = likelihood.build_sufficient_stats(log)
    init = _load_params(args.params) if args.params else None
    freeze = tuple(name for name in args.freeze.split(",") if name)
    opts = estimate.FitOptions(init=init, freeze=freeze)
    fit = estimate.fit_newton(stats, opts)
    logger.info("fit: converged=%s iterations=%d loglik=%.3f",
                fit.converged, fit.iterations, fit.loglik)
    payload = fit.to_dict()
    payload["ingest"] = {"counts": report.counts,
                         "repeat_pair_contributions": report.repeat_pair_contributions}
    payload["derived"] = derived_rates(fit.params)
    _write_json(os.path.join(args.out, "fit.json"), payload)
    _write_json(os.path.join(args.out, "params.json"), fit.params.to_dict())
    _write_manifest(args, [args.items, args.users, args.contributions],
                    ["fit.json", "params.json"])
    if not fit.converged and not args.allow_nonconverged:
        print("ERROR 3: fit did not converge (see fit.json; "
              "pass --allow-nonconverged to accept)", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_simulate(args):
    p = _load_params(args.params)
    cfg = simulate.SimConfig(horizon=args.horizon, seed=args.seed,
                             replications=args.reps)
    outputs = simulate.replicate(p, cfg, processes=max(args.threads, 1))
    written = []
    for out in outputs:
        rep_dir = os.path.join(args.out, f"rep{out.replication:03d}")
        os.makedirs(rep_dir, exist_ok=True)
        ingest.export_events(out.log, os.path.join(rep_dir, "events.csv"))
        ingest.write_tables(out.log,
                            os.path.join(rep_dir, "items.csv"),
                            os.path.join(rep_dir, "users.csv"),
                            os.path.join(rep_dir, "contributions.csv"))
        _write_json(os.path.join(rep_dir, "summary.json"), out.summary)
        written.append(f"rep{out.replication:03d}/events.csv")
        if out.cap_exceeded:
            logger.warning("replication %d hit the event cap; log truncated",
                           out.replication)
    bands = simulate.envelope(outputs)
    keys = [k for k in bands if k != "day"]
    with open(os.path.join(args.out, "envelope.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["day"] + keys)
        for i, day in enumerate(bands["day"]):
            writer.writerow([day] + [f"{bands[k][i]:.17g}" for k in keys])
    _write_manifest(args, [args.params], written + ["envelope.csv"])
    return EXIT_OK


def _cmd_gof(args):
    log, _ = _ingest(args)
    p = _load_params(args.params)
    report = gof.gof_report(p, log)
    _write_json(os.path.join(args.out, "gof.json"), {
        "contributions": int(report.transformed.size),
        "ks_exponential": {"statistic": report.ks_exponential[0],
                           "pvalue": report.ks_exponential[1]},
        "ks_lewis": {"statistic": report.ks_lewis[0],
                     "pvalue": report.ks_lewis[1]},
        "lag1_correlation": report.lag1_correlation,
        "constant_interarrivals": report.constant_interarrivals,
    })
    with open(os.path.join(args.out, "gof_series.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "t_star", "p_value", "v", "lewis_ratio"])
        k = report.transformed.size
        for r in range(1, k + 1):
            writer.writerow([
                r,
                f"{report.transformed[r - 1]:.17g}",
                f"{report.p_values[r - 2]:.17g}" if r >= 2 else "",
                f"{report.v_series[r - 1]:.17g}",
                f"{report.lewis_ratios[r - 1]:.17g}" if r < k else "",
            ])
    _write_manifest(args, [args.items, args.users, args.contributions, args.params],
                    ["gof.json", "gof_series.csv"])
    return EXIT_OK


def _cmd_select(args):
    log, _ = _ingest(args)
    stats = likelihood.build_sufficient_stats(log)
    tags = [t for t in args.variants.split(",") if t]
    unknown = [t for t in tags if t not in estimate.VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants: {unknown}; "
                         f"choose from {sorted(estimate.VARIANTS)}")
    ranked = estimate.select_models(stats, tags)
    with open(os.path.join(args.out, "selection.csv"), "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "n_params", "loglik", "aic", "bic", "converged"])
        for fit in ranked:
            writer.writerow([fit.variant, estimate.VARIANTS[fit.variant].n_params,
                             f"{fit.loglik_contribution:.17g}",
                             f"{fit.aic:.17g}", f"{fit.bic:.17g}", fit.converged])
    for fit in ranked:
        _write_json(os.path.join(args.out, f"fit_{fit.variant}.json"), fit.to_dict())
    _write_manifest(args, [args.items, args.users, args.contributions],
                    ["selection.csv"] + [f"fit_{f.variant}.json" for f in ranked])
    if not all(fit.converged for fit in ranked) and not args.allow_nonconverged:
        bad = [fit.variant for fit in ranked if not fit.converged]
        print(f"ERROR 3: variants did not converge: {bad}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_summarize(args):
    log, report = _ingest(args)
    summary = ingest.summarize(log)

    def write_rows(name, header, rows):
        with open(os.path.join(args.out, name), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)

    write_rows("users_by_item_count.csv", ["distinct_items", "users"],
               sorted(summary.users_by_item_count.items()))
    write_rows("contributions_per_item.csv", ["item_id", "contributions"],
               sorted(summary.contributions_per_item.items()))
    write_rows("first_contribution_survival.csv", ["days_since_registration", "survival"],
               [(f"{t:.17g}", f"{s:.17g}") for t, s in summary.first_contribution_survival])
    write_rows("daily_counts.csv", ["day", "active_items", "new_users", "contributions"],
               [(day, row["active_items"], row["new_users"], row["contributions"])
                for day, row in sorted(summary.daily.items())])
    write_rows("popularity.csv", ["time_days", "item_id", "popularity"],
               [(f"{t:.17g}", item, f"{pop:.17g}")
                for t, item, pop in summary.popularity_rows])
    _write_json(os.path.join(args.out, "ingest_report.json"), {
        "counts": report.counts,
        "repeat_pair_contributions": report.repeat_pair_contributions,
        "ties_repaired": report.ties_repaired,
        "dropped_rows": report.dropped_rows,
        "time_origin": report.time_origin,
        "jitter_seed": report.jitter_seed,
    })
    _write_manifest(args, [args.items, args.users, args.contributions],
                    ["users_by_item_count.csv", "contributions_per_item.csv",
                     "first_contribution_survival.csv", "daily_counts.csv",
                     "popularity.csv", "ingest_report.json"])
    return EXIT_OK


_COMMANDS = {
    "fit": _cmd_fit,
    "simulate": _cmd_simulate,
    "gof": _cmd_gof,
    "select": _cmd_select,
    "summarize": _cmd_summarize,
}


def dispatch(argv) -> int:
    """Parse argv, run one subcommand, and map failures to exit codes."""
    level = LOG_LEVELS.get(os.environ.get("CROWDPULSE_LOG", "warn").lower(),
                           logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ERROR 1: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"ERROR 2: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"ERROR 3: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
