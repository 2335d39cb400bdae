"""Command-line experiment runner.

Subcommands: ``run`` (full pipeline), ``validate`` (config check, all
violations), ``synth`` (emit a synthetic dataset as CSV), ``report``
(re-render verdict, tables and figures from stored artifacts).

Exit codes: 0 clean pass, 2 configuration error, 3 runtime error,
4 privacy-audit failure, 5 delta-criterion failure (with --enforce-delta).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import reporting
from .config import load_config, validate_config
from .data import generate_synthetic, write_dataset_csv
from .errors import ConfigurationError, FedRecSimError, PrivacyViolationError
from .evaluation import MetricsReport, delta_precision_report
from .experiment import SEED_DATA, derive_seed, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_AUDIT = 4
EXIT_DELTA = 5


def _load_validated(path, seed_override):
    cfg = validate_config(path)
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override)
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = _load_validated(args.config, args.seed)
    except ConfigurationError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg, args.out)
    except PrivacyViolationError as exc:
        print(f"privacy audit failed: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except ConfigurationError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedRecSimError, OSError) as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    v = result.verdict
    print(f"rounds executed:       {result.rounds_executed}")
    print(f"candidate/full bytes:  {result.communication['ratio']:.4f} "
          f"(K/M = {result.communication['k_over_m']:.4f})")
    print(f"{v.primary_metric}: FL={v.fl_primary:.4f}  Sum={v.sum_primary:.4f}  "
          f"gap={v.gap_primary:.4f} (threshold {v.delta_threshold})")
    print(f"mean local baseline:   {v.mean_local_primary:.4f}  "
          f"FL beats {v.validity_fraction:.0%} of clients")
    print(f"delta criterion:       {'pass' if v.delta_pass else 'FAIL'}")
    print(f"artifacts under:       {result.outdir}")
    if args.enforce_delta and not v.delta_pass:
        print("delta criterion enforced and not met", file=sys.stderr)
        return EXIT_DELTA
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        _, problems = load_config(args.config)
    except ConfigurationError as exc:
        problems = exc.violations
    if problems:
        for violation in problems:
            print(f"violation: {violation}")
        print(f"{len(problems)} violation(s) found")
        return EXIT_CONFIG
    print("config OK")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        cfg = _load_validated(args.config, args.seed)
    except ConfigurationError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.synth is None:
        print("config error: synth requires a dataset.synthetic section", file=sys.stderr)
        return EXIT_CONFIG
    try:
        dataset = generate_synthetic(cfg.synth, derive_seed(cfg.seed, SEED_DATA))
        paths = write_dataset_csv(dataset, args.out)
    except (FedRecSimError, OSError) as exc:
        print(f"synth failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.artifacts)
    out = Path(args.out) if args.out else src
    try:
        p_fl = MetricsReport.from_dict(json.loads((src / "metrics_FL.json").read_text()))
        p_sum = MetricsReport.from_dict(json.loads((src / "metrics_Sum.json").read_text()))
        p_pub = MetricsReport.from_dict(
            json.loads((src / "metrics_PublicOnly.json").read_text())
        )
        local_blob = json.loads((src / "metrics_Local.json").read_text())
        p_locals = [MetricsReport.from_dict(d) for d in local_blob["per_client"]]
        p_local = MetricsReport.from_dict(local_blob["combined"])
        stored_verdict = json.loads((src / "verdict.json").read_text())
        round_dicts = reporting.read_jsonl(src / "rounds.jsonl")
    except (OSError, KeyError, ValueError) as exc:
        print(f"cannot read artifacts from {src}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        verdict = delta_precision_report(
            p_sum, p_fl, p_locals, stored_verdict["delta_threshold"]
        )
        out.mkdir(parents=True, exist_ok=True)
        reporting.write_json(out / "verdict.json", verdict.to_dict())
        ordered = [p_fl, p_sum, p_pub, p_local]
        reporting.write_metrics_csv(out / "metrics.csv", ordered)
        reporting.write_rounds_csv(out / "rounds.csv", round_dicts)
        reporting.render_figures(
            out / "figures", round_dicts, ordered, p_fl.primary_k,
            verdict.delta_threshold,
        )
    except FedRecSimError as exc:
        print(f"report failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{verdict.primary_metric}: FL={verdict.fl_primary:.4f}  "
          f"Sum={verdict.sum_primary:.4f}  gap={verdict.gap_primary:.4f} "
          f"({'pass' if verdict.delta_pass else 'FAIL'})")
    print(f"re-rendered verdict, tables and figures under {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrecsim",
        description="Federated recommender pipeline simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a full experiment")
    p_run.add_argument("--config", required=True, help="experiment config file (YAML)")
    p_run.add_argument("--out", required=True, help="output directory for artifacts")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument(
        "--enforce-delta", action="store_true",
        help="exit nonzero when the precision-loss criterion fails",
    )
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", help="validate a config file, listing every violation")
    p_val.add_argument("--config", required=True)
    p_val.set_defaults(func=cmd_validate)

    p_synth = sub.add_parser("synth", help="emit a synthetic dataset to CSV")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_rep = sub.add_parser("report", help="re-render a verdict from stored artifacts")
    p_rep.add_argument("--artifacts", required=True, help="directory with a prior run's output")
    p_rep.add_argument("--out", default=None, help="where to write (default: artifacts dir)")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
