"""Command-line entry point: validate configs, run experiments, summarize.

Every experiment subcommand shares the same flags; the subcommand name
must match the `kind` declared in the config file, which guards against
running the wrong file. Exit code 0 means every ensemble member and
every declared invariant check passed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError
from .harness import ensemble_summary, load_config, run, validate_config
from .output import write_csv


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="TOML config file")
    parser.add_argument("--out", default=None, help="output directory "
                        "(overrides output.directory)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (fallback: SLOWCONE_THREADS)")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="replace ensemble.base_seed")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("SLOWCONE_THREADS")
    return max(1, int(env)) if env else 1


def _load_validated(args, expected_kind=None):
    raw = load_config(args.config)
    cfg = validate_config(raw)
    if expected_kind is not None and cfg.kind != expected_kind:
        raise ConfigError([
            f"kind: config declares {cfg.kind!r} but the"
            f" {expected_kind!r} subcommand was invoked"])
    return cfg


def _cmd_validate(args) -> int:
    try:
        cfg = _load_validated(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    json.dump(cfg.data, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _cmd_run(kind):
    def handler(args) -> int:
        try:
            cfg = _load_validated(args, expected_kind=kind)
        except ConfigError as exc:
            for problem in exc.problems:
                print(f"error: {problem}", file=sys.stderr)
            return 2
        report = run(cfg, threads=_threads(args),
                     seed_override=args.seed_override, out_dir=args.out)
        n_ok = sum(1 for m in report.members if m["status"] == "ok")
        print(f"{kind}: {n_ok}/{len(report.members)} members ok, "
              f"checks {'passed' if all(c['passed'] for c in report.checks) else 'FAILED'}, "
              f"report at {os.path.join(report.out_dir, 'report.json')}")
        for member in report.members:
            if member["status"] != "ok":
                print(f"  member {member['index']} failed: "
                      f"{member.get('error', '?')}", file=sys.stderr)
        return 0 if report.ok else 1
    return handler


def _cmd_summarize(args) -> int:
    """Aggregate one CSV column across member directories."""
    run_dir = args.run_dir
    members = sorted(d for d in os.listdir(run_dir)
                     if d.startswith("member_") and
                     os.path.isdir(os.path.join(run_dir, d)))
    series = []
    for member in members:
        path = os.path.join(run_dir, member, args.file)
        if not os.path.exists(path):
            continue
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            if args.column not in header:
                print(f"error: column {args.column!r} not in {path}",
                      file=sys.stderr)
                return 2
            tcol = header.index("t")
            vcol = header.index(args.column)
            times, values = [], []
            for line in fh:
                parts = line.strip().split(",")
                times.append(float(parts[tcol]))
                values.append(float(parts[vcol]))
        series.append((times, values))
    if not series:
        print("error: no member series found", file=sys.stderr)
        return 2
    rows = ensemble_summary(series)
    out = args.out or os.path.join(run_dir, "summary.csv")
    write_csv(out, ("t", "median", "q25", "q75", "n_members"), rows)
    print(f"wrote {out} ({len(rows)} rows, {len(series)} members)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="slowcone",
        description="disordered lattice boson dynamics experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_val = sub.add_parser("validate", help="check a config (dry run)")
    _add_common(p_val)
    p_val.set_defaults(handler=_cmd_validate)

    for kind, text in (("sudl", "one-body localization profiles"),
                       ("hartree", "Hartree flow and C2 mass scan"),
                       ("bogoliubov", "fluctuation fronts"),
                       ("exact", "exact Fock observables"),
                       ("scan", "velocity scan over disorder strengths")):
        p = sub.add_parser(kind, help=text)
        _add_common(p)
        p.set_defaults(handler=_cmd_run(kind))

    p_sum = sub.add_parser("summarize", help="median/quartiles across members")
    p_sum.add_argument("run_dir", help="directory holding member_XXX/")
    p_sum.add_argument("--file", default="fronts.csv",
                       help="per-member CSV name")
    p_sum.add_argument("--column", default="tr_gamma")
    p_sum.add_argument("--out", default=None)
    p_sum.set_defaults(handler=_cmd_summarize)

    args = parser.parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
