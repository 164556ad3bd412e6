"""Command-line entry point: ``moeleak <stage> [--config PATH] [overrides]``.

Exit status is 0 on success, 2 on a configuration error and 3 when a stage
fails (missing inputs, malformed files, training divergence).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .moe import ConfigError

COMMANDS = harness.STAGES + ("ttest", "report", "run")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moeleak", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS, help="pipeline stage, 'run' for all stages, 'report' to aggregate")
    p.add_argument("--config", type=Path, help="INI experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--workers", type=int, help="processes for per-sample work")
    p.add_argument("--out", type=Path, help="run directory (for 'report': directory to aggregate)")
    p.add_argument("--channel", choices=harness.ALL_CHANNELS, help="restrict to one channel")
    p.add_argument("--contention", type=int, choices=range(5), metavar="{0..4}", help="co-tenant noise level")
    return p


def _config(args) -> harness.ExperimentConfig:
    over = dict(seed=args.seed, workers=args.workers, out=args.out, contention=args.contention,
                channels=(args.channel,) if args.channel else None)
    if args.config is None:
        return harness.parse_config("", **over)
    return harness.load_config(args.config, **over)


def _report(args) -> int:
    root = args.out or (_config(args).out if args.config else Path("runs"))
    rep = harness.aggregate_reports(root)
    rep.write(Path(root) / "summary.csv")
    sys.stdout.write(rep.to_csv())
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            return _report(args)
        cfg = _config(args)
        cfg.out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            rep = harness.run_pipeline(cfg)
        else:
            rep = harness.run_stage(cfg, args.command)
        if isinstance(rep, harness.Report):
            sys.stdout.write(rep.to_csv())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except harness.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
