"""Command line: run, serve, validate, metrics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .harness import ConfigInvalid, ScenarioConfig


def _config(path: str | None, **overrides) -> ScenarioConfig:
    if path:
        return ScenarioConfig.load(path, **overrides)
    d = {k: v for k, v in overrides.items() if v is not None}
    return ScenarioConfig.from_dict(d)


def cmd_run(args) -> int:
    overrides = {"kind": args.scenario, "seed": args.seed, "out_dir": args.out}
    if args.realtime:
        overrides["realtime"] = True
    if args.multi_process:
        overrides["deployment"] = "multi-process"
    cfg = _config(args.config, **overrides)
    record, metrics = harness.run_scenario(cfg)
    sys.stdout.write(harness.format_metrics(metrics))
    if cfg.out_dir:
        print(f"wrote {len(record)} rows to {Path(cfg.out_dir) / 'record.csv'}")
    return 0


def cmd_serve(args) -> int:
    cfg = _config(args.config)
    harness.serve_ri(args.namespace, cfg, port=args.port, cloud_url=args.cloud, host=args.host)
    return 0


def cmd_validate(args) -> int:
    cfg = _config(args.config, kind=args.scenario)
    print(f"config ok: kind={cfg.kind} duration_s={cfg.duration_s:g} dt_s={cfg.dt_s:g} "
          f"rate_hz={cfg.rate_hz:g} seed={cfg.seed}")
    print(f"sha256={cfg.config_hash()}")
    print(cfg.grid_model().describe())
    return 0


def cmd_metrics(args) -> int:
    record = harness.RunRecord.read(args.record)
    sys.stdout.write(harness.format_metrics(harness.compute_metrics(record)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mescosim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--scenario", choices=["overvoltage", "undervoltage"])
    r.add_argument("--config")
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--realtime", action="store_true", help="pace ticks at wall-clock speed")
    r.add_argument("--multi-process", action="store_true",
                   help="one process per RI plus a cloud process, over loopback HTTP")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("serve", help="host one RI namespace (or 'cloud') behind the uAPI")
    s.add_argument("--namespace", required=True)
    s.add_argument("--config")
    s.add_argument("--port", type=int, default=0)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--cloud", help="cloud node base URL (required for RI namespaces)")
    s.set_defaults(func=cmd_serve)

    v = sub.add_parser("validate", help="check a config and print the grid tree")
    v.add_argument("--config")
    v.add_argument("--scenario", choices=["overvoltage", "undervoltage"])
    v.set_defaults(func=cmd_validate)

    m = sub.add_parser("metrics", help="recompute metrics from a record.csv")
    m.add_argument("--record", required=True)
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
