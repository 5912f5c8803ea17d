"""Command-line entry point: ``orbsync synthesize | simulate | check``.

Exit codes: 0 success, 1 usage or configuration error, 2 validation
failure, 3 runtime divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .artifacts import config_hash, file_hash, write_json
from .errors import ConfigError, NonFiniteState, OrbSyncError, OutOfTube
from .pipeline import (check_synthesis, load_config, load_synthesis, read_synthesis_doc, save_synthesis,
                       scenario_from_config, synthesize)
from .sim import run_multi, run_single

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VALIDATION = 2
EXIT_DIVERGED = 3

log = logging.getLogger("orbsync")


def _summary(checks: dict) -> dict:
    return {name: bool(c["passed"]) for name, c in checks.items()}


def _manifest(out: Path, cfg_hash: str, outputs, started: float, checks: dict, extra=None) -> None:
    doc = {
        "config_hash": cfg_hash,
        "toolkit_version": __version__,
        "outputs": {name: file_hash(out / name) for name in outputs},
        "timing": {"wall_seconds": time.time() - started},
        "checks": _summary(checks),
    }
    if extra:
        doc.update(extra)
    write_json(out / "manifest.json", doc)


def cmd_synthesize(config_path, out_dir) -> int:
    started = time.time()
    cfg = load_config(config_path)
    syn = synthesize(cfg["synthesis"])
    out = Path(out_dir)
    files = save_synthesis(syn, out)
    checks = syn.report["checks"]
    for name, c in checks.items():
        log.info("check %-22s %-5s value=%s threshold=%s", name, "ok" if c["passed"] else "FAIL",
                 c["value"], c["threshold"])
    for err in syn.report.get("errors", []):
        log.warning("%s", err)
    _manifest(out, config_hash(cfg["synthesis"]), sorted(files) + ["synthesis.json"], started, checks,
              {"command": "synthesize", "weights": syn.report.get("weights"),
               "augmented_weights": syn.report.get("augmented_weights")})
    if not syn.passed:
        failed = [n for n, c in checks.items() if not c["passed"]]
        print(f"validation failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_simulate(config_path, synthesis_dir, out_dir) -> int:
    started = time.time()
    cfg = load_config(config_path)
    if "scenario" not in cfg:
        raise ConfigError("config lacks a 'scenario' section")
    doc = read_synthesis_doc(synthesis_dir)
    want = config_hash(cfg["synthesis"])
    if doc["config_hash"] != want:
        raise ConfigError(f"synthesis in {synthesis_dir} was built from a different config "
                          f"({doc['config_hash'][:12]} != {want[:12]})")
    scenario = scenario_from_config(cfg["scenario"])
    syn = load_synthesis(synthesis_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = run_single if len(scenario.agents) == 1 else run_multi
    status, message = "completed", None
    try:
        trace = run(syn, scenario)
    except (OutOfTube, NonFiniteState) as exc:
        status, message = "diverged", str(exc)
        trace = None
    outputs = []
    if trace is not None:
        trace.to_csv(out / "trace.csv")
        outputs.append("trace.csv")
        log.info("wrote %d trace rows", len(trace))
    _manifest(out, config_hash(cfg), outputs, started, {},
              {"command": "simulate", "synthesis_hash": doc["config_hash"], "status": status,
               "error": message})
    if trace is None:
        print(f"simulation diverged: {message}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_check(synthesis_dir, out_dir=None) -> int:
    started = time.time()
    checks, warnings = check_synthesis(synthesis_dir)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    for name, c in checks.items():
        log.info("check %-22s %-5s value=%s threshold=%s", name, "ok" if c["passed"] else "FAIL",
                 c["value"], c["threshold"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "check.json", {"checks": checks, "warnings": warnings})
        doc = read_synthesis_doc(synthesis_dir)
        _manifest(out, doc["config_hash"], ["check.json"], started, checks, {"command": "check"})
    failed = [n for n, c in checks.items() if not c["passed"]]
    if failed:
        print(f"validation failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orbsync", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synthesize", help="build gains and sliding surface from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("simulate", help="run the scenario of a config against stored artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--synthesis", required=True)
    p.add_argument("--out", required=True)
    p = sub.add_parser("check", help="re-run the validation checks on stored artifacts")
    p.add_argument("--synthesis", required=True)
    p.add_argument("--out")
    for p in sub.choices.values():
        p.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "synthesize":
            return cmd_synthesize(args.config, args.out)
        if args.command == "simulate":
            return cmd_simulate(args.config, args.synthesis, args.out)
        return cmd_check(args.synthesis, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OutOfTube, NonFiniteState) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OrbSyncError as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
