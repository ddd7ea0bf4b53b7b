"""Command-line front end: run experiments, compare finished runs.

Exit codes: 0 on success, 1 on configuration errors, 2 when a runtime
invariant check fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from collections import defaultdict
from pathlib import Path

from .errors import ConfigError, InvariantViolation
from .orchestrator import RoundMetrics, SimConfig, run_simulation, run_vanilla_fl
from .presets import PRESETS, apply_overrides, get_preset
from .validation import suggest_threshold

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2

OUT_DIR_ENV = "VBFL_OUT"
CALIBRATION_FILE = "vh_calibration.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbfl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--preset", choices=sorted(PRESETS), help="named experiment setup")
    run_p.add_argument("--config", type=Path, help="JSON config file (one experiment)")
    run_p.add_argument("--rounds", type=int, help="communication rounds")
    run_p.add_argument("--seed", type=int, help="master seed")
    run_p.add_argument("--vh", type=float, help="validator threshold")
    run_p.add_argument("--vh-file", type=Path, help="calibration file with suggested_vh")
    run_p.add_argument("--consensus", choices=("pos", "pow"))
    run_p.add_argument("--pow-difficulty", type=int)
    run_p.add_argument("--malicious", type=int, help="number of malicious devices")
    run_p.add_argument(
        "--validation-scheme",
        choices=("voting", "legacy"),
        help="legacy reproduces the discarded global-model-reference check",
    )
    run_p.add_argument(
        "--out",
        type=Path,
        default=None,
        help=f"output directory (default: ${OUT_DIR_ENV} or ./runs/<name>)",
    )
    run_p.add_argument("--quiet", action="store_true", help="suppress per-round lines")

    cmp_p = sub.add_parser("compare", help="summarize two or more finished runs")
    cmp_p.add_argument("dirs", nargs="+", type=Path, help="run output directories")
    return parser


def _load_config_file(path: Path) -> SimConfig:
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: not valid JSON: {exc}") from None
    return SimConfig.from_dict(data)


def _read_vh_file(path: Path) -> float:
    try:
        return float(json.loads(path.read_text())["suggested_vh"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"vh-file: cannot read suggested_vh from {path}: {exc}") from None


def _resolve_vh(args, allow_cwd_lookup: bool) -> float | None:
    """Explicit --vh/--vh-file always win; the implicit vh_calibration.json
    in the working directory only feeds presets that need calibration."""
    if args.vh is not None:
        return args.vh
    if args.vh_file is not None:
        if not args.vh_file.exists():
            raise ConfigError(f"vh-file: file not found: {args.vh_file}")
        return _read_vh_file(args.vh_file)
    if allow_cwd_lookup:
        implicit = Path.cwd() / CALIBRATION_FILE
        if implicit.exists():
            return _read_vh_file(implicit)
    return None


def _default_out_dir(name: str, seed: int) -> Path:
    root = os.environ.get(OUT_DIR_ENV)
    base = Path(root) if root else Path.cwd() / "runs"
    return base / f"{name.lower()}-seed{seed}"


def _round_line(m: RoundMetrics) -> str:
    winner = m.winner.hex()[:8] if m.winner else "-"
    return (
        f"round {m.round:3d}  acc={m.global_accuracy:.4f}  winner={winner:<8}  "
        f"malicious={int(m.winner_malicious)}  forked={int(m.forked)}"
        + ("  [skipped: " + m.skip_reason + "]" if m.skipped else "")
    )


def _cmd_run(args) -> int:
    if (args.preset is None) == (args.config is None):
        raise ConfigError("preset: give exactly one of --preset or --config")
    needs_calibration = args.preset is not None and get_preset(args.preset).requires_vh
    vh = _resolve_vh(args, allow_cwd_lookup=needs_calibration)
    if args.preset is not None:
        preset = get_preset(args.preset)
        if preset.requires_vh and vh is None:
            raise ConfigError(
                f"vh: preset {preset.name} needs a calibrated threshold; run "
                f"CALIBRATE_VH first and pass --vh or --vh-file (or put "
                f"{CALIBRATION_FILE} in the working directory)"
            )
        config = apply_overrides(
            preset,
            rounds=args.rounds,
            seed=args.seed,
            vh=vh,
            consensus=args.consensus,
            pow_difficulty=args.pow_difficulty,
            malicious=args.malicious,
            validation_scheme=args.validation_scheme,
        )
        mode = preset.mode
        name = preset.name
    else:
        config = _load_config_file(args.config)
        overrides = {}
        if args.rounds is not None:
            overrides["rounds"] = args.rounds
        if args.seed is not None:
            overrides["master_seed"] = args.seed
        if vh is not None:
            overrides["vh"] = vh
        if args.consensus is not None:
            overrides["consensus"] = args.consensus
        if args.pow_difficulty is not None:
            overrides["pow_difficulty"] = args.pow_difficulty
        if args.malicious is not None:
            overrides["malicious"] = tuple(
                range(config.n_devices - args.malicious, config.n_devices)
            )
        if args.validation_scheme is not None:
            overrides["validation_scheme"] = args.validation_scheme
        if overrides:
            config = SimConfig.from_dict({**config.to_dict(), **overrides})
        mode = "vbfl"
        name = args.config.stem
    out_dir = args.out or _default_out_dir(name, config.master_seed)
    progress = None if args.quiet else lambda m: print(_round_line(m))
    runner = run_vanilla_fl if mode == "vanilla" else run_simulation
    result = runner(config, out_dir=out_dir, preset=name, progress=progress)
    if args.preset == "CALIBRATE_VH":
        suggestion = suggest_threshold(result.driver.vad_records)
        path = Path(out_dir) / CALIBRATION_FILE
        path.write_text(json.dumps(suggestion, sort_keys=True, indent=2) + "\n")
        print(f"suggested vh: {suggestion['suggested_vh']:.4f} (written to {path})")
    print(f"done: {len(result.metrics)} rounds, outputs in {out_dir}")
    return EXIT_OK


def _read_run(path: Path) -> dict:
    manifest_path = path / "manifest.json"
    rounds_path = path / "rounds.csv"
    if not manifest_path.exists() or not rounds_path.exists():
        raise ConfigError(f"compare: {path} is not a finished run directory")
    manifest = json.loads(manifest_path.read_text())
    with rounds_path.open() as fh:
        rows = list(csv.DictReader(fh))
    expected = {"round", "consensus", "winner", "winner_malicious", "forked", "global_accuracy"}
    if rows and set(rows[0]) != expected:
        raise ConfigError(f"compare: {path}/rounds.csv has an incompatible schema")
    if not rows:
        raise ConfigError(f"compare: {path}/rounds.csv is empty")
    return {
        "path": path,
        "label": manifest.get("preset") or manifest.get("mode", "run"),
        "seed": manifest["config"]["master_seed"],
        "final_accuracy": float(rows[-1]["global_accuracy"]),
        "malicious_winner_rounds": sum(int(r["winner_malicious"]) for r in rows),
        "forked_rounds": sum(int(r["forked"]) for r in rows),
        "rounds": len(rows),
    }


def _cmd_compare(args) -> int:
    if len(args.dirs) < 2:
        raise ConfigError("compare: need at least two run directories")
    runs = [_read_run(p) for p in args.dirs]
    groups: dict[str, list[dict]] = defaultdict(list)
    for run in runs:
        groups[run["label"]].append(run)

    def mean(xs):
        return sum(xs) / len(xs)

    def std(xs):
        mu = mean(xs)
        return (sum((x - mu) ** 2 for x in xs) / len(xs)) ** 0.5

    print(f"{'group':<28} {'runs':>4} {'final acc':>18} {'mal-winner rounds':>18}")
    summary = {}
    for label in sorted(groups):
        accs = [r["final_accuracy"] for r in groups[label]]
        mal = [r["malicious_winner_rounds"] for r in groups[label]]
        summary[label] = mean(accs)
        print(
            f"{label:<28} {len(accs):>4} "
            f"{mean(accs):>10.4f} ± {std(accs):.4f} "
            f"{mean(mal):>14.1f}"
        )
    labels = sorted(summary)
    if len(labels) > 1:
        print("\nfinal-accuracy ratios (row / column):")
        print(" " * 28 + "".join(f"{l[:12]:>14}" for l in labels))
        for a in labels:
            cells = []
            for b in labels:
                ratio = summary[a] / summary[b] if summary[b] else float("inf")
                cells.append(f"{ratio:>14.2f}")
            print(f"{a:<28}" + "".join(cells))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
