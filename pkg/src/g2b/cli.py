"""Command line entry point: ``g2b run | sweep | report | ablate-blocks``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure (including
missing data), 3 checkpoint/config mismatch on resume.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from g2b.cil import STRATEGIES, ConfigError
from g2b.harness import ExperimentConfig, ResumeMismatchError, RunRecord, load_record, run_experiment

logger = logging.getLogger("g2b")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_RESUME = 0, 1, 2, 3


def _parse_blocks(text: str) -> tuple[bool, ...] | None:
    if text.lower() in ("", "none", "all"):
        return None
    try:
        return tuple(bool(int(t)) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated 0/1 flags, got {text!r}") from None


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _optional_int(text: str) -> int | None:
    return None if text.lower() == "none" else int(text)


def _field_type(f: dataclasses.Field):
    if f.name == "enabled_side_blocks":
        return _parse_blocks
    if f.name == "max_rounds":
        return _optional_int
    default = f.default
    if isinstance(default, bool):
        return _parse_bool
    return type(default)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags below override its values")
    group = p.add_argument_group("config overrides")
    for f in dataclasses.fields(ExperimentConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_field_type(f), default=None)


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(ExperimentConfig)
        if getattr(args, f.name, None) is not None
    }
    try:
        return cfg.replace(**overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _run_one(config_dict: dict) -> dict:
    # module-level so it can be shipped to worker processes
    return run_experiment(ExperimentConfig.from_dict(config_dict)).to_dict()


def _run_many(configs: Sequence[ExperimentConfig], jobs: int) -> list[RunRecord]:
    dicts = [c.to_dict() for c in configs]
    if jobs <= 1:
        out = []
        for c in configs:
            logger.info("running %s -> %s", c.method, c.output_dir)
            out.append(run_experiment(c))
        return out
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return [RunRecord.from_dict(d) for d in pool.map(_run_one, dicts)]


def _run_name(c: ExperimentConfig) -> str:
    if not c.g2b:
        variant = "vanilla"
    elif c.enabled_side_blocks is None:
        variant = "g2b"
    else:
        variant = "g2b-" + "".join("1" if b else "0" for b in c.enabled_side_blocks)
    return f"{c.backbone}_{c.strategy}_{variant}_s{c.stream_seed}_i{c.init_seed}"


def sweep_configs(
    base: ExperimentConfig, strategies: Sequence[str], g2b: Sequence[bool], seeds: Sequence[int], root: Path
) -> list[ExperimentConfig]:
    configs = []
    for strategy, flag, seed in itertools.product(strategies, g2b, seeds):
        c = base.replace(strategy=strategy, g2b=flag, stream_seed=seed, init_seed=seed,
                         enabled_side_blocks=base.enabled_side_blocks if flag else None)
        configs.append(c.replace(output_dir=str(root / _run_name(c))))
    return configs


def ablation_configs(base: ExperimentConfig, n_blocks: int, seeds: Sequence[int], root: Path) -> list[ExperimentConfig]:
    """Vanilla plus side blocks 1..j enabled for every j."""
    patterns: list[tuple[bool, ...] | None] = [None]
    patterns += [tuple(i < j for i in range(n_blocks)) for j in range(1, n_blocks + 1)]
    configs = []
    for pattern, seed in itertools.product(patterns, seeds):
        c = base.replace(g2b=pattern is not None, enabled_side_blocks=pattern, stream_seed=seed, init_seed=seed)
        configs.append(c.replace(output_dir=str(root / _run_name(c))))
    return configs


def _csv_list(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def _cmd_run(args) -> int:
    cfg = _resolve_config(args)
    record = run_experiment(cfg, resume=not args.no_resume)
    print(f"{cfg.method} Avg {100 * record.avg:.2f} Last {100 * record.last:.2f}"
          + ("" if record.forgetting is None else f" F {record.forgetting:.4f}"))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from g2b.report import emit_report

    base = _resolve_config(args)
    strategies = _csv_list(args.strategies)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; choose from {sorted(STRATEGIES)}")
    g2b = {"both": [False, True], "on": [True], "off": [False]}[args.g2b_mode]
    seeds = [int(s) for s in _csv_list(args.seeds)]
    root = Path(args.output_root)
    records = _run_many(sweep_configs(base, strategies, g2b, seeds, root), args.jobs)
    written = emit_report(records, root / "report")
    for path in written["tables"] + written["plots"]:
        print(path)
    return EXIT_OK


def _cmd_report(args) -> int:
    from g2b.report import emit_ablation_report, emit_report

    records = []
    for p in map(Path, args.runs):
        if p.is_dir() and not (p / "record.json").exists():
            records += [load_record(r) for r in sorted(p.glob("*/record.json"))]
        else:
            records.append(load_record(p / "record.json" if p.is_dir() else p))
    if not records:
        raise ConfigError("no run records found")
    paths = emit_ablation_report(records, args.out) if args.ablation else sum(emit_report(records, args.out).values(), [])
    for path in paths:
        print(path)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from g2b.backbones import build_backbone
    from g2b.report import emit_ablation_report

    base = _resolve_config(args)
    n_blocks = build_backbone(base.backbone).num_blocks
    seeds = [int(s) for s in _csv_list(args.seeds)]
    root = Path(args.output_root)
    records = _run_many(ablation_configs(base, n_blocks, seeds, root), args.jobs)
    for path in emit_ablation_report(records, root / "report"):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="g2b", description="Class-incremental experiments with optional side-branch masking.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment (resumes from checkpoint if present)")
    _add_config_args(p)
    p.add_argument("--no-resume", action="store_true", help="ignore any existing checkpoint")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="strategy x g2b x seed grid, then report")
    _add_config_args(p)
    p.add_argument("--strategies", default="finetune,rehearsal,weight_aligning")
    p.add_argument("--g2b-mode", choices=("both", "on", "off"), default="both")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output-root", default="runs/sweep")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("report", help="tables and plots from finished runs")
    p.add_argument("runs", nargs="+", help="run directories, record.json files, or parents of run directories")
    p.add_argument("--out", default="report")
    p.add_argument("--ablation", action="store_true", help="emit the side-block ablation table instead")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("ablate-blocks", help="enable side blocks 1..j for every j, then report")
    _add_config_args(p)
    p.add_argument("--seeds", default="0")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output-root", default="runs/ablation")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; those are config errors here
        return EXIT_OK if exc.code in (0, None) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ResumeMismatchError as exc:
        print(f"resume mismatch: {exc}", file=sys.stderr)
        return EXIT_RESUME
    except Exception as exc:  # noqa: BLE001
        logger.debug("run failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
