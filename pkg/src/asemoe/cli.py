"""Command-line entry point.

Exit codes: 0 success, 1 config or usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, load_config
from .harness import SUITES, SuiteAborted, make_dataset, run_stl_baselines, run_suite, train
from .model import count_model_params
from .moe import ConfigError
from .telemetry import ActivationSink, write_heatmaps

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_help: str = "output directory") -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help=out_help)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asemoe", description="Adaptive shared experts in a LoRA mixture-of-experts multi-task learner.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("generate-data", help="write the synthetic dataset"), "output file (default <output.dir>/dataset_<seed>.json)")
    _common(sub.add_parser("train", help="STL-pretrain, freeze, train all tasks"))
    _common(sub.add_parser("stl-baseline", help="train the single-task reference models"))
    p = sub.add_parser("suite", help="run an ablation suite over several seeds")
    p.add_argument("name", choices=SUITES)
    p.add_argument("--seeds", type=int, help="number of seeds (default suite.seeds)")
    _common(p)
    p = sub.add_parser("export-heatmap", help="write heatmap CSVs from a run's telemetry.json")
    p.add_argument("telemetry")
    p.add_argument("--epoch", type=int, action="append", help="epoch to export (repeatable; default all)")
    p.add_argument("--out", help="output directory (default: next to telemetry.json)")
    _common(sub.add_parser("count-params", help="print closed-form parameter counts"))
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.with_overrides(**overrides).validate() if overrides else cfg


def _out_dir(args, cfg: ExperimentConfig, name: str) -> Path:
    return Path(args.out) if args.out else Path(cfg.output.dir) / f"{name}_seed{cfg.seed}"


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    path = Path(args.out) if args.out else Path(cfg.output.dir) / f"dataset_{cfg.seed}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    make_dataset(cfg).save(path)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, cfg.expert.variant)
    res = train(cfg, out)
    for t, m in sorted(res.metrics.items()):
        print(f"task {t}: r2 {m.value:.6f} (stl {res.stl_metrics[t].value:.6f})")
    print(f"delta_m {res.delta_m:+.4f}%")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_stl_baseline(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "stl")
    out.mkdir(parents=True, exist_ok=True)
    results = run_stl_baselines(cfg)
    blob = {"config": cfg.to_flat(), "metrics": {str(r.task): {"r2": r.metric.value, "lower_is_better": r.metric.lower_is_better} for r in results}}
    (out / "stl_metrics.json").write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")
    for r in results:
        print(f"task {r.task}: r2 {r.metric.value:.6f}")
    return EXIT_OK


def cmd_suite(args) -> int:
    cfg = _config(args)
    n = args.seeds if args.seeds is not None else cfg.suite.seeds
    if n < 1:
        raise ConfigError("--seeds must be at least 1")
    out = Path(args.out) if args.out else Path(cfg.output.dir) / args.name
    seeds = [cfg.seed + i for i in range(n)]
    report = run_suite(args.name, cfg, out, seeds, progress=lambda msg: print(msg, file=sys.stderr))
    for label in dict.fromkeys(r.label for r in report.rows):
        print(f"{label}: mean delta_m {report.mean_delta(label):+.4f}%")
    for c in report.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        for w in c.warnings:
            print(f"  warning: {w}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_export_heatmap(args) -> int:
    path = Path(args.telemetry)
    if not path.is_file():
        raise ConfigError(f"telemetry file not found: {path}")
    sink = ActivationSink.from_dict(json.loads(path.read_text()))
    out = Path(args.out) if args.out else path.parent
    for p in write_heatmaps(sink, out, args.epoch):
        print(p)
    return EXIT_OK


def cmd_count_params(args) -> int:
    cfg = _config(args)
    c = count_model_params(cfg)
    print(f"config {cfg.expert_config} variant {cfg.variant.value} d={cfg.model.d_in} L={cfg.model.depth} T={cfg.dataset.n_tasks}")
    print(f"expert params/layer {c.experts_per_layer}")
    print(f"router params/layer/task {c.routers_per_layer_per_task}")
    for key, value in c.as_dict().items():
        if key not in ("experts_per_layer", "routers_per_layer_per_task"):
            print(f"{key} {value}")
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "stl-baseline": cmd_stl_baseline,
    "suite": cmd_suite,
    "export-heatmap": cmd_export_heatmap,
    "count-params": cmd_count_params,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SuiteAborted, RuntimeError, ValueError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
