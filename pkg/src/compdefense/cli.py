"""Command line entry point: ``compdefense <command> [--config FILE] [--set section.key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, validate
from .evaluation import EvaluationReport
from .experiment import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_PARTIAL,
    Context,
    load_config,
    run_bpp,
    run_grid,
    run_overhead,
    write_outputs,
    _codecs,
    _models,
)

log = logging.getLogger("compdefense")

# Flag -> config key, so common settings need no --set.
FLAG_KEYS = {
    "seed": "experiment.seed",
    "output": "experiment.output",
    "dataset_path": "experiment.dataset_path",
    "dataset_format": "experiment.dataset_format",
    "photo_path": "experiment.photo_path",
    "eval_samples": "experiment.eval_samples",
    "archs": "models.archs",
    "epochs": "train.epochs",
    "attacks": "attacks.kinds",
    "epsilons": "attacks.epsilons",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compdefense", description="Compression defenses against gradient attacks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=Path, help="experiment INI file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable); applied after the file")
    common.add_argument("--seed", type=int)
    common.add_argument("--output", "-o")
    common.add_argument("--dataset-path")
    common.add_argument("--dataset-format", choices=("idx", "png_dirs"))
    common.add_argument("--photo-path")
    common.add_argument("--eval-samples", type=int)
    common.add_argument("--archs", help="comma separated")
    common.add_argument("--epochs", type=int)
    common.add_argument("--attacks", help="comma separated attack kinds")
    common.add_argument("--epsilons", help="comma separated, in units of 1/255")
    common.add_argument("--quiet", "-q", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "data": "write the desk IDX corpus and the photo PNG corpus",
        "train": "train classifiers and learned codecs, save checkpoints",
        "attack": "attack the undefended models over the budget grid",
        "evaluate": "full defense x attack x budget grid (+ sequential sweep)",
        "bpp": "bits-per-pixel of JPEG on the photo corpus and of the learned codecs",
        "overhead": "per-image latency with and without defenses",
        "plot": "render SVG figures from an existing report.json",
        "all": "evaluate, bpp, overhead and plot in one run",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text, description=text)
        if name == "data":
            sp.add_argument("--train-count", type=int, default=30000)
            sp.add_argument("--test-count", type=int, default=1000)
        if name == "plot":
            sp.add_argument("--report", type=Path, help="report.json (default: <output>/report.json)")
    return p


def _overrides(args) -> list:
    out = []
    for attr, key in FLAG_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            out.append(f"{key}={v}")
    return list(args.overrides) + out  # flags win over --set, both win over the file


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, _overrides(args))
        return _dispatch(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


def _dispatch(args, cfg) -> int:
    cmd = args.command
    if cmd == "data":
        from .corpus import write_desk_corpus, write_photo_corpus

        validate(cfg, needs_dataset=False)
        write_desk_corpus(cfg.dataset_path, args.train_count, args.test_count, cfg.seed)
        write_photo_corpus(cfg.photo_path)
        print(f"desk corpus -> {cfg.dataset_path}\nphoto corpus -> {cfg.photo_path}")
        return EXIT_OK
    if cmd == "plot":
        from .plots import emit_plots

        src = args.report or cfg.output / "report.json"
        if not Path(src).is_file():
            raise ConfigError(f"report not found: {src}")
        files = emit_plots(EvaluationReport.from_json(Path(src).read_text()), cfg.output / "plots")
        for f in files:
            print(f)
        return EXIT_OK

    validate(cfg, needs_dataset=True, needs_photos=cmd in ("bpp", "all"))
    ctx = Context(cfg)
    if cmd == "train":
        _models(ctx)
        if cfg.needs_codecs:
            _codecs(ctx)
        print(f"checkpoints in {ctx.ckpt_dir}")
        return EXIT_OK
    report = EvaluationReport()
    if cmd in ("attack", "evaluate", "all"):
        report = run_grid(ctx, attacks_only=cmd == "attack")
    if cmd in ("bpp", "all"):
        report.bpp = run_bpp(ctx)
    if cmd in ("overhead", "all") and cfg.overhead_enabled:
        report.overhead = run_overhead(ctx)
    write_outputs(ctx, report, plots=cmd == "all")
    print(f"outputs in {cfg.output}")
    if report.failures:
        for r in report.failures:
            print(f"failed cell: {r.model} {r.defense} {r.attack} budget={r.budget:g}: {r.error}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
