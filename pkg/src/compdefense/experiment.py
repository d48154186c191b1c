"""Orchestration of the full protocol: data, training, grids, BPP, timing, plots."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import checkpoint
from .attacks import AttackConfig
from .classifier import TrainConfig, build_model, train
from .config import ConfigError, ExperimentConfig, l2_kinds, linf_kinds, parse, read_config, validate
from .data import DatasetError, LabeledDataset, atomic_write_text, load_dataset, load_png_corpus
from .defense import DefenseConfig
from .evaluation import EvaluationReport, cell_seed, evaluate, measure_overhead
from .jpeg import bpp as jpeg_bpp
from .learned import CodecTrainConfig, build_codec, codec_rate, reconstruction_mse, train_codec

log = logging.getLogger("compdefense")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


@dataclass
class Context:
    cfg: ExperimentConfig
    train_set: LabeledDataset | None = None
    test_set: LabeledDataset | None = None
    models: dict = field(default_factory=dict)
    codecs: dict = field(default_factory=dict)

    @property
    def ckpt_dir(self) -> Path:
        return self.cfg.output / "checkpoints"


def load_config(path=None, overrides=()) -> ExperimentConfig:
    cp = read_config(path, overrides)
    base = Path(path).resolve().parent if path is not None else Path.cwd()
    return parse(cp, base)


def _datasets(ctx: Context) -> None:
    cfg = ctx.cfg
    if ctx.test_set is not None:
        return
    try:
        ctx.train_set = load_dataset(cfg.dataset_format, cfg.dataset_path, "train")
        test = load_dataset(cfg.dataset_format, cfg.dataset_path, "test")
    except DatasetError as e:
        raise ConfigError(str(e)) from e
    ctx.test_set = test.subset(cfg.eval_samples)
    log.info("train %d / test %d images of shape %s", len(ctx.train_set), len(ctx.test_set), ctx.test_set.input_spec)


def _models(ctx: Context, allow_train: bool = True) -> None:
    cfg = ctx.cfg
    _datasets(ctx)
    for arch in cfg.archs:
        if arch in ctx.models:
            continue
        sources = [cfg.checkpoint_dir / f"{arch}.rprs"] if cfg.checkpoint_dir else [ctx.ckpt_dir / f"{arch}.rprs"]
        found = [p for p in sources if p.is_file()]
        if found:
            log.info("loading %s from %s", arch, found[0])
            ctx.models[arch] = checkpoint.load_model(found[0], arch)
            continue
        if not allow_train:
            raise ConfigError(f"no checkpoint for {arch}; run the train step first")
        tr = cfg.train_for(arch)
        data = ctx.train_set.subset(tr["train_samples"]) if tr["train_samples"] else ctx.train_set
        model = build_model(arch, data.num_classes, data.input_spec, cell_seed(cfg.seed, "init", arch))
        tcfg = TrainConfig(tr["epochs"], tr["batch_size"], tr["learning_rate"], cell_seed(cfg.seed, "train", arch),
                           tr["optimizer"], schedule=tr["schedule"])
        log.info("training %s on %d images", arch, len(data))
        train(model, data, tcfg, log=log.info)
        checkpoint.save_model(model, ctx.ckpt_dir / f"{arch}.rprs")
        ctx.models[arch] = model


def _codec_path(ctx: Context, lam: float) -> Path:
    return ctx.ckpt_dir / f"learned_codec_{lam:g}.rprs"


def _codecs(ctx: Context) -> None:
    cfg = ctx.cfg
    _datasets(ctx)
    c = cfg.codec
    for lam in c["lambdas"]:
        if lam in ctx.codecs:
            continue
        path = (cfg.checkpoint_dir or ctx.ckpt_dir) / f"learned_codec_{lam:g}.rprs"
        if path.is_file():
            ctx.codecs[lam] = checkpoint.load_codec(path)
            continue
        corpus = ctx.train_set.images[: c["train_samples"] or None]
        codec = build_codec(lam, ctx.train_set.input_spec, cell_seed(cfg.seed, "codec-init", lam))
        tcfg = CodecTrainConfig(c["epochs"], c["batch_size"], c["learning_rate"], cell_seed(cfg.seed, "codec-train", lam))
        train_codec(codec, corpus, tcfg, log=log.info)
        checkpoint.save_codec(codec, _codec_path(ctx, lam))
        ctx.codecs[lam] = codec


def defense_grid(ctx: Context) -> list:
    cfg = ctx.cfg
    out = [DefenseConfig("none")] if cfg.include_none else []
    for through in cfg.through:
        for q in cfg.jpeg_qualities:
            out.append(DefenseConfig("jpeg", q, 1, through, exact_eval=cfg.exact_eval))
        for lam in cfg.learned_lambdas:
            out.append(DefenseConfig("learned", lam, 1, through, model=ctx.codecs[lam]))
    return out


def _merge(dst: EvaluationReport, src: EvaluationReport) -> None:
    seen = {_key(r) for r in dst.rows}
    for r in src.rows:
        if _key(r) not in seen:
            dst.rows.append(r)
            seen.add(_key(r))
    dst.clean.update(src.clean)
    for k, v in src.metadata.items():
        if isinstance(v, dict):
            dst.metadata.setdefault(k, {}).update(v)


def _key(r):
    return (r.model, r.defense, r.quality, r.iterations, r.through, r.attack, r.budget)


def run_grid(ctx: Context, attacks_only: bool = False) -> EvaluationReport:
    cfg = ctx.cfg
    _models(ctx)
    if cfg.learned_lambdas and not attacks_only:
        _codecs(ctx)
    defenses = [DefenseConfig("none")] if attacks_only else defense_grid(ctx)
    report = EvaluationReport(metadata={"seed": cfg.seed, "dataset": str(cfg.dataset_path), "samples": len(ctx.test_set)})
    linf = [AttackConfig(k) for k in linf_kinds(cfg)]
    l2 = [AttackConfig(k) for k in l2_kinds(cfg)]
    if defenses:
        if linf or not l2:
            part = evaluate(ctx.models, defenses, linf, cfg.linf_budgets or [0.0], ctx.test_set, cfg.seed, cfg.batch_size, log.info)
            _merge(report, part)
        if l2:
            sub = ctx.test_set.subset(cfg.l2_samples)
            part = evaluate(ctx.models, defenses, l2, cfg.l2_thresholds, sub, cfg.seed, cfg.batch_size, log.info)
            _merge(report, part)
    if cfg.sequential_iterations and not attacks_only:
        seq = [DefenseConfig("jpeg", cfg.sequential_quality, n, True) for n in cfg.sequential_iterations]
        budgets = [0.0] + [e / 255 for e in cfg.sequential_epsilons]
        part = evaluate(ctx.models, seq, [AttackConfig("ifgsm")], budgets, ctx.test_set, cfg.seed, cfg.batch_size, log.info)
        _merge(report, part)
    return report


def run_bpp(ctx: Context) -> list:
    cfg = ctx.cfg
    out = []
    photos = load_png_corpus(cfg.photo_path)
    for q in cfg.bpp_qualities:
        out.append({"codec": "jpeg", "quality": q, "bpp": jpeg_bpp(photos, q), "corpus": "photos", "images": len(photos)})
    if cfg.codec["lambdas"]:
        _codecs(ctx)
        x = ctx.test_set.images
        for lam in cfg.codec["lambdas"]:
            c = ctx.codecs[lam]
            out.append({"codec": "learned", "quality": lam, "bpp": codec_rate(c, x), "mse": reconstruction_mse(c, x),
                        "corpus": "desk", "images": len(x)})
    return out


def run_overhead(ctx: Context) -> list:
    cfg = ctx.cfg
    _models(ctx)
    arch = cfg.archs[0]
    q = cfg.jpeg_qualities[0] if cfg.jpeg_qualities else cfg.sequential_quality
    defs = [DefenseConfig("jpeg", q, n) for n in cfg.overhead_iterations]
    if cfg.learned_lambdas:
        _codecs(ctx)
        defs += [DefenseConfig("learned", lam, 1, model=ctx.codecs[lam]) for lam in cfg.learned_lambdas]
    rows = measure_overhead(ctx.models[arch], defs, ctx.test_set.subset(cfg.overhead_samples))
    for r in rows:
        r["model"] = arch
    return rows


def _table_csv(rows: list, columns: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else r[c]) for c in columns])
    return buf.getvalue()


def write_outputs(ctx: Context, report: EvaluationReport, plots: bool = True) -> None:
    out = ctx.cfg.output
    out.mkdir(parents=True, exist_ok=True)
    report.metadata["config"] = ctx.cfg.source
    report.write(out / "report.csv", out / "report.json")
    if report.bpp:
        atomic_write_text(out / "bpp.csv", _table_csv(report.bpp, ["codec", "quality", "bpp", "mse", "corpus", "images"]))
    if report.overhead:
        cols = ["model", "defense", "quality", "iterations", "images", "per_image_ms", "total_s"]
        atomic_write_text(out / "overhead.csv", _table_csv(report.overhead, cols))
    if plots:
        from .plots import emit_plots

        emit_plots(report, out / "plots")


def run_experiment(config_path=None, overrides=(), steps=("grid", "bpp", "overhead", "plots")) -> tuple:
    """Run the configured protocol and write every output; returns ``(report, exit_code)``."""
    cfg = load_config(config_path, overrides)
    validate(cfg, needs_dataset=True, needs_photos="bpp" in steps)
    ctx = Context(cfg)
    report = run_grid(ctx) if "grid" in steps else EvaluationReport()
    if "bpp" in steps:
        report.bpp = run_bpp(ctx)
    if "overhead" in steps and cfg.overhead_enabled:
        report.overhead = run_overhead(ctx)
    write_outputs(ctx, report, plots="plots" in steps)
    code = EXIT_PARTIAL if report.failures else EXIT_OK
    if report.failures:
        log.warning("%d grid cells failed", len(report.failures))
    return report, code

