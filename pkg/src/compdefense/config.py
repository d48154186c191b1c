"""Experiment configuration: an INI file with sections, overridable per key.

Lists are comma separated. L-infinity budgets are given in units of 1/255.
An override is written ``section.key=value``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import KINDS, LINF
from .classifier.models import ARCHS

DEFAULTS = {
    "experiment": {
        "seed": "0",
        "output": "results",
        "dataset_format": "idx",
        "dataset_path": "data/desk",
        "photo_path": "data/photos",
        "eval_samples": "1000",
        "batch_size": "250",
    },
    "models": {"archs": "small_cnn, tiny_vit", "checkpoint_dir": ""},
    "train": {
        "epochs": "5",
        "batch_size": "64",
        "learning_rate": "0.001",
        "optimizer": "adam",
        "schedule": "constant",
        "train_samples": "0",
    },
    "defenses": {
        "include_none": "true",
        "jpeg_qualities": "25",
        "learned_lambdas": "0.01",
        "through": "false, true",
        "exact_eval": "false",
    },
    "sequential": {"iterations": "", "quality": "25", "epsilons": "8"},
    "attacks": {
        "kinds": "ifgsm",
        "epsilons": "0, 2, 4, 6, 8, 10, 12",
        "l2_thresholds": "0, 0.5, 1, 1.5, 2, 3, inf",
        "l2_samples": "100",
    },
    "codec": {
        "lambdas": "0.001, 0.01, 0.1",
        "epochs": "4",
        "batch_size": "64",
        "learning_rate": "0.002",
        "train_samples": "0",
    },
    # Per-architecture training overrides; an empty value inherits [train].
    **{f"train_{arch}": {k: "" for k in ("epochs", "batch_size", "learning_rate", "optimizer", "schedule", "train_samples")}
       for arch in ARCHS},
    "bpp": {"qualities": "5, 10, 15, 25, 35, 50, 75, 95"},
    "overhead": {"enabled": "true", "samples": "500", "iterations": "1, 5"},
}


class ConfigError(ValueError):
    pass


def _floats(s: str) -> list:
    out = []
    for tok in (t.strip() for t in s.split(",")):
        if not tok:
            continue
        try:
            out.append(math.inf if tok.lower() in ("inf", "infinity") else float(tok))
        except ValueError:
            raise ConfigError(f"not a number: {tok!r}") from None
    return out


def _ints(s: str) -> list:
    vals = _floats(s)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"expected integers, got {s!r}")
    return [int(v) for v in vals]


def _words(s: str) -> list:
    return [t.strip() for t in s.split(",") if t.strip()]


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass
class ExperimentConfig:
    seed: int
    output: Path
    dataset_format: str
    dataset_path: Path
    photo_path: Path
    eval_samples: int
    batch_size: int
    archs: list
    checkpoint_dir: Path | None
    train: dict
    train_by_arch: dict
    include_none: bool
    jpeg_qualities: list
    learned_lambdas: list
    through: list
    exact_eval: bool
    sequential_iterations: list
    sequential_quality: float
    sequential_epsilons: list
    attack_kinds: list
    epsilons: list
    l2_thresholds: list
    l2_samples: int
    codec: dict
    bpp_qualities: list
    overhead_enabled: bool
    overhead_samples: int
    overhead_iterations: list
    source: dict = field(default_factory=dict)

    def train_for(self, arch: str) -> dict:
        return {**self.train, **self.train_by_arch.get(arch, {})}

    @property
    def linf_budgets(self) -> list:
        return [e / 255 for e in self.epsilons]

    @property
    def needs_codecs(self) -> bool:
        return bool(self.learned_lambdas) or bool(self.codec["lambdas"])


def read_config(path=None, overrides=()) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            with open(p) as f:
                cp.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from e
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        if section not in DEFAULTS or name not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {key.strip()!r}")
        cp.set(section, name, value.strip())
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for name in cp[section]:
            if name not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{name}")
    return cp


_TRAIN_TYPES = {"epochs": int, "batch_size": int, "learning_rate": float, "optimizer": str.strip,
                "schedule": str.strip, "train_samples": int}


def _train_section(sec) -> dict:
    """Typed training settings; keys left empty are omitted."""
    return {k: conv(sec[k]) for k, conv in _TRAIN_TYPES.items() if sec[k].strip()}


def parse(cp: configparser.ConfigParser, base_dir: Path | None = None) -> ExperimentConfig:
    base = Path(base_dir) if base_dir else Path(".")

    def path(v):
        p = Path(v)
        return p if p.is_absolute() else base / p

    e, m, t, d, s, a, c = (cp[k] for k in ("experiment", "models", "train", "defenses", "sequential", "attacks", "codec"))
    try:
        cfg = ExperimentConfig(
            seed=int(e["seed"]),
            output=path(e["output"]),
            dataset_format=e["dataset_format"].strip(),
            dataset_path=path(e["dataset_path"]),
            photo_path=path(e["photo_path"]),
            eval_samples=int(e["eval_samples"]),
            batch_size=int(e["batch_size"]),
            archs=_words(m["archs"]),
            checkpoint_dir=path(m["checkpoint_dir"]) if m["checkpoint_dir"].strip() else None,
            train=_train_section(t),
            train_by_arch={arch: _train_section(cp[f"train_{arch}"]) for arch in ARCHS},
            include_none=_bool(d["include_none"]),
            jpeg_qualities=_floats(d["jpeg_qualities"]),
            learned_lambdas=_floats(d["learned_lambdas"]),
            through=[_bool(v) for v in _words(d["through"])],
            exact_eval=_bool(d["exact_eval"]),
            sequential_iterations=_ints(s["iterations"]),
            sequential_quality=float(s["quality"]),
            sequential_epsilons=_floats(s["epsilons"]),
            attack_kinds=_words(a["kinds"]),
            epsilons=_floats(a["epsilons"]),
            l2_thresholds=_floats(a["l2_thresholds"]),
            l2_samples=int(a["l2_samples"]),
            codec={
                "lambdas": _floats(c["lambdas"]),
                "epochs": int(c["epochs"]),
                "batch_size": int(c["batch_size"]),
                "learning_rate": float(c["learning_rate"]),
                "train_samples": int(c["train_samples"]),
            },
            bpp_qualities=_floats(cp["bpp"]["qualities"]),
            overhead_enabled=_bool(cp["overhead"]["enabled"]),
            overhead_samples=int(cp["overhead"]["samples"]),
            overhead_iterations=_ints(cp["overhead"]["iterations"]),
            source={sec: dict(cp[sec]) for sec in cp.sections()},
        )
    except (KeyError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from err
    return cfg


def validate(cfg: ExperimentConfig, needs_dataset: bool = True, needs_photos: bool = False) -> None:
    """Range and file checks; raises :class:`ConfigError` before any compute."""
    problems = []
    if cfg.dataset_format not in ("idx", "png_dirs"):
        problems.append(f"experiment.dataset_format must be idx or png_dirs, got {cfg.dataset_format!r}")
    if needs_dataset and not cfg.dataset_path.exists():
        problems.append(f"dataset path does not exist: {cfg.dataset_path}")
    if needs_photos and not cfg.photo_path.exists():
        problems.append(f"photo corpus path does not exist: {cfg.photo_path}")
    if cfg.eval_samples < 1 or cfg.batch_size < 1:
        problems.append("experiment.eval_samples and experiment.batch_size must be positive")
    for arch in cfg.archs:
        if arch not in ARCHS:
            problems.append(f"unknown architecture {arch!r}; choose from {ARCHS}")
        elif cfg.checkpoint_dir is not None and not (cfg.checkpoint_dir / f"{arch}.rprs").is_file():
            problems.append(f"missing checkpoint {cfg.checkpoint_dir / f'{arch}.rprs'}")
    if not cfg.archs:
        problems.append("models.archs is empty")
    for arch in ARCHS:
        tr = cfg.train_for(arch)
        if tr["epochs"] < 0 or tr["batch_size"] < 1 or not tr["learning_rate"] > 0 or tr["train_samples"] < 0:
            problems.append(f"{arch}: epochs >= 0, batch_size >= 1, learning_rate > 0 and train_samples >= 0 are required")
        if tr["optimizer"] not in ("adam", "sgd_momentum"):
            problems.append(f"{arch}: optimizer must be adam or sgd_momentum, got {tr['optimizer']!r}")
        if tr["schedule"] not in ("constant", "cosine"):
            problems.append(f"{arch}: schedule must be constant or cosine, got {tr['schedule']!r}")
    for q in cfg.jpeg_qualities + cfg.bpp_qualities + [cfg.sequential_quality]:
        if not 0 < q <= 100:
            problems.append(f"JPEG quality {q} outside (0, 100]")
    for lam in cfg.learned_lambdas + cfg.codec["lambdas"]:
        if not lam > 0:
            problems.append(f"lambda must be positive, got {lam}")
    missing = [lam for lam in cfg.learned_lambdas if lam not in cfg.codec["lambdas"]]
    if missing:
        problems.append(f"defenses.learned_lambdas {missing} are not in codec.lambdas")
    for k in cfg.attack_kinds:
        if k not in KINDS:
            problems.append(f"unknown attack {k!r}; choose from {KINDS}")
    if any(v < 0 for v in cfg.epsilons + cfg.l2_thresholds + cfg.sequential_epsilons):
        problems.append("budgets must be nonnegative")
    if sorted(cfg.l2_thresholds) != cfg.l2_thresholds:
        problems.append("attacks.l2_thresholds must be sorted ascending")
    if any(n < 1 for n in cfg.sequential_iterations + cfg.overhead_iterations):
        problems.append("iteration counts must be at least 1")
    if not cfg.through:
        problems.append("defenses.through is empty")
    if cfg.codec["epochs"] < 0 or cfg.codec["batch_size"] < 1 or not cfg.codec["learning_rate"] > 0:
        problems.append("invalid codec training settings")
    if problems:
        raise ConfigError("; ".join(problems))


def linf_kinds(cfg: ExperimentConfig) -> list:
    return [k for k in cfg.attack_kinds if k in LINF]


def l2_kinds(cfg: ExperimentConfig) -> list:
    return [k for k in cfg.attack_kinds if k not in LINF]
