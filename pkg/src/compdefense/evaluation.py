"""Accuracy grids over (model, defense, attack, budget) and latency measurement."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
import traceback
from dataclasses import asdict, dataclass, field
from types import SimpleNamespace

import numpy as np

from .attacks import LINF, AttackConfig, run_attack, thresholded_accuracy
from .classifier.models import predict
from .data import LabeledDataset, atomic_write_text
from .defense import DefenseConfig, apply_defense, make_pipeline
from .tensor import Tensor, no_grad

CSV_HEADER = ("model", "defense", "quality", "iterations", "through", "attack", "budget", "accuracy", "mean_l2", "wall_ms")
DEFAULT_EPSILONS = tuple(k / 255 for k in (0, 2, 4, 6, 8, 10, 12))


def cell_seed(seed: int, *coords) -> int:
    """Stable 63-bit seed from the global seed and a cell's coordinates."""
    key = json.dumps([int(seed), *[str(c) for c in coords]]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass
class Row:
    model: str
    defense: str
    quality: float | None
    iterations: int | None
    through: bool
    attack: str
    budget: float
    accuracy: float
    mean_l2: float
    wall_ms: float
    error: str | None = None

    def csv_fields(self, with_timing: bool) -> list:
        def num(v, fmt="{:.6f}"):
            return "" if v is None or (isinstance(v, float) and np.isnan(v)) else fmt.format(v)

        return [
            self.model,
            self.defense,
            num(self.quality, "{:g}"),
            "" if self.iterations is None else str(self.iterations),
            "true" if self.through else "false",
            self.attack,
            num(self.budget, "{:.6g}"),
            num(self.accuracy),
            num(self.mean_l2),
            num(self.wall_ms, "{:.1f}") if with_timing else "",
        ]


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)
    clean: dict = field(default_factory=dict)  # (model, defense label) -> accuracy
    bpp: list = field(default_factory=list)
    overhead: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def failures(self) -> list:
        return [r for r in self.rows if r.error]

    def to_csv(self, with_timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.csv_fields(with_timing))
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "metadata": self.metadata,
            "clean": [{"model": m, "defense": d, "accuracy": a} for (m, d), a in self.clean.items()],
            "rows": [asdict(r) for r in self.rows],
            "bpp": self.bpp,
            "overhead": self.overhead,
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)

    def write(self, csv_path, json_path=None, with_timing: bool = False) -> None:
        atomic_write_text(csv_path, self.to_csv(with_timing))
        if json_path is not None:
            atomic_write_text(json_path, self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        doc = json.loads(text)
        rep = cls(metadata=doc.get("metadata", {}), bpp=doc.get("bpp", []), overhead=doc.get("overhead", []))
        rep.rows = [Row(**r) for r in doc.get("rows", [])]
        rep.clean = {(c["model"], c["defense"]): c["accuracy"] for c in doc.get("clean", [])}
        return rep

    def lookup(self, **match) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in match.items())]


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o)}")


def _eval_accuracy(pipes, x: np.ndarray, y: np.ndarray) -> tuple:
    with no_grad():
        pred = np.concatenate([pipes.evaluate(Tensor(x[i : i + 500])).data.argmax(1) for i in range(0, len(x), 500)])
    return pred == y


def _attack_batches(pipeline, x, y, cfg: AttackConfig, batch_size: int):
    parts = []
    for b, i in enumerate(range(0, len(x), batch_size)):
        c = AttackConfig(**{**asdict(cfg), "seed": cell_seed(cfg.seed, "batch", b)})
        parts.append(run_attack(pipeline, x[i : i + batch_size], y[i : i + batch_size], c))
    adv = np.concatenate([p.adversarial for p in parts])
    l2 = np.concatenate([p.l2 for p in parts])
    deg = np.concatenate([p.extra.get("degenerate", np.zeros(len(p.l2), bool)) for p in parts])
    return adv, l2, deg


def evaluate(
    models: dict,
    defenses,
    attacks,
    budgets,
    dataset: LabeledDataset,
    seed: int = 0,
    batch_size: int = 250,
    log=None,
) -> EvaluationReport:
    """Run the full cross product; one row per (model, defense, attack, budget).

    With no attacks there is one clean row (attack "none") per (model, defense).

    Budgets are L-infinity radii for fgsm/ifgsm/pgd and L2 thresholds for
    cw/deepfool (one attack run per cell group, scored at every threshold).
    A failing cell is recorded with its error and the grid carries on.
    """
    defenses, attacks, budgets = list(defenses), list(attacks), [float(b) for b in budgets]
    if not models or not defenses:
        raise ValueError("evaluate needs at least one model and one defense")
    if len(dataset) == 0:
        raise ValueError("evaluate needs a nonempty dataset")
    x, y = dataset.images, dataset.labels
    report = EvaluationReport(metadata={"seed": int(seed), "samples": int(len(y)), "budgets": budgets})

    for mname, model in models.items():
        for d in defenses:
            pipes = make_pipeline(model, d)
            try:
                clean_ok = _eval_accuracy(pipes, x, y)
                report.clean[(mname, d.label)] = float(clean_ok.mean())
            except Exception as e:  # noqa: BLE001 - fail-soft grid
                clean_ok = None
                report.clean[(mname, d.label)] = float("nan")
                if log:
                    log(f"clean accuracy failed for {mname}/{d.label}: {e}")
            if not attacks:
                # No attack configured: the report is the clean accuracies.
                report.rows.append(_row(mname, d, "none", 0.0, report.clean[(mname, d.label)], 0.0, 0.0))
            for a in attacks:
                _run_group(report, mname, model, d, pipes, a, budgets, x, y, clean_ok, seed, batch_size, log)
    return report


def _row(mname, d: DefenseConfig, attack, budget, acc, l2, ms, err=None) -> Row:
    none = d.codec == "none"
    return Row(
        model=mname,
        defense=d.codec,
        quality=None if none else d.q,
        iterations=None if none else d.iterations,
        through=bool(d.through),
        attack=attack,
        budget=budget,
        accuracy=acc,
        mean_l2=l2,
        wall_ms=ms,
        error=err,
    )


def _run_group(report, mname, model, d, pipes, a: AttackConfig, budgets, x, y, clean_ok, seed, batch_size, log):
    coords = (mname, d.label, a.kind)
    if a.kind in LINF:
        for b in budgets:
            t0 = time.perf_counter()
            try:
                if clean_ok is None:
                    raise RuntimeError("clean evaluation failed")
                if b == 0:
                    acc, l2 = float(clean_ok.mean()), 0.0
                else:
                    cfg = AttackConfig(**{**asdict(a), "epsilon": b, "seed": cell_seed(seed, *coords, b)})
                    adv, l2s, _ = _attack_batches(pipes.attack, x, y, cfg, batch_size)
                    acc, l2 = float(_eval_accuracy(pipes, adv, y).mean()), float(l2s.mean())
                row = _row(mname, d, a.kind, b, acc, l2, 1000 * (time.perf_counter() - t0))
            except Exception as e:  # noqa: BLE001
                row = _row(mname, d, a.kind, b, float("nan"), float("nan"), 0.0, f"{type(e).__name__}: {e}")
                if log:
                    log(traceback.format_exc())
            if log:
                log(f"{mname} {d.label} {a.kind} budget={b:.4g}: acc={row.accuracy:.4f}")
            report.rows.append(row)
        return
    # L2 attacks: one run, scored at each threshold
    t0 = time.perf_counter()
    try:
        if clean_ok is None:
            raise RuntimeError("clean evaluation failed")
        cfg = AttackConfig(**{**asdict(a), "seed": cell_seed(seed, *coords)})
        adv, l2s, deg = _attack_batches(pipes.attack, x, y, cfg, batch_size)
        adv_ok = _eval_accuracy(pipes, adv, y)

        # success is judged by the evaluation pipeline, not the attacker's
        judged = SimpleNamespace(success=~adv_ok & ~deg, l2=l2s)
        accs = thresholded_accuracy(judged, clean_ok, sorted(budgets))
        by_budget = dict(zip(sorted(budgets), accs))
        ms = 1000 * (time.perf_counter() - t0)
        for b in budgets:
            report.rows.append(_row(mname, d, a.kind, b, by_budget[b], float(l2s.mean()), ms))
        report.metadata.setdefault("post_attack", {})["/".join(coords)] = float(adv_ok.mean())
    except Exception as e:  # noqa: BLE001
        if log:
            log(traceback.format_exc())
        for b in budgets:
            report.rows.append(_row(mname, d, a.kind, b, float("nan"), float("nan"), 0.0, f"{type(e).__name__}: {e}"))


def measure_overhead(model, defenses, dataset: LabeledDataset, batch_size: int = 100, repeats: int = 1) -> list:
    """Per-image classification latency with each defense in front of the model.

    The first batch of every configuration is run once and discarded so
    lazy allocations do not count. A ``none`` row is always included.
    """
    cfgs = [DefenseConfig("none")] + [d for d in defenses if d.codec != "none"]
    x = dataset.images
    if len(x) == 0:
        raise ValueError("measure_overhead needs a nonempty dataset")
    out = []
    for d in cfgs:
        def run(batch):
            return predict(model, apply_defense(batch, d), batch_size=batch_size)

        run(x[:batch_size])  # warm-up
        t0 = time.perf_counter()
        for _ in range(repeats):
            for i in range(0, len(x), batch_size):
                run(x[i : i + batch_size])
        total = (time.perf_counter() - t0) / repeats
        out.append(
            {
                "defense": d.codec,
                "quality": None if d.codec == "none" else d.q,
                "iterations": None if d.codec == "none" else d.iterations,
                "label": d.label,
                "images": int(len(x)),
                "total_s": total,
                "per_image_ms": 1000 * total / len(x),
            }
        )
    return out
