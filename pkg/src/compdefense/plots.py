"""SVG figures from an evaluation report.

Solid lines are black-box rows, dashed lines are rows where the attacker
differentiated through the defense. Output bytes depend only on the report.
"""

from __future__ import annotations

import io
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import atomic_write_bytes  # noqa: E402
from .evaluation import EvaluationReport  # noqa: E402

_RC = {"svg.hashsalt": "compdefense", "svg.fonttype": "path", "axes.grid": True, "grid.alpha": 0.3}


def _save(fig, path: Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return path


def _series_label(r) -> str:
    if r.defense == "none":
        return f"{r.model} / none"
    return f"{r.model} / {r.defense} q={r.quality:g}" + (f" N={r.iterations}" if r.iterations and r.iterations > 1 else "")


def _ok(r) -> bool:
    return not r.error and r.accuracy == r.accuracy


def plot_attack_curves(report: EvaluationReport, out_dir) -> list:
    """One accuracy-vs-budget chart per attack kind."""
    out_dir = Path(out_dir)
    by_attack = defaultdict(list)
    for r in report.rows:
        if _ok(r) and (r.iterations in (None, 1)):
            by_attack[r.attack].append(r)
    written = []
    with plt.rc_context(_RC):
        for attack in sorted(by_attack):
            rows = by_attack[attack]
            series = defaultdict(list)
            for r in rows:
                series[(_series_label(r), r.through)].append(r)
            fig, ax = plt.subplots(figsize=(6, 4))
            labels = sorted({k[0] for k in series})
            colors = {lab: f"C{i % 10}" for i, lab in enumerate(labels)}
            for (lab, through) in sorted(series):
                pts = sorted(series[(lab, through)], key=lambda r: r.budget)
                linf = attack in ("fgsm", "ifgsm", "pgd")
                xs = [r.budget * 255 if linf else min(r.budget, 1e3) for r in pts]
                ax.plot(xs, [r.accuracy for r in pts], linestyle="--" if through else "-", marker="o", ms=3,
                        color=colors[lab], label=lab + (" (through)" if through else ""))
            ax.set_xlabel("epsilon (x/255)" if attack in ("fgsm", "ifgsm", "pgd") else "L2 threshold")
            ax.set_ylabel("accuracy")
            ax.set_ylim(-0.02, 1.02)
            ax.set_title(attack)
            ax.legend(fontsize=7)
            written.append(_save(fig, out_dir / f"accuracy_{attack}.svg"))
    return written


def plot_sequential(report: EvaluationReport, out_dir):
    rows = [r for r in report.rows if _ok(r) and r.defense != "none" and r.through and r.budget > 0]
    groups = defaultdict(list)
    for r in rows:
        groups[(r.model, r.defense, r.quality, r.attack, r.budget)].append(r)
    groups = {k: v for k, v in groups.items() if len({r.iterations for r in v}) > 1}
    if not groups:
        return None
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, key in enumerate(sorted(groups)):
            pts = sorted(groups[key], key=lambda r: r.iterations)
            m, d, q, a, b = key
            ax.plot([r.iterations for r in pts], [r.accuracy for r in pts], "--o", ms=3, color=f"C{i % 10}",
                    label=f"{m} / {d} q={q:g} / {a} eps={b * 255:.0f}/255")
        ax.set_xlabel("sequential passes N")
        ax.set_ylabel("accuracy (through)")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7)
        return _save(fig, Path(out_dir) / "sequential.svg")


def plot_bpp(report: EvaluationReport, out_dir):
    if not report.bpp:
        return None
    items = sorted(report.bpp, key=lambda e: (e["codec"], e["quality"]))
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        names = [f"{e['codec']} {e['quality']:g}" for e in items]
        ax.bar(range(len(items)), [e["bpp"] for e in items],
               color=["C0" if e["codec"] == "jpeg" else "C1" for e in items])
        ax.set_xticks(range(len(items)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_ylabel("bits per pixel")
        fig.tight_layout()
        return _save(fig, Path(out_dir) / "bpp.svg")


def emit_plots(report: EvaluationReport, out_dir) -> list:
    out = plot_attack_curves(report, out_dir)
    for extra in (plot_sequential(report, out_dir), plot_bpp(report, out_dir)):
        if extra is not None:
            out.append(extra)
    return out
