"""Delimited tables and matplotlib figures for stage manifests and bench reports."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench_harness import BenchReport  # noqa: E402

STAGE_ORDER = ("ingest", "align", "prune", "balance", "caption", "instruct", "bench")

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "svg.hashsalt": "vgi-align",
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    # no timestamp in the file metadata keeps figures reproducible
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_bench_accuracy(report: BenchReport, path: str | Path) -> Path:
    rows = list(report.rows) + [report.overall]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.4, 3.0))
        names = [r.dimension for r in rows]
        acc = [r.accuracy for r in rows]
        colors = ["0.35"] * len(report.rows) + ["tab:blue"]
        ax.bar(range(len(rows)), acc, color=colors)
        for i, r in enumerate(rows):
            ax.text(i, r.accuracy + 0.02, f"{r.correct:g}/{r.total}", ha="center", va="bottom", fontsize=6)
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(names, rotation=40, ha="right")
        ax.set_ylim(0, 1.12)
        ax.set_ylabel("accuracy")
        ax.set_title(f"Benchmark accuracy ({report.policy})")
        return _save(fig, Path(path))


def stage_count_rows(manifests: Mapping[str, dict]) -> list[tuple[str, int, int, str]]:
    rows = []
    for stage in STAGE_ORDER:
        m = manifests.get(stage)
        if m is None:
            continue
        c = m["counts"]
        drops = ";".join(f"{k}={v}" for k, v in sorted(c["dropped"].items()))
        rows.append((stage, c["in"], c["out"], drops))
    return rows


def stage_counts_tsv(manifests: Mapping[str, dict]) -> str:
    lines = ["stage\tin\tout\tdropped"]
    lines += [f"{s}\t{i}\t{o}\t{d}" for s, i, o, d in stage_count_rows(manifests)]
    return "\n".join(lines) + "\n"


def plot_stage_counts(manifests: Mapping[str, dict], path: str | Path) -> Path:
    rows = stage_count_rows(manifests)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        x = range(len(rows))
        ax.bar([i - 0.2 for i in x], [r[1] for r in rows], width=0.4, label="in", color="0.6")
        ax.bar([i + 0.2 for i in x], [r[2] for r in rows], width=0.4, label="out", color="tab:blue")
        ax.set_xticks(list(x))
        ax.set_xticklabels([r[0] for r in rows])
        ax.set_ylabel("records")
        ax.set_title("Records per pipeline stage")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def plot_pair_counts(counts: Mapping[tuple[str, str], int], threshold: int, path: str | Path, top: int = 25) -> Path:
    """Most frequent key=value pairs with the balancing threshold marked."""
    items: Sequence = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.0, max(2.0, 0.22 * len(items) + 0.8)))
        labels = [f"{k}={v}" for (k, v), _ in items]
        ax.barh(range(len(items)), [n for _, n in items], color="0.4")
        ax.axvline(threshold, color="tab:red", lw=1, ls="--", label=f"t = {threshold}")
        ax.set_yticks(range(len(items)))
        ax.set_yticklabels(labels)
        ax.invert_yaxis()
        ax.set_xlabel("images containing the pair")
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, Path(path))
