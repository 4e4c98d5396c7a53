"""Static figures for result tables.  Everything is written to files."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _f(x) -> float:
    try:
        return float(x)
    except (TypeError, ValueError):
        return float("nan")


def auc_bars(rows: Sequence[dict], path, metric: str = "auc", title: str | None = None) -> Path:
    """Grouped bars: one group per attack/distortion, one bar per scheme."""
    rows = [r for r in rows if r.get("status", "ok") in ("ok", "aggregate")]
    schemes = list(dict.fromkeys(r["scheme"] for r in rows))
    cells = list(dict.fromkeys(_cell_label(r) for r in rows))
    vals = np.full((len(schemes), len(cells)), np.nan)
    for r in rows:
        vals[schemes.index(r["scheme"]), cells.index(_cell_label(r))] = _f(r[metric])
    fig, ax = plt.subplots(figsize=(max(6.0, 0.6 * len(cells) * max(1, len(schemes)) / 2), 3.6))
    width = 0.8 / max(1, len(schemes))
    x = np.arange(len(cells))
    for i, s in enumerate(schemes):
        ax.bar(x + (i - (len(schemes) - 1) / 2) * width, vals[i], width, label=s)
    ax.set_xticks(x)
    ax.set_xticklabels(cells, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("AUC" if metric == "auc" else "TPR@1%FPR")
    ax.axhline(0.5, color="grey", lw=0.6, ls=":")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def _cell_label(r: dict) -> str:
    if r.get("distortion", "none") not in ("none", ""):
        return r["distortion"]
    return "original" if r["attack"] == "none" else r["attack"]


def sweep_curves(rows: Sequence[dict], path, metric: str = "auc") -> Path:
    """AUC against the injection-step range, one curve per attack."""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for attack in dict.fromkeys(r["attack"] for r in rows):
        sel = [r for r in rows if r["attack"] == attack]
        x = [f"[{r['t_lo']},{r['t_hi']}]" for r in sel]
        ax.plot(x, [_f(r[metric]) for r in sel], marker="o", label="original" if attack == "none" else attack)
    ax.set_xlabel("injection step range")
    ax.set_ylabel("AUC" if metric == "auc" else "TPR@1%FPR")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def grid_heatmap(table: Sequence[dict], path, title: str | None = None) -> Path:
    """Scheme x attack heatmap with the values printed in each cell."""
    rows = [r["scheme"] for r in table]
    cols = [k for k in table[0] if k != "scheme"] if table else []
    vals = np.array([[_f(r[c]) for c in cols] for r in table]) if table else np.zeros((0, 0))
    fig, ax = plt.subplots(figsize=(1.2 * len(cols) + 2.5, 0.5 * len(rows) + 1.5))
    ax.imshow(vals, vmin=0, vmax=1, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(cols)))
    ax.set_xticklabels(cols, rotation=30, ha="right", fontsize=8)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(rows, fontsize=8)
    for i in range(len(rows)):
        for j in range(len(cols)):
            ax.text(j, i, f"{vals[i, j]:.3f}", ha="center", va="center", fontsize=7,
                    color="white" if vals[i, j] < 0.6 else "black")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
