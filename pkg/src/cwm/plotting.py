"""Static result figures rendered from the results table."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # fixed metadata keeps repeated renders byte-stable
    "svg.hashsalt": "cwm",
}

CONDITION_LABELS = {"ec": "EC", "bc": "BC", "nc": "NC", "baseline": "Baseline"}
COLORS = {"ec": "#d62728", "bc": "#1f77b4", "nc": "#7f7f7f", "baseline": "#2ca02c",
          "on": "#d62728", "off": "#ff9896"}


def _bins_key(b: str):
    return (0, 0) if b == "inf" else (1, -int(b))


def _float(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return float("nan")


def aggregate(rows: list[dict], value: str = "mean") -> dict:
    """(condition, communication, bins) -> (mean over seeds, mean of per-seed std)."""
    groups = defaultdict(list)
    for r in rows:
        groups[(r["condition"], r["communication"], r["bins"])].append(r)
    out = {}
    for key, rs in groups.items():
        vals = np.array([_float(r[value]) for r in rs])
        if value == "mean":
            spread = np.nanmean([_float(r["std"]) for r in rs])
        else:
            spread = np.nanstd(vals) if len(vals) > 1 else 0.0
        out[key] = (float(np.nanmean(vals)), float(spread))
    return out


def primary_rows(rows: list[dict]) -> list[dict]:
    """The row per condition that represents it: EC with exchange, NC without."""
    keep = []
    for r in rows:
        if r["condition"] == "ec" and r["communication"] != "on":
            continue
        if r["condition"] == "nc" and r["communication"] != "off":
            continue
        keep.append(r)
    return keep


def _grouped_bars(ax, series: dict[str, dict[str, tuple[float, float]]], bins: list[str]):
    width = 0.8 / max(len(series), 1)
    x = np.arange(len(bins))
    for i, (label, vals) in enumerate(series.items()):
        means = [vals.get(b, (np.nan, 0))[0] for b in bins]
        errs = [vals.get(b, (np.nan, 0))[1] for b in bins]
        ax.bar(x + (i - (len(series) - 1) / 2) * width, means, width, yerr=errs, capsize=2,
               label=CONDITION_LABELS.get(label, label), color=COLORS.get(label), edgecolor="black", linewidth=0.4)
    ax.set_xticks(x)
    ax.set_xticklabels(["∞" if b == "inf" else b for b in bins])
    ax.set_xlabel("bins per sensory axis")


def condition_figure(rows: list[dict], path: Path) -> Path:
    agg = aggregate(primary_rows(rows))
    bins = sorted({k[2] for k in agg if k[0] != "baseline"} or {k[2] for k in agg}, key=_bins_key)
    series = {}
    for cond in ("bc", "ec", "nc"):
        series[cond] = {k[2]: v for k, v in agg.items() if k[0] == cond}
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 2.8))
        _grouped_bars(ax, series, bins)
        base = [v for k, v in agg.items() if k[0] == "baseline"]
        if base:
            m = float(np.mean([b[0] for b in base]))
            ax.axhline(m, color=COLORS["baseline"], ls="--", lw=1, label="Baseline")
        ax.set_ylabel("max cross-correlation")
        ax.set_ylim(top=1.05)
        ax.legend(ncol=4, loc="lower center", bbox_to_anchor=(0.5, 1.0), frameon=False)
        fig.savefig(path, metadata=_meta(path))
        plt.close(fig)
    return path


def communication_figure(rows: list[dict], path: Path) -> Path:
    agg = aggregate([r for r in rows if r["condition"] == "ec"])
    bins = sorted({k[2] for k in agg}, key=_bins_key)
    series = {c: {k[2]: v for k, v in agg.items() if k[1] == c} for c in ("on", "off")}
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 2.8))
        _grouped_bars(ax, series, bins)
        handles, _ = ax.get_legend_handles_labels()
        ax.legend(handles, ["w/ com", "w/o com"], ncol=2, loc="lower center", bbox_to_anchor=(0.5, 1.0),
                  frameon=False)
        ax.set_ylabel("max cross-correlation")
        fig.savefig(path, metadata=_meta(path))
        plt.close(fig)
    return path


def rsa_figure(rows: list[dict], path: Path) -> Path:
    agg = aggregate([r for r in primary_rows(rows) if r["condition"] != "baseline"], value="rsa_mean")
    bins = sorted({k[2] for k in agg}, key=_bins_key)
    series = {c: {k[2]: v for k, v in agg.items() if k[0] == c} for c in ("bc", "ec", "nc")}
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 2.8))
        _grouped_bars(ax, series, bins)
        ax.set_ylabel("RSA (Spearman ρ)")
        ax.legend(ncol=3, loc="lower center", bbox_to_anchor=(0.5, 1.0), frameon=False)
        fig.savefig(path, metadata=_meta(path))
        plt.close(fig)
    return path


def message_figure(positions: np.ndarray, messages: dict[str, np.ndarray], path: Path) -> Path:
    """P trajectory next to each agent's message sequence, coloured by time."""
    n = 1 + len(messages)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.6))
        t = np.arange(len(positions))
        axes[0].scatter(positions[:, 0], positions[:, 1], c=t, cmap="coolwarm", s=6)
        axes[0].set_title("P trajectory")
        for ax, (name, m) in zip(axes[1:], messages.items()):
            ax.scatter(m[:, 0], m[:, 1], c=np.arange(len(m)), cmap="coolwarm", s=6)
            ax.set_title(f"messages {name}")
        for ax in axes:
            ax.set_aspect("equal", adjustable="datalim")
        fig.savefig(path, metadata=_meta(path))
        plt.close(fig)
    return path


def _meta(path: Path) -> dict | None:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return {"Software": None}
    if suffix in (".pdf", ".svg"):
        return {"Creator": None, "Date": None} if suffix == ".svg" else {"Creator": None, "Producer": None,
                                                                          "CreationDate": None}
    return None
