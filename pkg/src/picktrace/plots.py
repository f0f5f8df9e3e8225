"""Static vector-graphics plots for season reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

_METRICS = {
    "efficiency": ("efficiency", "Picker efficiency (%)"),
    "tray_fill": ("tray_fill_time", "Tray fill time (min)"),
}


def season_plots(reports, out_dir) -> list:
    """Emit box plots, histograms, and per-date trends as SVG files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (attr, label) in _METRICS.items():
        values = np.array([getattr(r, attr) for r in reports], dtype=np.float64)
        if len(values) == 0:
            continue

        fig, ax = plt.subplots(figsize=(4, 5))
        ax.boxplot(values, tick_labels=[name.replace("_", " ")])
        ax.set_ylabel(label)
        ax.set_title(f"Season {name.replace('_', ' ')}")
        written.append(_save(fig, out_dir / f"{name}_box.svg"))

        fig, ax = plt.subplots(figsize=(6, 4))
        ax.hist(values, bins=min(20, max(5, len(values) // 3)), edgecolor="black")
        ax.set_xlabel(label)
        ax.set_ylabel("Carts")
        ax.set_title(f"Distribution of {name.replace('_', ' ')}")
        written.append(_save(fig, out_dir / f"{name}_hist.svg"))

        by_date = {}
        for r in reports:
            date = r.session_id.rsplit("_", 1)[0]
            by_date.setdefault(date, []).append(getattr(r, attr))
        if len(by_date) > 1:
            dates = sorted(by_date, key=_date_key)
            means = [float(np.mean(by_date[d])) for d in dates]
            fig, ax = plt.subplots(figsize=(7, 4))
            ax.plot(dates, means, marker="o")
            ax.set_xlabel("Harvest date")
            ax.set_ylabel(f"Mean {label.lower()}")
            ax.set_title(f"{name.replace('_', ' ').capitalize()} by harvest date")
            fig.autofmt_xdate(rotation=45)
            written.append(_save(fig, out_dir / f"{name}_by_date.svg"))
    return written


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def _date_key(date_str):
    parts = date_str.split("-")
    if len(parts) == 3 and all(p.isdigit() for p in parts):
        m, d, y = (int(p) for p in parts)
        return (y, m, d)
    return (9999, 0, 0)
