"""SVG bar charts for subgroup tables: case counts on the left, mean Dice on the right."""
from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import SummaryRow  # noqa: E402

_AXIS_TITLES = {"sex": "Sex", "age": "Age group (years)", "tsi": "Time since injury (months)"}


def subgroup_chart(rows: Sequence[SummaryRow], axis: str, path) -> None:
    labels = [r.group for r in rows]
    counts = [r.n_included for r in rows]
    means = [r.mean_dice_pct if r.mean_dice_pct is not None else 0.0 for r in rows]
    x = range(len(rows))

    with plt.rc_context({"svg.hashsalt": "lesionbench", "svg.fonttype": "none"}):
        fig, (left, right) = plt.subplots(1, 2, figsize=(10, 3.6))
        left.bar(x, counts, color="#7f7f7f")
        left.set_ylabel("Cases")
        right.bar(x, means, color="#1f77b4")
        right.set_ylabel("Mean Dice (%)")
        right.set_ylim(0, 100)
        for ax in (left, right):
            ax.set_xticks(list(x))
            ax.set_xticklabels(labels, rotation=45, ha="right")
            ax.set_xlabel(_AXIS_TITLES.get(axis, axis))
        for i, r in enumerate(rows):
            if r.n_included == 0:
                right.text(i, 1, "n/a", ha="center", va="bottom", fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
