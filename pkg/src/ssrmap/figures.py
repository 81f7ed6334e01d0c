"""Render sweep results as storage/quality trade-off figures.

Produces one line per method: x is storage cost in bytes per element,
y is mAP@k, averaged over seeds at each sweep width.
"""

from __future__ import annotations

import os
from typing import Dict, List, Sequence, Tuple

from matplotlib.figure import Figure

from .evalkit import SweepRow

_MARKERS = ("o", "s", "D", "^", "v", "P", "X", "*")


def aggregate_series(rows: Sequence[SweepRow]) -> Dict[str, List[Tuple[float, float]]]:
    """Collapse rows to per-method curves, averaging metrics over seeds.

    Returns a mapping from method name to a list of (bytes_per_element,
    map_at_k) points sorted by storage cost. Rows sharing a method and
    width are averaged; bytes are averaged too because payload-bearing
    methods have dataset-dependent caption costs.
    """
    if not rows:
        raise ValueError("rows must be non-empty")
    groups: Dict[Tuple[str, int], List[SweepRow]] = {}
    for row in rows:
        groups.setdefault((row.method, row.dims), []).append(row)
    series: Dict[str, List[Tuple[float, float]]] = {}
    for (method, _dims), cell in sorted(groups.items()):
        x = sum(r.bytes_per_element for r in cell) / len(cell)
        y = sum(r.map_at_k for r in cell) / len(cell)
        series.setdefault(method, []).append((x, y))
    for points in series.values():
        points.sort()
    return series


def plot_sweep(rows: Sequence[SweepRow], path: str, *, k: int | None = None) -> None:
    """Write a PNG plotting retrieval quality against storage cost.

    The file is written atomically: rendered to a sibling temp file and
    moved into place, so readers never observe a partial image.
    """
    series = aggregate_series(rows)
    fig = Figure(figsize=(7.0, 4.5), dpi=150)
    ax = fig.add_subplot(1, 1, 1)
    for i, (method, points) in enumerate(sorted(series.items())):
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        marker = _MARKERS[i % len(_MARKERS)]
        if len(points) == 1:
            ax.plot(xs, ys, marker=marker, linestyle="none", label=method)
        else:
            ax.plot(xs, ys, marker=marker, label=method)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("storage (bytes per element)")
    ax.set_ylabel("mAP@%d" % k if k is not None else "mAP@k")
    ax.set_title("retrieval quality vs storage")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    try:
        fig.savefig(tmp, format="png")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
