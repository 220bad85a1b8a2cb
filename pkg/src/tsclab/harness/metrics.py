"""Trip and intersection level metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..sim.engine import TripRecord


def avg_travel_time(records: Sequence[TripRecord]) -> float:
    """Mean (t_end - t_start) over every vehicle that entered the network."""
    if not records:
        raise ValueError("no trip records: average travel time undefined")
    return float(np.mean([r.t_end - r.t_start for r in records]))


def travel_time_std(records: Sequence[TripRecord]) -> float:
    if not records:
        raise ValueError("no trip records")
    return float(np.std([r.t_end - r.t_start for r in records]))


def intersection_travel_times(dwells: Sequence[tuple[int, float]], n: int) -> list[dict]:
    """Mean/std/count of per-intersection dwell (link entry to stop-line crossing)."""
    buckets: list[list[float]] = [[] for _ in range(n)]
    for i, d in dwells:
        if 0 <= i < n:
            buckets[i].append(d)
    out = []
    for i, b in enumerate(buckets):
        if b:
            out.append({"intersection": i, "mean": float(np.mean(b)), "std": float(np.std(b)),
                        "count": len(b)})
        else:
            out.append({"intersection": i, "mean": float("nan"), "std": float("nan"), "count": 0})
    return out


def summarize(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    finite = arr[np.isfinite(arr)]
    if finite.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(finite.mean()), "std": float(finite.std()), "n": int(finite.size)}
