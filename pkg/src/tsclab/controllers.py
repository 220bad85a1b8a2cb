"""Signal controllers: fixed-time, max-pressure, advanced max-pressure, learned policy."""

from __future__ import annotations

import csv
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import TrainingFault
from .sim.engine import STOP_SPEED, IntersectionMeasurement
from .sim.network import NUM_PHASES, RoadNetwork

DEFAULT_PLAN: tuple[tuple[int, float], ...] = ((0, 30.0), (1, 30.0), (2, 30.0), (3, 30.0))


@dataclass(frozen=True)
class ControllerDecision:
    phases: tuple[int, ...]
    scores: np.ndarray | None = None  # (n_intersections, 8) when the controller scores phases

    def __post_init__(self):
        for p in self.phases:
            if not 0 <= p < NUM_PHASES:
                raise ValueError(f"phase id {p} outside 0..{NUM_PHASES - 1}")


def _argmax_lowest(scores: np.ndarray) -> int:
    # np.argmax already returns the first maximum, i.e. the lowest phase id on ties
    return int(np.argmax(scores))


def fixed_time_decide(clock: float, plan: Sequence[tuple[int, float]] = DEFAULT_PLAN,
                      n_intersections: int = 1) -> ControllerDecision:
    """Phase from a cyclic plan of (phase, seconds) pairs, by clock modulo cycle."""
    if not plan:
        raise ValueError("fixed-time plan is empty")
    for phase, dur in plan:
        if dur <= 0 or abs(dur / 5.0 - round(dur / 5.0)) > 1e-9:
            raise ValueError(f"split {dur} s for phase {phase} is not a positive multiple of 5 s")
    cycle = sum(d for _, d in plan)
    t = clock % cycle
    for phase, dur in plan:
        if t < dur - 1e-9:
            break
        t -= dur
    return ControllerDecision((int(phase),) * n_intersections)


def _lane_movement_table(net: RoadNetwork, i: int) -> list[tuple[int, int, list[int]]]:
    """(position in incoming list, lane id, outgoing positions) for each incoming lane."""
    it = net.intersections[i]
    out_pos = {lane: k for k, lane in enumerate(it.outgoing_lanes)}
    rows = []
    for k, lane in enumerate(it.incoming_lanes):
        tgt = net.lane_target_link[lane]
        rows.append((k, lane, [out_pos[tgt * 3 + t] for t in range(3)]))
    return rows


def max_pressure_scores(meas: IntersectionMeasurement, net: RoadNetwork) -> np.ndarray:
    """Per-phase sum over green lane-level movements of (incoming count - outgoing count)."""
    in_counts = [m.count for m in meas.incoming]
    out_counts = [m.count for m in meas.outgoing]
    movement_pressure = {}
    for k, lane, outs in _lane_movement_table(net, meas.index):
        movement_pressure[lane] = sum(in_counts[k] - out_counts[j] for j in outs)
    scores = np.zeros(NUM_PHASES)
    for p in range(NUM_PHASES):
        scores[p] = sum(movement_pressure[lane] for lane in net.green_lanes(meas.index, p))
    return scores


def advanced_mp_scores(meas: IntersectionMeasurement, net: RoadNetwork,
                       effective_range: float) -> np.ndarray:
    """Per-phase sum of lane demand: queued vehicles plus movers within range of the stop line."""
    demand = {}
    for m in meas.incoming:
        queued = sum(1 for v in m.speeds if v < STOP_SPEED)
        near = sum(1 for x, v in zip(m.positions, m.speeds)
                   if v >= STOP_SPEED and x >= m.length - effective_range)
        demand[m.lane] = queued + near
    scores = np.zeros(NUM_PHASES)
    for p in range(NUM_PHASES):
        scores[p] = sum(demand[lane] for lane in net.green_lanes(meas.index, p))
    return scores


def max_pressure_decide(measurements: Sequence[IntersectionMeasurement],
                        net: RoadNetwork) -> ControllerDecision:
    scores = np.array([max_pressure_scores(m, net) for m in measurements])
    return ControllerDecision(tuple(_argmax_lowest(s) for s in scores), scores)


def advanced_mp_decide(measurements: Sequence[IntersectionMeasurement], net: RoadNetwork,
                       effective_range: float) -> ControllerDecision:
    scores = np.array([advanced_mp_scores(m, net, effective_range) for m in measurements])
    return ControllerDecision(tuple(_argmax_lowest(s) for s in scores), scores)


def policy_decide(tokens: np.ndarray, mask: np.ndarray, hidden: np.ndarray, actor,
                  mode: str = "greedy", rng: np.random.Generator | None = None
                  ) -> tuple[ControllerDecision, np.ndarray, np.ndarray]:
    """Act for a batch of agents with the shared actor.

    Returns the decision, the new hidden state and the action probabilities.
    Only the policy head is consumed; the queue-prediction head is ignored.
    """
    from .nn.autodiff import no_grad

    if mode not in ("greedy", "sample"):
        raise ValueError(f"mode must be 'greedy' or 'sample', got {mode!r}")
    with no_grad():
        out = actor.forward(tokens, mask, hidden)
    probs = out.policy.data
    if not np.isfinite(probs).all():
        snapshot = _snapshot(actor)
        raise TrainingFault("non-finite policy output", snapshot)
    if mode == "greedy":
        actions = probs.argmax(axis=-1)
    else:
        if rng is None:
            raise ValueError("sample mode needs the episode rng")
        u = rng.random(probs.shape[0])
        cdf = np.cumsum(probs, axis=-1)
        actions = np.minimum((cdf < u[:, None]).sum(axis=-1), NUM_PHASES - 1)
    return ControllerDecision(tuple(int(a) for a in actions)), out.hidden.data, probs


def _snapshot(actor) -> str:
    from .nn.checkpoint import save_checkpoint

    fd, path = tempfile.mkstemp(prefix="actor_fault_", suffix=".npz")
    Path(path).unlink()
    save_checkpoint(path, actor.state_dict(), {"reason": "non-finite policy output"})
    return path


def dump_scores_csv(path: str | Path, rows: Sequence[tuple[int, ControllerDecision]]) -> None:
    """Write (step, intersection, chosen phase, 8 scores) rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "intersection", "phase", *[f"score_{p}" for p in range(NUM_PHASES)]])
        for step, dec in rows:
            for i, phase in enumerate(dec.phases):
                sc = dec.scores[i] if dec.scores is not None else [""] * NUM_PHASES
                w.writerow([step, i, phase, *sc])
