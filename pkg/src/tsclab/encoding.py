"""Per-intersection state encodings, rewards, sensor noise and observation assembly."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .sim.engine import IntersectionMeasurement, LaneMeasurement
from .sim.idm import IdmParams, free_travel_distance
from .sim.network import ALL_RED, NUM_PHASES, RoadNetwork

STATE_KINDS = ("VC", "GP", "EP", "ATS", "DTSE", "QDSE")
QDSE_FIELDS = ("Q", "N_in", "N_out", "N_r", "N_fr", "D_fr")
D_FR = QDSE_FIELDS.index("D_fr")


@dataclass(frozen=True)
class QdseVector:
    """Raw (unnormalized) lane features, one column per incoming lane."""

    values: np.ndarray  # (6, n_lanes)
    lane_length: np.ndarray  # (n_lanes,)

    def __getattr__(self, name):
        if name in QDSE_FIELDS:
            return self.values[QDSE_FIELDS.index(name)]
        raise AttributeError(name)

    def normalized(self, vehicle_spacing: float = 7.5) -> np.ndarray:
        out = self.values.astype(float).copy()
        out[:D_FR] /= self.lane_length / vehicle_spacing
        out[D_FR] /= self.lane_length
        return out


@dataclass(frozen=True)
class StateConfig:
    kind: str = "QDSE"
    follow_window: float = 50.0
    cell: float = 6.0
    phase_duration: float = 5.0
    effective_range: float | None = None  # default: max lane speed x phase duration
    vehicle_spacing: float = 7.5  # s0 + L, sets the count normalizer
    normalize: bool = True

    def __post_init__(self):
        if self.kind not in STATE_KINDS:
            raise ValueError(f"unknown state kind {self.kind!r}; expected one of {STATE_KINDS}")


def lane_features(m: LaneMeasurement, follow_window: float = 50.0) -> tuple[int, int, int, int, int, float]:
    """(Q, N_in, N_out, N_r, N_fr, D_fr) for one incoming lane."""
    approaching = m.approaching()
    if approaching:
        lead_x = approaching[0][0]
        d_fr = m.queue_tail - lead_x
        n_fr = sum(1 for x, _ in approaching if lead_x - x <= follow_window)
    else:
        d_fr = m.length
        n_fr = 0
    return m.stopped, m.entered, m.departed, m.moving, n_fr, d_fr


def compute_qdse(incoming: Sequence[LaneMeasurement], follow_window: float = 50.0) -> QdseVector:
    cols = [lane_features(m, follow_window) for m in incoming]
    values = np.array(cols, dtype=float).T.reshape(len(QDSE_FIELDS), len(cols))
    return QdseVector(values, np.array([m.length for m in incoming], dtype=float))


def predict_delta_in(m: LaneMeasurement, green: bool, idm: IdmParams, limit: float,
                     horizon: float = 5.0) -> int:
    """Movers expected to reach the queue tail within ``horizon`` seconds.

    Each approaching mover is pushed forward by free-road IDM from its current
    speed and compared with its distance to a tail held fixed for the interval.
    On a green lane with no queue nobody joins, so the estimate is 0.
    """
    if green and m.stopped == 0:
        return 0
    tail = m.queue_tail
    v0 = idm.desired_speed(limit)
    count = 0
    for x, v in m.approaching():
        if free_travel_distance(v, idm, v0, horizon) >= tail - x:
            count += 1
    return count


def _phase_onehot(phase: int) -> np.ndarray:
    out = np.zeros(NUM_PHASES)
    if phase != ALL_RED:
        out[phase] = 1.0
    return out


def _effective_range(meas: IntersectionMeasurement, cfg: StateConfig, lane_speed) -> float:
    if cfg.effective_range is not None:
        return cfg.effective_range
    return max(lane_speed) * cfg.phase_duration


def _target_groups(n_in: int, n_out: int, net: RoadNetwork | None,
                   meas: IntersectionMeasurement) -> list[list[int]]:
    """Outgoing-lane indices (within ``meas.outgoing``) reachable from each incoming lane."""
    if net is None:
        raise ValueError("pressure encodings need the road network")
    it = net.intersections[meas.index]
    out_pos = {lane: k for k, lane in enumerate(it.outgoing_lanes)}
    groups = []
    for lane in it.incoming_lanes:
        tgt = net.lane_target_link[lane]
        groups.append([out_pos[tgt * 3 + t] for t in range(3)])
    return groups


def lane_pressure(in_counts: np.ndarray, out_counts: np.ndarray, groups) -> np.ndarray:
    """Incoming count minus the mean count over the lanes it feeds."""
    return np.array([in_counts[k] - np.mean([out_counts[j] for j in g])
                     for k, g in enumerate(groups)], dtype=float)


def compute_state(kind: str | StateConfig, meas: IntersectionMeasurement,
                  net: RoadNetwork | None = None, config: StateConfig | None = None,
                  lane_speed: Sequence[float] | None = None) -> np.ndarray:
    """Flat state vector of one intersection for the given encoding kind."""
    if isinstance(kind, StateConfig):
        config = kind
        kind = config.kind
    if kind not in STATE_KINDS:
        raise ValueError(f"unknown state kind {kind!r}; expected one of {STATE_KINDS}")
    cfg = config if config is not None else StateConfig(kind=kind)
    inc, out = meas.incoming, meas.outgoing
    lengths = np.array([m.length for m in inc], dtype=float)
    scale = lengths / cfg.vehicle_spacing if cfg.normalize else np.ones_like(lengths)

    if kind == "QDSE":
        q = compute_qdse(inc, cfg.follow_window)
        return (q.normalized(cfg.vehicle_spacing) if cfg.normalize else q.values).ravel()

    phase = _phase_onehot(meas.phase)
    if kind == "VC":
        counts = np.array([m.count for m in inc], dtype=float)
        return np.concatenate([phase, counts / scale])
    if kind == "DTSE":
        blocks = [phase]
        for m in inc:
            n_cells = int(math.ceil(m.length / cfg.cell - 1e-9))
            grid = np.zeros(n_cells)
            for x in m.positions:
                grid[min(int(x // cfg.cell), n_cells - 1)] = 1.0
            blocks.append(grid)
        return np.concatenate(blocks)

    groups = _target_groups(len(inc), len(out), net, meas)
    if lane_speed is None:
        lane_speed = [net.lane_speed[m.lane] for m in inc] if net is not None else [11.11]
    if kind == "GP":
        p = lane_pressure(np.array([m.count for m in inc]), np.array([m.count for m in out]), groups)
        return np.concatenate([phase, p / scale])
    rng_m = _effective_range(meas, cfg, lane_speed)
    in_near = np.array([sum(1 for x in m.positions if x >= m.length - rng_m) for m in inc])
    out_near = np.array([sum(1 for x in m.positions if x <= rng_m) for m in out])
    p = lane_pressure(in_near, out_near, groups)
    if kind == "EP":
        return np.concatenate([phase, p / scale])
    stopped_near = np.array([sum(1 for x, v in zip(m.positions, m.speeds)
                                 if x >= m.length - rng_m and v < 0.1) for m in inc], dtype=float)
    return np.concatenate([phase, stopped_near / scale, p / scale])


def state_dim(kind: str, lane_length: float = 300.0, cell: float = 6.0) -> int:
    if kind == "QDSE":
        return 6 * 12
    if kind in ("VC", "GP", "EP"):
        return NUM_PHASES + 12
    if kind == "ATS":
        return NUM_PHASES + 24
    if kind == "DTSE":
        return NUM_PHASES + 12 * int(math.ceil(lane_length / cell - 1e-9))
    raise ValueError(f"unknown state kind {kind!r}")


def compute_reward(meas: IntersectionMeasurement) -> float:
    """Negative count of stopped vehicles on the 12 incoming and 12 outgoing lanes."""
    return -float(sum(m.stopped for m in meas.incoming) + sum(m.stopped for m in meas.outgoing))


def apply_sensor_noise(q: QdseVector, sigma: float, rng: np.random.Generator) -> QdseVector:
    """Gaussian error on the leading-mover distance only, clamped to the lane."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return q
    values = q.values.copy()
    noisy = values[D_FR] + rng.normal(0.0, sigma, size=values.shape[1])
    values[D_FR] = np.clip(noisy, 0.0, q.lane_length)
    return QdseVector(values, q.lane_length)


@dataclass(frozen=True)
class Observation:
    """Ego + N/S/E/W neighbour state blocks, each tagged with its agent one-hot."""

    agent: int
    ego: np.ndarray
    neighbors: np.ndarray  # (4, state_dim), zero rows where absent
    mask: np.ndarray  # (4,) 1.0 present / 0.0 absent
    neighbor_ids: tuple[int | None, ...]
    num_agents: int
    step: int = 0

    def tokens(self) -> np.ndarray:
        """(5, state_dim + num_agents) rows: ego first, then N, S, E, W."""
        dim = self.ego.shape[0]
        rows = np.zeros((5, dim + self.num_agents))
        rows[0, :dim] = self.ego
        rows[0, dim + self.agent] = 1.0
        for d, j in enumerate(self.neighbor_ids):
            if j is None:
                continue
            rows[1 + d, :dim] = self.neighbors[d]
            rows[1 + d, dim + j] = 1.0
        return rows

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tokens().ravel(), self.mask])


def assemble_observation(agent_id: int, states: Sequence[np.ndarray], network: RoadNetwork,
                         step: int = 0) -> Observation:
    n = network.num_intersections
    if not 0 <= agent_id < n:
        raise ValueError(f"unknown agent id {agent_id}")
    ego = np.asarray(states[agent_id], dtype=float)
    neigh = np.zeros((4, ego.shape[0]))
    mask = np.zeros(4)
    ids = network.intersections[agent_id].neighbors
    for d, j in enumerate(ids):
        if j is not None:
            neigh[d] = states[j]
            mask[d] = 1.0
    return Observation(agent_id, ego, neigh, mask, tuple(ids), n, step)


class QdseCsvDump:
    """Append per-step raw lane features to a CSV file for offline inspection."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(["step", "agent", "lane", *QDSE_FIELDS])

    def write(self, step: int, agent: int, q: QdseVector) -> None:
        for lane in range(q.values.shape[1]):
            self._w.writerow([step, agent, lane, *(float(v) for v in q.values[:, lane])])

    def close(self) -> None:
        self._fh.close()
