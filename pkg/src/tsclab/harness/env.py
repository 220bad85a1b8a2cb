"""Multi-agent environment over the simulator: observations, rewards, episode metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..encoding import (StateConfig, apply_sensor_noise, compute_qdse, compute_reward,
                        compute_state, state_dim)
from ..sim.engine import SimConfig, SimState, advance_decision_interval
from ..sim.flow import ScheduledVehicle
from ..sim.network import RoadNetwork
from . import metrics


class TrafficEnv:
    """Synchronous decision-step environment; one agent per intersection."""

    def __init__(self, net: RoadNetwork, state: StateConfig | None = None,
                 sim: SimConfig | None = None, horizon: float = 3600.0,
                 noise_sigma: float = 0.0):
        self.net = net
        self.state_cfg = state or StateConfig()
        self.sim_cfg = sim or SimConfig()
        steps = horizon / self.sim_cfg.decision_interval
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("decision interval must divide the episode length")
        self.horizon = horizon
        self.n_steps = int(round(steps))
        if noise_sigma and self.state_cfg.kind != "QDSE":
            raise ValueError("sensor noise is defined only for the QDSE state")
        self.noise_sigma = noise_sigma
        self.n_agents = net.num_intersections
        lengths = {net.lane_length[l] for it in net.intersections for l in it.incoming_lanes}
        self.state_dim = state_dim(self.state_cfg.kind, max(lengths), self.state_cfg.cell)
        self.token_dim = self.state_dim + self.n_agents
        self._neighbors = np.array([[-1 if j is None else j for j in it.neighbors]
                                    for it in net.intersections], dtype=np.int64)
        self.mask = (self._neighbors >= 0).astype(float)
        self._lane_speed = [[net.lane_speed[l] for l in it.incoming_lanes]
                            for it in net.intersections]
        self._tracked = [it.incoming_lanes + it.outgoing_lanes for it in net.intersections]
        self._tracked_scale = np.array([[net.lane_length[l] / self.state_cfg.vehicle_spacing
                                         for l in lanes] for lanes in self._tracked])
        controlled = sorted({l for it in net.intersections for l in it.incoming_lanes})
        self._controlled = np.array(controlled, dtype=np.int64)
        self.sim: SimState | None = None

    # -- episode ----------------------------------------------------------------

    def reset(self, schedule: Sequence[ScheduledVehicle],
              noise_rng: np.random.Generator | None = None) -> None:
        if self.noise_sigma and noise_rng is None:
            raise ValueError("noisy observations need a noise rng")
        self.sim = SimState(self.net, schedule, self.sim_cfg)
        self.noise_rng = noise_rng
        self.t = 0
        self.meas = self.sim.measure()
        self._queue_means: list[float] = []
        self._queue_stds: list[float] = []

    @property
    def done(self) -> bool:
        return self.t >= self.n_steps

    def step(self, phases: Sequence[int]) -> np.ndarray:
        """Apply one phase per agent for one decision interval; returns rewards (N,)."""
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        self.meas = advance_decision_interval(self.sim, phases)
        self.t += 1
        q = np.array(self.sim.queue_lengths(), dtype=float)[self._controlled]
        self._queue_means.append(float(q.mean()))
        self._queue_stds.append(float(q.std()))
        return np.array([compute_reward(m) for m in self.meas])

    # -- observations -----------------------------------------------------------

    def states(self) -> np.ndarray:
        cfg = self.state_cfg
        out = np.zeros((self.n_agents, self.state_dim))
        for i, m in enumerate(self.meas):
            if cfg.kind == "QDSE" and self.noise_sigma > 0:
                q = apply_sensor_noise(compute_qdse(m.incoming, cfg.follow_window),
                                       self.noise_sigma, self.noise_rng)
                out[i] = (q.normalized(cfg.vehicle_spacing) if cfg.normalize else q.values).ravel()
            else:
                out[i] = compute_state(cfg, m, self.net, lane_speed=self._lane_speed[i])
        return out

    def observe(self) -> tuple[np.ndarray, np.ndarray]:
        """Tokens (N, 5, state_dim + N) and neighbour mask (N, 4)."""
        s = self.states()
        n, dim = self.n_agents, self.state_dim
        tokens = np.zeros((n, 5, dim + n))
        tokens[:, 0, :dim] = s
        tokens[np.arange(n), 0, dim + np.arange(n)] = 1.0
        for d in range(4):
            j = self._neighbors[:, d]
            present = j >= 0
            tokens[present, 1 + d, :dim] = s[j[present]]
            tokens[np.nonzero(present)[0], 1 + d, dim + j[present]] = 1.0
        return tokens, self.mask.copy()

    def neighbor_actions(self, actions: np.ndarray) -> np.ndarray:
        """(N, 4) phase ids of each agent's N/S/E/W neighbours (0 where absent)."""
        actions = np.asarray(actions, dtype=np.int64)
        return np.where(self._neighbors >= 0, actions[np.maximum(self._neighbors, 0)], 0)

    def queue_targets(self) -> np.ndarray:
        """(N, 24) stopped counts on incoming + outgoing lanes, scaled by lane capacity."""
        q = self.sim.queue_lengths()
        raw = np.array([[q[l] for l in lanes] for lanes in self._tracked], dtype=float)
        return raw / self._tracked_scale

    # -- metrics ----------------------------------------------------------------

    def episode_metrics(self) -> dict:
        sim = self.sim
        recs = sim.trip_records(self.horizon)
        out = {
            "n_vehicles": len(recs),
            "arrived": len(sim.arrived),
            "deferred": sim.deferred,
            "empty": not recs,
            "travel_time": metrics.avg_travel_time(recs) if recs else float("nan"),
            "mean_queue": float(np.mean(self._queue_means)) if self._queue_means else 0.0,
            "queue_std": float(np.mean(self._queue_stds)) if self._queue_stds else 0.0,
            "mean_speed": sim.speed_sum / sim.speed_samples if sim.speed_samples else 0.0,
        }
        return out

    def intersection_stats(self) -> list[dict]:
        return metrics.intersection_travel_times(self.sim.dwells, self.n_agents)
