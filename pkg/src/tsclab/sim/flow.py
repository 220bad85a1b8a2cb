"""Demand schedules: per-vehicle departures with routes and driver parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .idm import IdmParams
from .network import TURN_EXIT, NetworkError, RoadNetwork, boundary_routes


@dataclass(frozen=True)
class FlowEntry:
    """One CityFlow-style flow row: vehicles every ``interval`` s in [start, end]."""

    route: tuple[str, ...]
    start_time: float
    end_time: float
    interval: float = 1.0
    params: IdmParams = field(default_factory=IdmParams)

    def departures(self) -> list[float]:
        if self.end_time < self.start_time:
            return []
        if self.interval <= 0:
            return [self.start_time]
        n = int(np.floor((self.end_time - self.start_time) / self.interval + 1e-9)) + 1
        return [self.start_time + k * self.interval for k in range(n)]


@dataclass(frozen=True)
class ScheduledVehicle:
    id: str
    start_time: float
    route: tuple[int, ...]
    params: IdmParams


def expand_flows(net: RoadNetwork, entries: Sequence[FlowEntry],
                 horizon: float | None = None, jitter: float = 0.0,
                 rng: np.random.Generator | None = None) -> list[ScheduledVehicle]:
    """Expand flow rows into individual departures sorted by start time.

    Routes are resolved against ``net`` here, so an unknown road or an
    impossible turn fails at load time rather than mid-simulation.
    """
    out = []
    for n_entry, entry in enumerate(entries):
        try:
            route = tuple(net.link_index[r] for r in entry.route)
        except KeyError as exc:
            raise NetworkError(f"flow {n_entry}: route references unknown road {exc.args[0]!r}") from None
        net.route_lanes(route)
        for k, t in enumerate(entry.departures()):
            if jitter > 0:
                if rng is None:
                    raise ValueError("spawn jitter requires an rng")
                t = t + float(rng.uniform(0.0, jitter))
            if horizon is not None and t >= horizon:
                continue
            out.append(ScheduledVehicle(f"flow_{n_entry}_{k}", float(t), route, entry.params))
    out.sort(key=lambda s: s.start_time)
    return out


def synthetic_flow(net: RoadNetwork, rate_per_hour: float, horizon: float,
                   rng: np.random.Generator,
                   turn_probs: tuple[float, float, float] = (0.2, 0.6, 0.2),
                   params: IdmParams | None = None) -> list[ScheduledVehicle]:
    """Poisson arrivals on every boundary entry link with random turning routes.

    ``rate_per_hour`` is per entry link. At each intersection a vehicle turns
    left/straight/right with ``turn_probs`` until it leaves the grid.
    """
    params = params or IdmParams()
    probs = np.asarray(turn_probs, dtype=float)
    probs = probs / probs.sum()
    rate = rate_per_hour / 3600.0
    vehicles = []
    for k in boundary_routes(net):
        if net.link_intersection_of(k) < 0:
            continue  # entry link that feeds nothing
        t = 0.0
        n = 0
        while rate > 0:
            t += float(rng.exponential(1.0 / rate))
            if t >= horizon:
                break
            route = [k]
            while True:
                it = net.link_intersection_of(route[-1])
                if it < 0:
                    break
                d = net.intersections[it].in_links.index(route[-1])
                turn = int(rng.choice(3, p=probs))
                route.append(net.intersections[it].out_links[TURN_EXIT[d][turn]])
            vehicles.append(ScheduledVehicle(f"veh_{k}_{n}", t, tuple(route), params))
            n += 1
    vehicles.sort(key=lambda s: (s.start_time, s.id))
    return vehicles

