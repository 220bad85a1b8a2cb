"""Discrete-time microscopic simulation of a signalized network.

The integrator is semi-implicit Euler on IDM accelerations with a hard
bumper-gap floor. Red and yellow signals act as a stationary leader at the
stop line. Each sub-step also maintains two per-lane ledgers that reset at the
start of every decision interval:

* flow counters ``entered`` / ``departed`` (vehicles crossing the lane's
  start / stop line), and
* queue counters ``queue_joined`` / ``queue_left`` (transitions into and out
  of the stopped state), which make ``Q(t+1) = Q(t) + joined - left`` an exact
  integer identity per lane.
"""

from __future__ import annotations

import bisect
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

from .flow import ScheduledVehicle
from .idm import IdmParams
from .network import ALL_RED, NUM_PHASES, RoadNetwork

STOP_SPEED = 0.1
_MIN_GAP = 1e-3


class Vehicle:
    __slots__ = ("id", "lanes", "idx", "x", "v", "nx", "nv", "v0", "a", "b", "s0", "T",
                 "delta", "length", "two_sqrt_ab", "entry_time", "exit_time", "stopped",
                 "link_entry_time", "route_length")

    def __init__(self, vid: str, lanes: list[int], params: IdmParams, route_length: float):
        self.id = vid
        self.lanes = lanes
        self.idx = 0
        self.x = 0.0
        self.v = 0.0
        self.nx = 0.0
        self.nv = 0.0
        self.v0 = math.inf if params.v0 is None else params.v0
        self.a = params.a_max
        self.b = params.b
        self.s0 = params.s0
        self.T = params.T
        self.delta = params.delta
        self.length = params.length
        self.two_sqrt_ab = 2.0 * math.sqrt(params.a_max * params.b)
        self.entry_time = math.nan
        self.exit_time = math.nan
        self.stopped = False
        self.link_entry_time = math.nan
        self.route_length = route_length

    @property
    def lane(self) -> int:
        return self.lanes[self.idx]

    def __repr__(self) -> str:
        return f"Vehicle({self.id!r}, lane={self.lane}, x={self.x:.2f}, v={self.v:.2f})"


@dataclass
class SignalState:
    phase: int = 0
    previous: int = 0
    yellow_left: float = 0.0

    @property
    def in_yellow(self) -> bool:
        return self.yellow_left > 0


@dataclass(frozen=True)
class LaneMeasurement:
    """Snapshot of one lane at a decision boundary (vehicles listed front first)."""

    lane: int
    length: float
    positions: tuple[float, ...]
    speeds: tuple[float, ...]
    rears: tuple[float, ...]
    entered: int = 0
    departed: int = 0
    queue_joined: int = 0
    queue_left: int = 0

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def stopped(self) -> int:
        return sum(1 for v in self.speeds if v < STOP_SPEED)

    @property
    def moving(self) -> int:
        return self.count - self.stopped

    @property
    def movers(self) -> list[tuple[float, float]]:
        return [(x, v) for x, v in zip(self.positions, self.speeds) if v >= STOP_SPEED]

    @property
    def queue_tail(self) -> float:
        """Rear bumper of the hindmost stopped vehicle, or the stop line."""
        tails = [r for r, v in zip(self.rears, self.speeds) if v < STOP_SPEED]
        return min(tails) if tails else self.length

    def approaching(self) -> list[tuple[float, float]]:
        """Movers behind the queue tail, foremost first."""
        tail = self.queue_tail
        return [(x, v) for x, v in self.movers if x <= tail]

    @property
    def d_fr(self) -> float | None:
        """Distance from queue tail (or stop line) back to the foremost approaching mover."""
        ahead = self.approaching()
        if not ahead:
            return None
        return self.queue_tail - ahead[0][0]


@dataclass(frozen=True)
class IntersectionMeasurement:
    index: int
    phase: int
    in_yellow: bool
    incoming: tuple[LaneMeasurement, ...]
    outgoing: tuple[LaneMeasurement, ...]


@dataclass
class TripRecord:
    vehicle: str
    t_start: float
    t_end: float
    route_length: float
    arrived: bool


@dataclass
class SimConfig:
    dt: float = 1.0
    decision_interval: float = 5.0
    yellow: float = 2.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        n = self.decision_interval / self.dt
        if abs(n - round(n)) > 1e-9:
            raise ValueError("decision interval must be a multiple of dt")
        if self.yellow > self.decision_interval:
            raise ValueError("yellow must not exceed the decision interval")


class SimState:
    """Mutable world: vehicles on lanes, signals, clock, ledgers."""

    def __init__(self, net: RoadNetwork, schedule: Sequence[ScheduledVehicle],
                 config: SimConfig | None = None):
        self.net = net
        self.config = config or SimConfig()
        self.clock = 0.0
        self.lanes: list[list[Vehicle]] = [[] for _ in range(net.num_lanes)]
        self.signals = [SignalState() for _ in range(net.num_intersections)]
        self.green = [False] * net.num_lanes
        self._lane_length = net.lane_length
        self._lane_speed = net.lane_speed
        self._schedule = list(schedule)
        self._next = 0
        self._waiting: dict[int, deque[ScheduledVehicle]] = {}
        self._waiting_count = 0
        self.entered = [0] * net.num_lanes
        self.departed = [0] * net.num_lanes
        self.queue_joined = [0] * net.num_lanes
        self.queue_left = [0] * net.num_lanes
        self.spawned = 0
        self.in_network = 0
        self.arrived: list[Vehicle] = []
        self.active: dict[str, Vehicle] = {}
        self.dwells: list[tuple[int, float]] = []
        self.speed_sum = 0.0
        self.speed_samples = 0
        for i in range(net.num_intersections):
            self._refresh_green(i)
        self.spawn_due()

    # -- signals -------------------------------------------------------------

    def _refresh_green(self, i: int) -> None:
        sig = self.signals[i]
        it = self.net.intersections[i]
        if sig.in_yellow:
            lanes = self.net.green_lanes(i, sig.previous) & self.net.green_lanes(i, sig.phase)
        else:
            lanes = self.net.green_lanes(i, sig.phase)
        for lane in it.incoming_lanes:
            self.green[lane] = lane in lanes

    def set_phase(self, i: int, phase: int) -> None:
        """Request ``phase`` at intersection ``i`` for the coming interval.

        Re-selecting the active phase extends it. A change inserts the
        configured yellow for movements that lose right of way; movements that
        stay green keep flowing and newly-green ones wait for the yellow to end.
        """
        if phase != ALL_RED and not 0 <= phase < NUM_PHASES:
            raise ValueError(f"phase id must be in 0..{NUM_PHASES - 1}, got {phase}")
        sig = self.signals[i]
        if phase == sig.phase:
            return
        sig.previous = sig.phase
        sig.phase = phase
        sig.yellow_left = self.config.yellow
        self._refresh_green(i)

    def green_movements(self, i: int) -> set[tuple[int, int]]:
        it = self.net.intersections[i]
        return {self.net.lane_movement[lane] for lane in it.incoming_lanes if self.green[lane]}

    # -- demand --------------------------------------------------------------

    @property
    def deferred(self) -> int:
        return self._waiting_count

    @property
    def scheduled_due(self) -> int:
        return self._next

    def spawn_due(self) -> int:
        """Insert every due vehicle whose entry lane has room; defer the rest."""
        sched = self._schedule
        while self._next < len(sched) and sched[self._next].start_time <= self.clock + 1e-9:
            sv = sched[self._next]
            lanes = self.net.route_lanes(sv.route)
            self._waiting.setdefault(lanes[0], deque()).append(sv)
            self._waiting_count += 1
            self._next += 1
        spawned = 0
        for lane in sorted(self._waiting):
            queue = self._waiting[lane]
            while queue:
                if not self._try_insert(queue[0], lane):
                    break
                queue.popleft()
                self._waiting_count -= 1
                spawned += 1
        return spawned

    def _try_insert(self, sv: ScheduledVehicle, lane: int) -> bool:
        vehs = self.lanes[lane]
        limit = self._lane_speed[lane]
        speed = sv.params.desired_speed(limit)
        p = sv.params
        if vehs:
            last = vehs[-1]
            gap = last.x - last.length
            if gap >= p.s0 + speed * p.T:
                pass
            elif gap >= p.s0:
                speed = min(speed, last.v)
            else:
                return False
        route = sv.route
        length = sum(self.net.links[k].length for k in route)
        veh = Vehicle(sv.id, self.net.route_lanes(route), p, length)
        veh.x = 0.0
        veh.v = speed
        veh.entry_time = self.clock
        veh.link_entry_time = self.clock
        veh.stopped = False
        vehs.append(veh)
        self.entered[lane] += 1
        if speed < STOP_SPEED:
            veh.stopped = True
            self.queue_joined[lane] += 1
        self.spawned += 1
        self.in_network += 1
        self.active[veh.id] = veh
        return True

    def place_vehicle(self, vid: str, route: Sequence[int], x: float, v: float,
                      params: IdmParams | None = None) -> Vehicle:
        """Put a vehicle directly on its route's first lane (scripted scenarios)."""
        params = params or IdmParams()
        lanes = self.net.route_lanes(route)
        lane = lanes[0]
        if not 0 <= x <= self._lane_length[lane]:
            raise ValueError(f"position {x} outside lane {lane}")
        vehs = self.lanes[lane]
        veh = Vehicle(vid, lanes, params, sum(self.net.links[k].length for k in route))
        veh.x = float(x)
        veh.v = min(float(v), self._lane_speed[lane])
        veh.entry_time = veh.link_entry_time = self.clock
        veh.stopped = veh.v < STOP_SPEED
        pos = bisect.bisect_left([-u.x for u in vehs], -veh.x)
        for other in vehs[pos - 1:pos + 1]:
            lead, foll = (other, veh) if other.x >= veh.x else (veh, other)
            if foll.x > lead.x - lead.length:
                raise ValueError(f"vehicle {vid} overlaps {other.id}")
        vehs.insert(pos, veh)
        self.spawned += 1
        self.in_network += 1
        self.active[vid] = veh
        return veh

    # -- dynamics ------------------------------------------------------------

    def reset_counters(self) -> None:
        n = self.net.num_lanes
        self.entered = [0] * n
        self.departed = [0] * n
        self.queue_joined = [0] * n
        self.queue_left = [0] * n

    def step(self) -> None:
        """Advance one sub-step of ``config.dt`` seconds."""
        dt = self.config.dt
        lanes = self.lanes
        green = self.green
        lane_length = self._lane_length
        lane_speed = self._lane_speed

        # accelerations from the current snapshot
        for lane_id, vehs in enumerate(lanes):
            if not vehs:
                continue
            ls = lane_length[lane_id]
            limit = lane_speed[lane_id]
            lead = None
            for veh in vehs:
                v = veh.v
                x = veh.x
                v0 = veh.v0 if veh.v0 < limit else limit
                free = 1.0 - (v / v0) ** veh.delta
                constrained = True
                vl = 0.0
                if lead is not None:
                    gap = lead.x - lead.length - x
                    vl = lead.v
                else:
                    nxt = veh.idx + 1
                    gap = ls - x
                    if nxt >= len(veh.lanes):
                        constrained = False
                    elif green[lane_id]:
                        tgt = lanes[veh.lanes[nxt]]
                        if tgt:
                            last = tgt[-1]
                            gap += last.x - last.length
                            vl = last.v
                        else:
                            constrained = False
                if not constrained:
                    acc = veh.a * free
                else:
                    if gap < _MIN_GAP:
                        gap = _MIN_GAP
                    s_star = veh.s0 + v * veh.T + v * (v - vl) / veh.two_sqrt_ab
                    acc = veh.a * (free - (s_star / gap) ** 2)
                nv = v + acc * dt
                if nv < 0.0:
                    nv = 0.0
                elif nv > limit:
                    nv = limit
                veh.nv = nv
                veh.nx = x + nv * dt
                lead = veh
        for vehs in lanes:
            for veh in vehs:
                veh.x = veh.nx
                veh.v = veh.nv

        self.clock += dt
        now = self.clock
        for lane_id, vehs in enumerate(lanes):
            if not vehs:
                continue
            ls = lane_length[lane_id]
            while vehs and vehs[0].x > ls:
                veh = vehs[0]
                nxt = veh.idx + 1
                if nxt >= len(veh.lanes):
                    vehs.pop(0)
                    self._leave_lane(veh, lane_id)
                    veh.exit_time = now
                    self.in_network -= 1
                    self.arrived.append(veh)
                    del self.active[veh.id]
                    continue
                target = veh.lanes[nxt]
                overflow = veh.x - ls
                tgt = lanes[target]
                if green[lane_id] and (not tgt or overflow <= tgt[-1].x - tgt[-1].length):
                    vehs.pop(0)
                    self._leave_lane(veh, lane_id)
                    self.dwells.append((self.net.lane_intersection[lane_id], now - veh.link_entry_time))
                    veh.idx = nxt
                    veh.x = min(overflow, lane_length[target])
                    veh.link_entry_time = now
                    tgt.append(veh)
                    self.entered[target] += 1
                else:
                    veh.x = ls
                    veh.v = 0.0
                    break
            prev = None
            for veh in vehs:
                if prev is not None:
                    cap = prev.x - prev.length
                    if veh.x > cap:
                        veh.x = cap
                        if veh.v > prev.v:
                            veh.v = prev.v
                prev = veh

        # queue ledger and speed statistics
        joined = self.queue_joined
        left = self.queue_left
        ssum = 0.0
        count = 0
        for lane_id, vehs in enumerate(lanes):
            for veh in vehs:
                now_stopped = veh.v < STOP_SPEED
                if now_stopped != veh.stopped:
                    if now_stopped:
                        joined[lane_id] += 1
                    else:
                        left[lane_id] += 1
                    veh.stopped = now_stopped
                ssum += veh.v
                count += 1
        self.speed_sum += ssum
        self.speed_samples += count

        for i, sig in enumerate(self.signals):
            if sig.yellow_left > 0:
                sig.yellow_left -= dt
                if sig.yellow_left <= 1e-9:
                    sig.yellow_left = 0.0
                    self._refresh_green(i)
        self.spawn_due()

    def _leave_lane(self, veh: Vehicle, lane_id: int) -> None:
        self.departed[lane_id] += 1
        if veh.stopped:
            self.queue_left[lane_id] += 1
        veh.stopped = False

    # -- measurement ---------------------------------------------------------

    def measure_lane(self, lane: int) -> LaneMeasurement:
        vehs = self.lanes[lane]
        return LaneMeasurement(
            lane=lane,
            length=self._lane_length[lane],
            positions=tuple(v.x for v in vehs),
            speeds=tuple(v.v for v in vehs),
            rears=tuple(v.x - v.length for v in vehs),
            entered=self.entered[lane],
            departed=self.departed[lane],
            queue_joined=self.queue_joined[lane],
            queue_left=self.queue_left[lane],
        )

    def measure(self) -> list[IntersectionMeasurement]:
        cache: dict[int, LaneMeasurement] = {}

        def get(lane: int) -> LaneMeasurement:
            m = cache.get(lane)
            if m is None:
                m = cache[lane] = self.measure_lane(lane)
            return m

        out = []
        for it in self.net.intersections:
            sig = self.signals[it.index]
            out.append(IntersectionMeasurement(
                index=it.index,
                phase=sig.phase,
                in_yellow=sig.in_yellow,
                incoming=tuple(get(l) for l in it.incoming_lanes),
                outgoing=tuple(get(l) for l in it.outgoing_lanes),
            ))
        return out

    def queue_lengths(self) -> list[int]:
        return [sum(1 for v in vehs if v.stopped) for vehs in self.lanes]

    def trip_records(self, horizon: float) -> list[TripRecord]:
        """One record per vehicle that entered; non-arrivals end at ``horizon``."""
        recs = [TripRecord(v.id, v.entry_time, v.exit_time, v.route_length, True)
                for v in self.arrived]
        recs.extend(TripRecord(v.id, v.entry_time, horizon, v.route_length, False)
                    for v in self.active.values())
        recs.sort(key=lambda r: (r.t_start, r.vehicle))
        return recs


def step_sim(state: SimState, dt: float | None = None) -> SimState:
    if dt is not None and abs(dt - state.config.dt) > 1e-12:
        raise ValueError(f"state integrates at dt={state.config.dt}, got {dt}")
    state.step()
    return state


def set_phase(state: SimState, intersection: int, phase: int) -> None:
    state.set_phase(intersection, phase)


def advance_decision_interval(state: SimState,
                              joint_phases: Sequence[int]) -> list[IntersectionMeasurement]:
    """Apply one phase per intersection and simulate one decision interval."""
    if len(joint_phases) != state.net.num_intersections:
        raise ValueError(
            f"expected {state.net.num_intersections} phases, got {len(joint_phases)}")
    for i, p in enumerate(joint_phases):
        state.set_phase(i, int(p))
    state.reset_counters()
    n = int(round(state.config.decision_interval / state.config.dt))
    for _ in range(n):
        state.step()
    return state.measure()


def spawn_from_flow(state: SimState, schedule: Sequence[ScheduledVehicle] = ()) -> int:
    """Merge extra departures into the schedule and spawn whatever is due now."""
    if schedule:
        pending = state._schedule[state._next:]
        merged = sorted(list(pending) + list(schedule), key=lambda s: s.start_time)
        state._schedule = state._schedule[:state._next] + merged
    return state.spawn_due()
