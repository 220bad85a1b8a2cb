"""Road network topology: links, lanes, intersections and the eight-phase table.

Conventions used everywhere in the package:

* Approaches and neighbor slots are ordered ``N, S, E, W``. An intersection's
  "N approach" is the incoming link arriving *from* the north.
* Every link carries three lanes indexed by turn: ``0`` left, ``1`` straight,
  ``2`` right. A vehicle picks the lane matching its next turn when it enters
  a link; on its final link it uses the straight lane.
* Lane ids are global integers ``link_index * 3 + turn``.
* Incoming lanes of an intersection are listed approach-major
  (N-left, N-straight, N-right, S-left, ...), outgoing lanes by exit
  direction in the same order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

N, S, E, W = 0, 1, 2, 3
DIRECTIONS = ("N", "S", "E", "W")
OPPOSITE = (S, N, W, E)

LEFT, STRAIGHT, RIGHT = 0, 1, 2
TURNS = ("left", "straight", "right")
LANES_PER_LINK = 3

# exit direction for (approach, turn); approach N means travelling south
TURN_EXIT = {
    N: (E, S, W),
    S: (W, N, E),
    E: (S, W, N),
    W: (N, E, S),
}

# controlled (approach, turn) pairs; right turns are green in every phase
PHASE_NAMES = (
    "NS-Straight",
    "WE-Straight",
    "NS-Left",
    "WE-Left",
    "S-StraightLeft",
    "W-StraightLeft",
    "N-StraightLeft",
    "E-StraightLeft",
)
PHASE_MOVEMENTS: tuple[frozenset[tuple[int, int]], ...] = (
    frozenset({(N, STRAIGHT), (S, STRAIGHT)}),
    frozenset({(W, STRAIGHT), (E, STRAIGHT)}),
    frozenset({(N, LEFT), (S, LEFT)}),
    frozenset({(W, LEFT), (E, LEFT)}),
    frozenset({(S, STRAIGHT), (S, LEFT)}),
    frozenset({(W, STRAIGHT), (W, LEFT)}),
    frozenset({(N, STRAIGHT), (N, LEFT)}),
    frozenset({(E, STRAIGHT), (E, LEFT)}),
)
NUM_PHASES = len(PHASE_MOVEMENTS)
ALL_RED = -1


class NetworkError(ValueError):
    """Raised when a network description is malformed or unsupported."""


def movements_conflict(a: tuple[int, int], b: tuple[int, int]) -> bool:
    """True when two (approach, turn) movements cross inside the box.

    Right turns are treated as unrestricted, matching the phase design.
    """
    (da, ta), (db, tb) = a, b
    if da == db or ta == RIGHT or tb == RIGHT:
        return False
    if OPPOSITE[da] == db:
        return (ta == LEFT) != (tb == LEFT)
    return True


def phase_green_movements(phase: int) -> frozenset[tuple[int, int]]:
    """All (approach, turn) pairs green under ``phase``, rights included."""
    if phase == ALL_RED:
        return frozenset()
    rights = {(d, RIGHT) for d in range(4)}
    return PHASE_MOVEMENTS[phase] | rights


@dataclass(frozen=True)
class Link:
    id: str
    start: str
    end: str
    length: float
    speed_limit: float
    points: tuple[tuple[float, float], ...] = ()


@dataclass
class Intersection:
    index: int
    name: str
    in_links: tuple[int, int, int, int]
    out_links: tuple[int, int, int, int]
    neighbors: tuple[int | None, int | None, int | None, int | None]
    position: tuple[float, float] = (0.0, 0.0)
    raw_phases: list = field(default_factory=list)

    @property
    def incoming_lanes(self) -> list[int]:
        return [k * LANES_PER_LINK + t for k in self.in_links for t in range(LANES_PER_LINK)]

    @property
    def outgoing_lanes(self) -> list[int]:
        return [k * LANES_PER_LINK + t for k in self.out_links for t in range(LANES_PER_LINK)]


class RoadNetwork:
    """Immutable view of links, lanes and intersections.

    Built through :func:`build_grid`, :func:`load_network` or the CityFlow
    reader. Construction validates the topology and raises
    :class:`NetworkError` naming the offending element.
    """

    def __init__(self, links: Sequence[Link], intersections: Sequence[Intersection]):
        self.links = tuple(links)
        self.intersections = tuple(intersections)
        self.link_index = {lk.id: k for k, lk in enumerate(self.links)}
        if len(self.link_index) != len(self.links):
            raise NetworkError("duplicate link ids")
        self.name_index = {it.name: it.index for it in self.intersections}

        n_lanes = len(self.links) * LANES_PER_LINK
        self.num_lanes = n_lanes
        self.lane_length = [lk.length for lk in self.links for _ in range(LANES_PER_LINK)]
        self.lane_speed = [lk.speed_limit for lk in self.links for _ in range(LANES_PER_LINK)]
        # downstream intersection of each lane (-1 for links leaving the network)
        self.lane_intersection = [-1] * n_lanes
        # (approach, turn) of each incoming lane at its downstream intersection
        self.lane_movement: list[tuple[int, int] | None] = [None] * n_lanes
        self.lane_target_link = [-1] * n_lanes
        self.link_upstream = [-1] * len(self.links)
        self.link_downstream = [-1] * len(self.links)
        self._turns: dict[tuple[int, int], int] = {}
        self._validate_and_index()

    def _validate_and_index(self) -> None:
        seen_in: dict[int, str] = {}
        for it in self.intersections:
            if len(it.in_links) != 4 or len(it.out_links) != 4:
                raise NetworkError(f"intersection {it.name}: heterogeneous layout unsupported")
            for d, k in enumerate(it.in_links):
                if not 0 <= k < len(self.links):
                    raise NetworkError(f"intersection {it.name}: unknown incoming link {k}")
                if k in seen_in:
                    raise NetworkError(
                        f"link {self.links[k].id} enters both {seen_in[k]} and {it.name}")
                seen_in[k] = it.name
                self.link_downstream[k] = it.index
                for t in range(LANES_PER_LINK):
                    lane = k * LANES_PER_LINK + t
                    self.lane_intersection[lane] = it.index
                    self.lane_movement[lane] = (d, t)
                    target = it.out_links[TURN_EXIT[d][t]]
                    self.lane_target_link[lane] = target
                    self._turns[(k, target)] = t
            for k in it.out_links:
                if not 0 <= k < len(self.links):
                    raise NetworkError(f"intersection {it.name}: unknown outgoing link {k}")
                self.link_upstream[k] = it.index
            for d, j in enumerate(it.neighbors):
                if j is None:
                    continue
                if not 0 <= j < len(self.intersections):
                    raise NetworkError(f"intersection {it.name}: unknown neighbor {j}")
                back = self.intersections[j].neighbors[OPPOSITE[d]]
                if back != it.index:
                    raise NetworkError(
                        f"intersection {it.name}: asymmetric neighbor {DIRECTIONS[d]} -> "
                        f"{self.intersections[j].name}")
        for lk in self.links:
            if not lk.length > 0:
                raise NetworkError(f"link {lk.id}: length must be positive")
            if not lk.speed_limit > 0:
                raise NetworkError(f"link {lk.id}: speed limit must be positive")

    @property
    def num_intersections(self) -> int:
        return len(self.intersections)

    def link_intersection_of(self, link: int) -> int:
        """Downstream intersection of a link, -1 when it leaves the network."""
        return self.link_downstream[link]

    def turn(self, from_link: int, to_link: int) -> int:
        try:
            return self._turns[(from_link, to_link)]
        except KeyError:
            raise NetworkError(
                f"no movement from link {self.links[from_link].id} "
                f"to link {self.links[to_link].id}") from None

    def route_lanes(self, route: Sequence[int]) -> list[int]:
        """Lane sequence a vehicle follows along a route of link indices."""
        if not route:
            raise NetworkError("empty route")
        lanes = []
        for a, b in zip(route[:-1], route[1:]):
            lanes.append(a * LANES_PER_LINK + self.turn(a, b))
        lanes.append(route[-1] * LANES_PER_LINK + STRAIGHT)
        return lanes

    def green_lanes(self, intersection: int, phase: int) -> frozenset[int]:
        it = self.intersections[intersection]
        return frozenset(
            it.in_links[d] * LANES_PER_LINK + t for d, t in phase_green_movements(phase))

    def movements(self, intersection: int) -> list[tuple[int, int]]:
        """All 36 lane-level (incoming lane, outgoing lane) movements."""
        it = self.intersections[intersection]
        out = []
        for lane in it.incoming_lanes:
            target = self.lane_target_link[lane]
            out.extend((lane, target * LANES_PER_LINK + t) for t in range(LANES_PER_LINK))
        return out

    def capacity(self, lane: int, gap: float = 7.5) -> float:
        """Jam capacity of a lane: vehicles that fit at ``gap`` metres each."""
        return self.lane_length[lane] / gap


def _node_name(x: int, y: int) -> str:
    return f"intersection_{x}_{y}"


# heading codes follow the CityFlow datasets: 0 east, 1 north, 2 west, 3 south
_HEADING_DELTA = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}
# exit direction -> heading code; approach d arrives with heading of OPPOSITE[d] exit
_EXIT_HEADING = {N: 1, S: 3, E: 0, W: 2}


def build_grid(rows: int, cols: int, link_length: float = 300.0,
               speed_limit: float = 11.11) -> RoadNetwork:
    """Regular ``rows x cols`` grid with boundary source/sink links.

    Node coordinates follow the CityFlow synthetic-grid convention: real
    intersections sit at ``x in 1..cols``, ``y in 1..rows`` with ``y`` growing
    northward, virtual boundary nodes at ``0`` and ``cols+1`` / ``rows+1``.
    Intersection index ``r * cols + c`` has row ``r = 0`` on the north edge.
    """
    if rows < 1 or cols < 1:
        raise NetworkError(f"grid must be at least 1x1, got {rows}x{cols}")
    if not link_length > 0:
        raise NetworkError(f"link length must be positive, got {link_length}")

    def xy(r: int, c: int) -> tuple[int, int]:
        return c + 1, rows - r

    def is_real(x: int, y: int) -> bool:
        return 1 <= x <= cols and 1 <= y <= rows

    links: list[Link] = []
    index: dict[tuple[int, int, int], int] = {}

    def add_link(x: int, y: int, heading: int) -> int:
        key = (x, y, heading)
        if key not in index:
            dx, dy = _HEADING_DELTA[heading]
            x2, y2 = x + dx, y + dy
            links.append(Link(
                id=f"road_{x}_{y}_{heading}",
                start=_node_name(x, y),
                end=_node_name(x2, y2),
                length=float(link_length),
                speed_limit=float(speed_limit),
                points=((x * link_length, y * link_length), (x2 * link_length, y2 * link_length)),
            ))
            index[key] = len(links) - 1
        return index[key]

    intersections = []
    for r in range(rows):
        for c in range(cols):
            x, y = xy(r, c)
            in_links = []
            out_links = []
            neighbors: list[int | None] = []
            for d in (N, S, E, W):
                exit_heading = _EXIT_HEADING[d]
                dx, dy = _HEADING_DELTA[exit_heading]
                nx, ny = x + dx, y + dy
                # link arriving from direction d travels opposite to the exit heading
                in_links.append(add_link(nx, ny, (exit_heading + 2) % 4))
                out_links.append(add_link(x, y, exit_heading))
                if is_real(nx, ny):
                    neighbors.append((rows - ny) * cols + (nx - 1))
                else:
                    neighbors.append(None)
            intersections.append(Intersection(
                index=r * cols + c,
                name=_node_name(x, y),
                in_links=tuple(in_links),
                out_links=tuple(out_links),
                neighbors=tuple(neighbors),
                position=(x * link_length, y * link_length),
            ))
    return RoadNetwork(links, intersections)


def load_network(spec: dict) -> RoadNetwork:
    """Build a grid from a native description (``rows``, ``cols``, ``link_length``, ...)."""
    try:
        rows = int(spec["rows"])
        cols = int(spec["cols"])
    except KeyError as exc:
        raise NetworkError(f"network spec missing field {exc.args[0]!r}") from None
    return build_grid(rows, cols,
                      link_length=float(spec.get("link_length", 300.0)),
                      speed_limit=float(spec.get("speed_limit", 11.11)))


def boundary_routes(net: RoadNetwork) -> Iterable[int]:
    """Indices of links whose upstream node is outside the controlled set."""
    return (k for k in range(len(net.links)) if net.link_upstream[k] == -1)
