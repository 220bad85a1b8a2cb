"""Readers and writers for CityFlow ``roadnet.json`` / ``flow.json`` files."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any

from .flow import FlowEntry
from .idm import IdmParams
from .network import (DIRECTIONS, LANES_PER_LINK, OPPOSITE, TURN_EXIT, TURNS, Intersection,
                      Link, NetworkError, RoadNetwork)

log = logging.getLogger(__name__)

_TURN_OF_TYPE = {"turn_left": 0, "go_straight": 1, "turn_right": 2}
_TYPE_OF_TURN = {v: k for k, v in _TURN_OF_TYPE.items()}
_ROAD_KEYS = {"id", "points", "lanes", "startIntersection", "endIntersection"}
_VEHICLE_KEYS = {"length", "maxPosAcc", "usualNegAcc", "minGap", "maxSpeed", "headwayTime"}
_IGNORED_VEHICLE_KEYS = {"width", "maxNegAcc", "usualPosAcc"}


class SchemaError(NetworkError):
    """A CityFlow file does not match the expected layout; message carries a JSON path."""


def _load(source: str | Path | Any) -> Any:
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            return json.load(fh)
    return source


def _field(obj: Any, key: str, path: str) -> Any:
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: expected an object")
    if key not in obj:
        raise SchemaError(f"{path}.{key}: missing")
    return obj[key]


def _direction(dx: float, dy: float) -> int:
    """Compass direction of a vector (y grows northward)."""
    if abs(dx) >= abs(dy):
        return 2 if dx > 0 else 3  # E / W
    return 0 if dy > 0 else 1  # N / S


def _polyline_length(points: list[tuple[float, float]]) -> float:
    return sum(math.dist(a, b) for a, b in zip(points[:-1], points[1:]))


def read_roadnet(source: str | Path | dict) -> RoadNetwork:
    """Map a CityFlow roadnet into a :class:`RoadNetwork`.

    Every non-virtual intersection must have four 3-lane approaches whose lane
    index equals its turn (left, straight, right); anything else is rejected as
    a heterogeneous layout.
    """
    data = _load(source)
    roads_raw = _field(data, "roads", "$")
    inters_raw = _field(data, "intersections", "$")
    if not isinstance(roads_raw, list) or not isinstance(inters_raw, list):
        raise SchemaError("$: 'roads' and 'intersections' must be arrays")

    links: list[Link] = []
    for k, road in enumerate(roads_raw):
        path = f"$.roads[{k}]"
        for key in sorted(_ROAD_KEYS):
            _field(road, key, path)
        pts = []
        for m, p in enumerate(road["points"]):
            pts.append((float(_field(p, "x", f"{path}.points[{m}]")),
                        float(_field(p, "y", f"{path}.points[{m}]"))))
        if len(pts) < 2:
            raise SchemaError(f"{path}.points: need at least two points")
        lanes = road["lanes"]
        speeds = [float(_field(ln, "maxSpeed", f"{path}.lanes[{m}]")) for m, ln in enumerate(lanes)]
        if len(lanes) != LANES_PER_LINK:
            # lanes on links that feed a controlled intersection are checked below
            log.debug("road %s has %d lanes", road["id"], len(lanes))
        links.append(Link(
            id=str(road["id"]),
            start=str(road["startIntersection"]),
            end=str(road["endIntersection"]),
            length=_polyline_length(pts),
            speed_limit=max(speeds) if speeds else 11.11,
            points=tuple(pts),
        ))
    link_index = {lk.id: k for k, lk in enumerate(links)}

    controlled = []
    for k, inter in enumerate(inters_raw):
        path = f"$.intersections[{k}]"
        _field(inter, "id", path)
        virtual = bool(inter.get("virtual", False))
        if not virtual and inter.get("roadLinks"):
            controlled.append((k, inter))
    names = [str(inter["id"]) for _, inter in controlled]
    order = {name: n for n, name in enumerate(names)}

    intersections = []
    for n, (k, inter) in enumerate(controlled):
        path = f"$.intersections[{k}]"
        name = str(inter["id"])
        incoming = [j for j, lk in enumerate(links) if lk.end == name]
        outgoing = [j for j, lk in enumerate(links) if lk.start == name]
        if len(incoming) != 4 or len(outgoing) != 4:
            raise NetworkError(f"{path} ({name}): heterogeneous layout unsupported "
                               f"({len(incoming)} incoming, {len(outgoing)} outgoing roads)")
        in_links: list[int | None] = [None] * 4
        out_links: list[int | None] = [None] * 4
        for j in incoming:
            pts = links[j].points
            heading = _direction(pts[-1][0] - pts[-2][0], pts[-1][1] - pts[-2][1])
            approach = OPPOSITE[heading]
            if in_links[approach] is not None:
                raise NetworkError(f"{path} ({name}): heterogeneous layout unsupported "
                                   f"(two approaches from {DIRECTIONS[approach]})")
            in_links[approach] = j
        for j in outgoing:
            pts = links[j].points
            d = _direction(pts[1][0] - pts[0][0], pts[1][1] - pts[0][1])
            if out_links[d] is not None:
                raise NetworkError(f"{path} ({name}): heterogeneous layout unsupported "
                                   f"(two exits toward {DIRECTIONS[d]})")
            out_links[d] = j
        for j in incoming + outgoing:
            n_lanes = len(roads_raw[j]["lanes"])
            if n_lanes != LANES_PER_LINK:
                raise NetworkError(f"{path} ({name}): heterogeneous layout unsupported "
                                   f"(road {links[j].id} has {n_lanes} lanes)")
        _check_road_links(inter, path, name, in_links, out_links, link_index)

        neighbors: list[int | None] = []
        for d in range(4):
            up = links[in_links[d]].start
            neighbors.append(order.get(up))
        point = inter.get("point", {"x": 0.0, "y": 0.0})
        phases = inter.get("trafficLight", {}).get("lightphases", [])
        intersections.append(Intersection(
            index=n,
            name=name,
            in_links=tuple(in_links),
            out_links=tuple(out_links),
            neighbors=tuple(neighbors),
            position=(float(point.get("x", 0.0)), float(point.get("y", 0.0))),
            raw_phases=list(phases),
        ))
    return RoadNetwork(links, intersections)


def _check_road_links(inter: dict, path: str, name: str, in_links, out_links,
                      link_index: dict[str, int]) -> None:
    for m, rl in enumerate(inter["roadLinks"]):
        rpath = f"{path}.roadLinks[{m}]"
        kind = _field(rl, "type", rpath)
        if kind not in _TURN_OF_TYPE:
            raise SchemaError(f"{rpath}.type: unknown movement type {kind!r}")
        turn = _TURN_OF_TYPE[kind]
        start = link_index.get(str(_field(rl, "startRoad", rpath)))
        end = link_index.get(str(_field(rl, "endRoad", rpath)))
        if start is None or end is None:
            raise SchemaError(f"{rpath}: references unknown road")
        if start not in in_links:
            raise SchemaError(f"{rpath}.startRoad: road does not enter {name}")
        d = in_links.index(start)
        if out_links[TURN_EXIT[d][turn]] != end:
            raise NetworkError(f"{rpath} ({name}): heterogeneous layout unsupported "
                               f"({kind} from {DIRECTIONS[d]} does not match geometry)")
        for q, ll in enumerate(_field(rl, "laneLinks", rpath)):
            idx = _field(ll, "startLaneIndex", f"{rpath}.laneLinks[{q}]")
            if idx != turn:
                raise NetworkError(f"{rpath} ({name}): heterogeneous layout unsupported "
                                   f"(lane {idx} serves {TURNS[turn]})")


def _vehicle_params(raw: dict, path: str, warned: set[str]) -> IdmParams:
    unknown = set(raw) - _VEHICLE_KEYS - _IGNORED_VEHICLE_KEYS
    for key in sorted((set(raw) & _IGNORED_VEHICLE_KEYS) | unknown):
        if key not in warned:
            log.warning("flow vehicle field %r is not used by the simulator (first seen at %s)",
                        key, path)
            warned.add(key)
    defaults = IdmParams()
    return IdmParams(
        v0=float(raw["maxSpeed"]) if "maxSpeed" in raw else None,
        a_max=float(raw.get("maxPosAcc", defaults.a_max)),
        b=float(raw.get("usualNegAcc", defaults.b)),
        s0=float(raw.get("minGap", defaults.s0)),
        T=float(raw.get("headwayTime", defaults.T)),
        length=float(raw.get("length", defaults.length)),
    )


def read_flow(source: str | Path | list) -> list[FlowEntry]:
    data = _load(source)
    if not isinstance(data, list):
        raise SchemaError("$: flow file must be an array")
    warned: set[str] = set()
    out = []
    for k, row in enumerate(data):
        path = f"$[{k}]"
        route = _field(row, "route", path)
        if not isinstance(route, list) or not route:
            raise SchemaError(f"{path}.route: expected a non-empty array")
        start = float(_field(row, "startTime", path))
        end = float(row.get("endTime", start))
        if end < 0:
            end = start
        params = _vehicle_params(row.get("vehicle", {}), f"{path}.vehicle", warned)
        out.append(FlowEntry(route=tuple(str(r) for r in route), start_time=start, end_time=end,
                             interval=float(row.get("interval", 1.0)), params=params))
    return out


def ingest_roadnet(path: str | Path) -> RoadNetwork:
    return read_roadnet(path)


def ingest_flow(path: str | Path) -> list[FlowEntry]:
    return read_flow(path)


def write_roadnet(net: RoadNetwork) -> dict:
    """Serialize a network to CityFlow roadnet JSON (virtual nodes at link ends)."""
    roads = []
    for lk in net.links:
        pts = lk.points or ((0.0, 0.0), (lk.length, 0.0))
        roads.append({
            "id": lk.id,
            "points": [{"x": x, "y": y} for x, y in pts],
            "lanes": [{"width": 3.0, "maxSpeed": lk.speed_limit} for _ in range(LANES_PER_LINK)],
            "startIntersection": lk.start,
            "endIntersection": lk.end,
        })
    controlled = {it.name for it in net.intersections}
    inters = []
    for it in net.intersections:
        road_links = []
        for d, k in enumerate(it.in_links):
            for t in range(LANES_PER_LINK):
                end = it.out_links[TURN_EXIT[d][t]]
                road_links.append({
                    "type": _TYPE_OF_TURN[t],
                    "startRoad": net.links[k].id,
                    "endRoad": net.links[end].id,
                    "direction": d,
                    "laneLinks": [{"startLaneIndex": t, "endLaneIndex": e, "points": []}
                                  for e in range(LANES_PER_LINK)],
                })
        inters.append({
            "id": it.name,
            "point": {"x": it.position[0], "y": it.position[1]},
            "width": 10.0,
            "roads": [net.links[k].id for k in it.in_links + it.out_links],
            "roadLinks": road_links,
            "trafficLight": {"roadLinkIndices": list(range(len(road_links))),
                             "lightphases": it.raw_phases},
            "virtual": False,
        })
    seen = set()
    for lk in net.links:
        for node, pt in ((lk.start, lk.points[0] if lk.points else (0, 0)),
                         (lk.end, lk.points[-1] if lk.points else (0, 0))):
            if node in controlled or node in seen:
                continue
            seen.add(node)
            inters.append({"id": node, "point": {"x": pt[0], "y": pt[1]}, "width": 0.0,
                           "roads": [], "roadLinks": [],
                           "trafficLight": {"roadLinkIndices": [], "lightphases": []},
                           "virtual": True})
    return {"intersections": inters, "roads": roads}


def write_flow(entries: list[FlowEntry]) -> list[dict]:
    out = []
    for e in entries:
        p = e.params
        vehicle = {"length": p.length, "width": 2.0, "maxPosAcc": p.a_max, "maxNegAcc": p.b,
                   "usualPosAcc": p.a_max, "usualNegAcc": p.b, "minGap": p.s0,
                   "headwayTime": p.T}
        if p.v0 is not None:
            vehicle["maxSpeed"] = p.v0
        out.append({"vehicle": vehicle, "route": list(e.route), "interval": e.interval,
                    "startTime": e.start_time, "endTime": e.end_time})
    return out
