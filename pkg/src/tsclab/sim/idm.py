"""Intelligent Driver Model (Treiber, Hennecke & Helbing 2000)."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class IdmParams:
    """Car-following parameters. Defaults mirror CityFlow's vehicle defaults.

    ``v0`` of ``None`` means "use the lane speed limit".
    """

    v0: float | None = None
    a_max: float = 2.0
    b: float = 4.5
    s0: float = 2.5
    T: float = 1.0
    delta: float = 4.0
    length: float = 5.0

    def __post_init__(self):
        for name in ("a_max", "b", "s0", "T", "length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be positive, got {getattr(self, name)}")
        if self.v0 is not None and not self.v0 > 0:
            raise ValueError(f"IdmParams.v0 must be positive, got {self.v0}")
        if not self.delta >= 1:
            raise ValueError(f"IdmParams.delta must be >= 1, got {self.delta}")

    def desired_speed(self, limit: float) -> float:
        return limit if self.v0 is None else min(self.v0, limit)


def idm_accel(v: float, v_lead: float | None, gap: float | None, p: IdmParams,
              v0: float | None = None) -> float:
    """IDM acceleration for speed ``v`` behind a leader ``gap`` metres ahead.

    ``gap`` is bumper-to-bumper. Without a leader the interaction term vanishes.
    ``v0`` overrides the desired speed (the simulator passes the lane limit).
    """
    v0 = v0 if v0 is not None else p.v0
    if v0 is None:
        raise ValueError("desired speed unknown: set IdmParams.v0 or pass v0")
    free = 1.0 - (v / v0) ** p.delta
    if v_lead is None or gap is None:
        return p.a_max * free
    if not gap > 0:
        raise ValueError(f"IDM gap must be positive with a leader, got {gap}")
    s_star = p.s0 + v * p.T + v * (v - v_lead) / (2.0 * math.sqrt(p.a_max * p.b))
    return p.a_max * (free - (s_star / gap) ** 2)


def free_travel_distance(v: float, p: IdmParams, v0: float, horizon: float,
                         dt: float = 0.01) -> float:
    """Distance covered in ``horizon`` seconds under free-road IDM from speed ``v``.

    Runge-Kutta-Nystrom on (x, v) with step ``dt``; at the default step the
    result is exact to well below a millimetre over a 5 s horizon.
    """
    steps = max(1, int(round(horizon / dt)))
    h = horizon / steps
    x = 0.0
    for _ in range(steps):
        k1v = idm_accel(v, None, None, p, v0)
        k2v = idm_accel(v + 0.5 * h * k1v, None, None, p, v0)
        k3v = idm_accel(v + 0.5 * h * k2v, None, None, p, v0)
        k4v = idm_accel(v + h * k3v, None, None, p, v0)
        x += h * (v + h * (k1v + k2v + k3v) / 6.0)
        v += h * (k1v + 2 * k2v + 2 * k3v + k4v) / 6.0
    return x
