"""Piecewise-linear vehicle motion along waypoint routes."""

from __future__ import annotations

import bisect
import math
import random
from dataclasses import dataclass
from typing import Sequence

from fleetsim.simkernel import SECOND


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    speed: float = 10.0  # m/s on the leg that starts here


@dataclass(frozen=True)
class Pose:
    vehicle_id: int
    t: int
    x: float
    y: float
    heading: float


class Route:
    """Constant speed per leg; the vehicle holds the last waypoint afterwards."""

    def __init__(self, waypoints: Sequence[Waypoint]) -> None:
        if len(waypoints) < 2:
            raise ValueError("a route needs at least two waypoints")
        self.waypoints = tuple(waypoints)
        self._starts = [0.0]
        self._headings = []
        for a, b in zip(self.waypoints, self.waypoints[1:]):
            if not a.speed > 0:
                raise ValueError("leg speed must be positive")
            length = math.hypot(b.x - a.x, b.y - a.y)
            self._starts.append(self._starts[-1] + length / a.speed)
            self._headings.append(math.atan2(b.y - a.y, b.x - a.x))

    @property
    def end_time(self) -> float:
        return self._starts[-1]

    def position(self, t: float) -> tuple[float, float, float]:
        """(x, y, heading) at ``t`` seconds."""
        wps = self.waypoints
        if t <= 0.0:
            return wps[0].x, wps[0].y, self._headings[0]
        if t >= self._starts[-1]:
            return wps[-1].x, wps[-1].y, self._headings[-1]
        leg = bisect.bisect_right(self._starts, t) - 1
        a, b = wps[leg], wps[leg + 1]
        span = self._starts[leg + 1] - self._starts[leg]
        frac = 0.0 if span == 0 else (t - self._starts[leg]) / span
        return a.x + (b.x - a.x) * frac, a.y + (b.y - a.y) * frac, self._headings[leg]


class Fleet:
    def __init__(self, routes: dict[int, Route]) -> None:
        self.routes = routes

    def pose_at(self, vehicle_id: int, t: int) -> Pose:
        route = self.routes.get(vehicle_id)
        if route is None:
            raise KeyError(f"unknown vehicle {vehicle_id}")
        x, y, heading = route.position(t / SECOND)
        return Pose(vehicle_id, t, x, y, heading)

    def distance(self, i: int, j: int, t: int) -> float:
        a, b = self.pose_at(i, t), self.pose_at(j, t)
        return math.hypot(a.x - b.x, a.y - b.y)


def random_route(rng: random.Random, extent: float = 1500.0, legs: tuple[int, int] = (2, 4)) -> Route:
    n = rng.randint(*legs) + 1
    wps = [
        Waypoint(rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(8.0, 25.0))
        for _ in range(n)
    ]
    return Route(wps)
