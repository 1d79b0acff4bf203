"""Pairwise proximity analyzer with start/stop hysteresis."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

from fleetsim.event_detector import BufferView, Event, pair_key
from fleetsim.scenario.payloads import decode_pose

IDLE = "IDLE"
ACTIVE = "ACTIVE"
ENTERED = "pair-entered"
LEFT = "pair-left"


@dataclass
class PairState:
    key: str
    mode: str = IDLE
    last_distance: float = math.nan


class ProximityAnalyzer:
    name = "proximity"

    def __init__(
        self,
        vehicles: Sequence[int],
        d_start: float,
        d_stop: float,
        pose_topic: str = "/cloud/vehicle/{id}/pose",
    ) -> None:
        if not d_stop > d_start:
            raise ValueError("d_stop must exceed d_start")
        self.vehicles = sorted(int(v) for v in vehicles)
        self.d_start = float(d_start)
        self.d_stop = float(d_stop)
        self.pose_topic = pose_topic
        self._topics = {v: pose_topic.format(id=v) for v in self.vehicles}

    def initial_state(self) -> dict[tuple[int, int], PairState]:
        return {(i, j): PairState(pair_key(i, j)) for i, j in combinations(self.vehicles, 2)}

    def analyze(self, now: int, view: BufferView, state: dict[tuple[int, int], PairState]) -> list[Event]:
        positions = {}
        for v, topic in self._topics.items():
            env = view.latest(topic)
            if env is not None:
                pose = decode_pose(env.payload)
                positions[v] = (pose.x, pose.y)
        events = []
        for (i, j), ps in state.items():
            if i not in positions or j not in positions:
                continue
            (xi, yi), (xj, yj) = positions[i], positions[j]
            d = math.hypot(xi - xj, yi - yj)
            ps.last_distance = d
            if ps.mode == IDLE and d <= self.d_start:
                ps.mode = ACTIVE
                kind = ENTERED
            elif ps.mode == ACTIVE and d > self.d_stop:
                ps.mode = IDLE
                kind = LEFT
            else:
                continue
            events.append(
                Event(kind, now, ps.key, {"vehicles": [i, j], "a": i, "b": j, "distance": round(d, 6)})
            )
        return events
