"""Deterministic discrete-event core: clock, event queue, RNG substreams, radio model, mobility.

Time is an integer step counter (1 step = 1 ms of simulated time). All randomness
flows through named substreams derived from a single master seed, so any two runs
with the same seed and configuration replay the same event trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Any, Callable, Iterator, Optional

import numpy as np

# Named substreams. Order is part of the determinism contract: child seeds are
# derived from (master seed, stream index), never from call order.
STREAM_NAMES = (
    "mobility",
    "requests",
    "auction-ties",
    "preference-resampling",
    "learning-init",
    "exploration",
)

COVERAGE_RADIUS_M = 65.0
THROUGHPUT_INTERCEPT_MBPS = 1690.0
THROUGHPUT_SLOPE_MBPS_PER_M = 26.0
THROUGHPUT_FLOOR_MBPS = 26.0


class OutOfRangeError(ValueError):
    """Raised when a transmission is attempted beyond the coverage radius."""


class RngStreams:
    """Named, independently seeded random substreams plus per-consumer children.

    ``stream(name)`` returns the shared generator for a substream; ``child(name, index)``
    returns a generator seeded from (master seed, stream, index) so per-agent streams
    are reproducible regardless of construction order.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._streams = {
            name: np.random.Generator(
                np.random.PCG64(np.random.SeedSequence(self.master_seed, spawn_key=(i,)))
            )
            for i, name in enumerate(STREAM_NAMES)
        }

    def stream(self, name: str) -> np.random.Generator:
        return self._streams[name]

    def child(self, name: str, index: int) -> np.random.Generator:
        base = STREAM_NAMES.index(name)
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(base, int(index)))
        return np.random.Generator(np.random.PCG64(seq))


class SimClock:
    """Integer millisecond clock. Monotone; only the owner advances it."""

    def __init__(self, start: int = 0):
        self.now = int(start)

    def advance(self, steps: int = 1) -> int:
        if steps < 0:
            raise ValueError("clock cannot run backwards")
        self.now += steps
        return self.now


@dataclass(frozen=True)
class Event:
    step: int
    seq: int
    kind: str
    payload: Any = None


class EventQueue:
    """Priority queue of events ordered by (step, insertion sequence).

    Two events at the same step pop in insertion order, which makes the trace
    reproducible without relying on heap internals.
    """

    def __init__(self, clock: SimClock, trace: Optional[Callable[[Event], None]] = None):
        self._clock = clock
        self._heap: list[tuple[int, int, Event]] = []
        self._seq = 0
        self.trace = trace

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, step: int, kind: str, payload: Any = None) -> Event:
        step = int(step)
        if step < self._clock.now:
            raise ValueError(f"cannot schedule {kind!r} at {step} before now={self._clock.now}")
        ev = Event(step, self._seq, kind, payload)
        self._seq += 1
        heappush(self._heap, (step, ev.seq, ev))
        return ev

    def pop_due(self, now: Optional[int] = None) -> Iterator[Event]:
        """Yield all events with step <= now, in (step, seq) order."""
        if now is None:
            now = self._clock.now
        while self._heap and self._heap[0][0] <= now:
            _, _, ev = heappop(self._heap)
            if self.trace is not None:
                self.trace(ev)
            yield ev

    def peek_step(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None


def throughput_mbps(distance_m: float) -> float:
    """Linear path-loss throughput with a hard floor at the cell edge."""
    if distance_m < 0:
        raise ValueError("negative distance")
    return max(
        THROUGHPUT_FLOOR_MBPS,
        THROUGHPUT_INTERCEPT_MBPS - THROUGHPUT_SLOPE_MBPS_PER_M * distance_m,
    )


def transmission_delay(data_size_mbit: float, distance_m: float,
                       radius_m: float = COVERAGE_RADIUS_M) -> int:
    """Whole steps needed to move `data_size_mbit` over the air at `distance_m`.

    Raises OutOfRangeError beyond the coverage radius: the link does not exist.
    Zero-sized payloads take zero steps.
    """
    if data_size_mbit < 0:
        raise ValueError("negative payload size")
    if distance_m > radius_m:
        raise OutOfRangeError(f"distance {distance_m} m exceeds coverage radius {radius_m} m")
    if data_size_mbit == 0:
        return 0
    seconds = data_size_mbit / throughput_mbps(distance_m)
    return int(math.ceil(seconds * 1000.0))


class TrafficLight:
    """Two-phase signal for a 4-way intersection.

    Axis 0 (N-S) is green during the first half-cycle, axis 1 (E-W) during the
    second; each axis therefore sees `green_ms` green then `green_ms` red.
    """

    def __init__(self, green_ms: int):
        if green_ms <= 0:
            raise ValueError("green time must be positive")
        self.green_ms = int(green_ms)

    def is_green(self, axis: int, step: int) -> bool:
        return (step // self.green_ms) % 2 == (axis % 2)

    def next_green_start(self, axis: int, step: int) -> int:
        if self.is_green(axis, step):
            return step
        return (step // self.green_ms + 1) * self.green_ms


@dataclass
class VehicleTrack:
    """One crossing of the intersection: straight chord through the center.

    The vehicle enters at the coverage edge, may hold at the stop line on red,
    then exits at the opposite edge. Queued vehicles release together on green
    (no car-following). All fields are in steps (ms) and meters.
    """

    vehicle_id: int
    spawn_step: int
    speed_mps: float
    arm: int  # 0..3 approach arm; axis = arm % 2
    radius_m: float = COVERAGE_RADIUS_M
    stop_line_m: float = 5.0
    reach_line_step: int = field(init=False)
    go_step: int = field(init=False)
    exit_step: int = field(init=False)

    def plan(self, light: TrafficLight) -> "VehicleTrack":
        mps_per_step = self.speed_mps / 1000.0
        to_line = (self.radius_m - self.stop_line_m) / mps_per_step
        self.reach_line_step = self.spawn_step + int(round(to_line))
        self.go_step = light.next_green_start(self.arm % 2, self.reach_line_step)
        remaining = (self.radius_m + self.stop_line_m) / mps_per_step
        self.exit_step = self.go_step + int(round(remaining))
        return self

    def in_system(self, step: int) -> bool:
        return self.spawn_step <= step < self.exit_step

    def distance_m(self, step: int) -> float:
        """Distance to the intersection center (= auction point) at `step`."""
        if not self.in_system(step):
            raise OutOfRangeError(f"vehicle {self.vehicle_id} not in system at step {step}")
        mps_per_step = self.speed_mps / 1000.0
        if step <= self.reach_line_step:
            pos = -self.radius_m + (step - self.spawn_step) * mps_per_step
            pos = min(pos, -self.stop_line_m)
        elif step < self.go_step:
            pos = -self.stop_line_m
        else:
            pos = -self.stop_line_m + (step - self.go_step) * mps_per_step
        return min(abs(pos), self.radius_m)


def spawn_schedule(rng: np.random.Generator, mean_interarrival_ms: float,
                   horizon_step: int, start_step: int = 0) -> list[int]:
    """Exponential arrival steps in [start, horizon). Zero rate means no arrivals."""
    if mean_interarrival_ms <= 0:
        return []
    steps = []
    t = float(start_step)
    while True:
        t += rng.exponential(mean_interarrival_ms)
        step = int(math.ceil(t))
        if step >= horizon_step:
            break
        steps.append(step)
    return steps


def spawn_vehicles(rng: np.random.Generator, mean_interarrival_ms: float, speed_mps: float,
                   light: TrafficLight, horizon_step: int,
                   radius_m: float = COVERAGE_RADIUS_M, stop_line_m: float = 5.0) -> list[VehicleTrack]:
    """Pre-plan every crossing for `horizon_step` steps of traffic."""
    tracks = []
    for i, s in enumerate(spawn_schedule(rng, mean_interarrival_ms, horizon_step)):
        arm = int(rng.integers(0, 4))
        tracks.append(
            VehicleTrack(i, s, speed_mps, arm, radius_m=radius_m, stop_line_m=stop_line_m).plan(light)
        )
    return tracks


def concurrent_counts(tracks: list[VehicleTrack], horizon_step: int,
                      sample_every: int = 100) -> np.ndarray:
    """Concurrent in-system vehicle counts sampled on a regular grid."""
    grid = np.arange(0, horizon_step, sample_every)
    counts = np.zeros(len(grid), dtype=int)
    for tr in tracks:
        lo = np.searchsorted(grid, tr.spawn_step, side="left")
        hi = np.searchsorted(grid, tr.exit_step, side="left")
        counts[lo:hi] += 1
    return counts
