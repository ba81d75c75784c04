"""Highway ring topology, mobility and the BSM/HPM traffic schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import BSM, HPM, ConfigError, MessageKind


@dataclass(frozen=True)
class RoadConfig:
    length: float = 4800.0
    density: float = 66.67
    speed: float = 30.0
    wraparound: bool = True
    n_vehicles: int | None = None  # overrides the density-derived count
    positions: tuple[float, ...] | None = None  # fixed placement, overrides both

    def validate(self) -> None:
        if self.length <= 0:
            raise ConfigError("road.length must be > 0")
        if self.density <= 0 and self.n_vehicles is None:
            raise ConfigError("road.density must be > 0")
        if self.speed < 0:
            raise ConfigError("road.speed must be >= 0")
        if not self.wraparound:
            raise ConfigError("road.wraparound: only the ring road is supported")
        if self.vehicle_count() < 1:
            raise ConfigError("road: scenario has no vehicles")
        if self.positions is not None and not all(0 <= x < self.length for x in self.positions):
            raise ConfigError("road.positions must lie in [0, length)")

    def vehicle_count(self) -> int:
        if self.positions is not None:
            return len(self.positions)
        if self.n_vehicles is not None:
            return int(self.n_vehicles)
        return int(round(self.length / 1000.0 * self.density))


@dataclass(frozen=True)
class TrafficConfig:
    itt: int = 100
    bsm: MessageKind = BSM
    hpm: MessageKind = HPM
    hpm_node_fraction: float = 0.01
    hpm_batch_interval: float = 5.0
    hpm_rate: float = 10.0
    hpm_duration: float = 1.0
    sim_time: float = 50.0
    hpm_additive: bool = False

    def validate(self) -> None:
        if self.itt < 1:
            raise ConfigError("traffic.itt must be a positive number of subframes")
        if not 0 <= self.hpm_node_fraction <= 1:
            raise ConfigError("traffic.hpm_node_fraction must be in [0, 1]")
        count = self.hpm_rate * self.hpm_duration
        if abs(count - round(count)) > 1e-9:
            raise ConfigError("traffic: hpm_rate * hpm_duration must be an integer packet count")
        if abs(self.hpm_rate * self.hpm_period_ms - 1000.0) > 1e-6:
            raise ConfigError("traffic.hpm_rate must give an integer period in ms")
        if self.hpm_period_ms != self.itt:
            raise ConfigError("traffic: HPMs must keep the BSM rate (hpm_rate = 1000/itt)")
        if self.hpm_duration * 1000 > self.hpm_batch_interval * 1000:
            raise ConfigError("traffic.hpm_duration must not exceed hpm_batch_interval")
        if self.sim_time <= 0:
            raise ConfigError("traffic.sim_time must be > 0")

    @property
    def hpm_period_ms(self) -> int:
        return int(round(1000.0 / self.hpm_rate))

    @property
    def batch_ms(self) -> int:
        return int(round(self.hpm_batch_interval * 1000))

    @property
    def duration_ms(self) -> int:
        return int(round(self.hpm_duration * 1000))

    @property
    def n_subframes(self) -> int:
        return int(round(self.sim_time * 1000))


@dataclass
class VehicleState:
    id: int
    position: float
    speed: float
    is_hpm_node: bool = False
    tx_offset: int = 0
    hpm_phase: int = 0


def hpm_node_count(n: int, fraction: float) -> int:
    return int(math.ceil(fraction * n - 1e-9))


def build(road: RoadConfig, traffic: TrafficConfig, rng: dict[str, np.random.Generator]
          ) -> list[VehicleState]:
    """Place vehicles uniformly on the ring and draw their traffic phases.

    ``rng`` maps purpose names (``placement``, ``hpm``, ``offsets``) to
    independent generators.
    """
    road.validate()
    n = road.vehicle_count()
    pos = np.sort(rng["placement"].uniform(0.0, road.length, size=n))
    if road.positions is not None:
        pos = np.array(road.positions, dtype=float)
    n_hpm = hpm_node_count(n, traffic.hpm_node_fraction)
    hpm_ids = set(rng["hpm"].choice(n, size=n_hpm, replace=False).tolist()) if n_hpm else set()
    offsets = rng["offsets"].integers(0, traffic.itt, size=n)
    phases = rng["hpm"].integers(0, traffic.batch_ms, size=n)
    return [
        VehicleState(i, float(pos[i]), road.speed, i in hpm_ids, int(offsets[i]), int(phases[i]))
        for i in range(n)
    ]


def advance(vehicles: list[VehicleState], dt_ms: float, length: float) -> None:
    if dt_ms <= 0:
        raise ValueError("dt must be positive")
    for v in vehicles:
        v.position = (v.position + v.speed * dt_ms / 1000.0) % length


def ring_distance(a, b, length: float):
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    d = np.minimum(d, length - d)
    return float(d) if np.ndim(d) == 0 else d


def hpm_event_active(vehicle: VehicleState, now: int, traffic: TrafficConfig) -> bool:
    if not vehicle.is_hpm_node or now < vehicle.hpm_phase:
        return False
    return (now - vehicle.hpm_phase) % traffic.batch_ms < traffic.duration_ms


def message_schedule(vehicle: VehicleState, now: int, traffic: TrafficConfig
                     ) -> MessageKind | None:
    """Kind of the packet this vehicle generates at ``now`` on its main stream."""
    if (now - vehicle.tx_offset) % traffic.itt:
        return None
    if not traffic.hpm_additive and hpm_event_active(vehicle, now, traffic):
        return traffic.hpm
    return traffic.bsm


def hpm_offset(vehicle: VehicleState, traffic: TrafficConfig) -> int:
    """Phase of the extra HPM stream in additive mode."""
    return (vehicle.tx_offset + traffic.itt // 2) % traffic.hpm_period_ms


def due_messages(vehicle: VehicleState, now: int, traffic: TrafficConfig
                 ) -> list[tuple[str, MessageKind]]:
    """All ``(stream, kind)`` packets generated at ``now``."""
    out = []
    kind = message_schedule(vehicle, now, traffic)
    if kind is not None:
        out.append(("main", kind))
    if (traffic.hpm_additive and hpm_event_active(vehicle, now, traffic)
            and (now - hpm_offset(vehicle, traffic)) % traffic.hpm_period_ms == 0):
        out.append(("hpm", traffic.hpm))
    return out
