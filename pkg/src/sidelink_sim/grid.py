"""Time-frequency resource lattice and packet sizing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum


class ConfigError(ValueError):
    """Raised for invalid or infeasible run configuration."""


class InfeasibleError(ConfigError):
    """A packet does not fit in one subframe."""


@dataclass(frozen=True)
class GridConfig:
    subframe_duration_ms: float = 1.0
    subcarrier_spacing_khz: float = 15.0
    rb_subcarriers: int = 12
    symbols_per_subframe: int = 14
    data_symbols: int = 9
    total_rbs: int = 100
    rbs_per_subchannel: int = 10
    adjacent_sci_tb: bool = True
    sci_rbs: int = 2

    def validate(self) -> None:
        if self.rbs_per_subchannel < 1:
            raise ConfigError("grid.rbs_per_subchannel must be >= 1")
        if self.data_symbols >= self.symbols_per_subframe:
            raise ConfigError("grid.data_symbols must be < grid.symbols_per_subframe")
        if not self.adjacent_sci_tb:
            raise ConfigError("grid.adjacent_sci_tb: only the adjacent SCI+TB layout is supported")
        if not 0 <= self.sci_rbs < self.rbs_per_subchannel:
            raise ConfigError("grid.sci_rbs must fit inside one subchannel")
        n_subchannels(self)


@dataclass(frozen=True)
class ResourceIndex:
    subframe: int
    subchannel: int


@dataclass(frozen=True)
class Allocation:
    """A contiguous run of subchannels inside one subframe."""

    subframe: int
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    def overlaps(self, other: "Allocation") -> bool:
        return (
            self.subframe == other.subframe
            and self.start < other.stop
            and other.start < self.stop
        )


@dataclass(frozen=True)
class McsProfile:
    mcs_index: int
    bits_per_symbol: int
    code_rate: float
    decode_sinr_threshold_db: float

    def __post_init__(self) -> None:
        if self.bits_per_symbol not in (2, 4, 6):
            raise ConfigError(f"MCS {self.mcs_index}: bits_per_symbol must be 2, 4 or 6")
        if not 0 < self.code_rate <= 1:
            raise ConfigError(f"MCS {self.mcs_index}: code_rate must be in (0, 1]")


# Shipped MCS table. Code rates follow the LTE TBS tables at 10 PRB
# (I_TBS 2 -> 344 bits, I_TBS 5 -> 872, I_TBS 10 -> 1736) rescaled to RB capacity.
DEFAULT_MCS_TABLE: dict[int, McsProfile] = {
    2: McsProfile(2, 2, 0.16, 3.0),
    5: McsProfile(5, 2, 0.40, 7.0),
    11: McsProfile(11, 4, 0.40, 13.0),
}


class Kind(str, Enum):
    BSM = "bsm"
    HPM = "hpm"


@dataclass(frozen=True)
class MessageKind:
    kind: Kind
    payload_bytes: int
    carries_certificate: bool
    mcs_index: int

    def __post_init__(self) -> None:
        if self.kind is Kind.HPM and not self.carries_certificate:
            raise ConfigError("HPM messages always carry a certificate")
        if self.payload_bytes <= 0:
            raise ConfigError("payload_bytes must be positive")


BSM = MessageKind(Kind.BSM, 190, False, 11)
HPM = MessageKind(Kind.HPM, 300, True, 5)


def n_subchannels(cfg: GridConfig) -> int:
    n = cfg.total_rbs // cfg.rbs_per_subchannel
    if n == 0:
        raise ConfigError(
            f"grid: {cfg.total_rbs} RBs cannot hold one {cfg.rbs_per_subchannel}-RB subchannel"
        )
    return n


def rb_capacity_bits(profile: McsProfile, cfg: GridConfig) -> int:
    """Payload bits one RB carries at this MCS."""
    raw = cfg.data_symbols * cfg.rb_subcarriers * profile.bits_per_symbol * profile.code_rate
    # guard against 107.99999 from binary code rates
    return int(math.floor(raw + 1e-9))


def subchannels_needed(kind: MessageKind, profile: McsProfile, cfg: GridConfig) -> int:
    """Smallest subchannel count whose RBs, minus the SCI RBs, carry the payload."""
    bits = kind.payload_bytes * 8
    cap = rb_capacity_bits(profile, cfg)
    tb_rbs = math.ceil(bits / cap)
    overhead = cfg.sci_rbs if cfg.adjacent_sci_tb else 0
    length = max(1, math.ceil((tb_rbs + overhead) / cfg.rbs_per_subchannel))
    if length > n_subchannels(cfg):
        raise InfeasibleError(
            f"{kind.kind.value} payload of {kind.payload_bytes} B at MCS {profile.mcs_index} "
            f"needs {length} subchannels, grid has {n_subchannels(cfg)}"
        )
    return length
