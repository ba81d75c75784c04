"""Run configuration: YAML loading, dotted overrides and cross-field checks."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .channel import DecodeModel, NoiseConfig, PathlossModel
from .congestion import CbrConfig, PowerPolicy
from .grid import (DEFAULT_MCS_TABLE, ConfigError, GridConfig, Kind, McsProfile,
                   MessageKind, subchannels_needed)
from .mac_sps import SpsConfig
from .metrics import DistanceBinning
from .scenario import RoadConfig, TrafficConfig


@dataclass(frozen=True)
class DecodeConfig:
    db_per_decade: float = 1.0
    curve_file: str | None = None

    def validate(self) -> None:
        if self.db_per_decade <= 0:
            raise ConfigError("channel.decode.db_per_decade must be > 0")


@dataclass(frozen=True)
class ChannelConfig:
    pathloss: PathlossModel = field(default_factory=PathlossModel)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)


@dataclass(frozen=True)
class MetricsConfig:
    bin_width: float = 50.0
    max_range: float = 1000.0
    trace: bool = False

    @property
    def binning(self) -> DistanceBinning:
        return DistanceBinning(self.bin_width, self.max_range)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 1
    grid: GridConfig = field(default_factory=GridConfig)
    mcs_table: dict[int, McsProfile] = field(default_factory=lambda: dict(DEFAULT_MCS_TABLE))
    sci_mcs: int = 2
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    sps: SpsConfig = field(default_factory=SpsConfig)
    cbr: CbrConfig = field(default_factory=CbrConfig)
    policy: PowerPolicy = field(default_factory=PowerPolicy)
    road: RoadConfig = field(default_factory=RoadConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def profile(self, mcs_index: int) -> McsProfile:
        try:
            return self.mcs_table[mcs_index]
        except KeyError:
            raise ConfigError(f"mcs_table has no entry for MCS {mcs_index}") from None

    def length_for(self, kind: MessageKind) -> int:
        return subchannels_needed(kind, self.profile(kind.mcs_index), self.grid)

    def decoder(self) -> DecodeModel:
        dec = self.channel.decode
        if dec.curve_file:
            model = DecodeModel.from_file(dec.curve_file)
        else:
            model = DecodeModel.logistic(
                {m: p.decode_sinr_threshold_db for m, p in self.mcs_table.items()},
                dec.db_per_decade)
        for m in {self.sci_mcs, self.traffic.bsm.mcs_index, self.traffic.hpm.mcs_index}:
            model.bler(0.0, m)  # raises on a missing curve
        return model

    def validate(self) -> "RunConfig":
        """Run every check; the first failure raises ``ConfigError`` naming it."""
        self.grid.validate()
        self.channel.pathloss.validate()
        self.channel.noise.validate()
        self.channel.decode.validate()
        self.sps.validate()
        self.cbr.validate()
        self.policy.validate()
        self.road.validate()
        self.traffic.validate()
        self.metrics.binning.validate()
        self.profile(self.sci_mcs)
        if self.traffic.itt != self.sps.p_step:
            raise ConfigError("traffic.itt must equal sps.p_step")
        if self.traffic.n_subframes <= max(self.sps.sensing_window_len, self.cbr.window):
            raise ConfigError("traffic.sim_time must exceed the warm-up period")
        for kind in (self.traffic.bsm, self.traffic.hpm):
            self.length_for(kind)
        self.decoder()
        return self


# -- dict <-> dataclass ------------------------------------------------------

def to_dict(cfg: Any) -> Any:
    if dataclasses.is_dataclass(cfg):
        return {f.name: to_dict(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}
    if isinstance(cfg, dict):
        return {k: to_dict(v) for k, v in cfg.items()}
    if isinstance(cfg, Kind):
        return cfg.value
    if isinstance(cfg, tuple):
        return list(cfg)
    return cfg


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        current = getattr(defaults, name)
        if cls is RunConfig and name == "mcs_table":
            kwargs[name] = _mcs_table(value, key, current)
        elif isinstance(current, MessageKind):
            merged = {**to_dict(current), **(value or {})}
            kwargs[name] = _message_kind(merged, key)
        elif dataclasses.is_dataclass(current):
            merged = {**to_dict(current), **(value or {})}
            kwargs[name] = _build(type(current), merged, key)
        elif cls is RoadConfig and name == "positions":
            kwargs[name] = _positions(value, key)
        else:
            kwargs[name] = _coerce(value, current, key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _coerce(value, current, key):
    if value is None or current is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string")
    return value


def _positions(value: Any, key: str) -> tuple[float, ...] | None:
    if value is None:
        return None
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{key}: expected a list of meters")
    return tuple(_coerce(v, 0.0, key) for v in value)


def _message_kind(d: dict, key: str) -> MessageKind:
    allowed = {"kind", "payload_bytes", "carries_certificate", "mcs_index"}
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown config key: {key}.{extra[0]}")
    try:
        return MessageKind(Kind(d["kind"]), int(d["payload_bytes"]),
                           bool(d["carries_certificate"]), int(d["mcs_index"]))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def _mcs_table(value: Any, key: str, defaults: dict[int, McsProfile]) -> dict[int, McsProfile]:
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: expected a mapping of MCS index to profile")
    table = {}
    for idx, prof in value.items():
        if not isinstance(prof, dict):
            raise ConfigError(f"{key}.{idx}: expected a mapping")
        base = to_dict(defaults[int(idx)]) if int(idx) in defaults else {}
        prof = {k: v for k, v in {**base, **prof}.items() if k != "mcs_index"}
        try:
            table[int(idx)] = McsProfile(int(idx), **prof)
        except TypeError as exc:
            raise ConfigError(f"{key}.{idx}: {exc}") from None
    return table


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def _set_path(data: dict, key: str, value: Any) -> None:
    known = to_dict(RunConfig())
    parts: list[Any] = key.strip().split(".")
    ref = known
    for i, p in enumerate(parts):
        if isinstance(ref, dict) and p in ref:
            ref = ref[p]
        elif parts[0] == "mcs_table" and i == 1 and p.isdigit():
            ref = to_dict(McsProfile(0, 2, 0.5, 0.0))
            parts[i] = int(p)
        else:
            raise ConfigError(f"unknown config key: {key}")
    node = data
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings to a raw config mapping."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_path(data, key, yaml.safe_load(raw))
    return data


def default_config_text() -> str:
    return resources.files("sidelink_sim").joinpath("data/default.yaml").read_text()


def load(path: str | Path | None = None, overrides: list[str] | None = None,
         seed: int | None = None) -> RunConfig:
    """Read a YAML config (the shipped default when ``path`` is None)."""
    text = default_config_text() if path is None else Path(path).read_text()
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    return from_dict(data)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def with_changes(cfg: RunConfig, changes: dict[str, Any]) -> RunConfig:
    """Copy of ``cfg`` with dotted keys replaced, e.g. ``{"policy.power_dbm": 5.0}``."""
    data = to_dict(cfg)
    for key, value in changes.items():
        _set_path(data, key, value)
    return from_dict(data)
