"""Channel busy ratio measurement and BSM transmit-power policies."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .grid import ConfigError


class WarmupError(RuntimeError):
    """Not enough history to measure CBR yet."""


@dataclass(frozen=True)
class CbrConfig:
    window: int = 100
    threshold_dbm: float = -92.0
    decimation: int = 100

    def validate(self) -> None:
        if self.window < 1:
            raise ConfigError("cbr.window must be >= 1")
        if self.decimation < 1:
            raise ConfigError("cbr.decimation must be >= 1")


PolicyKind = Literal["fixed", "adaptive", "selective"]


@dataclass(frozen=True)
class PowerPolicy:
    """BSM power policy.

    ``fixed`` sends every BSM at ``power_dbm``. ``adaptive`` maps CBR linearly
    (in dB) from ``p_max_dbm`` at ``cbr_lo`` down to ``p_min_dbm`` at ``cbr_hi``.
    ``selective`` applies the adaptive map only while an HPM event is active.
    HPMs always use ``p_max_dbm``.
    """

    kind: PolicyKind = "fixed"
    power_dbm: float = 20.0
    p_max_dbm: float = 20.0
    p_min_dbm: float = 0.0
    cbr_lo: float = 0.50
    cbr_hi: float = 0.80
    gate_on_decoded_hpm: bool = False

    def validate(self) -> None:
        if self.kind not in ("fixed", "adaptive", "selective"):
            raise ConfigError(f"policy.kind: unknown policy {self.kind!r}")
        if self.p_min_dbm > self.p_max_dbm:
            raise ConfigError("policy.p_min_dbm must be <= policy.p_max_dbm")
        if not 0 <= self.cbr_lo < self.cbr_hi <= 1:
            raise ConfigError("policy: need 0 <= cbr_lo < cbr_hi <= 1")
        if self.kind == "fixed" and not self.p_min_dbm <= self.power_dbm <= self.p_max_dbm:
            raise ConfigError("policy.power_dbm must lie in [p_min_dbm, p_max_dbm]")


def measure_cbr(s_rssi_dbm, cfg: CbrConfig, own_tx=None) -> float:
    """Share of (subframe, subchannel) cells above the CBR threshold.

    ``s_rssi_dbm`` is ``(subframes, subchannels)`` for the trailing window,
    oldest first. Rows flagged in ``own_tx`` carry no measurement and are
    left out of the denominator.
    """
    s = np.atleast_2d(np.asarray(s_rssi_dbm, dtype=float))
    if s.shape[0] < cfg.window:
        raise WarmupError(f"CBR needs {cfg.window} subframes of history, have {s.shape[0]}")
    s = s[-cfg.window:]
    keep = np.ones(len(s), dtype=bool)
    if own_tx is not None:
        keep = ~np.asarray(own_tx, dtype=bool)[-cfg.window:]
    if not keep.any():
        return 0.0
    return float((s[keep] > cfg.threshold_dbm).mean())


def adaptive_power(policy: PowerPolicy, cbr: float) -> float:
    if cbr <= policy.cbr_lo:
        return policy.p_max_dbm
    if cbr >= policy.cbr_hi:
        return policy.p_min_dbm
    frac = (cbr - policy.cbr_lo) / (policy.cbr_hi - policy.cbr_lo)
    return policy.p_max_dbm - frac * (policy.p_max_dbm - policy.p_min_dbm)


def bsm_tx_power(policy: PowerPolicy, cbr: float, hpm_active_in_scenario: bool) -> float:
    if not 0.0 <= cbr <= 1.0:
        raise ValueError(f"cbr {cbr} outside [0, 1]")
    if policy.kind == "fixed":
        return policy.power_dbm
    if policy.kind == "adaptive" or hpm_active_in_scenario:
        return adaptive_power(policy, cbr)
    return policy.p_max_dbm


def hpm_tx_power(policy: PowerPolicy | None = None) -> float:
    return policy.p_max_dbm if policy is not None else PowerPolicy().p_max_dbm


class CbrMeter:
    """Rolling CBR bookkeeping for all UEs at once."""

    def __init__(self, n_ue: int, cfg: CbrConfig):
        self.cfg = cfg
        self.busy = np.zeros((n_ue, cfg.window), dtype=np.int32)
        self.sensed = np.zeros((n_ue, cfg.window), dtype=bool)
        self.n_subch = 1
        self.filled = 0

    def push(self, subframe: int, s_rssi_dbm: np.ndarray, own_tx: np.ndarray) -> None:
        """``s_rssi_dbm`` is ``(n_ue, n_subch)``; rows where ``own_tx`` are ignored."""
        slot = subframe % self.cfg.window
        self.n_subch = s_rssi_dbm.shape[1]
        self.busy[:, slot] = (s_rssi_dbm > self.cfg.threshold_dbm).sum(axis=1)
        self.busy[own_tx, slot] = 0
        self.sensed[:, slot] = ~own_tx
        self.filled = min(self.filled + 1, self.cfg.window)

    def push_busy(self, subframe: int, busy: np.ndarray, own_tx: np.ndarray,
                  n_subch: int | None = None) -> None:
        """Like ``push`` with per-UE busy-subchannel counts already computed."""
        slot = subframe % self.cfg.window
        if n_subch is not None:
            self.n_subch = n_subch
        self.busy[:, slot] = busy
        self.busy[own_tx, slot] = 0
        self.sensed[:, slot] = ~own_tx
        self.filled = min(self.filled + 1, self.cfg.window)

    def ready(self) -> bool:
        return self.filled >= self.cfg.window

    def value(self, ue: int) -> float:
        if not self.ready():
            raise WarmupError("CBR window not yet full")
        cells = int(self.sensed[ue].sum()) * self.n_subch
        if cells == 0:
            return 0.0
        return int(self.busy[ue].sum()) / cells
