"""Propagation, SINR and decode abstraction.

Powers are carried in dBm at the interfaces and summed in milliwatts.
Every transmission's received power is applied in full to each subchannel
it occupies; partial overlaps contribute interference in proportion to the
overlapped share of the victim allocation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import Allocation, ConfigError, ResourceIndex


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(np.asarray(mw, dtype=float))


@dataclass(frozen=True)
class PathlossModel:
    """Dual-slope log-distance loss with optional lognormal shadowing."""

    reference_loss_db: float = 47.0
    reference_distance: float = 1.0
    exponent_near: float = 2.0
    exponent_far: float = 3.8
    breakpoint: float = 220.0
    shadowing_sigma_db: float = 3.0
    shadowing_reseed_period: int = 100

    def validate(self) -> None:
        if self.exponent_near <= 0 or self.exponent_far <= 0:
            raise ConfigError("channel.pathloss exponents must be > 0")
        if self.reference_distance <= 0:
            raise ConfigError("channel.pathloss.reference_distance must be > 0")
        if self.breakpoint < self.reference_distance:
            raise ConfigError("channel.pathloss.breakpoint must be >= reference_distance")
        if self.shadowing_sigma_db < 0:
            raise ConfigError("channel.pathloss.shadowing_sigma_db must be >= 0")
        if self.shadowing_reseed_period < 1:
            raise ConfigError("channel.pathloss.shadowing_reseed_period must be >= 1")


@dataclass(frozen=True)
class NoiseConfig:
    noise_floor_dbm: float = -122.0

    def validate(self) -> None:
        if not math.isfinite(self.noise_floor_dbm):
            raise ConfigError("channel.noise.noise_floor_dbm must be finite")

    @property
    def mw(self) -> float:
        return 10.0 ** (self.noise_floor_dbm / 10.0)


def pathloss_db(model: PathlossModel, d, rng: np.random.Generator | None = None):
    """Loss in dB at distance ``d`` (scalar or array).

    Distances below the reference distance are clamped to it. A shadowing
    term is added only when ``rng`` is given and sigma is nonzero.
    """
    d = np.maximum(np.asarray(d, dtype=float), model.reference_distance)
    near = np.minimum(d, model.breakpoint)
    loss = model.reference_loss_db + 10.0 * model.exponent_near * np.log10(
        near / model.reference_distance
    )
    far = np.maximum(d, model.breakpoint) / model.breakpoint
    loss = loss + 10.0 * model.exponent_far * np.log10(far)
    if rng is not None and model.shadowing_sigma_db > 0:
        loss = loss + rng.normal(0.0, model.shadowing_sigma_db, size=np.shape(loss))
    if np.ndim(loss) == 0:
        return float(loss)
    return loss


def sinr_db(target_rx_dbm: float, interferer_rx_dbm: Iterable[float], noise: NoiseConfig) -> float:
    interference = float(np.sum(dbm_to_mw(list(interferer_rx_dbm)))) if interferer_rx_dbm else 0.0
    return 10.0 * math.log10(10.0 ** (target_rx_dbm / 10.0) / (interference + noise.mw))


class Shadowing:
    """Symmetric per-link shadowing, redrawn every ``period`` subframes."""

    def __init__(self, n: int, sigma_db: float, period: int, rng: np.random.Generator):
        self.n = n
        self.sigma = sigma_db
        self.period = period
        self.rng = rng
        self._epoch = -1
        self._matrix = np.zeros((n, n))

    def at(self, subframe: int) -> np.ndarray:
        if self.sigma <= 0:
            return self._matrix
        epoch = subframe // self.period
        if epoch != self._epoch:
            draws = self.rng.normal(0.0, self.sigma, size=(self.n, self.n))
            upper = np.triu(draws, 1)
            self._matrix = upper + upper.T
            self._epoch = epoch
        return self._matrix


# --- decode model ---------------------------------------------------------

SINR_GRID = np.arange(-10.0, 30.0 + 1e-9, 0.25)


def logistic_curve(center_db: float, db_per_decade: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    bler = 1.0 / (1.0 + np.power(10.0, (SINR_GRID - center_db) / db_per_decade))
    return SINR_GRID.copy(), bler


@dataclass
class DecodeModel:
    """Per-MCS BLER curves, linearly interpolated in dB and clamped at the ends."""

    curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def logistic(cls, centers: dict[int, float], db_per_decade: float = 1.0) -> "DecodeModel":
        return cls({mcs: logistic_curve(c, db_per_decade) for mcs, c in centers.items()})

    @classmethod
    def from_file(cls, path: str | Path) -> "DecodeModel":
        """Read ``mcs, sinr_db, bler`` rows; ``#`` starts a comment."""
        rows: dict[int, list[tuple[float, float]]] = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 'mcs, sinr_db, bler'")
            try:
                mcs, sinr, bler = int(parts[0]), float(parts[1]), float(parts[2])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise ConfigError(f"{path}:{lineno}: unparsable row") from None
            rows.setdefault(mcs, []).append((sinr, bler))
        model = cls({})
        for mcs, pts in rows.items():
            pts.sort()
            model.curves[mcs] = (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
        model.validate()
        return model

    def validate(self) -> None:
        for mcs, (x, y) in self.curves.items():
            if len(x) < 2 or len(x) != len(y):
                raise ConfigError(f"decode curve for MCS {mcs} needs >= 2 points")
            if np.any(np.diff(x) <= 0):
                raise ConfigError(f"decode curve for MCS {mcs}: SINR points must increase")
            if np.any((y < 0) | (y > 1)):
                raise ConfigError(f"decode curve for MCS {mcs}: BLER outside [0, 1]")
            if np.any(np.diff(y) > 1e-12):
                raise ConfigError(f"decode curve for MCS {mcs}: BLER must not increase with SINR")

    def bler(self, sinr, mcs_index: int):
        try:
            x, y = self.curves[mcs_index]
        except KeyError:
            raise ConfigError(f"no decode curve configured for MCS {mcs_index}") from None
        return np.interp(sinr, x, y)


def decode(sinr: float, mcs_index: int, model: DecodeModel, rng_draw: float) -> bool:
    return bool(rng_draw >= model.bler(sinr, mcs_index))


# --- reception -----------------------------------------------------------


@dataclass(frozen=True)
class OnAir:
    """What a receiver needs to know about one transmission in the subframe."""

    tx_id: int
    allocation: Allocation
    tb_mcs: int
    period: int = 100
    remaining: int = 0


@dataclass
class SubframeReception:
    """Reception outcome of one subframe for a set of receivers.

    Arrays are indexed ``[receiver, transmission]`` or ``[receiver, subchannel]``.
    """

    rx_mw: np.ndarray
    s_rssi_mw: np.ndarray
    sci_sinr_db: np.ndarray
    tb_sinr_db: np.ndarray
    overlapped: np.ndarray


def occupancy(allocs: Sequence[Allocation], n_subch: int) -> np.ndarray:
    occ = np.zeros((len(allocs), n_subch))
    for t, a in enumerate(allocs):
        occ[t, a.start:a.stop] = 1.0
    return occ


def receive(rx_dbm: np.ndarray, allocs: Sequence[Allocation], n_subch: int,
            noise: NoiseConfig) -> SubframeReception:
    """Vectorized S-RSSI and SINR for ``rx_dbm[receiver, transmission]``."""
    rx_dbm = np.atleast_2d(np.asarray(rx_dbm, dtype=float))
    rx_mw = dbm_to_mw(rx_dbm)
    occ = occupancy(allocs, n_subch)
    s_rssi = rx_mw @ occ + noise.mw
    lengths = occ.sum(axis=1)
    # share[t, u]: fraction of t's subchannels also used by u
    share = (occ @ occ.T) / lengths[:, None]
    np.fill_diagonal(share, 0.0)
    first = np.array([a.start for a in allocs], dtype=int)
    sci_hit = occ[:, first].T.copy()  # sci_hit[t, u]: u covers t's first subchannel
    np.fill_diagonal(sci_hit, 0.0)
    tb_interf = rx_mw @ share.T
    sci_interf = rx_mw @ sci_hit.T
    with np.errstate(divide="ignore"):
        tb = 10.0 * np.log10(rx_mw / (tb_interf + noise.mw))
        sci = 10.0 * np.log10(rx_mw / (sci_interf + noise.mw))
    overlapped = np.broadcast_to(share.sum(axis=1) > 0, rx_mw.shape)
    return SubframeReception(rx_mw, s_rssi, sci, tb, overlapped)


@dataclass(frozen=True)
class DecodedSci:
    tx_id: int
    rsrp_dbm: float
    allocation: Allocation
    period: int
    remaining: int


@dataclass(frozen=True)
class RxObservation:
    resource: ResourceIndex
    s_rssi_dbm: float
    decoded_scis: tuple[DecodedSci, ...]


def observe(rx_dbm: Sequence[float], on_air: Sequence[OnAir], subframe: int, n_subch: int,
            noise: NoiseConfig, decoder: DecodeModel, draws: Sequence[float],
            sci_mcs: int = 2) -> list[RxObservation]:
    """Per-subchannel observations of one receiver.

    ``rx_dbm[t]`` is the power received from ``on_air[t]``; ``draws[t]`` is the
    uniform draw for that SCI's decode attempt.
    """
    if not on_air:
        return [RxObservation(ResourceIndex(subframe, c), noise.noise_floor_dbm, ())
                for c in range(n_subch)]
    rec = receive(np.asarray(rx_dbm, dtype=float)[None, :], [o.allocation for o in on_air],
                  n_subch, noise)
    ok = np.asarray(draws) >= decoder.bler(rec.sci_sinr_db[0], sci_mcs)
    per_subch: list[list[DecodedSci]] = [[] for _ in range(n_subch)]
    for t, o in enumerate(on_air):
        if ok[t]:
            sci = DecodedSci(o.tx_id, float(rx_dbm[t]), o.allocation, o.period, o.remaining)
            for c in range(o.allocation.start, o.allocation.stop):
                per_subch[c].append(sci)
    s_rssi = mw_to_dbm(rec.s_rssi_mw[0])
    return [RxObservation(ResourceIndex(subframe, c), float(s_rssi[c]), tuple(per_subch[c]))
            for c in range(n_subch)]
