"""Semi-persistent scheduling: sensing window, candidate exclusion and HARQ pair selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import Allocation, ConfigError


@dataclass(frozen=True)
class SpsConfig:
    p_step: int = 100
    sensing_window_len: int = 1000
    t1: int = 4
    t2: int = 100
    initial_threshold_dbm: float = -84.18
    threshold_step_db: float = 3.0
    candidate_fraction: float = 0.20
    slrrc_min: int = 5
    slrrc_max: int = 15
    p_keep: float = 0.0
    harq_max_gap: int = 15
    underuse_trigger: int | None = None

    def validate(self) -> None:
        if not 0 < self.candidate_fraction < 1:
            raise ConfigError("sps.candidate_fraction must be in (0, 1)")
        if not 0 < self.slrrc_min <= self.slrrc_max:
            raise ConfigError("sps.slrrc_min must be positive and <= sps.slrrc_max")
        if not 0 <= self.t1 < self.t2 <= self.p_step:
            raise ConfigError("sps: need 0 <= t1 < t2 <= p_step")
        if not 0 <= self.p_keep <= 0.8:
            raise ConfigError("sps.p_keep must be in [0, 0.8]")
        if self.threshold_step_db <= 0:
            raise ConfigError("sps.threshold_step_db must be > 0")
        if self.sensing_window_len < self.p_step or self.sensing_window_len % self.p_step:
            raise ConfigError("sps.sensing_window_len must be a positive multiple of sps.p_step")
        if self.harq_max_gap < 1:
            raise ConfigError("sps.harq_max_gap must be >= 1")
        if self.underuse_trigger is not None and self.underuse_trigger < 1:
            raise ConfigError("sps.underuse_trigger must be >= 1 when set")


@dataclass
class SensingWindow:
    """What one UE sensed over the trailing ``window_len`` subframes.

    ``rssi_mw`` is a ring buffer indexed by ``subframe % window_len``;
    ``slot_subframe`` holds the absolute subframe each slot was written for
    (-1 when never written). Decoded SCIs are kept as parallel arrays.
    """

    window_len: int
    n_subch: int
    rssi_mw: np.ndarray = None
    slot_subframe: np.ndarray = None
    own_tx: np.ndarray = None
    sci_subframe: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sci_start: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sci_length: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sci_rsrp_dbm: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sci_period: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sci_remaining: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self) -> None:
        if self.rssi_mw is None:
            self.rssi_mw = np.zeros((self.window_len, self.n_subch))
        if self.slot_subframe is None:
            self.slot_subframe = np.full(self.window_len, -1, dtype=np.int64)
        if self.own_tx is None:
            self.own_tx = np.zeros(self.window_len, dtype=bool)

    def record(self, subframe: int, rssi_mw) -> None:
        slot = subframe % self.window_len
        self.rssi_mw[slot] = rssi_mw
        self.slot_subframe[slot] = subframe
        self.own_tx[slot] = False

    def mark_own_tx(self, subframe: int) -> None:
        slot = subframe % self.window_len
        self.rssi_mw[slot] = 0.0
        self.slot_subframe[slot] = subframe
        self.own_tx[slot] = True

    def add_sci(self, subframe: int, alloc: Allocation, rsrp_dbm: float, period: int,
                remaining: int) -> None:
        self.sci_subframe = np.append(self.sci_subframe, subframe)
        self.sci_start = np.append(self.sci_start, alloc.start)
        self.sci_length = np.append(self.sci_length, alloc.length)
        self.sci_rsrp_dbm = np.append(self.sci_rsrp_dbm, rsrp_dbm)
        self.sci_period = np.append(self.sci_period, period)
        self.sci_remaining = np.append(self.sci_remaining, remaining)

    def holds(self, subframes: np.ndarray, now: int) -> np.ndarray:
        """True where ``subframes`` lie in the trailing window and were written."""
        subframes = np.asarray(subframes)
        inside = (subframes < now) & (subframes >= now - self.window_len)
        slots = np.mod(subframes, self.window_len)
        return inside & (self.slot_subframe[slots] == subframes)


@dataclass
class SpsState:
    slrrc: int = 0
    reserved: tuple[Allocation, Allocation | None] | None = None
    period: int = 100
    effective_threshold_dbm: float | None = None
    unused: int = 0

    @property
    def length(self) -> int:
        return self.reserved[0].length if self.reserved else 0


@dataclass
class Candidates:
    resources: list[Allocation]
    threshold_dbm: float
    total: int
    after_exclusion: int


def rearm(cfg: SpsConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.slrrc_min, cfg.slrrc_max + 1))


def needs_reselection(state: SpsState, needed_subchannels: int, cfg: SpsConfig,
                      rng: np.random.Generator) -> bool:
    """Reselection triggers for a pending packet needing ``needed_subchannels``."""
    if state.reserved is None:
        return True
    if state.length < needed_subchannels:
        return True
    if cfg.underuse_trigger is not None and state.unused >= cfg.underuse_trigger:
        return True
    if state.slrrc <= 0:
        if cfg.p_keep > 0 and rng.random() < cfg.p_keep:
            state.slrrc = rearm(cfg, rng)
            return False
        return True
    return False


def candidate_resources(window: SensingWindow, now: int, length: int, cfg: SpsConfig,
                        noise_mw: float = 10 ** (-12.2)) -> Candidates:
    """Run the five-step exclusion/ranking procedure for a packet at ``now``."""
    C = window.n_subch
    n_starts = C - length + 1
    if n_starts < 1:
        raise ConfigError(f"allocation of {length} subchannels exceeds grid of {C}")
    ys = np.arange(now + cfg.t1, now + cfg.t2 + 1)
    S = len(ys)
    total = S * n_starts
    need = cfg.candidate_fraction * total
    P = cfg.p_step
    n_proj = window.window_len // P
    ks = np.arange(1, n_proj + 1)
    past = ys[:, None] - ks[None, :] * P  # (S, n_proj)
    written = window.holds(past, now)
    slots = np.mod(past, window.window_len)

    # step 2: subframes whose periodic history includes our own transmissions
    own = (written & window.own_tx[slots]).any(axis=1)
    base = np.repeat(~own[:, None], n_starts, axis=1)

    # step 3 precompute: strongest reserving RSRP over each candidate cell
    max_rsrp = np.full((S, n_starts), -np.inf)
    if window.sci_rsrp_dbm.size:
        s0 = window.sci_subframe
        per = np.maximum(window.sci_period, 1)
        k_first = np.maximum(1, -((s0 - ys[0]) // per))  # ceil((ys[0] - s0) / per)
        k_last = np.minimum(window.sci_remaining, (ys[-1] - s0) // per)
        n_off = int(np.max(k_last - k_first, initial=-1)) + 1
        for k_off in range(n_off):
            k = k_first + k_off
            y = s0 + k * per
            ok = (k <= window.sci_remaining) & (y <= ys[-1]) & (y >= ys[0])
            if not ok.any():
                continue
            row = (y - ys[0])[ok]
            lo = (window.sci_start - length + 1)[ok]
            span = (window.sci_length + length - 1)[ok]
            rsrp = window.sci_rsrp_dbm[ok]
            for j in range(int(span.max())):
                col = lo + j
                m = (j < span) & (col >= 0) & (col < n_starts)
                np.maximum.at(max_rsrp, (row[m], col[m]), rsrp[m])

    # step 4: raise the threshold until enough candidates survive
    steps = 0
    threshold = cfg.initial_threshold_dbm
    alive = base & ~(max_rsrp > threshold)
    top = max_rsrp.max()
    while alive.sum() < need and top > threshold:
        steps += 1
        threshold = cfg.initial_threshold_dbm + steps * cfg.threshold_step_db
        alive = base & ~(max_rsrp > threshold)
    if alive.sum() < need:
        alive = ~(max_rsrp > threshold)  # own-tx exemption alone starves the set
    after = int(alive.sum())

    # step 5: keep the lowest average S-RSSI share
    valid = written & ~window.own_tx[slots]
    counts = valid.sum(axis=1)
    sums = (window.rssi_mw[slots] * valid[:, :, None]).sum(axis=1)  # (S, C)
    # direct sums (not cumsum differences) so equal inputs tie exactly
    start_sum = sums[:, 0:n_starts].copy()
    for j in range(1, length):
        start_sum += sums[:, j:j + n_starts]
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = np.where(counts[:, None] > 0, start_sum / (counts[:, None] * length), noise_mw)
    rows, cols = np.nonzero(alive)
    keep = min(after, math.ceil(need - 1e-9))
    order = np.lexsort((cols, rows, avg[rows, cols]))[:keep]
    resources = [Allocation(int(ys[rows[i]]), int(cols[i]), length) for i in order]
    return Candidates(resources, threshold, total, after)


def select_pair(candidates: list[Allocation], cfg: SpsConfig, rng: np.random.Generator,
                state: SpsState | None = None) -> tuple[Allocation, Allocation | None]:
    """Draw a HARQ pair uniformly over legal pairs, else a single resource.

    A legal pair sits in two different subframes at most ``harq_max_gap``
    apart. The earlier resource carries HARQ-0. When ``state`` is given its
    reservation and counter are reset.
    """
    if not candidates:
        raise ValueError("no candidate resources")
    sf = np.array([c.subframe for c in candidates])
    gap = np.abs(sf[:, None] - sf[None, :])
    legal = np.triu((gap > 0) & (gap <= cfg.harq_max_gap), 1)
    ii, jj = np.nonzero(legal)
    if len(ii):
        p = int(rng.integers(len(ii)))
        a, b = candidates[ii[p]], candidates[jj[p]]
        pair = (a, b) if a.subframe < b.subframe else (b, a)
    else:
        pair = (candidates[int(rng.integers(len(candidates)))], None)
    if state is not None:
        state.reserved = pair
        state.slrrc = rearm(cfg, rng)
        state.unused = 0
    return pair


def on_transmit(state: SpsState) -> None:
    if state.reserved is None:
        raise ValueError("on_transmit without a reservation")
    state.slrrc = max(0, state.slrrc - 1)
