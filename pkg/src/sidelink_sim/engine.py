"""Subframe-resolution event loop and parameter sweeps."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence, TextIO

import numpy as np

from . import metrics as m
from .channel import Shadowing, pathloss_db, receive
from .config import RunConfig, with_changes
from .congestion import CbrMeter, bsm_tx_power, hpm_tx_power
from .grid import Allocation, ConfigError, Kind, MessageKind
from .mac_sps import (SensingWindow, SpsState, candidate_resources, needs_reselection,
                      on_transmit, select_pair)
from .scenario import VehicleState, build, due_messages, ring_distance

log = logging.getLogger(__name__)

PURPOSES = {"placement": 0, "hpm": 1, "offsets": 2, "decode": 3, "shadowing": 4, "sps": 5}


def substream(seed: int, purpose: str, ue: int | None = None) -> np.random.Generator:
    """Independent generator for one (purpose, UE) pair under a master seed."""
    key = (PURPOSES[purpose],) if ue is None else (PURPOSES[purpose], ue)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class Transmission:
    tx_id: int
    allocation: Allocation
    kind: MessageKind
    harq_index: int
    packet_id: int
    power_dbm: float
    generation_time: int
    period: int
    remaining: int


@dataclass
class _Packet:
    tx: int
    kind: MessageKind
    gen: int
    n_copies: int
    done: int = 0
    rx: np.ndarray | None = None
    dist: np.ndarray | None = None
    success: np.ndarray | None = None
    rx_time: np.ndarray | None = None
    hd_all: np.ndarray | None = None
    overlapped: np.ndarray | None = None


class _SciLog:
    """Every transmission of the trailing sensing window with per-receiver decode info."""

    def __init__(self, n_ue: int, capacity: int = 1024):
        self.n_ue = n_ue
        self.size = 0
        self._alloc(capacity)

    def _alloc(self, cap: int) -> None:
        self.cap = cap
        self.sub = np.zeros(cap, dtype=np.int64)
        self.start = np.zeros(cap, dtype=np.int64)
        self.length = np.zeros(cap, dtype=np.int64)
        self.period = np.zeros(cap, dtype=np.int64)
        self.remaining = np.zeros(cap, dtype=np.int64)
        self.decoded = np.zeros((cap, self.n_ue), dtype=bool)
        self.rsrp = np.zeros((cap, self.n_ue))

    def _compact(self, oldest: int) -> None:
        keep = self.sub[:self.size] >= oldest
        k = int(keep.sum())
        cols = [self.sub, self.start, self.length, self.period, self.remaining, self.decoded,
                self.rsrp]
        kept = [c[:self.size][keep] for c in cols]
        cap = self.cap if k < self.cap // 2 else self.cap * 2
        self._alloc(cap)
        for dst, src in zip([self.sub, self.start, self.length, self.period, self.remaining,
                             self.decoded, self.rsrp], kept):
            dst[:k] = src
        self.size = k

    def append(self, n: int, txs: Sequence[Transmission], decoded: np.ndarray,
               rsrp: np.ndarray, oldest: int) -> None:
        t = len(txs)
        if self.size + t > self.cap:
            self._compact(oldest)
        i, j = self.size, self.size + t
        self.sub[i:j] = n
        self.start[i:j] = [x.allocation.start for x in txs]
        self.length[i:j] = [x.allocation.length for x in txs]
        self.period[i:j] = [x.period for x in txs]
        self.remaining[i:j] = [x.remaining for x in txs]
        self.decoded[i:j] = decoded.T
        self.rsrp[i:j] = rsrp.T
        self.size = j

    def for_receiver(self, ue: int, oldest: int, now: int) -> dict[str, np.ndarray]:
        s = self.size
        sel = (self.sub[:s] >= oldest) & (self.sub[:s] < now) & self.decoded[:s, ue]
        return {
            "sci_subframe": self.sub[:s][sel],
            "sci_start": self.start[:s][sel],
            "sci_length": self.length[:s][sel],
            "sci_rsrp_dbm": self.rsrp[:s, ue][sel],
            "sci_period": self.period[:s][sel],
            "sci_remaining": self.remaining[:s][sel],
        }


TRACE_HEADER = ["event", "subframe", "tx", "rx", "packet", "kind", "harq", "start", "length",
                "power_dbm", "distance_m", "rsrp_dbm", "sinr_db", "sci_ok", "tb_ok", "tag",
                "gen", "value"]


class TraceWriter:
    """Delimited event trace: transmissions, reception attempts and metric events."""

    def __init__(self, fh: TextIO):
        self.w = csv.writer(fh, lineterminator="\n")
        self.w.writerow(TRACE_HEADER)

    def _row(self, **kv: Any) -> None:
        self.w.writerow([kv.get(h, "") for h in TRACE_HEADER])

    def tx(self, n: int, t: Transmission) -> None:
        a = t.allocation
        self._row(event="tx", subframe=n, tx=t.tx_id, packet=t.packet_id, kind=t.kind.kind.value,
                  harq=t.harq_index, start=a.start, length=a.length, power_dbm=repr(t.power_dbm),
                  gen=t.generation_time, value=t.remaining)

    def attempts(self, n: int, txs: Sequence[Transmission], rx_ids: np.ndarray, rsrp: np.ndarray,
                 sinr: np.ndarray, sci_ok: np.ndarray, tb_ok: np.ndarray) -> None:
        for r_i, r in enumerate(rx_ids):
            for t_i, t in enumerate(txs):
                self._row(event="rx", subframe=n, tx=t.tx_id, rx=int(r), packet=t.packet_id,
                          harq=t.harq_index, rsrp_dbm=repr(float(rsrp[r_i, t_i])),
                          sinr_db=repr(float(sinr[r_i, t_i])), sci_ok=int(sci_ok[r_i, t_i]),
                          tb_ok=int(tb_ok[r_i, t_i]))

    def outcome(self, pid: int, p: _Packet, tags: np.ndarray) -> None:
        for i, r in enumerate(p.rx):
            self._row(event="outcome", subframe=int(p.rx_time[i]), tx=p.tx, rx=int(r), packet=pid,
                      kind=p.kind.kind.value, distance_m=repr(float(p.dist[i])),
                      tb_ok=int(p.success[i]), tag=int(tags[i]), gen=p.gen)

    def series(self, event: str, ue: int, n: int, value: float) -> None:
        self._row(event=event, subframe=n, tx=ue, value=repr(float(value)))


@dataclass
class RunResult:
    """Outputs of one run; ``vehicles`` holds the initial vehicle table."""

    config: RunConfig
    store: m.MetricsStore
    vehicles: list[VehicleState]
    transmissions: int = 0
    summary: dict = field(default_factory=dict)


class Simulator:
    def __init__(self, cfg: RunConfig, trace: TextIO | None = None, on_reselect=None):
        """``on_reselect(ue, now, candidates, pair, slrrc)`` is called after each reselection."""
        self.cfg = cfg.validate()
        self.on_reselect = on_reselect
        sps = cfg.sps
        self.n_sub = cfg.traffic.n_subframes
        self.warmup = max(sps.sensing_window_len, cfg.cbr.window)
        seed = cfg.seed
        self.vehicles = build(cfg.road, cfg.traffic, {p: substream(seed, p)
                                                      for p in ("placement", "hpm", "offsets")})
        self.initial = [dataclasses.replace(v) for v in self.vehicles]
        n = self.N = len(self.vehicles)
        self.C = cfg.grid.total_rbs // cfg.grid.rbs_per_subchannel
        self.pos = np.array([v.position for v in self.vehicles])
        self.speed = np.array([v.speed for v in self.vehicles])
        self.hpm_nodes = np.array([v.id for v in self.vehicles if v.is_hpm_node], dtype=int)
        self.hpm_phase = np.array([v.hpm_phase for v in self.vehicles], dtype=np.int64)
        self.decoder = cfg.decoder()
        self.noise = cfg.channel.noise
        self.lengths = {Kind.BSM: cfg.length_for(cfg.traffic.bsm),
                        Kind.HPM: cfg.length_for(cfg.traffic.hpm)}
        self.sps_rng = [substream(seed, "sps", i) for i in range(n)]
        self.decode_rng = substream(seed, "decode")
        pl = cfg.channel.pathloss
        self.shadow = Shadowing(n, pl.shadowing_sigma_db, pl.shadowing_reseed_period,
                                substream(seed, "shadowing"))
        self.states: list[dict[str, SpsState]] = [{} for _ in range(n)]
        W = sps.sensing_window_len
        self.rssi = np.zeros((n, W, self.C))
        self.own = np.zeros((n, W), dtype=bool)
        self.slot_sf = np.full(W, -1, dtype=np.int64)
        self.scilog = _SciLog(n)
        self.meter = CbrMeter(n, cfg.cbr)
        self.cbr_thr_mw = 10.0 ** (cfg.cbr.threshold_dbm / 10.0)
        self.last_cbr = np.full(n, -10**9, dtype=np.int64)
        self.last_hpm_rx = np.full(n, -10**9, dtype=np.int64)
        self.schedule: dict[int, list[Transmission]] = {}
        self.packets: dict[int, _Packet] = {}
        self.next_pid = 0
        self.n_tx = 0
        self.store = m.MetricsStore(n, cfg.metrics.binning, self.warmup, self.n_sub)
        self.trace = TraceWriter(trace) if trace is not None else None
        self._due: dict[int, list[int]] = {}
        for v in self.vehicles:
            self._due.setdefault(v.tx_offset % cfg.traffic.itt, []).append(v.id)
            if cfg.traffic.hpm_additive and v.is_hpm_node:
                off = (v.tx_offset + cfg.traffic.itt // 2) % cfg.traffic.itt
                self._due.setdefault(off, []).append(v.id)
        for ids in self._due.values():
            ids.sort()
        self._links_epoch = None
        self._update_links(0)

    # -- geometry ----------------------------------------------------------
    def _update_links(self, n: int) -> None:
        epoch = (n // 100, n // self.cfg.channel.pathloss.shadowing_reseed_period)
        if epoch == self._links_epoch:
            return
        self._links_epoch = epoch
        L = self.cfg.road.length
        self.dist = ring_distance(self.pos[:, None], self.pos[None, :], L)
        self.loss = pathloss_db(self.cfg.channel.pathloss, self.dist) + self.shadow.at(n)
        self.in_range = self.dist <= self.cfg.metrics.max_range
        np.fill_diagonal(self.in_range, False)

    def _mobility(self, n: int) -> None:
        if n > 0 and n % 100 == 0:
            self.pos = (self.pos + self.speed * 0.1) % self.cfg.road.length
            for v, p in zip(self.vehicles, self.pos):
                v.position = float(p)

    def hpm_active(self, n: int) -> bool:
        if not len(self.hpm_nodes):
            return False
        ph = self.hpm_phase[self.hpm_nodes]
        t = self.cfg.traffic
        return bool(np.any((n >= ph) & ((n - ph) % t.batch_ms < t.duration_ms)))

    def window(self, ue: int, now: int) -> SensingWindow:
        W = self.cfg.sps.sensing_window_len
        return SensingWindow(W, self.C, self.rssi[ue], self.slot_sf, self.own[ue],
                             **self.scilog.for_receiver(ue, now - W, now))

    # -- phase 2: packet generation -------------------------------------------
    def _generate(self, n: int) -> None:
        cfg = self.cfg
        ids = self._due.get(n % cfg.traffic.itt)
        if not ids:
            return
        hpm_on = self.hpm_active(n) if cfg.policy.kind == "selective" else False
        for i in dict.fromkeys(ids):
            for stream, kind in due_messages(self.vehicles[i], n, cfg.traffic):
                self._packet(i, n, stream, kind, hpm_on)

    def _packet(self, i: int, n: int, stream: str, kind: MessageKind, hpm_on: bool) -> None:
        cfg, sps = self.cfg, self.cfg.sps
        st = self.states[i].setdefault(stream, SpsState(period=cfg.traffic.itt))
        L = self.lengths[kind.kind]
        if st.reserved is not None and st.reserved[0].subframe <= n:
            skipped = (n - st.reserved[0].subframe) // st.period + 1
            st.unused += skipped
            st.reserved = tuple(_shift(a, skipped * st.period) for a in st.reserved)
        if needs_reselection(st, L, sps, self.sps_rng[i]):
            cand = candidate_resources(self.window(i, n), n, L, sps, self.noise.mw)
            pair = select_pair(cand.resources, sps, self.sps_rng[i], state=st)
            st.effective_threshold_dbm = cand.threshold_dbm
            if self.on_reselect is not None:
                self.on_reselect(i, n, cand, pair, st.slrrc)
            self.store.threshold_sample(i, n, cand.threshold_dbm)
            if self.trace:
                self.trace.series("threshold", i, n, cand.threshold_dbm)
        if kind.kind is Kind.HPM:
            power = hpm_tx_power(cfg.policy)
        else:
            ready = self.meter.ready()
            cbr = self.meter.value(i) if ready else 0.0
            if ready and n - self.last_cbr[i] >= cfg.cbr.decimation:
                self.last_cbr[i] = n
                self.store.cbr_sample(i, n, cbr)
                if self.trace:
                    self.trace.series("cbr", i, n, cbr)
            gate = hpm_on
            if cfg.policy.gate_on_decoded_hpm:
                gate = n - self.last_hpm_rx[i] < cfg.traffic.duration_ms
            power = bsm_tx_power(cfg.policy, cbr, gate)
        on_transmit(st)
        pid = self.next_pid
        self.next_pid += 1
        copies = [a for a in st.reserved if a is not None]
        self.packets[pid] = _Packet(i, kind, n, len(copies))
        for h, a in enumerate(copies):
            tx = Transmission(i, Allocation(a.subframe, a.start, L), kind, h, pid, power, n,
                              st.period, st.slrrc)
            self.schedule.setdefault(a.subframe, []).append(tx)
        st.reserved = tuple(_shift(a, st.period) for a in st.reserved)

    # -- phases 3-6: air interface and metrics ---------------------------------
    def _air(self, n: int) -> None:
        W = self.cfg.sps.sensing_window_len
        slot = n % W
        self.slot_sf[slot] = n
        txs = self.schedule.pop(n, None)
        noise_mw = self.noise.mw
        if not txs:
            self.rssi[:, slot, :] = noise_mw
            self.own[:, slot] = False
            self.meter.push_busy(n, np.full(self.N, self.C * int(noise_mw > self.cbr_thr_mw)),
                                 np.zeros(self.N, dtype=bool), self.C)
            return
        txs.sort(key=lambda t: (t.tx_id, t.packet_id, t.harq_index))
        self.n_tx += len(txs)
        tx_ids = np.array([t.tx_id for t in txs])
        power = np.array([t.power_dbm for t in txs])
        is_tx = np.zeros(self.N, dtype=bool)
        is_tx[tx_ids] = True
        rx_dbm = power[None, :] - self.loss[:, tx_ids]
        rec = receive(rx_dbm, [t.allocation for t in txs], self.C, self.noise)
        T = len(txs)
        draws = self.decode_rng.random((2, self.N, T))
        sci_ok = draws[0] >= self.decoder.bler(rec.sci_sinr_db, self.cfg.sci_mcs)
        sci_ok &= ~is_tx[:, None]
        tb_bler = np.empty_like(rec.tb_sinr_db)
        for mcs in {t.kind.mcs_index for t in txs}:
            cols = np.array([t.kind.mcs_index == mcs for t in txs])
            tb_bler[:, cols] = self.decoder.bler(rec.tb_sinr_db[:, cols], mcs)
        tb_ok = sci_ok & (draws[1] >= tb_bler)

        # sensing and CBR (half-duplex: transmitters record nothing)
        self.rssi[:, slot, :] = rec.s_rssi_mw
        self.rssi[is_tx, slot, :] = 0.0
        self.own[:, slot] = is_tx
        busy = (rec.s_rssi_mw > self.cbr_thr_mw).sum(axis=1)
        busy[is_tx] = 0
        self.meter.push_busy(n, busy, is_tx, self.C)
        self.scilog.append(n, txs, sci_ok, rx_dbm, n - W)
        listening = ~is_tx
        self.store.sci_attempts(n, rx_dbm[listening], sci_ok[listening])
        if self.trace:
            for t in txs:
                self.trace.tx(n, t)
            self.trace.attempts(n, txs, np.nonzero(listening)[0], rx_dbm[listening],
                                rec.tb_sinr_db[listening], sci_ok[listening], tb_ok[listening])
        if self.cfg.policy.gate_on_decoded_hpm:
            hpm_cols = np.array([t.kind.kind is Kind.HPM for t in txs])
            if hpm_cols.any():
                self.last_hpm_rx[tb_ok[:, hpm_cols].any(axis=1)] = n

        for t_i, t in enumerate(txs):
            p = self.packets[t.packet_id]
            if p.rx is None:
                p.rx = np.nonzero(self.in_range[t.tx_id])[0]
                p.dist = self.dist[t.tx_id, p.rx]
                k = len(p.rx)
                p.success = np.zeros(k, dtype=bool)
                p.rx_time = np.full(k, n, dtype=np.int64)
                p.hd_all = np.ones(k, dtype=bool)
                p.overlapped = np.zeros(k, dtype=bool)
            got = tb_ok[p.rx, t_i]
            p.rx_time[got & ~p.success] = n
            p.success |= got
            p.hd_all &= is_tx[p.rx]
            p.overlapped |= rec.overlapped[p.rx, t_i]
            p.done += 1
            if p.done == p.n_copies:
                self._finish(t.packet_id, p, n)

    def _finish(self, pid: int, p: _Packet, n: int) -> None:
        del self.packets[pid]
        p.rx_time[~p.success] = n
        tags = np.full(len(p.rx), m.NO_LOSS, dtype=np.int64)
        failed = ~p.success
        tags[failed] = np.where(p.hd_all[failed], m.TAG_INDEX["half_duplex"],
                                np.where(p.overlapped[failed], m.TAG_INDEX["collision"],
                                         m.TAG_INDEX["sinr"]))
        self.store.packet_outcome(p.tx, p.kind.kind, p.gen, p.rx, p.dist, p.success, p.rx_time,
                                  tags)
        if self.trace and p.gen >= self.store.start:
            self.trace.outcome(pid, p, tags)

    def run(self) -> RunResult:
        for n in range(self.n_sub):
            self._mobility(n)
            self._update_links(n)
            self._generate(n)
            self._air(n)
        self.store.finalize()
        res = RunResult(self.cfg, self.store, self.initial, self.n_tx)
        res.summary = summarize(self.cfg, self.store, len(self.vehicles))
        return res


def _shift(a: Allocation | None, dt: int) -> Allocation | None:
    if a is None:
        return None
    return Allocation(a.subframe + dt, a.start, a.length)


def run(cfg: RunConfig, trace: TextIO | None = None) -> RunResult:
    """Simulate one configuration; deterministic in ``(cfg, cfg.seed)``."""
    return Simulator(cfg, trace).run()


def summarize(cfg: RunConfig, store: m.MetricsStore, n_vehicles: int) -> dict:
    pol = cfg.policy
    bsm = m.prr_curve(store, Kind.BSM)
    hpm = m.prr_curve(store, Kind.HPM)
    below = np.nonzero(np.nan_to_num(bsm, nan=1.0) < 0.9)[0]
    thr = [v for _, _, v in store.threshold_series]
    cbr = [v for _, _, v in store.cbr_series]
    gains = [g for b in range(store.binning.n_bins) if (g := m.hpm_gain(store, b)) is not None]
    losses = store.losses.sum(axis=(0, 1))

    def r(x):
        return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(f"{x:.6g}")

    return {
        "policy": pol.kind,
        "power_dbm": pol.power_dbm if pol.kind == "fixed" else None,
        "density_per_km": cfg.road.density,
        "n_vehicles": n_vehicles,
        "seed": cfg.seed,
        "sim_time_s": cfg.traffic.sim_time,
        "bsm_prr_mean": r(float(np.nanmean(bsm))) if np.isfinite(bsm).any() else None,
        "hpm_prr_mean": r(float(np.nanmean(hpm))) if np.isfinite(hpm).any() else None,
        "hpm_gain_mean_pts": r(float(np.mean(gains))) if gains else None,
        "range_prr_below_0_9_m": r(store.binning.low(int(below[0]))) if len(below) else None,
        "cbr_mean": r(float(np.mean(cbr))) if cbr else None,
        "threshold_mean_dbm": r(float(np.mean(thr))) if thr else None,
        "reselections": len(thr),
        "opportunities": int(store.opportunities.sum()),
        "losses": {t: int(losses[i]) for i, t in enumerate(m.TAGS)},
        "p_decode_sci": r(store.sci_ok / store.sci_tries) if store.sci_tries else None,
    }


# -- trace replay --------------------------------------------------------------

def replay_trace(path: str | Path, cfg: RunConfig, n_vehicles: int) -> m.MetricsStore:
    """Rebuild a MetricsStore from a persisted event trace."""
    cfg = cfg.validate()
    warmup = max(cfg.sps.sensing_window_len, cfg.cbr.window)
    store = m.MetricsStore(n_vehicles, cfg.metrics.binning, warmup, cfg.traffic.n_subframes)
    pending_rx: list[dict] = []
    pending_out: list[dict] = []

    def flush_rx():
        if pending_rx:
            store.sci_attempts(int(pending_rx[0]["subframe"]),
                               np.array([float(x["rsrp_dbm"]) for x in pending_rx]),
                               np.array([x["sci_ok"] == "1" for x in pending_rx]))
            pending_rx.clear()

    def flush_out():
        if pending_out:
            x0 = pending_out[0]
            store.packet_outcome(
                int(x0["tx"]), Kind(x0["kind"]), int(x0["gen"]),
                np.array([int(x["rx"]) for x in pending_out]),
                np.array([float(x["distance_m"]) for x in pending_out]),
                np.array([x["tb_ok"] == "1" for x in pending_out]),
                np.array([int(x["subframe"]) for x in pending_out], dtype=np.int64),
                np.array([int(x["tag"]) for x in pending_out], dtype=np.int64))
            pending_out.clear()

    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ev = row["event"]
            if ev != "rx" or (pending_rx and pending_rx[0]["subframe"] != row["subframe"]):
                flush_rx()
            if ev != "outcome" or (pending_out and pending_out[0]["packet"] != row["packet"]):
                flush_out()
            if ev == "rx":
                pending_rx.append(row)
            elif ev == "outcome":
                pending_out.append(row)
            elif ev == "cbr":
                store.cbr_sample(int(row["tx"]), int(row["subframe"]), float(row["value"]))
            elif ev == "threshold":
                store.threshold_sample(int(row["tx"]), int(row["subframe"]), float(row["value"]))
    flush_rx()
    flush_out()
    store.finalize()
    return store


# -- sweeps --------------------------------------------------------------------

AXES = {
    "tx_powers": lambda v: {"policy.kind": "fixed", "policy.power_dbm": float(v)},
    "densities": lambda v: {"road.density": float(v)},
    "policies": lambda v: ({"policy.kind": v} if isinstance(v, str)
                           else {f"policy.{k}": x for k, x in dict(v).items()}),
    "vehicles": lambda v: {"road.n_vehicles": int(v)},
}


def sweep_configs(base: RunConfig, axis: str, values: Iterable[Any]) -> list[RunConfig]:
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(AXES)}")
    return [with_changes(base, {**AXES[axis](v), "seed": base.seed ^ i})
            for i, v in enumerate(values)]


def _run_quiet(cfg: RunConfig) -> RunResult | BaseException:
    try:
        return run(cfg)
    except Exception as exc:  # noqa: BLE001 - reported per run
        return exc


def run_many(cfgs: Sequence[RunConfig], jobs: int = 1) -> list[RunResult | BaseException]:
    """Run independent configurations; failures are returned in place of results."""
    if jobs <= 1 or len(cfgs) <= 1:
        return [_run_quiet(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_quiet, cfgs))


def sweep(base: RunConfig, axis: str, values: Iterable[Any], jobs: int = 1
          ) -> list[RunResult | BaseException]:
    """One run per value with seeds ``base.seed ^ index``."""
    return run_many(sweep_configs(base, axis, values), jobs)
