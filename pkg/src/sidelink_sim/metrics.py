"""Accumulators and reports: PRR by distance, CBR and threshold series, information age."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import ConfigError, Kind

KINDS = (Kind.BSM, Kind.HPM)
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}
TAGS = ("sinr", "collision", "half_duplex")
TAG_INDEX = {t: i for i, t in enumerate(TAGS)}
NO_LOSS = -1

RSRP_LO, RSRP_HI, RSRP_RES = -200.0, 50.0, 0.01


def fmt(x: float) -> str:
    return f"{x:.6g}"


@dataclass(frozen=True)
class DistanceBinning:
    bin_width: float = 50.0
    max_range: float = 1000.0

    def validate(self) -> None:
        if self.bin_width <= 0 or self.max_range <= 0:
            raise ConfigError("metrics: bin_width and max_range must be > 0")
        ratio = self.max_range / self.bin_width
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("metrics.bin_width must divide metrics.max_range")

    @property
    def n_bins(self) -> int:
        return int(round(self.max_range / self.bin_width))

    def index(self, d):
        """Bin index for ``d <= max_range``; the last bin is closed on the right."""
        idx = np.floor_divide(np.asarray(d, dtype=float), self.bin_width).astype(np.int64)
        return np.minimum(idx, self.n_bins - 1)

    def low(self, b: int) -> float:
        return b * self.bin_width


class MetricsStore:
    def __init__(self, n_ue: int, binning: DistanceBinning, start: int, end: int):
        self.n_ue = n_ue
        self.binning = binning
        self.start = start
        self.end = end
        nb = binning.n_bins
        self.successes = np.zeros((len(KINDS), nb), dtype=np.int64)
        self.opportunities = np.zeros((len(KINDS), nb), dtype=np.int64)
        self.losses = np.zeros((len(KINDS), nb, len(TAGS)), dtype=np.int64)
        self.pairs_enumerated = 0
        self.cbr_series: list[tuple[int, int, float]] = []
        self.threshold_series: list[tuple[int, int, float]] = []
        self.sci_tries = 0
        self.sci_ok = 0
        self.rsrp_hist = np.zeros(int(round((RSRP_HI - RSRP_LO) / RSRP_RES)) + 1, dtype=np.int64)
        # information age: difference-array histograms per distance bin
        self.ia_cap = max(end, 1) + 2
        self.ia_diff = np.zeros((nb, self.ia_cap + 1), dtype=np.int64)
        self.ia_sum = np.zeros(nb, dtype=np.float64)
        self.ia_count = np.zeros(nb, dtype=np.int64)
        self._last_gen = np.full((n_ue, n_ue), -1, dtype=np.int64)
        self._last_rx = np.zeros((n_ue, n_ue), dtype=np.int64)
        self._last_bin = np.zeros((n_ue, n_ue), dtype=np.int64)
        self.finalized = False

    # -- events --------------------------------------------------------
    def packet_outcome(self, tx: int, kind: Kind, gen: int, rx: np.ndarray, dist: np.ndarray,
                       success: np.ndarray, rx_time: np.ndarray, tag: np.ndarray) -> None:
        """One packet's fate at each potential receiver in range.

        ``tag`` holds a ``TAGS`` index for failures and ``NO_LOSS`` otherwise.
        """
        if gen < self.start or len(rx) == 0:
            return
        k = KIND_INDEX[kind]
        bins = self.binning.index(dist)
        nb = self.binning.n_bins
        self.pairs_enumerated += len(rx)
        self.opportunities[k] += np.bincount(bins, minlength=nb)
        self.successes[k] += np.bincount(bins[success], minlength=nb)
        failed = ~success
        np.add.at(self.losses[k], (bins[failed], tag[failed]), 1)
        if success.any():
            self._ia_update(tx, gen, rx[success], rx_time[success], bins[success])

    def cbr_sample(self, ue: int, subframe: int, cbr: float) -> None:
        if subframe >= self.start:
            self.cbr_series.append((ue, subframe, cbr))

    def threshold_sample(self, ue: int, subframe: int, dbm: float) -> None:
        if subframe >= self.start:
            self.threshold_series.append((ue, subframe, dbm))

    def sci_attempts(self, subframe: int, rsrp_dbm: np.ndarray, decoded: np.ndarray) -> None:
        if subframe < self.start or rsrp_dbm.size == 0:
            return
        self.sci_tries += int(rsrp_dbm.size)
        self.sci_ok += int(np.count_nonzero(decoded))
        idx = np.clip(((rsrp_dbm - RSRP_LO) / RSRP_RES).astype(np.int64), 0, self.rsrp_hist.size - 1)
        self.rsrp_hist += np.bincount(idx.ravel(), minlength=self.rsrp_hist.size)

    # -- information age ---------------------------------------------------
    def _ia_add(self, bins, base_gen, a, b) -> None:
        a = np.maximum(a, self.start)
        b = np.minimum(b, self.end)
        ok = b > a
        if not ok.any():
            return
        bins, base_gen, a, b = bins[ok], base_gen[ok], a[ok], b[ok]
        lo = a - base_gen
        hi = b - 1 - base_gen
        np.add.at(self.ia_diff, (bins, np.minimum(lo, self.ia_cap)), 1)
        np.add.at(self.ia_diff, (bins, np.minimum(hi + 1, self.ia_cap)), -1)
        n = hi - lo + 1
        np.add.at(self.ia_sum, bins, (lo + hi) * n / 2.0)
        np.add.at(self.ia_count, bins, n)

    def _ia_update(self, tx, gen, rx, rx_time, bins) -> None:
        prev = self._last_gen[tx, rx]
        newer = gen > prev
        rx, rx_time, bins, prev = rx[newer], rx_time[newer], bins[newer], prev[newer]
        had = prev >= 0
        if had.any():
            self._ia_add(self._last_bin[tx, rx[had]], prev[had], self._last_rx[tx, rx[had]],
                         rx_time[had])
        self._last_gen[tx, rx] = gen
        self._last_rx[tx, rx] = rx_time
        self._last_bin[tx, rx] = bins

    def finalize(self) -> None:
        if self.finalized:
            return
        tx, rx = np.nonzero(self._last_gen >= 0)
        if len(tx):
            self._ia_add(self._last_bin[tx, rx], self._last_gen[tx, rx], self._last_rx[tx, rx],
                         np.full(len(tx), self.end))
        self.finalized = True

    # -- serialization -------------------------------------------------
    def prr_rows(self) -> list[list[str]]:
        rows = []
        for k, kind in enumerate(KINDS):
            for b in range(self.binning.n_bins):
                s, o = int(self.successes[k, b]), int(self.opportunities[k, b])
                rows.append([kind.value, fmt(self.binning.low(b)), str(s), str(o),
                             fmt(s / o) if o else ""])
        return rows

    def ia_rows(self) -> list[list[str]]:
        rows = []
        for b in range(self.binning.n_bins):
            mean, p95 = ia_stats(self, b)
            rows.append([fmt(self.binning.low(b)), "" if mean is None else fmt(mean),
                         "" if p95 is None else fmt(p95)])
        return rows

    def write(self, out_dir: str | Path, summary: dict) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "prr.csv", ["kind", "bin_low_m", "successes", "opportunities", "prr"],
                   self.prr_rows())
        _write_csv(out / "cbr.csv", ["ue", "subframe", "cbr"],
                   [[str(u), str(t), fmt(c)] for u, t, c in self.cbr_series])
        _write_csv(out / "threshold.csv", ["ue", "subframe", "dbm"],
                   [[str(u), str(t), fmt(v)] for u, t, v in self.threshold_series])
        _write_csv(out / "ia.csv", ["bin_low_m", "mean_ms", "p95_ms"], self.ia_rows())
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    def serialize(self) -> str:
        """Canonical text of every accumulator, for equality checks."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerows(self.prr_rows())
        w.writerows([[u, t, repr(c)] for u, t, c in self.cbr_series])
        w.writerows([[u, t, repr(v)] for u, t, v in self.threshold_series])
        w.writerows(self.ia_rows())
        w.writerow(self.losses.ravel().tolist())
        w.writerow([self.pairs_enumerated, self.sci_tries, self.sci_ok])
        return buf.getvalue()


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- reports --------------------------------------------------------------

def prr(store: MetricsStore, kind: Kind, b: int) -> float | None:
    """Reception ratio in bin ``b``; ``None`` marks an empty bin."""
    k = KIND_INDEX[Kind(kind)]
    o = store.opportunities[k, b]
    if o == 0:
        return None
    return float(store.successes[k, b] / o)


def prr_curve(store: MetricsStore, kind: Kind) -> np.ndarray:
    """PRR per bin with NaN for empty bins."""
    k = KIND_INDEX[Kind(kind)]
    o = store.opportunities[k]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(o > 0, store.successes[k] / np.maximum(o, 1), np.nan)


def hpm_gain(store: MetricsStore, b: int) -> float | None:
    h, s = prr(store, Kind.HPM, b), prr(store, Kind.BSM, b)
    if h is None or s is None:
        return None
    return 100.0 * (h - s)


def ia_stats(store: MetricsStore, b: int) -> tuple[float | None, float | None]:
    """Mean and 95th percentile information age (ms) in bin ``b``."""
    store.finalize()
    n = store.ia_count[b]
    if n == 0:
        return None, None
    hist = np.cumsum(store.ia_diff[b])
    cdf = np.cumsum(hist)
    p95 = int(np.searchsorted(cdf, math.ceil(0.95 * n)))
    return float(store.ia_sum[b] / n), float(p95)


def information_age(receptions: Sequence[tuple[int, int]], start: int, end: int) -> np.ndarray:
    """IA sampled every subframe in ``[start, end)`` for one link.

    ``receptions`` holds ``(rx_time, generation_time)`` of successful
    deliveries. Samples before the first delivery are NaN.
    """
    out = np.full(end - start, np.nan)
    newest = -1
    events = sorted(receptions)
    i = 0
    for t in range(start, end):
        while i < len(events) and events[i][0] <= t:
            newest = max(newest, events[i][1])
            i += 1
        if newest >= 0:
            out[t - start] = t - newest
    if np.all(np.isnan(out)):
        raise ValueError("no reception on this link")
    return out


def threshold_analysis(store: MetricsStore, initial_threshold_dbm: float = -84.18) -> dict:
    """Empirical check of the balance P_decodeSCI * P{RSRP > x} at the mean threshold."""
    if not store.threshold_series:
        raise ValueError("threshold series is empty")
    vals = np.array([v for _, _, v in store.threshold_series])
    mean_thr = float(vals.mean())
    p_decode = store.sci_ok / store.sci_tries if store.sci_tries else 0.0
    total = store.rsrp_hist.sum()
    cut = int(np.clip(math.floor((mean_thr - RSRP_LO) / RSRP_RES) + 1, 0, store.rsrp_hist.size))
    p_above = float(store.rsrp_hist[cut:].sum() / total) if total else 0.0
    return {
        "mean_threshold_dbm": mean_thr,
        "escalated_share": float(np.mean(vals > initial_threshold_dbm + 1e-9)),
        "p_decode_sci": p_decode,
        "p_rsrp_above": p_above,
        "balance": p_decode * p_above,
    }


def locate_p_opt(points: Sequence[tuple[float, float]], initial_threshold_dbm: float = -84.18
                 ) -> tuple[float | None, float | None]:
    """Bracket the power where escalation starts.

    ``points`` are ``(tx_power_dbm, mean_threshold_dbm)`` per run. Returns
    the last non-escalating and the first escalating power (either may be
    ``None``).
    """
    pts = sorted(points)
    lo = hi = None
    for p, thr in pts:
        if thr > initial_threshold_dbm + 1e-9:
            hi = p
            break
        lo = p
    return lo, hi
