"""Two-channel coincidence logic on fixed-length TTL pulses.

Every detection opens a logic pulse of its channel's length.  Pulses on the
same channel that overlap merge into one high interval.  A coincidence is
registered when a signal interval and a herald interval overlap by more than
``min_overlap_ps``; each high interval can take part in at most one
coincidence, so a long herald pulse that has already fired is not re-used by a
later signal pulse.  This consumption rule is what produces the saturation
loss with the longer pulse as effective dead-time.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np
from scipy.optimize import curve_fit

from .sim import FWHM_PER_SIGMA, PS_PER_S, EventStream


@dataclass(frozen=True)
class CoincidenceConfig:
    pulse_len_signal_ps: int = 50_000
    pulse_len_herald_ps: int = 1_000_000
    min_overlap_ps: int = 3_000
    delay_offset_ps: int = 0

    def __post_init__(self):
        if self.pulse_len_signal_ps <= 0 or self.pulse_len_herald_ps <= 0:
            raise ValueError("pulse lengths must be > 0")
        if self.min_overlap_ps < 0:
            raise ValueError("min_overlap_ps must be >= 0")
        if self.min_overlap_ps >= min(self.pulse_len_signal_ps, self.pulse_len_herald_ps):
            raise ValueError("min_overlap_ps must be shorter than both pulses")

    @property
    def tau_w_ps(self) -> int:
        return self.pulse_len_signal_ps + self.pulse_len_herald_ps

    @property
    def tau_max_ps(self) -> int:
        return max(self.pulse_len_signal_ps, self.pulse_len_herald_ps)

    def with_delay(self, delay_ps: int) -> "CoincidenceConfig":
        return CoincidenceConfig(self.pulse_len_signal_ps, self.pulse_len_herald_ps,
                                 self.min_overlap_ps, int(delay_ps))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CountsSummary:
    singles_signal_hz: float
    singles_herald_hz: float
    coincidences_hz: float
    duration_s: float
    singles_signal_count: int
    singles_herald_count: int
    coincidence_count: int

    def __post_init__(self):
        if not self.duration_s > 0:
            raise ValueError("duration_s must be > 0")
        for name in ("singles_signal_hz", "singles_herald_hz", "coincidences_hz"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")

    @classmethod
    def from_counts(cls, n_signal: int, n_herald: int, n_cc: int,
                    duration_s: float) -> "CountsSummary":
        if not duration_s > 0:
            raise ValueError("duration_s must be > 0")
        return cls(n_signal / duration_s, n_herald / duration_s, n_cc / duration_s,
                   duration_s, int(n_signal), int(n_herald), int(n_cc))

    @classmethod
    def from_rates(cls, s1_hz: float, s2_hz: float, cc_hz: float,
                   duration_s: float) -> "CountsSummary":
        """Summary from rates; counts are the nearest integers to rate * duration."""
        return cls(float(s1_hz), float(s2_hz), float(cc_hz), float(duration_s),
                   round(s1_hz * duration_s), round(s2_hz * duration_s),
                   round(cc_hz * duration_s))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DelayScan:
    delays_ps: list[int]
    coincidence_rates_hz: list[float]

    def __post_init__(self):
        if len(self.delays_ps) != len(self.coincidence_rates_hz):
            raise ValueError("delays and rates differ in length")
        if any(r < 0 for r in self.coincidence_rates_hz):
            raise ValueError("rates must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def merge_pulses(t: np.ndarray, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Logic-high intervals ``[start, end)`` from pulses of equal ``length`` at sorted ``t``."""
    t = np.asarray(t, dtype=np.int64)
    if t.size == 0:
        return t.copy(), t.copy()
    # equal lengths keep pulse ends sorted, so a pulse merges iff it starts before
    # the previous one ends
    new = np.empty(t.size, dtype=bool)
    new[0] = True
    new[1:] = t[1:] >= t[:-1] + length
    first = np.flatnonzero(new)
    last = np.r_[first[1:] - 1, t.size - 1]
    return t[first], t[last] + length


@numba.njit(cache=True)
def _count_overlaps(s0, s1, h0, h1, min_overlap):
    i = 0
    j = 0
    n = 0
    while i < s0.size and j < h0.size:
        lo = max(s0[i], h0[j])
        hi = min(s1[i], h1[j])
        if hi - lo > min_overlap:
            n += 1
            i += 1
            j += 1
        elif s1[i] <= h1[j]:
            i += 1
        else:
            j += 1
    return n


def _check_pair(signal: EventStream, herald: EventStream):
    if signal.duration_ps != herald.duration_ps:
        raise ValueError(
            f"stream durations differ: {signal.duration_ps} vs {herald.duration_ps}")


def count_coincidences(signal: EventStream, herald: EventStream,
                       cfg: CoincidenceConfig) -> CountsSummary:
    _check_pair(signal, herald)
    s0, s1 = merge_pulses(signal.timestamps_ps + cfg.delay_offset_ps, cfg.pulse_len_signal_ps)
    h0, h1 = merge_pulses(herald.timestamps_ps, cfg.pulse_len_herald_ps)
    n = _count_overlaps(s0, s1, h0, h1, np.int64(cfg.min_overlap_ps))
    return CountsSummary.from_counts(len(signal), len(herald), n, signal.duration_s)


def delay_scan(signal: EventStream, herald: EventStream, cfg: CoincidenceConfig,
               delays) -> DelayScan:
    """Coincidence rate with the signal channel shifted by each delay (positive = later)."""
    _check_pair(signal, herald)
    delays = [int(d) for d in delays]
    if any(b < a for a, b in zip(delays, delays[1:])):
        raise ValueError("delays must be sorted")
    # merging is shift invariant, so merge once and slide the signal intervals
    s0, s1 = merge_pulses(signal.timestamps_ps, cfg.pulse_len_signal_ps)
    h0, h1 = merge_pulses(herald.timestamps_ps, cfg.pulse_len_herald_ps)
    m = np.int64(cfg.min_overlap_ps)
    rates = [_count_overlaps(s0 + d, s1 + d, h0, h1, m) / signal.duration_s for d in delays]
    return DelayScan(delays, rates)


def delay_grid(start_ps: int, stop_ps: int, step_ps: int = 10_000) -> list[int]:
    """Inclusive grid of delays; default step is 10 ns."""
    if step_ps <= 0:
        raise ValueError("step must be > 0")
    return list(range(int(start_ps), int(stop_ps) + 1, int(step_ps)))


def _gauss(x, amp, mu, sigma, offset):
    return offset + amp * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


@dataclass(frozen=True)
class PeakFit:
    center_ps: float
    fwhm_ps: float
    amplitude_hz: float
    offset_hz: float
    fwhm_err_ps: float


def fit_delay_peak(scan: DelayScan) -> PeakFit:
    """Least-squares Gaussian plus constant background through a delay scan."""
    x = np.asarray(scan.delays_ps, dtype=float)
    y = np.asarray(scan.coincidence_rates_hz, dtype=float)
    if x.size < 4:
        raise ValueError("need at least four delays to fit a peak")
    k = int(np.argmax(y))
    half = y.min() + 0.5 * (y[k] - y.min())
    above = x[y >= half]
    width0 = max(above.max() - above.min(), np.diff(x).min()) / FWHM_PER_SIGMA
    p0 = [y[k] - y.min(), x[k], width0, y.min()]
    popt, pcov = curve_fit(_gauss, x, y, p0=p0, maxfev=20_000)
    sigma = abs(popt[2])
    return PeakFit(center_ps=float(popt[1]), fwhm_ps=float(FWHM_PER_SIGMA * sigma),
                   amplitude_hz=float(popt[0]), offset_hz=float(popt[3]),
                   fwhm_err_ps=float(FWHM_PER_SIGMA * math.sqrt(abs(pcov[2, 2]))))


def heralding_ratio(summary: CountsSummary) -> tuple[float, float]:
    """Raw heralding efficiency of the signal arm, ``CC / S_herald``, and its Poisson error.

    The error treats coincidence and herald counts as independent Poisson
    variables.  If the summary carries no counts the rates are used as-is and
    the error is NaN.
    """
    if summary.singles_herald_hz <= 0:
        raise ValueError("herald singles rate is zero; heralding ratio undefined")
    ratio = summary.coincidences_hz / summary.singles_herald_hz
    n_cc, n_h = summary.coincidence_count, summary.singles_herald_count
    if n_cc > 0 and n_h > 0:
        err = ratio * math.sqrt(1.0 / n_cc + 1.0 / n_h)
    else:
        err = float("nan")
    return ratio, err


__all__ = [
    "CoincidenceConfig", "CountsSummary", "DelayScan", "PeakFit", "PS_PER_S",
    "count_coincidences", "delay_grid", "delay_scan", "fit_delay_peak",
    "heralding_ratio", "merge_pulses",
]
