"""TES-like analog traces and leading-edge discrimination.

A photon pulse is ``(1 - exp(-t/rise)) * exp(-t/decay)`` scaled so its peak
equals ``amplitude``.  An optional ringing "wiggle" on the recovering edge is a
damped sine starting ``wiggle_delay_ps`` after the photon, with period equal
to the decay time and 1/e damping after half a decay time.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba
import numpy as np

from .sim import Channel, EventStream, substream

POLARITIES = ("positive", "negative")


@dataclass(frozen=True)
class PulseShape:
    amplitude: float
    rise_time_ps: int
    decay_time_ps: int
    wiggle_amplitude: float = 0.0
    wiggle_delay_ps: int = 0

    def __post_init__(self):
        if self.amplitude <= 0:
            raise ValueError("amplitude must be > 0")
        if not 0 < self.rise_time_ps < self.decay_time_ps:
            raise ValueError("need 0 < rise_time_ps < decay_time_ps")
        if self.wiggle_amplitude < 0 or self.wiggle_delay_ps < 0:
            raise ValueError("wiggle parameters must be >= 0")

    @property
    def peak_time_ps(self) -> float:
        r, d = self.rise_time_ps, self.decay_time_ps
        return r * math.log((r + d) / r)

    @property
    def _norm(self) -> float:
        r, d = self.rise_time_ps, self.decay_time_ps
        return d / (r + d) * (r / (r + d)) ** (r / d)

    def kernel(self, t_ps: np.ndarray) -> np.ndarray:
        """Pulse value at times ``t_ps`` after the photon (zero for t < 0)."""
        t = np.asarray(t_ps, dtype=float)
        tp = np.clip(t, 0.0, None)
        y = (-np.expm1(-tp / self.rise_time_ps)) * np.exp(-tp / self.decay_time_ps)
        y *= self.amplitude / self._norm
        if self.wiggle_amplitude > 0:
            u = np.clip(t - self.wiggle_delay_ps, 0.0, None)
            d = self.decay_time_ps
            y += np.where(t >= self.wiggle_delay_ps,
                          self.wiggle_amplitude * np.exp(-2.0 * u / d)
                          * np.sin(2.0 * np.pi * u / d), 0.0)
        return np.where(t >= 0, y, 0.0)

    @property
    def support_ps(self) -> float:
        """Time after which the pulse is below 1e-9 of its amplitude."""
        return max(25.0 * self.decay_time_ps, self.wiggle_delay_ps + 12.0 * self.decay_time_ps)


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray = field(repr=False)
    sample_period_ps: int
    t0_ps: int = 0
    polarity: str = "positive"

    def __post_init__(self):
        x = np.ascontiguousarray(self.samples, dtype=np.float32)
        object.__setattr__(self, "samples", x)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if self.sample_period_ps <= 0:
            raise ValueError("sample_period_ps must be > 0")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def times_ps(self) -> np.ndarray:
        return self.t0_ps + np.arange(self.samples.size, dtype=np.int64) * self.sample_period_ps

    @property
    def end_ps(self) -> int:
        return self.t0_ps + self.samples.size * self.sample_period_ps

    def oriented(self) -> np.ndarray:
        """Samples with photon pulses pointing upward."""
        return self.samples if self.polarity == "positive" else -self.samples

    def __eq__(self, other) -> bool:
        if not isinstance(other, Waveform):
            return NotImplemented
        return (self.sample_period_ps == other.sample_period_ps and self.t0_ps == other.t0_ps
                and self.polarity == other.polarity
                and np.array_equal(self.samples.view(np.uint32), other.samples.view(np.uint32)))

    __hash__ = None


@dataclass(frozen=True)
class DiscriminatorConfig:
    threshold: float
    rearm_dead_ps: int = 0
    polarity: str = "positive"

    def __post_init__(self):
        if self.rearm_dead_ps < 0:
            raise ValueError("rearm_dead_ps must be >= 0")
        if self.polarity not in POLARITIES:
            raise ValueError(f"polarity must be one of {POLARITIES}")


def synthesize(events, shape: PulseShape | Sequence[PulseShape], noise_rms: float,
               duration_ps: int, sample_period_ps: int, seed: int = 0,
               polarity: str = "positive", t0_ps: int = 0) -> Waveform:
    """Superpose one pulse per event time, then add white Gaussian noise.

    ``shape`` is either shared by all events or given per event.
    """
    events = np.asarray(events, dtype=np.int64)
    if np.any(np.diff(events) < 0):
        raise ValueError("events must be sorted")
    shapes = [shape] * events.size if isinstance(shape, PulseShape) else list(shape)
    if len(shapes) != events.size:
        raise ValueError("need one shape per event")
    n = int(math.ceil(duration_ps / sample_period_ps))
    if n <= 0:
        raise ValueError("duration must cover at least one sample")
    t = t0_ps + np.arange(n, dtype=np.int64) * sample_period_ps
    y = np.zeros(n)
    for te, sh in zip(events, shapes):
        lo = max(0, int(math.ceil((te - t0_ps) / sample_period_ps)))
        hi = min(n, int(math.ceil((te + sh.support_ps - t0_ps) / sample_period_ps)))
        if hi > lo:
            y[lo:hi] += sh.kernel(t[lo:hi] - te)
    if noise_rms > 0:
        y += substream(seed, 0).normal(0.0, noise_rms, n)
    if polarity == "negative":
        y = -y
    return Waveform(y, sample_period_ps, t0_ps, polarity)


@numba.njit(cache=True)
def _rearm_filter(times, dead, last, has_last):
    keep = np.zeros(times.size, dtype=np.bool_)
    for i in range(times.size):
        if not has_last or times[i] - last >= dead:
            keep[i] = True
            last = times[i]
            has_last = True
    return keep, last, has_last


class LeadingEdgeDiscriminator:
    """Stateful discriminator that accepts a waveform in consecutive chunks.

    The previous sample and the time of the last emitted event carry over
    between chunks, so any chunking gives the same events as a single pass.
    """

    def __init__(self, cfg: DiscriminatorConfig, sample_period_ps: int, t0_ps: int = 0):
        self.cfg = cfg
        self.period = sample_period_ps
        self.t0 = t0_ps
        self._n_seen = 0
        self._prev = None
        self._last = np.int64(0)
        self._has_last = False
        self._sign = 1.0 if cfg.polarity == "positive" else -1.0

    def crossings(self, samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Upward crossing times (ps) in the next chunk and their sample indices."""
        x = self._sign * np.asarray(samples, dtype=np.float64)
        start = self._n_seen
        if self._prev is not None:
            x = np.concatenate([[self._prev], x])
            base = start - 1
        else:
            base = start
        thr = self.cfg.threshold
        k = np.flatnonzero((x[:-1] < thr) & (x[1:] >= thr))
        frac = (thr - x[k]) / (x[k + 1] - x[k])
        t = self.t0 + (base + k + frac) * self.period
        if x.size:
            self._prev = x[-1]
        self._n_seen = start + len(samples)
        return np.rint(t).astype(np.int64), base + k + 1

    def feed(self, samples: np.ndarray) -> np.ndarray:
        t, _ = self.crossings(samples)
        keep, self._last, self._has_last = _rearm_filter(
            t, np.int64(self.cfg.rearm_dead_ps), self._last, self._has_last)
        return t[keep]


def discriminate(w: Waveform, cfg: DiscriminatorConfig,
                 channel: Channel = Channel.SIGNAL, chunk_samples: int | None = None) -> EventStream:
    """Leading-edge discrimination with a re-arm dead-time after every event."""
    if w.t0_ps < 0:
        raise ValueError("waveform must start at t >= 0 to produce an event stream")
    disc = LeadingEdgeDiscriminator(cfg, w.sample_period_ps, w.t0_ps)
    step = chunk_samples or len(w)
    parts = [disc.feed(w.samples[i:i + step]) for i in range(0, len(w), step)]
    t = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    return EventStream(channel, t, w.end_ps)


@dataclass(frozen=True)
class PulseHeightHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    heights: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"bin_edges": self.bin_edges.tolist(), "counts": self.counts.tolist()}


def pulse_heights(w: Waveform, cfg: DiscriminatorConfig) -> np.ndarray:
    """Maximum of the trace from each armed crossing up to the next one."""
    disc = LeadingEdgeDiscriminator(cfg, w.sample_period_ps, w.t0_ps)
    t, idx = disc.crossings(w.samples)
    keep, _, _ = _rearm_filter(t, np.int64(cfg.rearm_dead_ps), np.int64(0), False)
    starts = idx[keep]
    if starts.size == 0:
        return np.empty(0)
    x = (1.0 if cfg.polarity == "positive" else -1.0) * w.samples.astype(np.float64)
    return np.maximum.reduceat(x, starts)


def pulse_height_histogram(w: Waveform, cfg: DiscriminatorConfig, bins=50,
                           range: tuple[float, float] | None = None) -> PulseHeightHistogram:
    heights = pulse_heights(w, cfg)
    counts, edges = np.histogram(heights, bins=bins, range=range)
    return PulseHeightHistogram(edges, counts, heights)


def valley_depth(counts: np.ndarray) -> float:
    """Ratio of the lowest bin between the two tallest local maxima to the lower maximum.

    Near 0 for well separated modes, 1 when there is no valley.  NaN with fewer
    than two local maxima.
    """
    c = np.asarray(counts, dtype=float)
    padded = np.r_[-np.inf, c, -np.inf]
    peaks = np.flatnonzero((c > padded[:-2]) & (c >= padded[2:]) & (c > 0))
    if peaks.size < 2:
        return float("nan")
    top = np.sort(peaks[np.argsort(c[peaks])[-2:]])
    valley = c[top[0]:top[1] + 1].min()
    return float(valley / min(c[top[0]], c[top[1]]))


# --- waveform file format: raw <f4 samples + JSON sidecar ------------------------

def _sidecar(path: Path) -> Path:
    return Path(str(path) + ".json")


def write_waveform(path: str | Path, w: Waveform) -> None:
    from ._io import atomic_write_bytes, atomic_write_text
    path = Path(path)
    atomic_write_bytes(path, w.samples.astype("<f4").tobytes())
    header = {"sample_period_ps": w.sample_period_ps, "t0_ps": w.t0_ps,
              "polarity": w.polarity, "n_samples": len(w), "dtype": "<f4"}
    atomic_write_text(_sidecar(path), json.dumps(header, indent=2) + "\n")


def read_waveform(path: str | Path) -> Waveform:
    path = Path(path)
    header = json.loads(_sidecar(path).read_text())
    x = np.fromfile(path, dtype="<f4")
    if "n_samples" in header and x.size != header["n_samples"]:
        raise ValueError(f"{path}: expected {header['n_samples']} samples, found {x.size}")
    return Waveform(x, int(header["sample_period_ps"]), int(header.get("t0_ps", 0)),
                    header.get("polarity", "positive"))


# --- four-photon demonstration trace ------------------------------------------

DEMO_THRESHOLDS = {
    # above the smallest pulse: misses one photon
    "high": DiscriminatorConfig(0.7, 4_000_000),
    # below the ringing on the recovering edge, re-armed before it: one extra count
    "mid": DiscriminatorConfig(0.4, 1_300_000),
    # low threshold, dead-time spanning the whole recovery: the true four
    "low": DiscriminatorConfig(0.15, 4_000_000),
}


def four_photon_demo(seed: int = 0, noise_rms: float = 0.01) -> tuple[Waveform, np.ndarray]:
    """Trace with four photons: two clean, one small, one ringing on its recovery.

    Returns the waveform (1 ns sampling, 26 us long) and the true photon times.
    Discriminated with ``DEMO_THRESHOLDS`` it yields 3, 5 and 4 events.
    """
    clean = PulseShape(1.0, 50_000, 1_000_000)
    ringing = PulseShape(1.0, 50_000, 1_000_000, wiggle_amplitude=0.6, wiggle_delay_ps=1_500_000)
    small = PulseShape(0.55, 50_000, 1_000_000)
    events = np.array([1_000_000, 7_000_000, 13_000_000, 19_000_000], dtype=np.int64)
    w = synthesize(events, [clean, ringing, small, clean], noise_rms, 26_000_000, 1_000,
                   seed=seed)
    return w, events
