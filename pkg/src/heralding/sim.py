"""Monte Carlo generation of detection-event streams for a photon-pair source.

Times are integer picoseconds (int64), rates are Hz.  The detection pipeline
for one arm is always::

    pairs -> thin_and_jitter -> merge_background -> apply_dead_time

with dead-time last, since it stands in for the discriminator.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, TextIO

import numba
import numpy as np

PS_PER_S = 1_000_000_000_000
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

# Expected number of generated events above which a model is considered misconfigured.
DEFAULT_EVENT_BUDGET = 200_000_000

# Fixed substream keys; one independent generator per random ingredient.
_KEY_PAIRS = 0
_KEY_THIN = {1: 1, 2: 2}
_KEY_JITTER = {1: 3, 2: 4}
_KEY_BACKGROUND = {1: 5, 2: 6}


class Channel(IntEnum):
    SIGNAL = 1
    HERALD = 2

    @classmethod
    def parse(cls, value) -> "Channel":
        if isinstance(value, str) and not value.isdigit():
            return cls[value.upper()]
        return cls(int(value))


@dataclass(frozen=True)
class SourceModel:
    """Ground truth for a simulated pair source and its two detectors."""

    pair_rate_hz: float
    eta_signal: float
    eta_herald: float
    duration_ps: int
    deadtime_signal_ps: int = 0
    deadtime_herald_ps: int = 0
    jitter_fwhm_signal_ps: int = 0
    jitter_fwhm_herald_ps: int = 0
    background_rate_signal_hz: float = 0.0
    background_rate_herald_hz: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("pair_rate_hz", "background_rate_signal_hz", "background_rate_herald_hz"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v!r}")
        for name in ("eta_signal", "eta_herald"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v!r}")
        for name in ("deadtime_signal_ps", "deadtime_herald_ps",
                     "jitter_fwhm_signal_ps", "jitter_fwhm_herald_ps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.duration_ps <= 0:
            raise ValueError(f"duration_ps must be > 0, got {self.duration_ps}")
        if not -(2**63) <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must fit in 64 bits")

    @property
    def duration_s(self) -> float:
        return self.duration_ps / PS_PER_S

    def eta(self, arm: Channel) -> float:
        return self.eta_signal if arm == Channel.SIGNAL else self.eta_herald

    def deadtime_ps(self, arm: Channel) -> int:
        return self.deadtime_signal_ps if arm == Channel.SIGNAL else self.deadtime_herald_ps

    def jitter_fwhm_ps(self, arm: Channel) -> int:
        return self.jitter_fwhm_signal_ps if arm == Channel.SIGNAL else self.jitter_fwhm_herald_ps

    def background_rate_hz(self, arm: Channel) -> float:
        return (self.background_rate_signal_hz if arm == Channel.SIGNAL
                else self.background_rate_herald_hz)

    def with_seed(self, seed: int) -> "SourceModel":
        d = asdict(self)
        d["rng_seed"] = seed
        return SourceModel(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EventStream:
    channel: Channel
    timestamps_ps: np.ndarray = field(repr=False)
    duration_ps: int

    def __post_init__(self):
        ts = np.ascontiguousarray(self.timestamps_ps, dtype=np.int64)
        object.__setattr__(self, "timestamps_ps", ts)
        object.__setattr__(self, "channel", Channel(self.channel))
        if ts.size:
            if ts[0] < 0 or ts[-1] >= self.duration_ps:
                raise ValueError("timestamps must lie in [0, duration_ps)")
            if np.any(np.diff(ts) <= 0):
                raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return int(self.timestamps_ps.size)

    @property
    def duration_s(self) -> float:
        return self.duration_ps / PS_PER_S

    @property
    def rate_hz(self) -> float:
        return len(self) / self.duration_s

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.channel == other.channel and self.duration_ps == other.duration_ps
                and np.array_equal(self.timestamps_ps, other.timestamps_ps))

    __hash__ = None


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 generator addressed by ``seed`` and a key path.

    Per-trial streams are ``substream(seed, trial, ...)``; the derivation is
    counter based so trials can run in any order or in parallel.
    """
    ss = np.random.SeedSequence(seed % 2**64, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


def make_strictly_increasing(t: np.ndarray) -> np.ndarray:
    """Resolve ties in a sorted array by pushing later duplicates +1 ps."""
    if t.size < 2:
        return t
    idx = np.arange(t.size, dtype=np.int64)
    return np.maximum.accumulate(t - idx) + idx


def _poisson_times(rng: np.random.Generator, rate_hz: float, duration_ps: int,
                   budget: int) -> np.ndarray:
    mean = rate_hz * duration_ps / PS_PER_S
    if mean > budget:
        raise ValueError(
            f"expected {mean:.3g} events exceeds the event budget of {budget}; "
            "reduce rate or duration")
    n = rng.poisson(mean) if mean > 0 else 0
    t = rng.integers(0, duration_ps, size=n, dtype=np.int64)
    t.sort()
    return t


def generate_pairs(model: SourceModel, budget: int = DEFAULT_EVENT_BUDGET) -> np.ndarray:
    """Pair creation times: homogeneous Poisson process at ``model.pair_rate_hz``."""
    rng = substream(model.rng_seed, _KEY_PAIRS)
    return _poisson_times(rng, model.pair_rate_hz, model.duration_ps, budget)


def thin_and_jitter(pairs: np.ndarray, arm: Channel, model: SourceModel) -> EventStream:
    arm = Channel(arm)
    pairs = np.asarray(pairs, dtype=np.int64)
    keep = substream(model.rng_seed, _KEY_THIN[arm]).random(pairs.size) < model.eta(arm)
    t = pairs[keep]
    fwhm = model.jitter_fwhm_ps(arm)
    if fwhm > 0 and t.size:
        sigma = fwhm / FWHM_PER_SIGMA
        noise = substream(model.rng_seed, _KEY_JITTER[arm]).normal(0.0, sigma, t.size)
        t = t + np.rint(noise).astype(np.int64)
        t = t[(t >= 0) & (t < model.duration_ps)]
        t.sort(kind="stable")
    t = make_strictly_increasing(t)
    t = t[t < model.duration_ps]
    return EventStream(arm, t, model.duration_ps)


def merge_background(stream: EventStream, rate_hz: float, model: SourceModel,
                     budget: int = DEFAULT_EVENT_BUDGET) -> EventStream:
    """Add an independent Poisson background at ``rate_hz`` to ``stream``."""
    if rate_hz <= 0:
        return stream
    rng = substream(model.rng_seed, _KEY_BACKGROUND[stream.channel])
    bg = _poisson_times(rng, rate_hz, stream.duration_ps, budget)
    t = np.concatenate([stream.timestamps_ps, bg])
    t.sort(kind="stable")
    t = make_strictly_increasing(t)
    t = t[t < stream.duration_ps]
    return EventStream(stream.channel, t, stream.duration_ps)


@numba.njit(cache=True)
def _nonparalyzable_mask(t, deadtime):
    keep = np.zeros(t.size, dtype=np.bool_)
    if t.size == 0:
        return keep
    keep[0] = True
    last = t[0]
    for i in range(1, t.size):
        if t[i] - last >= deadtime:
            keep[i] = True
            last = t[i]
    return keep


def apply_dead_time(stream: EventStream, deadtime_ps: int) -> EventStream:
    """Non-paralyzable dead-time: drop events closer than ``deadtime_ps`` to the last kept one."""
    if deadtime_ps <= 0 or len(stream) < 2:
        return stream
    keep = _nonparalyzable_mask(stream.timestamps_ps, np.int64(deadtime_ps))
    return EventStream(stream.channel, stream.timestamps_ps[keep], stream.duration_ps)


def detect_arm(pairs: np.ndarray, arm: Channel, model: SourceModel) -> EventStream:
    s = thin_and_jitter(pairs, arm, model)
    s = merge_background(s, model.background_rate_hz(arm), model)
    return apply_dead_time(s, model.deadtime_ps(arm))


def simulate(model: SourceModel) -> tuple[EventStream, EventStream]:
    """Run the full detection pipeline; returns ``(signal, herald)`` streams."""
    pairs = generate_pairs(model)
    return detect_arm(pairs, Channel.SIGNAL, model), detect_arm(pairs, Channel.HERALD, model)


# --- timestamp CSV -----------------------------------------------------------

CSV_HEADER = "channel,time_ps"


def format_streams_csv(streams: Iterable[EventStream]) -> str:
    parts = [CSV_HEADER]
    for s in streams:
        if len(s):
            prefix = f"{int(s.channel)},"
            parts.append("\n".join(prefix + v for v in s.timestamps_ps.astype(str)))
    return "\n".join(parts) + "\n"


def _parse_rows(body: str) -> dict[Channel, list[int]]:
    cols: dict[Channel, list[int]] = {Channel.SIGNAL: [], Channel.HERALD: []}
    for lineno, row in enumerate(csv.reader(io.StringIO(body)), start=2):
        if not row:
            continue
        try:
            cols[Channel.parse(row[0].strip())].append(int(row[1]))
        except (ValueError, KeyError, IndexError) as exc:
            raise ValueError(f"line {lineno}: malformed row {row!r}") from exc
    return cols


def parse_streams_csv(fh: TextIO, duration_ps: int | None = None) -> dict[Channel, EventStream]:
    """Read a ``channel,time_ps`` CSV into one stream per channel.

    Without ``duration_ps`` the duration is taken as last timestamp + 1.
    """
    header = fh.readline()
    if ",".join(h.strip() for h in header.split(",")) != CSV_HEADER:
        raise ValueError(f"expected CSV header {CSV_HEADER!r}, got {header.strip()!r}")
    body = fh.read()
    try:
        # fast path for numeric channels; anything unusual goes through csv below
        if not body.strip():
            raise ValueError
        data = np.loadtxt(io.StringIO(body), delimiter=",", dtype=np.int64, ndmin=2)
        if data.shape[1] != 2 or not np.isin(data[:, 0], (1, 2)).all():
            raise ValueError
        cols = {ch: data[data[:, 0] == ch, 1] for ch in Channel}
    except ValueError:
        cols = _parse_rows(body)
    arrays = {ch: np.asarray(v, dtype=np.int64) for ch, v in cols.items()}
    if duration_ps is None:
        last = max((int(a[-1]) for a in arrays.values() if a.size), default=0)
        duration_ps = last + 1
    return {ch: EventStream(ch, a, duration_ps) for ch, a in arrays.items()}


def sidecar_path(csv_path: Path) -> Path:
    return Path(str(csv_path) + ".meta.json")


def read_streams(path: str | Path, duration_ps: int | None = None) -> dict[Channel, EventStream]:
    path = Path(path)
    meta = sidecar_path(path)
    if duration_ps is None and meta.exists():
        duration_ps = int(json.loads(meta.read_text())["duration_ps"])
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_streams_csv(fh, duration_ps)


def read_streams_text(text: str, duration_ps: int | None = None) -> dict[Channel, EventStream]:
    return parse_streams_csv(io.StringIO(text), duration_ps)
