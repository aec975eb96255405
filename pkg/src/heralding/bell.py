"""CHSH statistics for a visibility-damped maximally entangled polarization state."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sim import substream

CANONICAL_ANGLES = (0.0, math.pi / 4, math.pi / 8, 3 * math.pi / 8)
TSIRELSON = 2 * math.sqrt(2)

# (setting a index, setting b index, sign in S); a in {a, a'}, b in {b, b'}
_TERMS = ((0, 0, +1), (0, 1, -1), (1, 0, +1), (1, 1, +1))
_OUTCOMES = np.array([[1, -1], [-1, 1]])  # x*y for x, y in (+1, -1)


@dataclass(frozen=True)
class EntangledModel:
    visibility: float
    angles: tuple[float, float, float, float] = CANONICAL_ANGLES
    heralding_eta: float = 1.0
    analyzer_transmission: float = 0.85

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        if len(self.angles) != 4 or not all(math.isfinite(a) for a in self.angles):
            raise ValueError("need four finite analyzer angles (a, a', b, b')")
        for name in ("visibility", "heralding_eta", "analyzer_transmission"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def settings(self) -> list[tuple[float, float]]:
        a, a2, b, b2 = self.angles
        return [((a, a2)[i], (b, b2)[j]) for i, j, _ in _TERMS]


def correlation(a: float, b: float, m: EntangledModel) -> float:
    return m.visibility * math.cos(2.0 * (a - b))


def outcome_probabilities(a: float, b: float, m: EntangledModel) -> np.ndarray:
    """2x2 joint probabilities for outcomes (+1, -1) x (+1, -1)."""
    return (1.0 + _OUTCOMES * correlation(a, b, m)) / 4.0


def chsh_S(m: EntangledModel) -> float:
    return sum(sign * correlation(a, b, m)
               for (a, b), (_, _, sign) in zip(m.settings, _TERMS))


def expected_counts(m: EntangledModel, pair_rate: float,
                    integration_s_per_setting: float) -> np.ndarray:
    """Mean coincidences, shape (4 settings, 2, 2), each outcome cell counted separately.

    ``pair_rate`` is the rate of heralding clicks; a click becomes a recorded
    coincidence with probability ``heralding_eta * analyzer_transmission**2``.
    """
    scale = pair_rate * m.heralding_eta * m.analyzer_transmission**2 * integration_s_per_setting
    return np.stack([scale * outcome_probabilities(a, b, m) for a, b in m.settings])


@dataclass(frozen=True)
class ChshResult:
    S: float
    sigma_S: float
    correlations: tuple[float, ...]
    counts: np.ndarray = field(repr=False)
    flagged: bool = False

    def to_dict(self) -> dict:
        return {"S": self.S, "sigma_S": self.sigma_S,
                "correlations": list(self.correlations),
                "counts": np.asarray(self.counts).tolist(), "flagged": self.flagged}


def chsh_from_counts(counts: np.ndarray) -> ChshResult:
    """S and its Poisson error from per-setting outcome counts of shape (4, 2, 2).

    A setting with an empty outcome cell flags the result and leaves the error
    undefined (NaN); a setting with no counts at all also leaves S undefined.
    """
    counts = np.asarray(counts, dtype=float)
    same = counts[:, 0, 0] + counts[:, 1, 1]
    diff = counts[:, 0, 1] + counts[:, 1, 0]
    tot = same + diff
    flagged = bool(np.any(counts == 0))
    with np.errstate(invalid="ignore", divide="ignore"):
        E = (same - diff) / tot
        var = 4.0 * same * diff / tot**3
    signs = np.array([s for _, _, s in _TERMS])
    S = float(np.dot(signs, E)) if np.all(tot > 0) else float("nan")
    sigma = float("nan") if flagged else float(math.sqrt(var.sum()))
    return ChshResult(S, sigma, tuple(float(e) for e in E), counts, flagged)


def simulate_chsh(m: EntangledModel, pair_rate: float, integration_s_per_setting: float,
                  seed: int = 0) -> ChshResult:
    """Poisson-sampled counts for all 16 setting/outcome cells, then S with its error."""
    lam = expected_counts(m, pair_rate, integration_s_per_setting)
    counts = substream(seed, 0).poisson(lam)
    return chsh_from_counts(counts)


def max_S_over_angles(m: EntangledModel, n: int = 24) -> float:
    """Largest |S| over an n^4 grid of analyzer angles in [0, pi)."""
    grid = np.linspace(0.0, math.pi, n, endpoint=False)
    a, a2, b, b2 = np.meshgrid(grid, grid, grid, grid, indexing="ij", sparse=True)
    V = m.visibility
    S = V * (np.cos(2 * (a - b)) - np.cos(2 * (a - b2)) + np.cos(2 * (a2 - b))
             + np.cos(2 * (a2 - b2)))
    return float(np.abs(S).max())
