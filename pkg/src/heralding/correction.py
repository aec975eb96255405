"""Accidental-coincidence and dead-time correction for heralding measurements.

Forward model (rates in Hz, times in ps on the public surface)::

    S1 = R0 eta1 (1 - S1 tau_d1)
    S2 = R0 eta2 (1 - S2 tau_d2)
    CC = CC0 + R10 + R01 + R11
       = R0 eta1 eta2 (1 + tau_w R0 (1-eta1)(1-eta2) - tau_sat R0 eta1 eta2)

where ``tau_sat`` is the longer pulse length, or a detector dead-time if that
is longer still.  The inverse recovers ``(R0, eta1, eta2)`` from measured
``(S1, S2, CC)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .coincidence import CountsSummary

PS = 1e-12

# R0 * eta * tau_d at or above this is outside the first-order saturation model.
SINGLES_SATURATION_CAP = 0.5
# R0 * tau_w at or above this is outside the first-order accidental model.
WINDOW_OCCUPANCY_CAP = 0.5


class SolverError(RuntimeError):
    pass


class ConvergenceError(SolverError):
    pass


class ModelViolationError(SolverError):
    """The solution exists but leaves the physical range (e.g. background-dominated data)."""


@dataclass(frozen=True)
class WindowParams:
    tau_w_ps: int
    tau_max_ps: int
    tau_d_signal_ps: int = 0
    tau_d_herald_ps: int = 0

    def __post_init__(self):
        if self.tau_w_ps < 0 or self.tau_max_ps < 0:
            raise ValueError("window lengths must be >= 0")
        if self.tau_max_ps > self.tau_w_ps:
            raise ValueError("tau_max_ps cannot exceed tau_w_ps")
        if self.tau_d_signal_ps < 0 or self.tau_d_herald_ps < 0:
            raise ValueError("dead-times must be >= 0")

    @classmethod
    def from_pulses(cls, pulse_len_signal_ps: int, pulse_len_herald_ps: int,
                    tau_d_signal_ps: int | None = None,
                    tau_d_herald_ps: int | None = None) -> "WindowParams":
        """Window for a pulse-overlap counter; dead-times default to the TTL lengths."""
        return cls(pulse_len_signal_ps + pulse_len_herald_ps,
                   max(pulse_len_signal_ps, pulse_len_herald_ps),
                   pulse_len_signal_ps if tau_d_signal_ps is None else tau_d_signal_ps,
                   pulse_len_herald_ps if tau_d_herald_ps is None else tau_d_herald_ps)

    @property
    def tau_saturation_ps(self) -> int:
        return max(self.tau_max_ps, self.tau_d_signal_ps, self.tau_d_herald_ps)

    def to_dict(self) -> dict:
        return asdict(self)


class AccidentalTerms(NamedTuple):
    r10: float
    r01: float
    r11: float


class Uncertainty(NamedTuple):
    sigma_pair_rate: float
    sigma_eta_signal: float
    sigma_eta_herald: float


@dataclass(frozen=True)
class CorrectedEstimate:
    pair_rate_hz: float
    eta_signal: float
    eta_herald: float
    sigma_pair_rate: float = 0.0
    sigma_eta_signal: float = 0.0
    sigma_eta_herald: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def forward_singles(R0: float, eta: float, tau_d_ps: float) -> float:
    """Dead-time limited singles rate, ``R0 eta / (1 + R0 eta tau_d)``."""
    A = R0 * eta
    x = A * tau_d_ps * PS
    if x >= SINGLES_SATURATION_CAP:
        raise ValueError(f"R0*eta*tau_d = {x:.3g} is outside the saturation model "
                         f"(cap {SINGLES_SATURATION_CAP})")
    return A / (1.0 + x)


def _check_cc_params(R0, eta1, eta2, w: WindowParams):
    if R0 < 0 or not (0 <= eta1 <= 1 and 0 <= eta2 <= 1):
        raise ValueError("need R0 >= 0 and efficiencies in [0, 1]")
    if R0 * w.tau_w_ps * PS >= WINDOW_OCCUPANCY_CAP:
        raise ValueError(f"R0*tau_w = {R0 * w.tau_w_ps * PS:.3g} is outside the "
                         f"accidental model (cap {WINDOW_OCCUPANCY_CAP})")


def accidental_rate(R0: float, eta1: float, eta2: float, w: WindowParams) -> AccidentalTerms:
    """Rate corrections from pairs of independent pairs.

    ``r10``/``r01``: two partially detected pairs combine into an extra
    coincidence (first click in arm 1 / arm 2).  ``r11`` (negative): a fully
    detected pair inside the saturation time of another is lost.
    """
    _check_cc_params(R0, eta1, eta2, w)
    tw = w.tau_w_ps * PS
    ts = w.tau_saturation_ps * PS
    r10 = 0.5 * R0**2 * tw * eta1 * (1 - eta2) * eta2 * (1 - eta1)
    r01 = 0.5 * R0**2 * tw * eta2 * (1 - eta1) * eta1 * (1 - eta2)
    r11 = -ts * R0**2 * eta1**2 * eta2**2
    return AccidentalTerms(r10, r01, r11)


def forward_cc(R0: float, eta1: float, eta2: float, w: WindowParams) -> float:
    terms = accidental_rate(R0, eta1, eta2, w)
    return R0 * eta1 * eta2 + terms.r10 + terms.r01 + terms.r11


def forward_rates(R0: float, eta1: float, eta2: float, w: WindowParams) -> tuple[float, float, float]:
    """``(S1, S2, CC)`` predicted for a source."""
    return (forward_singles(R0, eta1, w.tau_d_signal_ps),
            forward_singles(R0, eta2, w.tau_d_herald_ps),
            forward_cc(R0, eta1, eta2, w))


# --- inverse -----------------------------------------------------------------

def _residual_and_jacobian(x, S1, S2, CC, d1, d2, tw, ts):
    R, e1, e2 = x[:, 0], x[:, 1], x[:, 2]
    k1 = 1.0 - S1 * d1
    k2 = 1.0 - S2 * d2
    g = (1 - e1) * (1 - e2)
    cc = R * e1 * e2 * (1 + tw * R * g - ts * R * e1 * e2)
    f = np.stack([R * e1 * k1 / S1 - 1.0,
                  R * e2 * k2 / S2 - 1.0,
                  cc / CC - 1.0], axis=1)
    J = np.zeros(x.shape + (3,))
    J[:, 0, 0] = e1 * k1 / S1
    J[:, 0, 1] = R * k1 / S1
    J[:, 1, 0] = e2 * k2 / S2
    J[:, 1, 2] = R * k2 / S2
    J[:, 2, 0] = (e1 * e2 + 2 * tw * R * e1 * e2 * g - 2 * ts * R * (e1 * e2) ** 2) / CC
    J[:, 2, 1] = (R * e2 + tw * R**2 * e2 * (1 - e2) * (1 - 2 * e1)
                  - 2 * ts * R**2 * e1 * e2**2) / CC
    J[:, 2, 2] = (R * e1 + tw * R**2 * e1 * (1 - e1) * (1 - 2 * e2)
                  - 2 * ts * R**2 * e2 * e1**2) / CC
    return f, J


def _newton(S1, S2, CC, w: WindowParams, max_iter: int = 60, tol: float = 1e-12):
    """Damped Newton on arrays of measurements; returns ``(x, residual_norm)``.

    Starts from the uncorrected ratios ``R0 = S1 S2 / CC``, ``eta1 = CC / S2``,
    ``eta2 = CC / S1``.  Rows that do not converge come back with their last
    iterate and a residual above ``tol``.
    """
    S1, S2, CC = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (S1, S2, CC))
    d1, d2 = w.tau_d_signal_ps * PS, w.tau_d_herald_ps * PS
    tw, ts = w.tau_w_ps * PS, w.tau_saturation_ps * PS
    args = (S1, S2, CC, d1, d2, tw, ts)
    x = np.stack([S1 * S2 / CC, CC / S2, CC / S1], axis=1)
    f, J = _residual_and_jacobian(x, *args)
    norm = np.max(np.abs(f), axis=1)
    active = norm > 1e-15
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        try:
            step = np.linalg.solve(J[idx], -f[idx][..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        lam = np.ones(idx.size)
        improved = np.zeros(idx.size, dtype=bool)
        x_new = x[idx].copy()
        for _ in range(40):
            todo = ~improved
            if not todo.any():
                break
            trial = x[idx][todo] + lam[todo, None] * step[todo]
            ok = np.all(trial > 0, axis=1)
            ft, _ = _residual_and_jacobian(trial, *(a[idx][todo] if np.ndim(a) else a
                                                    for a in args))
            better = ok & (np.max(np.abs(ft), axis=1) < norm[idx][todo])
            sub = np.flatnonzero(todo)
            x_new[sub[better]] = trial[better]
            improved[sub[better]] = True
            lam[sub[~better]] *= 0.5
        moved = idx[improved]
        x[moved] = x_new[improved]
        f_m, J_m = _residual_and_jacobian(x[moved], *(a[moved] if np.ndim(a) else a
                                                      for a in args))
        f[moved], J[moved] = f_m, J_m
        norm[moved] = np.max(np.abs(f_m), axis=1)
        # rows that could not improve are as converged as floating point allows
        active[idx[~improved]] = False
        active[moved] = norm[moved] > 1e-15
    return x, norm


def _validate_measured(S1, S2, CC):
    if not (S1 > 0 and S2 > 0 and CC > 0):
        raise ValueError("all measured rates must be > 0")
    if CC > min(S1, S2):
        raise ValueError(f"coincidence rate {CC} exceeds a singles rate "
                         f"(S1={S1}, S2={S2})")


def _solve_central(S1: float, S2: float, CC: float, w: WindowParams,
                   max_iter: int = 60, tol: float = 1e-12) -> tuple[float, float, float]:
    _validate_measured(S1, S2, CC)
    for tau, S in ((w.tau_d_signal_ps, S1), (w.tau_d_herald_ps, S2)):
        if S * tau * PS >= SINGLES_SATURATION_CAP:
            raise ValueError("singles rate too high for the dead-time model")
    x, norm = _newton(S1, S2, CC, w, max_iter=max_iter, tol=tol)
    if not norm[0] < tol:
        raise ConvergenceError(f"Newton iteration stalled at residual {norm[0]:.3g}; "
                               "measured rates are inconsistent with the model")
    R0, e1, e2 = (float(v) for v in x[0])
    if not (0 < e1 <= 1 and 0 < e2 <= 1):
        raise ModelViolationError(f"solved efficiencies ({e1:.4g}, {e2:.4g}) leave (0, 1]")
    if R0 * w.tau_w_ps * PS >= WINDOW_OCCUPANCY_CAP:
        raise ModelViolationError(f"solved R0*tau_w = {R0 * w.tau_w_ps * PS:.3g} exceeds "
                                  f"{WINDOW_OCCUPANCY_CAP}")
    return R0, e1, e2


def solve_closed_form(S1: float, S2: float, CC: float, w: WindowParams) -> tuple[float, float, float]:
    """Direct solution through the quadratic in R0 left after eliminating the singles.

    With ``a = R0 eta1`` and ``b = R0 eta2`` fixed by the singles equations,
    the coincidence equation becomes
    ``(CC - tau_w a b) R0^2 - a b (1 - tau_w (a + b)) R0 + a^2 b^2 (tau_sat - tau_w) = 0``.
    Used as an independent check on the Newton path.
    """
    _validate_measured(S1, S2, CC)
    a = S1 / (1 - S1 * w.tau_d_signal_ps * PS)
    b = S2 / (1 - S2 * w.tau_d_herald_ps * PS)
    tw, ts = w.tau_w_ps * PS, w.tau_saturation_ps * PS
    A = CC - tw * a * b
    B = -a * b * (1 - tw * (a + b))
    C = a * a * b * b * (ts - tw)
    if A <= 0:
        raise ModelViolationError("coincidence rate at or below the accidental level")
    disc = B * B - 4 * A * C
    q = -0.5 * (B - math.sqrt(disc)) if B < 0 else -0.5 * (B + math.sqrt(disc))
    R0 = q / A if B < 0 else C / q
    return R0, a / R0, b / R0


def count_covariance(measured: CountsSummary, model: str = "independent") -> np.ndarray:
    """Covariance of the measured rates ``(S1, S2, CC)`` in Hz^2.

    ``independent``: three uncorrelated Poisson counts.  ``nested``: every
    coincidence is also a click in both singles channels, so the covariances
    of CC with either singles rate, and of the two singles rates, equal var(CC).
    """
    T = measured.duration_s
    s1, s2, cc = (measured.singles_signal_hz, measured.singles_herald_hz,
                  measured.coincidences_hz)
    if model == "independent":
        return np.diag([s1, s2, cc]) / T
    if model == "nested":
        return np.array([[s1, cc, cc], [cc, s2, cc], [cc, cc, cc]]) / T
    raise ValueError(f"unknown error model {model!r}")


def propagate_errors(measured: CountsSummary, w: WindowParams, mode: str = "jacobian",
                     n_draws: int = 10_000, seed: int = 0,
                     model: str = "independent") -> Uncertainty:
    """One-sigma errors on ``(R0, eta1, eta2)`` from Poisson noise on the counts.

    ``jacobian``: central differences of the solver with step ``sigma/100`` in
    each measured rate, pushed through the count covariance.  ``montecarlo``:
    re-solve for ``n_draws`` Poisson resamplings of the counts.  See
    ``count_covariance`` for ``model``.
    """
    T = measured.duration_s
    rates = np.array([measured.singles_signal_hz, measured.singles_herald_hz,
                      measured.coincidences_hz])
    cov = count_covariance(measured, model)
    sig = np.sqrt(np.diag(cov))
    if mode == "jacobian":
        _solve_central(*rates, w)
        G = np.zeros((3, 3))
        for k in range(3):
            h = sig[k] / 100.0
            up, dn = rates.copy(), rates.copy()
            up[k] += h
            dn[k] -= h
            G[:, k] = (np.array(_solve_central(*up, w))
                       - np.array(_solve_central(*dn, w))) / (2 * h)
        var = np.einsum("ik,kl,il->i", G, cov, G)
        return Uncertainty(*(float(v) for v in np.sqrt(var)))
    if mode == "montecarlo":
        if n_draws < 2:
            raise ValueError("need at least two draws")
        _solve_central(*rates, w)
        rng = np.random.default_rng(seed)
        if model == "independent":
            draws = rng.poisson(rates * T, size=(n_draws, 3)) / T
        else:
            # independent classes: coincidences, signal-only, herald-only
            cc = rates[2] * T
            k = rng.poisson([cc, rates[0] * T - cc, rates[1] * T - cc], size=(n_draws, 3))
            draws = np.stack([k[:, 0] + k[:, 1], k[:, 0] + k[:, 2], k[:, 0]], axis=1) / T
        ok = np.all(draws > 0, axis=1) & (draws[:, 2] <= draws[:, :2].min(axis=1))
        x, norm = _newton(draws[ok, 0], draws[ok, 1], draws[ok, 2], w)
        good = norm < 1e-12
        if good.sum() < 0.99 * n_draws:
            raise ConvergenceError("too many resampled measurements failed to solve")
        return Uncertainty(*(float(v) for v in x[good].std(axis=0, ddof=1)))
    raise ValueError(f"unknown mode {mode!r}")


def solve_inverse(measured: CountsSummary, w: WindowParams, errors: bool = True,
                  max_iter: int = 60, error_model: str = "independent") -> CorrectedEstimate:
    """Recover pair rate and both arm efficiencies from measured rates.

    ``S1``/``eta1`` belong to the signal arm, ``S2``/``eta2`` to the herald
    arm.  With ``errors`` the Jacobian uncertainties are attached.
    """
    R0, e1, e2 = _solve_central(measured.singles_signal_hz, measured.singles_herald_hz,
                                measured.coincidences_hz, w, max_iter=max_iter)
    if not errors:
        return CorrectedEstimate(R0, e1, e2)
    u = propagate_errors(measured, w, model=error_model)
    return CorrectedEstimate(R0, e1, e2, u.sigma_pair_rate, u.sigma_eta_signal,
                             u.sigma_eta_herald)


def relative_residual(est: CorrectedEstimate, measured: CountsSummary,
                      w: WindowParams) -> float:
    """Largest relative mismatch between the model at ``est`` and the measurement."""
    d1, d2 = w.tau_d_signal_ps * PS, w.tau_d_herald_ps * PS
    S1, S2, CC = (measured.singles_signal_hz, measured.singles_herald_hz,
                  measured.coincidences_hz)
    R, e1, e2 = est.pair_rate_hz, est.eta_signal, est.eta_herald
    return max(abs(R * e1 * (1 - S1 * d1) / S1 - 1),
               abs(R * e2 * (1 - S2 * d2) / S2 - 1),
               abs(forward_cc(R, e1, e2, w) / CC - 1))
