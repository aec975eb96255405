import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from heralding.bell import (CANONICAL_ANGLES, TSIRELSON, EntangledModel, chsh_from_counts,
                            chsh_S, correlation, expected_counts, max_S_over_angles,
                            outcome_probabilities, simulate_chsh)


def test_correlation_trivial_cases():
    assert correlation(0.3, 0.3, EntangledModel(1.0)) == 1.0
    assert correlation(0.1, 1.2, EntangledModel(0.0)) == 0.0


def test_chsh_values():
    assert abs(chsh_S(EntangledModel(1.0)) - 2.8284271247) < 1e-9
    assert np.isclose(chsh_S(EntangledModel(0.7071)), 2.0000, atol=1e-4)
    assert abs(chsh_S(EntangledModel(0.8874)) - 2.510) < 1e-3


@given(st.floats(0.0, 1.0))
def test_canonical_angles_give_tsirelson_times_v(v):
    assert math.isclose(chsh_S(EntangledModel(v)), TSIRELSON * v, rel_tol=1e-15, abs_tol=1e-15)


@given(st.floats(0.0, 1.0), st.lists(st.floats(-4.0, 4.0), min_size=4, max_size=4))
def test_model_obeys_tsirelson_bound(v, angles):
    assert abs(chsh_S(EntangledModel(v, tuple(angles)))) <= TSIRELSON + 1e-12


def test_grid_search_maximum_is_tsirelson():
    assert np.isclose(max_S_over_angles(EntangledModel(1.0), n=16), TSIRELSON, rtol=1e-12)


def test_outcome_probabilities_normalised():
    p = outcome_probabilities(0.2, 0.9, EntangledModel(0.9))
    assert np.isclose(p.sum(), 1.0)
    assert np.all(p >= 0)


def test_invalid_model():
    with pytest.raises(ValueError):
        EntangledModel(1.2)
    with pytest.raises(ValueError):
        EntangledModel(0.5, (0.0, 1.0, math.nan, 0.0))
    with pytest.raises(ValueError):
        EntangledModel(0.5, analyzer_transmission=-0.1)


def test_loss_independence_analytic():
    base = expected_counts(EntangledModel(0.8874), 2000.0, 10.0)
    lossy = expected_counts(EntangledModel(0.8874, heralding_eta=0.3,
                                           analyzer_transmission=0.5), 2000.0, 10.0)
    assert np.isclose(chsh_from_counts(base).S, chsh_from_counts(lossy).S, rtol=1e-14)
    assert np.isclose(chsh_from_counts(base).S, 2.510, atol=1e-3)


def test_loss_independence_simulated():
    a = simulate_chsh(EntangledModel(0.8874, heralding_eta=0.8), 2000.0, 10.0, seed=1)
    b = simulate_chsh(EntangledModel(0.8874, heralding_eta=0.4, analyzer_transmission=0.6),
                      2000.0, 10.0, seed=2)
    assert abs(a.S - b.S) < 3 * math.hypot(a.sigma_S, b.sigma_S)


def test_infinite_count_limit():
    m = EntangledModel(1.0)
    r = chsh_from_counts(expected_counts(m, 1e9, 1.0))
    assert np.isclose(r.S, TSIRELSON, rtol=1e-12)


def test_simulation_at_reference_counts():
    m = EntangledModel(0.8874, CANONICAL_ANGLES, heralding_eta=0.797)
    r = simulate_chsh(m, 2000.0, 10.0, seed=0)
    assert r.counts.shape == (4, 2, 2)
    assert 0.9e4 < r.counts.sum(axis=(1, 2)).min()
    assert 0.005 < r.sigma_S < 0.02
    assert abs(r.S - 2.51) < 3 * r.sigma_S
    assert (r.S - 2.0) / r.sigma_S > 25
    assert not r.flagged


def test_standard_error_is_calibrated():
    m = EntangledModel(0.8874, heralding_eta=0.797)
    runs = [simulate_chsh(m, 2000.0, 10.0, seed=k) for k in range(100)]
    spread = np.std([r.S for r in runs], ddof=1)
    reported = np.mean([r.sigma_S for r in runs])
    assert abs(spread / reported - 1) < 0.2
    assert abs(np.mean([r.S for r in runs]) - chsh_S(m)) < 3 * reported / 10


def test_empty_cell_is_flagged():
    counts = np.full((4, 2, 2), 100)
    counts[2, 0, 1] = 0
    r = chsh_from_counts(counts)
    assert r.flagged
    assert math.isnan(r.sigma_S)
    assert math.isfinite(r.S)
    r = chsh_from_counts(np.zeros((4, 2, 2)))
    assert r.flagged and math.isnan(r.S)


def test_report_fields():
    d = simulate_chsh(EntangledModel(0.9), 100.0, 1.0).to_dict()
    assert {"S", "sigma_S", "correlations", "counts"} <= set(d)
    assert np.array(d["counts"]).shape == (4, 2, 2)
