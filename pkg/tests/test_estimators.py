import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from survrisk.errors import DataError
from survrisk.estimators import censoring_survival, kaplan_meier

T = [1, 2, 2, 3, 4, 5]
E = [1, 1, 0, 1, 0, 1]


def test_km_hand_values():
    km = kaplan_meier(T, E)
    np.testing.assert_allclose(km.event_times, [1, 2, 3, 5])
    np.testing.assert_allclose(km([0.5, 1, 2, 2.5, 3, 4.9, 5]),
                               [1, 5 / 6, 2 / 3, 2 / 3, 4 / 9, 4 / 9, 0], rtol=0, atol=1e-15)
    assert km.left_limit(2) == pytest.approx(5 / 6)
    np.testing.assert_array_equal(km.at_risk, [6, 5, 3, 1])


def test_greenwood_hand_value():
    km = kaplan_meier(T, E)
    # S(3)^2 * (1/(6*5) + 1/(5*4) + 1/(3*2)) = (16/81) * (1/4)
    assert km.variance(3) == pytest.approx(4 / 81, rel=1e-12)
    assert km.variance(0.5) == 0.0
    assert km.variance(5) == 0.0


def test_reverse_km_hand_values():
    g = censoring_survival(T, E)
    np.testing.assert_allclose(g.event_times, [2, 4])
    # at t=2 the event leaves first, so 4 remain at risk of censoring
    assert g(2) == pytest.approx(3 / 4)
    assert g(4) == pytest.approx(3 / 8)
    assert g.left_limit(2) == 1.0


def test_no_events_gives_flat_curve():
    km = kaplan_meier([1, 2, 3], [0, 0, 0])
    assert km(10) == 1.0 and len(km.event_times) == 0


def test_bad_input():
    with pytest.raises(DataError):
        kaplan_meier([], [])
    with pytest.raises(DataError):
        kaplan_meier([1, np.nan], [1, 1])
    with pytest.raises(DataError):
        kaplan_meier([1, 2], [1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=30))
def test_uncensored_km_is_empirical_survival(times):
    t = np.array(times, dtype=float)
    km = kaplan_meier(t, np.ones_like(t))
    for u in range(0, 7):
        assert km(u) == pytest.approx(np.mean(t > u), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 8), st.booleans()), min_size=1, max_size=40))
def test_km_is_nonincreasing_in_unit_interval(data):
    t = np.array([d[0] for d in data], dtype=float)
    e = np.array([d[1] for d in data])
    km = kaplan_meier(t, e)
    s = km(np.arange(0, 10, 0.5))
    assert np.all(np.diff(s) <= 0) and np.all((s >= 0) & (s <= 1))
    assert np.all(km.greenwood_variance >= 0)
