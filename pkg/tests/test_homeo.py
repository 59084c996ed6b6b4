import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from switchrl.homeo import (
    Homeostasis,
    HomeoState,
    PromiseWindow,
    UnderfilledWindowError,
    homeo_probability,
    homeo_update,
    value_promise_discrepancy,
)


def brute_force_discrepancy(values, rewards_oldest_first, gamma):
    """Independent loop form: values[0] is V(s_{t-k}), values[-1] is V(s_t)."""
    k = len(rewards_oldest_first)
    total = 0.0
    for i in range(k):
        # R_{t-i} sits i places from the newest end
        total += gamma**i * rewards_oldest_first[k - 1 - i]
    return abs(values[0] - total - gamma**k * values[-1])


def test_self_consistent_values_give_zero():
    gamma, rewards = 0.9, [1.0, 0.5, 2.0]  # newest first
    v_end = 3.0
    v_start = sum(gamma**i * r for i, r in enumerate(rewards)) + gamma**3 * v_end
    assert value_promise_discrepancy(v_start, rewards, v_end, gamma) == pytest.approx(0.0, abs=1e-12)


def test_single_step_hand_value():
    assert value_promise_discrepancy(5.0, [2.0], 4.0, 1.0) == 1.0


def test_two_step_hand_value():
    # R_t = 2 gets weight gamma^0 and R_{t-1} = 1 gets gamma^1
    assert value_promise_discrepancy(10.0, [2.0, 1.0], 3.0, 0.5) == pytest.approx(6.75, abs=1e-12)


def test_window_pushes_feed_discrepancy_in_time_order():
    w = PromiseWindow(2, 0.5)
    w.push(10.0)
    w.push(7.0, reward=1.0)  # R_{t-1}
    w.push(3.0, reward=2.0)  # R_t
    assert w.filled
    assert w.discrepancy() == pytest.approx(6.75, abs=1e-12)


def test_window_reports_underfilled_and_resets_on_done():
    w = PromiseWindow(2, 0.9)
    with pytest.raises(UnderfilledWindowError):
        w.discrepancy()
    for v in (1.0, 2.0, 3.0):
        w.push(v, reward=0.0)
    assert w.filled
    w.push(0.0, reward=1.0, done=True)
    assert not w.filled
    with pytest.raises(UnderfilledWindowError):
        w.discrepancy()


def test_window_matches_reference_deque():
    k, rng = 4, np.random.default_rng(0)
    w = PromiseWindow(k, 0.9)
    vals, rews = deque(maxlen=k + 1), deque(maxlen=k)
    w.push(0.0)
    vals.append(0.0)
    for _ in range(1000):
        v, r = rng.normal(), rng.normal()
        w.push(v, reward=r)
        vals.append(v)
        rews.append(r)
        assert list(w.values) == list(vals) and list(w.rewards) == list(rews)
        assert len(w.values) <= k + 1 and len(w.rewards) <= k


@settings(max_examples=200, deadline=None)
@given(
    k=st.integers(1, 10),
    gamma=st.floats(0.01, 1.0),
    data=st.data(),
)
def test_discrepancy_matches_brute_force_and_is_nonnegative(k, gamma, data):
    finite = st.floats(-100, 100, allow_nan=False)
    values = data.draw(st.lists(finite, min_size=k + 1, max_size=k + 1))
    rewards = data.draw(st.lists(finite, min_size=k, max_size=k))
    w = PromiseWindow(k, gamma)
    w.push(values[0])
    for v, r in zip(values[1:], rewards):
        w.push(v, reward=r)
    got = w.discrepancy()
    assert got >= 0.0
    assert got == pytest.approx(brute_force_discrepancy(values, rewards, gamma), rel=1e-12, abs=1e-9)


def test_state_initialization_and_json_round_trip():
    h = HomeoState(0.1)
    assert (h.mean, h.var, h.plus_mean, h.t) == (0.0, 1.0, 1.0, 0)
    _, h2 = homeo_probability(h, 0.7)
    assert HomeoState.from_json(h2.to_json()) == h2


@pytest.mark.parametrize("rho", [0.0, 1e-5, 0.91, 1.0])
def test_rho_range_enforced(rho):
    with pytest.raises(ValueError):
        HomeoState(rho)


def test_fresh_state_zero_input_probability_is_rho():
    p, h = homeo_probability(HomeoState(0.3), 0.0)
    assert p == pytest.approx(0.3)
    assert (h.t, h.mean, h.plus_mean) == (1, 0.0, 1.0)


def test_hand_trace_of_two_steps():
    rho = 0.5
    p1, h1 = homeo_probability(HomeoState(rho), 2.0)
    # t=1: tau=1, mean=2, var=floor, x+=1, plus_mean=1
    assert (h1.mean, h1.plus_mean) == (2.0, 1.0)
    assert p1 == pytest.approx(rho)
    p2, h2 = homeo_probability(h1, 4.0)
    mean = 0.5 * 2.0 + 0.5 * 4.0
    var = 0.5 * h1.var + 0.5 * (4.0 - mean) ** 2
    xp = math.exp((4.0 - mean) / math.sqrt(var))
    pm = 0.5 * 1.0 + 0.5 * xp
    assert (h2.mean, h2.var, h2.plus_mean) == pytest.approx((mean, var, pm))
    assert p2 == pytest.approx(min(1.0, rho * xp / pm))


def test_extreme_outlier_clamps_to_one():
    h = HomeoState(0.9)
    rng = np.random.default_rng(0)
    for x in rng.random(500):
        _, h = homeo_probability(h, float(x))
    p, _ = homeo_probability(h, 1e6)
    assert p == 1.0
    fired, _ = homeo_update(h, 1e6, seed=0)
    assert fired


def test_constant_stream_hits_target_rate():
    h = Homeostasis(0.01, np.random.default_rng(4))
    rate = sum(h(3.0) for _ in range(100_000)) / 100_000
    assert abs(rate - 0.01) <= 0.002


@settings(max_examples=100, deadline=None)
@given(
    warm=st.lists(st.floats(0, 10), min_size=1, max_size=30),
    a=st.floats(0, 10),
    b=st.floats(0, 10),
)
def test_probability_monotone_in_input(warm, a, b):
    h = HomeoState(0.2)
    for x in warm:
        _, h = homeo_probability(h, x)
    lo, hi = sorted((a, b))
    assert homeo_probability(h, lo)[0] <= homeo_probability(h, hi)[0]


def test_state_stays_finite_under_adversarial_inputs():
    h = HomeoState(0.05)
    rng = np.random.default_rng(9)
    xs = np.where(rng.random(200_000) < 0.999, 0.0, 1e6)
    for x in xs:
        p, h = homeo_probability(h, float(x))
        assert 0.0 <= p <= 1.0
    assert all(math.isfinite(v) for v in (h.mean, h.var, h.plus_mean))
    assert h.var > 0 and h.plus_mean > 0


def test_rejects_negative_or_nan_input():
    with pytest.raises(ValueError):
        homeo_probability(HomeoState(0.1), -1.0)
    with pytest.raises(ValueError):
        homeo_probability(HomeoState(0.1), float("nan"))


def test_update_is_seed_deterministic():
    h = HomeoState(0.5)
    assert homeo_update(h, 0.3, 11) == homeo_update(h, 0.3, 11)
