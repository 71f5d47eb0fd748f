import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nowcast.calibrate import (
    DEFAULT_RATES, ThresholdTable, apply_thresholds, exceedance_probability, exceedance_weights,
    fit_thresholds,
)
from nowcast.pipeline import RateBinning

BIN = RateBinning.default()


def _brute_threshold(pairs):
    """Scalar search over the 99 candidates; pairs are (p, is_event)."""
    best, best_t = -1.0, None
    for i in range(1, 100):
        t = i / 100
        h = m = f = 0
        for p, ev in pairs:
            yes = p >= t
            if yes and ev:
                h += 1
            elif ev:
                m += 1
            elif yes:
                f += 1
        s = h / (h + m + f)
        if s > best:
            best, best_t = s, t
    return best_t, best


def _exceed_scalar(probs, rate):
    e = BIN.edges
    total = 0.0
    for k in range(BIN.n_bins):
        lo, hi = float(e[k]), float(e[k + 1])
        if lo >= rate:
            total += probs[k]
        elif lo < rate < hi:
            frac = (hi - rate) / hi if lo == 0 else math.log(hi / rate) / math.log(hi / lo)
            total += probs[k] * frac
    return min(max(total, 0.0), 1.0)


def test_uniform_at_bin15_edge_is_half():
    p = np.full(30, 1 / 30)
    assert exceedance_probability(p, float(BIN.edges[15]), BIN) == pytest.approx(0.5, abs=1e-12)


def test_rate_zero_total_probability():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(30), size=(4, 4))
    assert np.allclose(exceedance_probability(p, 0.0, BIN), 1.0)


def test_top_bin_mass():
    p = np.zeros(30)
    p[-1] = 1
    assert exceedance_probability(p, 100.0, BIN) == 1.0


def test_rate_above_cap_rejected():
    with pytest.raises(ValueError):
        exceedance_weights(BIN.cap + 1, BIN)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 2000.0), st.integers(0, 2**31))
def test_exceedance_matches_scalar(rate, seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(30))
    assert exceedance_probability(p, rate, BIN) == pytest.approx(_exceed_scalar(p, rate), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_exceedance_monotone_in_rate(seed):
    p = np.random.default_rng(seed).dirichlet(np.ones(30))
    rates = np.geomspace(0.01, 1999, 60)
    vals = [exceedance_probability(p, r, BIN) for r in rates]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def _one_pixel_probs(p_exceed, rate):
    """Per-bin distribution giving exactly ``p_exceed`` above a bin edge ``rate``."""
    k = int(np.searchsorted(BIN.edges, rate))
    assert BIN.edges[k] == rate
    out = np.zeros(30)
    out[k - 1] = 1 - p_exceed
    out[k] = p_exceed
    return out


def test_ten_pixel_toy_matches_scalar_oracle():
    rate = float(BIN.edges[10])
    ps = [0.05, 0.9, 0.35, 0.6, 0.12, 0.77, 0.5, 0.23, 0.41, 0.66]
    ev = [False, True, True, False, False, True, True, False, False, True]
    probs = np.array([_one_pixel_probs(p, rate) for p in ps])[None]
    truth = np.where(ev, 2 * rate, 0.0)[None]
    table = fit_thresholds([(15, probs, truth, np.ones((1, 10), bool))], rates=[rate])
    pe = exceedance_probability(probs[0], rate, BIN)
    t, s = _brute_threshold(list(zip(pe, ev)))
    e = table.entries[(rate, 15)]
    assert e.threshold == t and e.csi_at_fit == pytest.approx(s)


def test_fit_matches_brute_on_random_sets():
    rng = np.random.default_rng(1)
    rates = (0.2, 1.0, 5.0)
    for _ in range(20):
        probs = rng.dirichlet(np.full(30, 0.3), size=(3, 5, 5))
        truth = rng.gamma(0.4, 3, (3, 5, 5))
        mask = rng.random((3, 5, 5)) > 0.2
        held = [(30, probs[i], truth[i], mask[i]) for i in range(3)]
        table = fit_thresholds(held, rates=rates)
        for r in rates:
            pairs = [(exceedance_probability(probs[i][y, x], r, BIN), truth[i][y, x] >= r)
                     for i in range(3) for y in range(5) for x in range(5) if mask[i][y, x]]
            if not any(ev for _, ev in pairs):
                assert table.entries[(r, 30)].low_confidence
                continue
            assert table.entries[(r, 30)].threshold == _brute_threshold(pairs)[0]


def test_perfect_forecast_picks_smallest():
    truth = np.array([[0.0, 3.0, 0.0, 8.0]])
    cls = np.searchsorted(BIN.edges, truth, side="right") - 1
    probs = np.eye(30)[cls]
    table = fit_thresholds([(60, probs, truth, np.ones_like(truth, bool))], rates=[1.0])
    e = table.entries[(1.0, 60)]
    assert e.threshold == 0.01 and e.csi_at_fit == 1.0


def test_no_events_low_confidence():
    probs = np.full((2, 2, 30), 1 / 30)
    table = fit_thresholds([(15, probs, np.zeros((2, 2)), np.ones((2, 2), bool))], rates=[25.0])
    e = table.entries[(25.0, 15)]
    assert e.threshold == 0.5 and e.low_confidence and e.events_seen == 0


def test_json_roundtrip():
    rng = np.random.default_rng(3)
    probs = rng.dirichlet(np.ones(30), size=(4, 4))
    truth = rng.gamma(0.5, 3, (4, 4))
    table = fit_thresholds([(15, probs, truth, np.ones((4, 4), bool))], metadata={"split": "x"})
    back = ThresholdTable.from_json(table.to_json())
    assert back.dumps() == table.dumps()
    assert len(back.entries) == len(DEFAULT_RATES)


def _table(thresholds, lead=15):
    return ThresholdTable.from_json({"entries": [
        {"rate_mm_hr": r, "lead_min": lead, "threshold": t, "csi_at_fit": 0.0,
         "events_seen": 1, "low_confidence": False} for r, t in thresholds.items()]})


def test_apply_zero_probabilities():
    probs = np.zeros((3, 3, 30))
    probs[..., 0] = 1.0
    out = apply_thresholds(probs, _table({r: 0.5 for r in DEFAULT_RATES}), DEFAULT_RATES, 15)
    assert not out.any()


def test_apply_picks_largest_passing_rate():
    rates = (0.2, 2.4, 7.0)
    probs = np.zeros((1, 1, 30))
    # mass just above 2.4 but well below 7
    probs[0, 0, int(np.searchsorted(BIN.edges, 3.0)) - 1] = 1.0
    out = apply_thresholds(probs, _table({0.2: 0.3, 2.4: 0.3, 7.0: 0.3}), rates, 15)
    assert out[0, 0] == 2.4


def test_apply_missing_entry_rejected():
    with pytest.raises(KeyError):
        apply_thresholds(np.zeros((1, 1, 30)), _table({0.2: 0.5}), (0.2, 1.0), 15)


def test_apply_monotone():
    rng = np.random.default_rng(7)
    a = rng.dirichlet(np.ones(30), size=(6,))
    # shifting mass to higher bins never lowers the displayed rate
    b = np.concatenate([np.zeros((6, 1)), a[:, :-1]], axis=1)
    b[:, -1] += a[:, -1]
    table = _table({r: 0.2 + 0.05 * i for i, r in enumerate(DEFAULT_RATES)})
    assert np.all(apply_thresholds(b, table, DEFAULT_RATES, 15) >= apply_thresholds(a, table, DEFAULT_RATES, 15))
