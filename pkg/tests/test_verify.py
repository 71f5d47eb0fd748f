import math
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nowcast.geogrid import GeoGrid
from nowcast.verify import (
    ContingencyTable, LatencySpec, ModelRun, Region, accumulate, contingency_counts, csi,
    effective_lead, evaluate, fss, frequency_bias, hourly_hold, read_report, report_csv,
    write_plots,
)


def _g(a, mask=None, res=0.05):
    return GeoGrid(0.0, 0.0, res, np.asarray(a, np.float32), mask)


# -- latency --

def test_hres_seven_hour_lead():
    assert effective_lead(LatencySpec(360, 360), 60) == 420


def test_zero_latency_identity():
    for cad in (0, 15, 360):
        assert effective_lead(LatencySpec(cad, 0), 135) == 135


def test_one_cycle_older():
    assert effective_lead(LatencySpec(360, 361), 60) == 780


def _brute_effective(cadence, latency, wanted, now=0):
    # enumerate run inits at multiples of cadence not after now; newest available wins
    k = 0
    while True:
        init = now - k * cadence
        if now - init >= latency:
            return (now + wanted) - init
        k += 1


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 720), st.integers(0, 2000), st.integers(0, 720))
def test_effective_lead_matches_enumeration(cad, lat, wanted):
    assert effective_lead(LatencySpec(cad, lat), wanted) == _brute_effective(cad, lat, wanted)


def test_hourly_hold_maps_quarter_hours():
    seen = []
    p = hourly_hold(lambda t, lead: seen.append(lead))
    for lead in (15, 30, 45, 60, 75, 120):
        p(None, lead)
    assert seen == [60, 60, 60, 60, 120, 120]


# -- contingency --

def test_accumulate_perfect():
    rng = np.random.default_rng(0)
    a = rng.gamma(0.5, 2, (6, 6))
    t = accumulate(_g(a), _g(a), 1.0)
    assert t.misses == 0 and t.false_alarms == 0


def test_accumulate_hand_case():
    truth = _g([[5, 5, 5, 5, 0]])
    fc = _g([[5, 5, 5, 0, 5]])
    assert accumulate(fc, truth, 1.0).as_tuple() == (3, 1, 1, 0)


def test_accumulate_fully_masked_unchanged():
    base = ContingencyTable(1, 2, 3, 4)
    out = accumulate(_g([[5, 0]]), _g([[5, 5]], mask=np.zeros((1, 2), bool)), 1.0, base)
    assert out == base


def test_accumulate_geometry_mismatch():
    with pytest.raises(ValueError):
        accumulate(_g(np.zeros((2, 3))), _g(np.zeros((2, 2))), 1.0)


def test_coarse_forecast_upsampled_matches_block_evaluation():
    rng = np.random.default_rng(4)
    coarse = rng.gamma(0.6, 2, (4, 5))
    fine = rng.gamma(0.6, 2, (8, 10))
    mask = rng.random((8, 10)) > 0.25
    table = accumulate(_g(coarse, res=0.1), _g(fine, mask), 1.0)
    h = m = fa = cn = 0
    for i in range(4):
        for j in range(5):
            for di in range(2):
                for dj in range(2):
                    y, x = 2 * i + di, 2 * j + dj
                    if not mask[y, x]:
                        continue
                    o, f = fine[y, x] >= 1.0, coarse[i, j] >= 1.0
                    h += o and f
                    m += o and not f
                    fa += f and not o
                    cn += not o and not f
    assert table.as_tuple() == (h, m, fa, cn)


def test_merge_is_associative_and_exact():
    rng = np.random.default_rng(5)
    pairs = [(rng.gamma(0.5, 2, (5, 5)), rng.gamma(0.5, 2, (5, 5)), rng.random((5, 5)) > 0.3)
             for _ in range(6)]
    single = contingency_counts(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]),
                                np.stack([p[2] for p in pairs]), 1.0)
    shards = [contingency_counts(*p, 1.0) for p in pairs]
    left = ((shards[0] + shards[1]) + shards[2]) + ((shards[3] + shards[4]) + shards[5])
    right = shards[5] + (shards[4] + (shards[3] + (shards[2] + (shards[1] + shards[0]))))
    assert left == right == single


# -- scores --

def test_csi_and_bias_examples():
    t = ContingencyTable(3, 1, 1, 0)
    assert csi(t).value == pytest.approx(0.6) and csi(t).defined
    assert frequency_bias(t).value == 1.0
    assert csi(ContingencyTable(7, 0, 0, 3)).value == 1.0
    assert frequency_bias(ContingencyTable(7, 0, 0, 3)).value == 1.0
    und = csi(ContingencyTable(0, 0, 0, 9))
    assert not und.defined and math.isnan(und.value)
    assert not frequency_bias(ContingencyTable(0, 0, 4, 9)).defined


def _fss_oracle(f, o, mask, rate, n):
    h, w = f.shape
    r = n // 2
    ff, fo = [], []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            cnt = ef = eo = 0
            for y in range(max(0, i - r), min(h, i + r + 1)):
                for x in range(max(0, j - r), min(w, j + r + 1)):
                    if mask[y, x]:
                        cnt += 1
                        ef += f[y, x] >= rate
                        eo += o[y, x] >= rate
            ff.append(ef / cnt)
            fo.append(eo / cnt)
    ff, fo = np.array(ff), np.array(fo)
    ref = np.mean(ff ** 2) + np.mean(fo ** 2)
    return 1 - np.mean((ff - fo) ** 2) / ref


def test_fss_matches_double_loop_oracle():
    rng = np.random.default_rng(8)
    f = rng.gamma(0.5, 2, (8, 8))
    o = rng.gamma(0.5, 2, (8, 8))
    mask = rng.random((8, 8)) > 0.2
    s = fss(f, o, mask, 1.0, 3)
    assert s.defined
    assert abs(s.value - _fss_oracle(f, o, mask, 1.0, 3)) <= 1e-12


def test_fss_perfect_for_every_n():
    rng = np.random.default_rng(9)
    a = rng.gamma(0.5, 2, (10, 12))
    mask = rng.random((10, 12)) > 0.1
    b = np.where(mask, a, 99.0)   # differs only off-mask
    for n in range(1, 22, 2):
        assert fss(b, a, mask, 1.0, n).value == 1.0


def test_fss_dry_forecast_is_zero():
    o = np.zeros((6, 6))
    o[2, 3] = 4.0
    assert fss(np.zeros((6, 6)), o, np.ones((6, 6), bool), 1.0, 11).value == 0.0


def test_fss_n1_is_normalised_brier():
    rng = np.random.default_rng(10)
    f = rng.gamma(0.5, 2, (9, 9))
    o = rng.gamma(0.5, 2, (9, 9))
    mask = rng.random((9, 9)) > 0.3
    bf = (f >= 1.0)[mask].astype(float)
    bo = (o >= 1.0)[mask].astype(float)
    expected = 1 - np.mean((bf - bo) ** 2) / (np.mean(bf ** 2) + np.mean(bo ** 2))
    assert fss(f, o, mask, 1.0, 1).value == pytest.approx(expected, abs=1e-15)


def test_fss_undefined_and_errors():
    z = np.zeros((4, 4))
    assert not fss(z, z, np.ones((4, 4), bool), 1.0, 3).defined
    with pytest.raises(ValueError):
        fss(z, z, np.ones((4, 4), bool), 1.0, 4)


# -- harness --

T0 = datetime(2023, 6, 1)


def _truth_set(n_times=4):
    rng = np.random.default_rng(2)
    times = [T0 + timedelta(minutes=15 * k) for k in range(n_times + 8)]
    return times, {t: _g(rng.gamma(0.5, 2, (8, 8))) for t in times}


def test_perfect_run_scores_one():
    times, truth = _truth_set()
    run = ModelRun("perfect", lambda init, lead: truth.get(init + timedelta(minutes=lead)))
    rows = evaluate([run], truth, times[:4], [15, 30], [0.2, 1.0], dense_truth=True,
                    fss_sizes=(1, 3))
    assert rows
    for r in rows:
        if r.defined == "1":
            assert r.value == 1.0


def test_latency_routes_to_older_run_and_longer_lead():
    times, truth = _truth_set()
    calls = []

    def provider(init, lead):
        calls.append((init, lead))
        return truth[times[0]]

    run = ModelRun("hres", provider, LatencySpec(360, 360))
    evaluate([run], truth, times[:1], [60], [1.0])
    assert calls == [(times[0] - timedelta(minutes=360), 420)]


def test_absent_cubes_flagged_and_report_rectangular(tmp_path):
    times, truth = _truth_set()
    good = ModelRun("good", lambda init, lead: truth.get(init + timedelta(minutes=lead)))
    holey = ModelRun("holey", lambda init, lead: None if lead == 30 else truth.get(init + timedelta(minutes=lead)))
    region = Region("box", ((-1.0, 0.0, 0.0, 0.2),))
    rows = evaluate([good, holey], truth, times[:3], [15, 30], [0.2, 1.0],
                    regions=(Region("global"), region))
    assert len(rows) == 2 * 2 * 2 * 2 * 2
    absent = [r for r in rows if r.defined == "absent"]
    assert {(r.model, r.lead) for r in absent} == {("holey", 30)}
    text = report_csv(rows)
    assert text.splitlines()[0] == "model,region,rate_mm_hr,lead_min,metric,value,defined_flag,n_px"
    back = read_report(text)
    assert [(r.model, r.region, r.rate, r.lead, r.metric, r.defined) for r in back] == \
        [(r.model, r.region, r.rate, r.lead, r.metric, r.defined) for r in rows]
    assert report_csv(evaluate([good, holey], truth, times[:3], [15, 30], [0.2, 1.0],
                               regions=(Region("global"), region))) == text
    paths = write_plots(rows, tmp_path)
    assert paths and all(p.read_text().startswith("<?xml") for p in paths)
    again = write_plots(rows, tmp_path / "b")
    assert [p.read_bytes() for p in paths] == [p.read_bytes() for p in again]


def test_region_mask():
    g = GeoGrid(10.0, 0.0, 1.0, np.zeros((4, 4, 1), np.float32))
    m = Region("r", ((7.0, 10.0, 1.0, 3.0),)).mask(g)
    assert m.sum() == 3 * 2 and m[0, 1] and not m[3, 1]
    with pytest.raises(ValueError):
        Region("bad", ((0, 100, 0, 10),))
