"""
Turning probabilities into rain maps, and scoring them
======================================================

The network predicts a distribution over 30 rate bins.  For a rate ``r`` the
probability of reaching it is the mass above ``r``.  A threshold per rate and
lead, fitted on held-out data to maximise the critical success index (CSI),
converts that probability into a yes/no forecast.  Verification then counts
hits, misses and false alarms, and also reports the fractions skill score
over neighbourhoods.
"""

import numpy as np

from nowcast.calibrate import apply_thresholds, exceedance_probability, fit_thresholds
from nowcast.geogrid import GeoGrid
from nowcast.pipeline import RateBinning
from nowcast.verify import (LatencySpec, ModelRun, accumulate, csi, effective_lead, evaluate,
                            frequency_bias, fss, report_csv)

binning = RateBinning.default()
rng = np.random.default_rng(1)


def fake_forecast(truth, sharpness):
    """Per-bin probabilities concentrated around the true bin."""
    cls = np.clip(np.searchsorted(binning.edges, truth, side="right") - 1, 0, binning.n_bins - 1)
    centre = cls + rng.normal(0, 1.5, truth.shape)
    k = np.arange(binning.n_bins)
    logits = -sharpness * (k - centre[..., None]) ** 2
    p = np.exp(logits - logits.max(-1, keepdims=True))
    return p / p.sum(-1, keepdims=True)


truth = [rng.gamma(0.3, 2.0, (32, 32)) for _ in range(6)]
probs = [fake_forecast(t, 0.3) for t in truth]
print("P(rain >= 1 mm/h) at pixel (0, 0):", float(exceedance_probability(probs[0][0, 0], 1.0, binning)))

rates = (0.2, 1.0, 5.0)
heldout = [(30, p, t, np.ones(t.shape, bool)) for p, t in zip(probs[:4], truth[:4])]
table = fit_thresholds(heldout, rates=rates, binning=binning)
for r in rates:
    e = table.entries[(r, 30)]
    print(f"rate {r:4}: threshold {e.threshold:.2f}  CSI at fit {e.csi_at_fit:.3f}")

rain = apply_thresholds(probs[4], table, rates, 30, binning)
f, o = GeoGrid(0, 0, 0.1, rain), GeoGrid(0, 0, 0.1, truth[4])
ct = accumulate(f, o, 1.0)
print(f"held-in sample at 1 mm/h: CSI {csi(ct).value:.3f}  bias {frequency_bias(ct).value:.3f}")
print("FSS at 1 mm/h, windows 1 and 9:",
      [round(fss(rain, truth[4], np.ones(rain.shape, bool), 1.0, n).value, 3) for n in (1, 9)])

# Operational models only start producing forecasts some time after their
# initialisation; a run every hour that takes 90 minutes to appear serves a
# 30-minute lead with a forecast that is actually 150 minutes ahead.
print("effective lead:", effective_lead(LatencySpec(init_cadence=60, availability_latency=90), 30))

# `evaluate` does the bookkeeping for whole experiments.
from datetime import datetime, timedelta
t0 = datetime(2023, 6, 1)
inits = [t0 + timedelta(minutes=15 * i) for i in range(4)]
obs = {t0 + timedelta(minutes=15 * i): GeoGrid(0, 0, 0.1, truth[i % 6]) for i in range(12)}
persistence = ModelRun("persistence", obs.get, LatencySpec(0, 0))
rows = evaluate([persistence], obs, inits, [15, 30], [1.0], dense_truth=True, fss_sizes=(1, 5))
print(report_csv(rows).splitlines()[:4])
