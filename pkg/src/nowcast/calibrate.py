"""Probability thresholds that maximise CSI, and their application.

For each exceedance rate and lead time the model's categorical output is
turned into ``P(rain >= rate)``; a pixel is forecast "wet" when that
probability reaches the calibrated threshold.  Thresholds are picked by
exhaustive search over a fixed candidate grid on a held-out split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .pipeline import RateBinning

DEFAULT_RATES = (0.2, 1.0, 2.4, 5.0, 7.0, 10.0, 15.0, 25.0)
CANDIDATES = np.arange(1, 100) / 100.0
LOW_CONFIDENCE_THRESHOLD = 0.5


def check_rates(rates) -> tuple:
    rates = tuple(float(r) for r in rates)
    if not rates or any(r <= 0 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError(f"rates must be positive and strictly increasing, got {rates}")
    return rates


def exceedance_weights(rate: float, binning: RateBinning) -> np.ndarray:
    """Per-bin share of probability mass at or above ``rate``.

    Bins entirely at or above the rate count fully; the bin containing the
    rate counts by the fraction of its log-rate width above it (linear for
    the first bin, which starts at 0).
    """
    e = binning.edges
    if rate < 0 or rate > binning.cap:
        raise ValueError(f"rate {rate} outside [0, {binning.cap}]")
    w = (e[:-1] >= rate).astype(np.float64)
    k = int(np.searchsorted(e, rate, side="right") - 1)
    if k < binning.n_bins and e[k] < rate:
        lo, hi = e[k], e[k + 1]
        w[k] = (hi - rate) / hi if lo == 0 else (np.log(hi) - np.log(rate)) / (np.log(hi) - np.log(lo))
    return w


def exceedance_probability(probs: np.ndarray, rate: float, binning: RateBinning) -> np.ndarray:
    """``P(rain >= rate)`` from per-bin probabilities on the last axis."""
    p = np.asarray(probs, dtype=np.float64) @ exceedance_weights(rate, binning)
    return np.clip(p, 0.0, 1.0)


@dataclass
class ThresholdEntry:
    threshold: float
    csi_at_fit: float
    events_seen: int
    low_confidence: bool = False


@dataclass
class ThresholdTable:
    entries: dict                       # (rate, lead) -> ThresholdEntry
    metadata: dict = field(default_factory=dict)

    def threshold(self, rate: float, lead: int) -> float:
        try:
            return self.entries[(float(rate), int(lead))].threshold
        except KeyError:
            raise KeyError(f"no threshold for rate {rate} at lead {lead}") from None

    def to_json(self) -> dict:
        recs = [{"rate_mm_hr": r, "lead_min": l, "threshold": e.threshold,
                 "csi_at_fit": e.csi_at_fit, "events_seen": e.events_seen,
                 "low_confidence": e.low_confidence}
                for (r, l), e in sorted(self.entries.items())]
        return {"metadata": self.metadata, "entries": recs}

    @classmethod
    def from_json(cls, d: dict) -> "ThresholdTable":
        entries = {(float(r["rate_mm_hr"]), int(r["lead_min"])):
                   ThresholdEntry(float(r["threshold"]), float(r["csi_at_fit"]),
                                  int(r["events_seen"]), bool(r["low_confidence"]))
                   for r in d["entries"]}
        return cls(entries, d.get("metadata", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


class _CandidateCounts:
    """Contingency counts at every candidate threshold, accumulated exactly."""

    def __init__(self, candidates):
        self.candidates = candidates
        k = candidates.size
        self.pred_event = np.zeros(k + 1, np.int64)     # histogram of "#candidates <= p"
        self.pred_none = np.zeros(k + 1, np.int64)

    def add(self, p: np.ndarray, event: np.ndarray):
        idx = np.searchsorted(self.candidates, p, side="right")
        self.pred_event += np.bincount(idx[event], minlength=self.pred_event.size)
        self.pred_none += np.bincount(idx[~event], minlength=self.pred_none.size)

    def tables(self):
        # A pixel with idx = m is predicted wet for candidates[0:m].
        events = int(self.pred_event.sum())
        hits = np.cumsum(self.pred_event[::-1])[::-1][1:]
        fas = np.cumsum(self.pred_none[::-1])[::-1][1:]
        return hits, events - hits, fas, events


def fit_thresholds(heldout, rates=DEFAULT_RATES, binning: RateBinning | None = None,
                   candidates=CANDIDATES, region_mask=None, metadata=None) -> ThresholdTable:
    """Pick, per (rate, lead), the candidate threshold with the best pooled CSI.

    Parameters
    ----------
    heldout : iterable of (lead_min, probs, truth_rate, mask)
        ``probs`` has shape ``(H, W, bins)``; ``truth_rate`` and ``mask`` are
        ``(H, W)``.  Counts are pooled across all items of the same lead.
    region_mask : array, optional
        Restricts fitting to a region.

    Ties go to the smallest threshold.  A (rate, lead) with no observed
    event gets threshold 0.5 and ``low_confidence=True``.
    """
    binning = binning or RateBinning.default()
    rates = check_rates(rates)
    candidates = np.asarray(candidates, dtype=np.float64)
    acc = {}
    for lead, probs, truth, mask in heldout:
        mask = np.asarray(mask, bool)
        if region_mask is not None:
            mask = mask & region_mask
        for r in rates:
            key = (r, int(lead))
            if key not in acc:
                acc[key] = _CandidateCounts(candidates)
            p = exceedance_probability(probs[mask], r, binning)
            acc[key].add(p, truth[mask] >= r)

    entries = {}
    for key in sorted(acc):
        hits, misses, fas, events = acc[key].tables()
        if events == 0:
            entries[key] = ThresholdEntry(LOW_CONFIDENCE_THRESHOLD, float("nan"), 0, True)
            continue
        score = hits / (hits + misses + fas)
        best = int(np.argmax(score))
        entries[key] = ThresholdEntry(float(candidates[best]), float(score[best]), events)
    meta = {"candidates": candidates.tolist(), **(metadata or {})}
    return ThresholdTable(entries, meta)


def apply_thresholds(probs: np.ndarray, table: ThresholdTable, rates, lead: int,
                     binning: RateBinning | None = None) -> np.ndarray:
    """Deterministic rain field: the largest rate whose exceedance probability
    reaches its threshold, else 0."""
    binning = binning or RateBinning.default()
    out = np.zeros(probs.shape[:-1])
    for r in check_rates(rates):
        thr = table.threshold(r, lead)
        p = exceedance_probability(probs, r, binning)
        out = np.where(p >= thr, r, out)
    return out
