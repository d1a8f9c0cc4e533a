"""Kaplan-Meier product-limit estimates with Greenwood variance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = ["KaplanMeierCurve", "kaplan_meier", "censoring_survival"]


@dataclass(frozen=True, eq=False)
class KaplanMeierCurve:
    """Right-continuous step function S(t) with Greenwood variance.

    ``event_times`` are the distinct times with at least one event; the
    remaining arrays are aligned with it. Before the first event time
    S = 1 and the variance is 0.
    """

    event_times: np.ndarray
    survival: np.ndarray
    greenwood_variance: np.ndarray
    at_risk: np.ndarray
    deaths: np.ndarray

    def _lookup(self, values, first, t, side):
        idx = np.searchsorted(self.event_times, np.asarray(t, dtype=float), side=side)
        out = np.concatenate(([first], values))[idx]
        return out if np.ndim(t) else float(out)

    def __call__(self, t):
        """S(t), including jumps at ``t``."""
        return self._lookup(self.survival, 1.0, t, "right")

    def left_limit(self, t):
        """S(t-), excluding jumps at ``t``."""
        return self._lookup(self.survival, 1.0, t, "left")

    def variance(self, t):
        """Greenwood variance of S(t)."""
        return self._lookup(self.greenwood_variance, 0.0, t, "right")


def _check(times, events):
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    if times.ndim != 1 or times.shape != events.shape:
        raise DataError("times and events must be 1-D sequences of equal length")
    if len(times) == 0:
        raise DataError("need at least one observation")
    if not np.all(np.isfinite(times)):
        raise DataError("times must be finite")
    return times, events


def _product_limit(uniq, n_risk, d):
    keep = d > 0
    uniq, n_risk, d = uniq[keep], n_risk[keep].astype(float), d[keep].astype(float)
    surv = np.cumprod(1.0 - d / n_risk)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(n_risk > d, d / (n_risk * (n_risk - d)), 0.0)
    var = surv**2 * np.cumsum(terms)
    var[surv <= 0] = 0.0
    surv[surv < 0] = 0.0
    return KaplanMeierCurve(uniq, surv, var, n_risk.astype(np.int64), d.astype(np.int64))


def kaplan_meier(times, events) -> KaplanMeierCurve:
    """Product-limit survival estimate.

    Examples
    --------
    >>> km = kaplan_meier([1, 2, 3], [1, 0, 1])
    >>> round(km(1), 6), km(3)
    (0.666667, 0.0)
    """
    times, events = _check(times, events)
    uniq, inv = np.unique(times, return_inverse=True)
    d = np.bincount(inv, weights=events, minlength=len(uniq))
    n_at = np.bincount(inv, minlength=len(uniq))
    n_risk = np.cumsum(n_at[::-1])[::-1]
    return _product_limit(uniq, n_risk, d)


def censoring_survival(times, events) -> KaplanMeierCurve:
    """Reverse Kaplan-Meier estimate G(t) of remaining uncensored.

    Censorings are the "events". At a tied time, events are taken to occur
    before censorings, so subjects with an event at ``t`` have already left
    the censoring risk set at ``t``.
    """
    times, events = _check(times, events)
    uniq, inv = np.unique(times, return_inverse=True)
    cens = np.bincount(inv, weights=~events, minlength=len(uniq))
    evt = np.bincount(inv, weights=events, minlength=len(uniq))
    n_at = np.bincount(inv, minlength=len(uniq))
    n_risk = np.cumsum(n_at[::-1])[::-1] - evt
    return _product_limit(uniq, n_risk, cens)
