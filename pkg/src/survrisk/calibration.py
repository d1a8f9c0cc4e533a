"""Calibration and clinical-utility metrics for horizon risk predictions.

Covers calibration-in-the-large (observed/expected ratios from Poisson
models with a log expected-hazard offset), the calibration line, the
Greenwood-Nam-D'Agostino (GND) goodness-of-fit test, and net benefit /
decision curves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaincc, gammaln

from .errors import (ConfigError, ConvergenceError, DataError, RankError,
                     UndefinedMetricError)
from .estimators import kaplan_meier

__all__ = [
    "DEFAULT_THRESHOLDS", "PoissonFit", "poisson_glm", "GroupOE", "observed_expected",
    "CalibrationLine", "calibration_line", "CalibrationBins", "GndResult", "default_bin_count",
    "risk_bins", "gnd_test", "calibration_plot_data", "net_benefit", "DecisionCurve",
    "decision_curve", "nb_difference_to_counts",
]

DEFAULT_THRESHOLDS = (0.025, 0.0375, 0.1)
Z95 = 1.959963984540054


# ------------------------------------------------------------------ Poisson GLM

@dataclass(frozen=True)
class PoissonFit:
    coef: np.ndarray
    covariance: np.ndarray
    loglik: float
    iterations: int

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _poisson_loglik(y, eta):
    return float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))


def poisson_glm(y, X, offset=None, *, tol=1e-10, max_iter=50) -> PoissonFit:
    """Log-link Poisson regression by iteratively reweighted least squares.

    Parameters
    ----------
    y : array-like, shape (n,)
        Non-negative counts.
    X : array-like, shape (n, p)
        Design matrix; include a column of ones for an intercept.
    offset : array-like, shape (n,), optional
        Known additive term on the log scale.
    tol : float
        Convergence when the relative change in log-likelihood drops below it.

    Returns
    -------
    PoissonFit
        Coefficients with covariance equal to the inverse Fisher information.

    Raises
    ------
    RankError
        If the weighted information matrix is singular.
    ConvergenceError
        If the iteration limit is reached, typically under separation.

    Examples
    --------
    >>> fit = poisson_glm([1, 2, 3], np.ones((3, 1)))
    >>> round(float(np.exp(fit.coef[0])), 12)
    2.0
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if y.shape != (n,) or off.shape != (n,):
        raise DataError("y, X and offset have inconsistent lengths")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise DataError("counts must be finite and non-negative")
    if not np.any(y > 0):
        raise DataError("Poisson model needs at least one positive count")
    if not np.all(np.isfinite(off)):
        raise DataError("offset must be finite")

    # initial working fit around log((y + mean) / 2)
    eta = np.log((y + y.mean()) / 2.0)
    beta = _wls(X, np.exp(eta), eta - off)
    eta = X @ beta + off
    ll = _poisson_loglik(y, eta)
    for it in range(1, max_iter + 1):
        mu = np.exp(eta)
        step = _wls(X, mu, eta - off + (y - mu) / mu) - beta
        for _ in range(30):
            cand = beta + step
            eta_new = X @ cand + off
            ll_new = _poisson_loglik(y, eta_new)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2.0
        converged = abs(ll_new - ll) <= tol * (abs(ll_new) + tol)
        beta, eta, ll = cand, eta_new, ll_new
        if converged:
            info = X.T @ (np.exp(eta)[:, None] * X)
            return PoissonFit(beta, _inverse(info), ll, it)
    raise ConvergenceError(f"Poisson IRLS did not converge in {max_iter} iterations "
                           "(possible separation)", last=beta)


def _wls(X, w, z):
    info = X.T @ (w[:, None] * X)
    try:
        c = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise RankError("Poisson design is singular") from None
    return np.linalg.solve(c.T, np.linalg.solve(c, X.T @ (w * z)))


def _inverse(info):
    try:
        c = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise RankError("Poisson information matrix is singular") from None
    ci = np.linalg.inv(c)
    return ci.T @ ci


# ------------------------------------------------------------ observed/expected

@dataclass(frozen=True)
class GroupOE:
    """Observed/expected ratio for one group.

    ``defined`` is False when the ratio or its interval cannot be formed;
    ``reason`` then says why.
    """

    group: str
    observed: float
    expected: float
    oe: float
    ci_low: float
    ci_high: float
    defined: bool = True
    reason: str = ""


def observed_expected(events, expected, groups=None) -> dict:
    """O/E per group from a Poisson factor model with offset log H.

    Each group gets its own level (no reference category), so
    ``exp(alpha_g)`` is the group's O/E and the Wald interval is built on
    the log scale. The model is fitted on group totals, which are the
    sufficient statistics of the subject-level model.

    Parameters
    ----------
    events : array-like of {0, 1}
    expected : array-like
        Model cumulative hazard at each subject's observed time.
    groups : array-like, optional
        Group label per subject; all subjects form group ``"all"`` if omitted.

    Returns
    -------
    dict
        Group label to :class:`GroupOE`, in sorted label order.

    Examples
    --------
    >>> observed_expected([1, 0, 1], [0.5, 0.5, 1.0])["all"].oe
    1.0
    """
    d = np.asarray(events, dtype=float)
    h = np.asarray(expected, dtype=float)
    if d.shape != h.shape or d.ndim != 1:
        raise DataError("events and expected must be 1-D and of equal length")
    if np.any(h < 0) or not np.all(np.isfinite(h)):
        raise DataError("expected hazards must be finite and non-negative")
    if groups is None:
        labels, inv = np.array(["all"]), np.zeros(len(d), dtype=np.int64)
    else:
        labels, inv = np.unique(np.asarray(groups).astype(str), return_inverse=True)
    obs = np.bincount(inv, weights=d, minlength=len(labels))
    exp_ = np.bincount(inv, weights=h, minlength=len(labels))

    fit_mask = (exp_ > 0) & (obs > 0)
    out = {}
    if fit_mask.any():
        k = int(fit_mask.sum())
        fit = poisson_glm(obs[fit_mask], np.eye(k), np.log(exp_[fit_mask]))
        alpha, se = fit.coef, fit.standard_errors
    fitted = iter(range(int(fit_mask.sum())))
    for g, label in enumerate(labels):
        label = str(label)
        if exp_[g] <= 0:
            out[label] = GroupOE(label, obs[g], exp_[g], np.nan, np.nan, np.nan, False,
                                 "total expected hazard is zero")
        elif obs[g] <= 0:
            out[label] = GroupOE(label, 0.0, exp_[g], 0.0, 0.0, np.nan, False,
                                 "no observed events: log-scale interval undefined")
        else:
            j = next(fitted)
            a = alpha[j]
            out[label] = GroupOE(label, obs[g], exp_[g], float(np.exp(a)),
                                 float(np.exp(a - Z95 * se[j])), float(np.exp(a + Z95 * se[j])))
    return out


# ------------------------------------------------------------- calibration line

@dataclass(frozen=True)
class CalibrationLine:
    intercept: float
    intercept_ci: tuple
    slope: float
    slope_ci: tuple
    n_excluded: int = 0


def calibration_line(events, r, offset=None) -> CalibrationLine:
    """Calibration intercept and slope from ``log E[delta] = alpha + beta * r + offset``.

    Parameters
    ----------
    events : array-like of {0, 1}
    r : array-like
        Regressor. For a proportional hazards model pass the linear
        predictor and ``offset = log H0(T)`` so that ``r + offset`` is the
        log expected hazard ``log H_i(T_i)``; a perfectly calibrated model
        then has intercept 0 and slope 1.
    offset : array-like, optional
        Fixed log-scale term (default 0).

    Subjects with a non-finite ``r`` or ``offset`` (zero expected hazard)
    are excluded and counted in ``n_excluded``.

    Raises
    ------
    RankError
        If ``r`` is constant over the included subjects.
    """
    d = np.asarray(events, dtype=float)
    r = np.asarray(r, dtype=float)
    off = np.zeros_like(r) if offset is None else np.asarray(offset, dtype=float)
    if not (d.shape == r.shape == off.shape) or d.ndim != 1:
        raise DataError("events, r and offset must be 1-D and of equal length")
    keep = np.isfinite(r) & np.isfinite(off)
    d, r, off = d[keep], r[keep], off[keep]
    if len(r) < 2 or np.ptp(r) == 0:
        raise RankError("calibration line needs a non-constant regressor", columns=("r",))
    fit = poisson_glm(d, np.column_stack([np.ones(len(r)), r]), off)
    (a, b), (sa, sb) = fit.coef, fit.standard_errors
    return CalibrationLine(float(a), (float(a - Z95 * sa), float(a + Z95 * sa)),
                           float(b), (float(b - Z95 * sb), float(b + Z95 * sb)),
                           int((~keep).sum()))


# ----------------------------------------------------------------------- GND

@dataclass(frozen=True, eq=False)
class CalibrationBins:
    """Risk groups with Kaplan-Meier observed risk at the horizon.

    ``assignment`` holds each subject's bin index (bins ordered by
    increasing predicted risk).
    """

    count: np.ndarray
    mean_predicted: np.ndarray
    observed_risk: np.ndarray
    variance: np.ndarray
    events: np.ndarray
    assignment: np.ndarray

    @property
    def K(self) -> int:
        return len(self.count)

    @property
    def ci_low(self) -> np.ndarray:
        return np.clip(self.observed_risk - Z95 * np.sqrt(self.variance), 0.0, 1.0)

    @property
    def ci_high(self) -> np.ndarray:
        return np.clip(self.observed_risk + Z95 * np.sqrt(self.variance), 0.0, 1.0)

    def rows(self) -> list:
        """Plot-ready records, one per bin."""
        return [
            {"bin": k, "n": int(self.count[k]), "events": int(self.events[k]),
             "mean_predicted": float(self.mean_predicted[k]),
             "observed_risk": float(self.observed_risk[k]),
             "ci_low": float(self.ci_low[k]), "ci_high": float(self.ci_high[k])}
            for k in range(self.K)
        ]


@dataclass(frozen=True, eq=False)
class GndResult:
    statistic: float
    df: int
    p_value: float
    bins: CalibrationBins


def default_bin_count(n: int) -> int:
    """round(n ** (1/3)), halves rounded up."""
    return int(np.floor(np.cbrt(float(n)) + 0.5))


def _inputs(predictions, times, events, horizon):
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    if not (p.shape == t.shape == e.shape) or p.ndim != 1:
        raise DataError("predictions, times and events must be 1-D and of equal length")
    if not np.all(np.isfinite(p)):
        raise DataError("predictions must be finite")
    if not horizon > 0:
        raise DataError("horizon must be positive")
    return p, t, e


def _quantile_groups(p, K):
    """Bin index per subject: equal-count groups by sorted risk, ties never split."""
    n = len(p)
    order = np.argsort(p, kind="stable")
    sp = p[order]
    cuts = []
    for k in range(1, K):
        b = (k * n) // K
        if 0 < b < n and sp[b - 1] == sp[b]:
            b = int(np.searchsorted(sp, sp[b], side="right"))
        if 0 < b < n and (not cuts or b > cuts[-1]):
            cuts.append(b)
    sorted_bin = np.zeros(n, dtype=np.int64)
    for b in cuts:
        sorted_bin[b:] += 1
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = sorted_bin
    return assignment


def _summarize(p, t, e, horizon, assignment):
    K = int(assignment.max()) + 1
    cols = {k: [] for k in ("count", "mean_predicted", "observed_risk", "variance", "events")}
    for k in range(K):
        m = assignment == k
        km = kaplan_meier(t[m], e[m])
        cols["count"].append(int(m.sum()))
        cols["mean_predicted"].append(float(p[m].mean()))
        cols["observed_risk"].append(1.0 - km(horizon))
        cols["variance"].append(km.variance(horizon))
        cols["events"].append(int(np.sum(e[m] & (t[m] <= horizon))))
    return CalibrationBins(**{k: np.asarray(v) for k, v in cols.items()}, assignment=assignment)


def risk_bins(predictions, times, events, horizon, K=None) -> CalibrationBins:
    """Equal-count risk groups before any merging."""
    p, t, e = _inputs(predictions, times, events, horizon)
    K = default_bin_count(len(p)) if K is None else int(K)
    if K < 1:
        raise ConfigError("bin count must be at least 1")
    return _summarize(p, t, e, horizon, _quantile_groups(p, K))


def _merge_sparse(events_per_bin, min_events):
    """Map old bin -> merged bin so every merged bin has >= ``min_events``.

    Repeatedly takes the sparsest bin (lowest index on ties) and joins it to
    the adjacent bin with fewer events (the lower neighbour on ties).
    """
    blocks = [[k] for k in range(len(events_per_bin))]
    ev = [int(x) for x in events_per_bin]
    while len(ev) > 1 and min(ev) < min_events:
        i = int(np.argmin(ev))
        if i == 0:
            j = 1
        elif i == len(ev) - 1:
            j = i - 1
        else:
            j = i - 1 if ev[i - 1] <= ev[i + 1] else i + 1
        lo, hi = min(i, j), max(i, j)
        blocks[lo:hi + 1] = [blocks[lo] + blocks[hi]]
        ev[lo:hi + 1] = [ev[lo] + ev[hi]]
    mapping = np.empty(len(events_per_bin), dtype=np.int64)
    for new, members in enumerate(blocks):
        mapping[members] = new
    return mapping


def gnd_test(predictions, times, events, horizon, K=None, *, min_events=5) -> GndResult:
    """Greenwood-Nam-D'Agostino calibration test at ``horizon``.

    Subjects are grouped into ``K`` equal-count bins of predicted risk
    (default ``round(N ** (1/3))``); adjacent bins are merged until each has
    at least ``min_events`` events by the horizon. The statistic
    ``sum((KM_k - pbar_k) ** 2 / Var_k)`` is referred to a chi-square
    distribution with (bins - 1) degrees of freedom, where ``KM_k`` is the
    Kaplan-Meier observed risk in bin k and ``Var_k`` its Greenwood variance.

    Raises
    ------
    DataError
        Fewer than 8 subjects.
    UndefinedMetricError
        Fewer than two bins remain after merging, or a bin has zero
        Greenwood variance.
    """
    p, t, e = _inputs(predictions, times, events, horizon)
    if len(p) < 8:
        raise DataError("GND test needs at least 8 subjects")
    raw = risk_bins(p, t, e, horizon, K)
    mapping = _merge_sparse(raw.events, min_events)
    bins = _summarize(p, t, e, horizon, mapping[raw.assignment])
    if bins.K < 2:
        raise UndefinedMetricError(
            f"GND test untestable: fewer than 2 risk bins with >= {min_events} events")
    if np.any(bins.variance <= 0):
        raise UndefinedMetricError("GND test undefined: a risk bin has zero Greenwood variance")
    stat = float(np.sum((bins.observed_risk - bins.mean_predicted) ** 2 / bins.variance))
    df = bins.K - 1
    return GndResult(stat, df, float(gammaincc(df / 2.0, stat / 2.0)), bins)


def calibration_plot_data(predictions, times, events, horizon, K=None) -> CalibrationBins:
    """Unmerged risk bins; ``ci_low``/``ci_high`` give Greenwood 95% intervals."""
    return risk_bins(predictions, times, events, horizon, K)


# --------------------------------------------------------------- net benefit

def _check_threshold(p_t):
    if not 0.0 < p_t < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {p_t}")
    return p_t / (1.0 - p_t)


def _nb(frac_treated, risk_treated, k):
    return frac_treated * risk_treated - frac_treated * (1.0 - risk_treated) * k


def _event_probability(t, e, horizon, mode):
    if mode == "km":
        return 1.0 - kaplan_meier(t, e)(horizon)
    return float(np.mean(e & (t <= horizon)))


def _check_mode(t, e, horizon, mode):
    if mode not in ("km", "binary"):
        raise ConfigError(f"unknown net-benefit mode {mode!r}")
    if mode == "binary" and np.any(~e & (t < horizon)):
        raise DataError("binary mode needs every subject followed to the horizon or failed")


def net_benefit(predictions, times, events, horizon, threshold, mode="km") -> float:
    """Net benefit of treating subjects whose predicted risk exceeds ``threshold``.

    ``NB = TP/N - FP/N * p_t / (1 - p_t)``. In ``"km"`` mode the event
    probability among the treated is ``1 - KM(horizon)`` within the treated
    set, which handles censoring; ``"binary"`` mode counts events by the
    horizon directly and requires complete follow-up. Nobody treated gives
    0.

    Examples
    --------
    >>> pred = [0.9] * 5 + [0.0] * 5
    >>> ev = [1, 1, 1, 0, 0, 1, 0, 0, 0, 0]
    >>> round(net_benefit(pred, [10] * 10, ev, 10, 0.1, mode="binary"), 5)
    0.27778
    """
    p, t, e = _inputs(predictions, times, events, horizon)
    k = _check_threshold(threshold)
    _check_mode(t, e, horizon, mode)
    treated = p > threshold
    if not treated.any():
        return 0.0
    risk = _event_probability(t[treated], e[treated], horizon, mode)
    return float(_nb(treated.mean(), risk, k))


@dataclass(frozen=True, eq=False)
class DecisionCurve:
    """Net benefit over thresholds; ``n_treated == 0`` flags treat-none points."""

    thresholds: np.ndarray
    nb_model: np.ndarray
    nb_treat_all: np.ndarray
    nb_treat_none: np.ndarray
    n_treated: np.ndarray
    event_probability: float

    def rows(self) -> list:
        return [
            {"threshold": float(self.thresholds[i]), "nb_model": float(self.nb_model[i]),
             "nb_treat_all": float(self.nb_treat_all[i]), "nb_treat_none": 0.0,
             "n_treated": int(self.n_treated[i])}
            for i in range(len(self.thresholds))
        ]


def decision_curve(predictions, times, events, horizon, thresholds=DEFAULT_THRESHOLDS,
                   mode="km") -> DecisionCurve:
    """Model, treat-all and treat-none net benefit at each threshold."""
    p, t, e = _inputs(predictions, times, events, horizon)
    thr = np.asarray(thresholds, dtype=float)
    if thr.ndim != 1 or len(thr) == 0:
        raise ConfigError("thresholds must be a non-empty sequence")
    if np.any(np.diff(thr) <= 0):
        raise ConfigError("thresholds must be strictly increasing")
    _check_mode(t, e, horizon, mode)
    pi = _event_probability(t, e, horizon, mode)
    nb, nb_all, n_treated = [], [], []
    for p_t in thr:
        k = _check_threshold(p_t)
        nb.append(net_benefit(p, t, e, horizon, p_t, mode))
        nb_all.append(_nb(1.0, pi, k))
        n_treated.append(int(np.sum(p > p_t)))
    return DecisionCurve(thr, np.array(nb), np.array(nb_all), np.zeros(len(thr)),
                         np.array(n_treated), float(pi))


def nb_difference_to_counts(nb: float, nb0: float, threshold: float) -> dict:
    """Per-1000 extra true positives and avoided false positives for an NB gain.

    Examples
    --------
    >>> c = nb_difference_to_counts(0.004, 0.0, 0.0375)
    >>> round(c["extra_tp_per_1000"], 9), round(c["avoided_fp_per_1000"], 2)
    (4.0, 102.67)
    """
    k = _check_threshold(threshold)
    gain = 1000.0 * (nb - nb0)
    return {"extra_tp_per_1000": gain, "avoided_fp_per_1000": gain / k}
