"""Shared gamma frailty Cox model fitted by EM with a profile likelihood for theta.

Within location ``g`` the hazard is ``Z_g h0(t) exp(beta' x)`` with
``Z_g ~ Gamma(mean 1, variance theta)``. For fixed theta the EM alternates

* E-step: ``Z_g = (1/theta + D_g) / (1/theta + sum_{j in g} H0(T_j) exp(beta' x_j))``
* M-step: Cox fit with ``log Z_g`` as offset, Breslow baseline.

theta itself maximises the profile marginal log-likelihood (golden-section
search). The marginal log-likelihood for a group, with ``a = 1/theta`` and
``L_g`` the summed cumulative hazard, is
``a log a - log Gamma(a) + log Gamma(a + D_g) - (a + D_g) log(a + L_g)``;
it is evaluated in a cancellation-free form so that theta near 0 is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cox import BaselineHazard, RiskSets, _as_matrix, fit_cox
from .errors import ConfigError, ConvergenceError, DataError, UnfitError

__all__ = ["FrailtyFit", "fit_gamma_frailty", "predict_risk_frailty", "e_step"]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class FrailtyFit:
    beta: np.ndarray
    theta: float
    frailty_means: dict
    baseline_cumhaz: BaselineHazard
    marginal_loglik: float
    converged: bool
    covariance: np.ndarray = None
    column_names: list = field(default_factory=list)
    boundary: bool = False
    em_iterations: int = 0
    profile: list = field(default_factory=list)

    def linear_predictor(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != len(self.beta):
            raise ConfigError(f"covariate dimension {x.shape[-1]} does not match "
                              f"{len(self.beta)} coefficients")
        return x @ self.beta

    def frailty_of(self, groups):
        """Posterior mean frailty per entry of ``groups``; unknown or None -> 1."""
        return np.array([self.frailty_means.get(str(g), 1.0) if g is not None else 1.0
                         for g in groups], dtype=float)

    def to_dict(self):
        return {
            "column_names": list(self.column_names),
            "beta": self.beta.tolist(),
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "theta": self.theta,
            "frailty_means": {str(k): v for k, v in sorted(self.frailty_means.items())},
            "baseline_cumhaz": self.baseline_cumhaz.to_dict(),
            "marginal_loglik": self.marginal_loglik,
            "converged": self.converged,
            "boundary": self.boundary,
            "em_iterations": self.em_iterations,
        }

    @classmethod
    def from_dict(cls, d):
        p = len(d["beta"])
        cov = d.get("covariance")
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            theta=float(d["theta"]),
            frailty_means={k: float(v) for k, v in d["frailty_means"].items()},
            baseline_cumhaz=BaselineHazard.from_dict(d["baseline_cumhaz"]),
            marginal_loglik=float(d["marginal_loglik"]),
            converged=bool(d["converged"]),
            covariance=None if cov is None else np.asarray(cov, dtype=float).reshape(p, p),
            column_names=list(d["column_names"]),
            boundary=bool(d.get("boundary", False)),
            em_iterations=int(d.get("em_iterations", 0)),
        )


def e_step(theta, group_events, group_cumhaz):
    """Posterior frailty means ``(1/theta + D) / (1/theta + L)``; all ones when theta is 0."""
    group_events = np.asarray(group_events, dtype=float)
    group_cumhaz = np.asarray(group_cumhaz, dtype=float)
    if theta == 0:
        return np.ones_like(group_cumhaz)
    a = 1.0 / theta
    return (a + group_events) / (a + group_cumhaz)


class _Problem:
    """Sorted data and group bookkeeping shared by all EM runs."""

    def __init__(self, x, times, events, groups):
        self.rs = RiskSets(times, events)
        labels, gidx = np.unique(np.asarray(groups).astype(str), return_inverse=True)
        self.labels = labels.tolist()
        self.x = x
        self.xs = x[self.rs.order]
        self.gidx = gidx
        self.gidx_sorted = gidx[self.rs.order]
        self.n_groups = len(labels)
        self.group_events = np.bincount(self.gidx_sorted, weights=self.rs.events,
                                        minlength=self.n_groups)
        d = self.group_events.astype(np.int64)
        self.m_values = np.concatenate([np.arange(k, dtype=float) for k in d]) if d.sum() else np.zeros(0)
        self.m_group = np.repeat(np.arange(self.n_groups), d)
        self.event_lp_rows = self.rs.events

    def group_cumhaz(self, beta, h0):
        lp = self.xs @ beta if self.xs.shape[1] else np.zeros(self.rs.n)
        hj = h0(self.rs.times) * np.exp(lp)
        return np.bincount(self.gidx_sorted, weights=hj, minlength=self.n_groups)

    def marginal_loglik(self, theta, beta, h0, lam):
        """Marginal log-likelihood with the frailties integrated out."""
        ev = self.rs.events
        lp = self.xs @ beta if self.xs.shape[1] else np.zeros(self.rs.n)
        jumps = np.diff(np.concatenate(([0.0], h0.cumhaz)))
        # log hazard mass at each subject's event time
        pos = np.searchsorted(h0.times, self.rs.times[ev])
        ll = float(np.sum(np.log(jumps[pos])) + np.sum(lp[ev]))
        if theta == 0:
            return ll - float(lam.sum())
        a = 1.0 / theta
        inner = np.log1p((self.m_values - lam[self.m_group]) / (a + lam[self.m_group]))
        ll += float(np.sum(inner)) - float(np.sum(a * np.log1p(lam / a)))
        return ll


@dataclass
class _EMState:
    theta: float
    beta: np.ndarray
    zhat: np.ndarray
    baseline: BaselineHazard
    loglik: float
    iterations: int
    covariance: np.ndarray
    trace: list


def _best_scale(theta, group_events, lam):
    """Factor s maximising the marginal likelihood of the baseline s * H0.

    Uniform rescaling of the baseline against the frailties is the slowest
    direction of the plain EM iteration; the optimum solves
    ``sum_g (a + D_g) s L_g / (a + s L_g) = sum_g D_g`` (monotone in s).
    """
    a = 1.0 / theta
    total = group_events.sum()
    pos = lam > 0
    d, lam = group_events[pos], lam[pos]
    log_s = 0.0
    for _ in range(100):
        sl = np.exp(log_s) * lam
        g = np.sum((a + d) * sl / (a + sl)) - total
        dg = np.sum((a + d) * sl * a / (a + sl) ** 2)
        step = g / dg
        log_s -= float(np.clip(step, -2.0, 2.0))
        if abs(step) < 1e-13:
            break
    return math.exp(log_s)


def _em(problem, theta, beta0, z0, tol, max_iter):
    zhat = np.ones(problem.n_groups) if theta == 0 else np.array(z0, dtype=float)
    beta = np.array(beta0, dtype=float)
    trace = []
    fit = None
    for it in range(1, max_iter + 1):
        offset = np.log(zhat)[problem.gidx]
        fit = fit_cox(problem.x, None, None, offset=offset, init=beta,
                      _risk_sets=problem.rs)
        lam = problem.group_cumhaz(fit.beta, fit.baseline_cumhaz)
        baseline = fit.baseline_cumhaz
        if theta > 0:
            scale = _best_scale(theta, problem.group_events, lam)
            baseline = BaselineHazard(baseline.times, baseline.cumhaz * scale)
            lam = lam * scale
        trace.append(problem.marginal_loglik(theta, fit.beta, baseline, lam))
        new_z = e_step(theta, problem.group_events, lam)
        db = np.max(np.abs(fit.beta - beta)) if len(beta) else 0.0
        dz = np.max(np.abs(np.log(new_z) - np.log(zhat)))
        beta, zhat = fit.beta, new_z
        if theta == 0 or (db < tol and dz < tol):
            return _EMState(theta, beta, zhat, baseline, trace[-1], it,
                            fit.covariance, trace)
    raise ConvergenceError(f"EM did not converge in {max_iter} iterations at theta={theta:g}",
                           last={"theta": theta, "beta": beta, "zhat": zhat})


def fit_gamma_frailty(design, times, events, groups, *, theta=None, bounds=(1e-8, 10.0),
                      theta_tol=1e-6, em_tol=1e-7, max_em_iter=2000) -> FrailtyFit:
    """Fit the shared gamma frailty model.

    Parameters
    ----------
    design : DesignMatrix or array, shape (n, p)
    times, events : array-like, shape (n,)
    groups : array-like, shape (n,)
        Location (cluster) label per subject.
    theta : float, optional
        Hold the frailty variance fixed instead of estimating it. ``theta=0``
        reduces to the ordinary Cox fit.
    bounds : (float, float)
        Search interval for theta.

    Returns
    -------
    FrailtyFit
        ``frailty_means`` maps each group label to its posterior mean
        frailty; ``boundary`` is set when the estimate sits at a search
        bound; ``profile`` lists the (theta, log-likelihood) evaluations.
    """
    x, names = _as_matrix(design)
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=bool)
    groups = np.asarray(groups)
    if not (len(times) == len(events) == len(groups) == x.shape[0]):
        raise DataError("design, times, events and groups must have the same length")
    if not events.any():
        raise UnfitError("cannot fit a frailty model without events")
    problem = _Problem(x, times, events, groups)

    start = fit_cox(x, None, None, _risk_sets=problem.rs)
    cache = {}

    def run(th):
        if th in cache:
            return cache[th]
        if cache:
            near = min(cache, key=lambda k: abs(k - th))
            b0, z0 = cache[near].beta, cache[near].zhat
        else:
            b0, z0 = start.beta, np.ones(problem.n_groups)
        cache[th] = _em(problem, th, b0, z0, em_tol, max_em_iter)
        return cache[th]

    if theta is not None:
        if theta < 0:
            raise ConfigError("theta must be >= 0")
        best = run(float(theta))
        boundary = False
    else:
        lo, hi = map(float, bounds)
        if not (0 <= lo < hi):
            raise ConfigError("theta bounds must satisfy 0 <= low < high")
        a, b = lo, hi
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        fc, fd = run(c).loglik, run(d).loglik
        while b - a > theta_tol:
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - _GOLDEN * (b - a)
                fc = run(c).loglik
            else:
                a, c, fc = c, d, fd
                d = a + _GOLDEN * (b - a)
                fd = run(d).loglik
        mid = 0.5 * (a + b)
        for edge in (lo, hi):
            run(edge)
        best = max((run(mid), cache[lo], cache[hi]), key=lambda s: s.loglik)
        boundary = best.theta - lo <= 2 * theta_tol or hi - best.theta <= 2 * theta_tol

    return FrailtyFit(
        beta=best.beta,
        theta=best.theta,
        frailty_means=dict(zip(problem.labels, best.zhat.tolist())),
        baseline_cumhaz=best.baseline,
        marginal_loglik=best.loglik,
        converged=True,
        covariance=best.covariance,
        column_names=names,
        boundary=bool(boundary),
        em_iterations=best.iterations,
        profile=sorted((k, v.loglik) for k, v in cache.items()),
    )


def predict_risk_frailty(fit: FrailtyFit, x, horizon, group=None):
    """Risk ``1 - exp(-Z H0(t) exp(beta' x))`` using the group's posterior mean Z.

    ``group`` may be a single label or one label per row of ``x``; a missing
    or unseen group uses Z = 1.
    """
    lp = fit.linear_predictor(x)
    if group is None or np.ndim(group) == 0:
        z = np.full(len(lp), fit.frailty_of([group])[0])
    else:
        z = fit.frailty_of(list(group))
    risk = -np.expm1(-z * fit.baseline_cumhaz(horizon) * np.exp(lp))
    return float(risk[0]) if np.ndim(x) == 1 else risk
