"""Cox proportional hazards regression with Breslow ties.

The partial likelihood is maximised by Newton-Raphson with step halving.
Risk-set sums are computed with reverse cumulative sums over the
time-sorted data, so one likelihood/gradient/information evaluation costs
O(n p^2) and never materialises an n x p x p array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import Cohort, LocationMap
from .errors import ConfigError, ConvergenceError, DataError, RankError, UnfitError

__all__ = [
    "BaselineHazard",
    "CoxFit",
    "DesignMatrix",
    "RiskSets",
    "breslow_baseline",
    "encode_design",
    "fit_cox",
    "partial_loglik_and_gradient",
    "predict_risk",
]


# ------------------------------------------------------------------ design

@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    column_names: list
    covariates: list = field(default_factory=list)
    location_columns: list = field(default_factory=list)
    reference_group: str | None = None
    location_map: LocationMap | None = None

    @property
    def shape(self):
        return self.values.shape


def encode_design(cohort: Cohort, covariates, location_map: LocationMap | None = None) -> DesignMatrix:
    """Numeric design matrix for ``cohort``.

    Booleans and sex are coded 0/1 (female = 0). With a location map, every
    group except the lowest group id gets an indicator column ``loc_<id>``.
    """
    covariates = list(covariates)
    cols = [cohort.covariate(name) for name in covariates]
    names = list(covariates)
    loc_cols, reference = [], None
    if location_map is not None:
        groups = location_map.assign(cohort)
        reference, *others = location_map.groups
        for gid in others:
            cols.append((groups == gid).astype(float))
            names.append(f"loc_{gid}")
            loc_cols.append(f"loc_{gid}")
    values = np.column_stack(cols) if cols else np.zeros((len(cohort), 0))
    return DesignMatrix(values, names, covariates, loc_cols, reference, location_map)


def _as_matrix(design):
    if isinstance(design, DesignMatrix):
        return np.asarray(design.values, dtype=float), list(design.column_names)
    x = np.asarray(design, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x, [f"x{j}" for j in range(x.shape[1])]


# --------------------------------------------------------------- risk sets

class RiskSets:
    """Time ordering and tie structure of a right-censored sample.

    Everything here depends only on (times, events), so it is built once and
    shared by every likelihood evaluation on the same data.
    """

    def __init__(self, times, events):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=bool)
        if times.ndim != 1 or times.shape != events.shape:
            raise DataError("times and events must be 1-D and of equal length")
        if not np.all(np.isfinite(times)):
            raise DataError("times must be finite")
        self.n = len(times)
        self.order = np.argsort(times, kind="stable")
        self.times = times[self.order]
        self.events = events[self.order]
        uniq, first, inv = np.unique(self.times, return_index=True, return_inverse=True)
        d = np.bincount(inv, weights=self.events, minlength=len(uniq))
        self.unique_times = uniq
        self.first = first
        self.inverse = inv
        self.deaths = d
        self.has_event = d > 0
        self.n_events = int(self.events.sum())

    def sort(self, a):
        return np.asarray(a)[self.order]

    def risk_sums(self, w):
        """Sum of ``w`` (sorted order) over {j : T_j >= t} for every distinct t."""
        rc = np.cumsum(w[::-1], axis=0)[::-1]
        return rc[self.first]


def _evaluate(x, offset, beta, rs, hessian=True):
    """Log partial likelihood, score and observed information (sorted inputs)."""
    eta = offset + (x @ beta if x.shape[1] else 0.0)
    c = eta.max()
    w = np.exp(eta - c)
    s0 = rs.risk_sums(w)
    ev = rs.has_event
    d = rs.deaths[ev]
    ll = float(np.dot(rs.events, eta) - np.dot(d, np.log(s0[ev]) + c))
    if not x.shape[1]:
        return ll, np.zeros(0), np.zeros((0, 0))
    haz = np.zeros(len(s0))
    haz[ev] = d / s0[ev]
    wa = w * np.cumsum(haz)[rs.inverse]
    grad = rs.events @ x - wa @ x
    if not hessian:
        return ll, grad, None
    s1 = rs.risk_sums(w[:, None] * x)[ev] / s0[ev, None]
    s1 *= np.sqrt(d)[:, None]
    info = (x * wa[:, None]).T @ x - s1.T @ s1
    return ll, grad, 0.5 * (info + info.T)


def partial_loglik_and_gradient(design, times, events, beta, offset=None):
    """Breslow log partial likelihood and its gradient at ``beta``.

    Examples
    --------
    >>> import numpy as np
    >>> ll, g = partial_loglik_and_gradient(np.zeros((3, 0)), [1, 2, 3], [1, 1, 1], [])
    >>> round(ll, 5)
    -1.79176
    """
    x, _ = _as_matrix(design)
    rs = RiskSets(times, events)
    beta = np.asarray(beta, dtype=float).reshape(x.shape[1])
    off = np.zeros(rs.n) if offset is None else rs.sort(np.asarray(offset, dtype=float))
    ll, grad, _ = _evaluate(x[rs.order], off, beta, rs, hessian=False)
    return ll, grad


# ----------------------------------------------------------------- baseline

@dataclass(frozen=True, eq=False)
class BaselineHazard:
    """Right-continuous step function H0(t) with jumps at ``times``."""

    times: np.ndarray
    cumhaz: np.ndarray

    def __call__(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        out = np.concatenate(([0.0], self.cumhaz))[idx]
        return out if np.ndim(t) else float(out)

    def to_dict(self):
        return {"times": self.times.tolist(), "cumhaz": self.cumhaz.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["times"], dtype=float), np.asarray(d["cumhaz"], dtype=float))


def _breslow(x, offset, beta, rs):
    eta = offset + (x @ beta if x.shape[1] else 0.0)
    c = eta.max() if len(eta) else 0.0
    s0 = rs.risk_sums(np.exp(eta - c))
    ev = rs.has_event
    jumps = rs.deaths[ev] / s0[ev] * np.exp(-c)
    return BaselineHazard(rs.unique_times[ev].copy(), np.cumsum(jumps))


def breslow_baseline(design, times, events, beta, offset=None) -> BaselineHazard:
    """Breslow estimate H0(t) = sum over event times <= t of d / sum_{risk set} exp(eta)."""
    x, _ = _as_matrix(design)
    rs = RiskSets(times, events)
    off = np.zeros(rs.n) if offset is None else rs.sort(np.asarray(offset, dtype=float))
    return _breslow(x[rs.order], off, np.asarray(beta, dtype=float).reshape(x.shape[1]), rs)


# ---------------------------------------------------------------------- fit

@dataclass(frozen=True, eq=False)
class CoxFit:
    beta: np.ndarray
    covariance: np.ndarray
    baseline_cumhaz: BaselineHazard
    log_partial_likelihood: float
    iterations: int
    converged: bool
    column_names: list = field(default_factory=list)

    @property
    def standard_errors(self):
        return np.sqrt(np.diag(self.covariance))

    def linear_predictor(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != len(self.beta):
            raise ConfigError(f"covariate dimension {x.shape[-1]} does not match "
                              f"{len(self.beta)} coefficients")
        return x @ self.beta

    def to_dict(self):
        return {
            "column_names": list(self.column_names),
            "beta": self.beta.tolist(),
            "covariance": self.covariance.tolist(),
            "baseline_cumhaz": self.baseline_cumhaz.to_dict(),
            "log_partial_likelihood": self.log_partial_likelihood,
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d):
        p = len(d["beta"])
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            covariance=np.asarray(d["covariance"], dtype=float).reshape(p, p),
            baseline_cumhaz=BaselineHazard.from_dict(d["baseline_cumhaz"]),
            log_partial_likelihood=float(d["log_partial_likelihood"]),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            column_names=list(d["column_names"]),
        )


def _rank_problem(x, info, names):
    const = [names[j] for j in range(x.shape[1]) if np.ptp(x[:, j]) == 0]
    if const:
        return const
    vals, vecs = np.linalg.eigh(info)
    null = vals <= 1e-10 * max(vals.max(), 1.0)
    if not null.any():
        return []
    weight = np.abs(vecs[:, null]).max(axis=1)
    return [names[j] for j in np.flatnonzero(weight > 0.1)]


def fit_cox(design, times, events, *, offset=None, tol=1e-9, grad_tol=1e-8, max_iter=100,
            max_halvings=20, init=None, ties="breslow", _risk_sets=None) -> CoxFit:
    """Fit a Cox model by Newton-Raphson on the Breslow partial likelihood.

    Parameters
    ----------
    design : DesignMatrix or array, shape (n, p)
    times, events : array-like, shape (n,)
    offset : array-like, shape (n,), optional
        Fixed term added to the linear predictor (enters the baseline hazard
        estimate as well).
    tol : float
        Convergence on the relative change of the log partial likelihood.
    grad_tol : float
        Convergence on the max-norm of the score.

    Returns
    -------
    CoxFit
        ``covariance`` is the inverse observed information at the optimum.

    Raises
    ------
    UnfitError
        No events.
    RankError
        Information matrix singular; ``columns`` names the offending columns.
    ConvergenceError
        ``max_iter`` reached; ``last`` holds the final iterate.
    """
    if ties != "breslow":
        raise ConfigError("only Breslow ties are supported")
    x, names = _as_matrix(design)
    rs = _risk_sets if _risk_sets is not None else RiskSets(times, events)
    if x.shape[0] != rs.n:
        raise DataError(f"design has {x.shape[0]} rows but {rs.n} observations")
    if rs.n_events == 0:
        raise UnfitError("cannot fit a Cox model without events")
    xs = x[rs.order]
    off = np.zeros(rs.n) if offset is None else rs.sort(np.asarray(offset, dtype=float))
    p = x.shape[1]
    beta = np.zeros(p) if init is None else np.array(init, dtype=float)

    if p:
        bad = [names[j] for j in range(p) if np.ptp(xs[:, j]) == 0]
        if bad:
            raise RankError(f"constant design columns: {bad}", bad)

    ll, grad, info = _evaluate(xs, off, beta, rs)
    converged = p == 0
    it = 0
    while not converged and it < max_iter:
        if np.max(np.abs(grad)) < grad_tol:
            converged = True
            break
        it += 1
        try:
            chol = np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            cols = _rank_problem(xs, info, names)
            raise RankError(f"singular information matrix; offending columns: {cols}", cols) from None
        step = np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
        scale = 1.0
        for _ in range(max_halvings + 1):
            cand = beta + scale * step
            ll_new, grad_new, info_new = _evaluate(xs, off, cand, rs)
            if np.isfinite(ll_new) and ll_new >= ll:
                break
            scale *= 0.5
        else:
            # no ascent possible along the Newton direction: at numerical optimum
            converged = True
            break
        change = abs(ll_new - ll)
        beta, ll, grad, info = cand, ll_new, grad_new, info_new
        if change <= tol * max(abs(ll), 1.0):
            converged = True
    if not converged:
        raise ConvergenceError(f"Newton-Raphson did not converge in {max_iter} iterations",
                               last=beta)
    if p:
        try:
            cov = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            cols = _rank_problem(xs, info, names)
            raise RankError(f"singular information matrix; offending columns: {cols}", cols) from None
        cov = 0.5 * (cov + cov.T)
    else:
        cov = np.zeros((0, 0))
    return CoxFit(
        beta=beta,
        covariance=cov,
        baseline_cumhaz=_breslow(xs, off, beta, rs),
        log_partial_likelihood=ll,
        iterations=it,
        converged=True,
        column_names=names,
    )


def cumulative_hazard(fit: CoxFit, x, t):
    """H(t | x) = H0(t) exp(beta' x)."""
    return fit.baseline_cumhaz(t) * np.exp(fit.linear_predictor(x))


def predict_risk(fit: CoxFit, x, horizon):
    """Absolute risk 1 - exp(-H0(t) exp(beta' x)) at ``horizon`` days."""
    lp = fit.linear_predictor(x)
    risk = -np.expm1(-fit.baseline_cumhaz(horizon) * np.exp(lp))
    return float(risk[0]) if np.ndim(x) == 1 else risk
