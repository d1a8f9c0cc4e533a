"""Evaluation workflows: overall and subgroup reports, model comparison, tuning.

A report never aborts because one metric fails: the metric is set to
``None`` and the reason recorded under ``undefined``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .boosting import BoostConfig, _check_xy, train_boosted
from .calibration import (DEFAULT_THRESHOLDS, calibration_line, calibration_plot_data,
                          decision_curve, gnd_test, nb_difference_to_counts, observed_expected)
from .cohort import BOOL_FIELDS, FIVE_YEARS_DAYS, Cohort, LocationMap
from .concordance import harrell_c
from .errors import ConfigError, DataError, NumericalError
from .models import REVISED_COVARIATES, RiskModel, boost_features

__all__ = [
    "MIN_SUBGROUP_SIZE", "SubgroupSpec", "EvaluationReport", "ComparisonReport",
    "evaluate_model", "evaluate_subgroups", "compare_models", "tune_boost_hyperparameters",
    "threshold_key",
]

MIN_SUBGROUP_SIZE = 50
SUBGROUP_KINDS = ("ckd", "ra", "location", "flag")


def threshold_key(t: float) -> str:
    """Field suffix for a threshold: 0.025 -> '0025', 0.1 -> '01'."""
    return repr(float(t)).replace(".", "").replace("-", "m")


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


@dataclass
class EvaluationReport:
    model_id: str
    group_id: str
    n: int
    events_at_horizon: int
    horizon: float
    thresholds: tuple
    c_index: float | None = None
    c_low: float | None = None
    c_high: float | None = None
    n_usable_pairs: int | None = None
    oe: float | None = None
    oe_low: float | None = None
    oe_high: float | None = None
    gnd_stat: float | None = None
    gnd_df: int | None = None
    gnd_p: float | None = None
    cal_intercept: float | None = None
    cal_intercept_ci: tuple | None = None
    cal_slope: float | None = None
    cal_slope_ci: tuple | None = None
    net_benefit: dict = field(default_factory=dict)
    undefined: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    bins: object = None
    curve: object = None

    def nb(self, threshold: float):
        return self.net_benefit.get(float(threshold))

    def to_dict(self) -> dict:
        d = {
            "model_id": self.model_id, "group_id": self.group_id, "n": self.n,
            "events_at_horizon": self.events_at_horizon, "horizon_days": self.horizon,
            "c_index": _num(self.c_index), "c_low": _num(self.c_low), "c_high": _num(self.c_high),
            "thresholds": list(self.thresholds), "n_usable_pairs": self.n_usable_pairs,
            "oe": _num(self.oe), "oe_low": _num(self.oe_low), "oe_high": _num(self.oe_high),
            "gnd_stat": _num(self.gnd_stat), "gnd_df": self.gnd_df, "gnd_p": _num(self.gnd_p),
            "cal_intercept": _num(self.cal_intercept),
            "cal_intercept_ci": None if self.cal_intercept_ci is None
            else [_num(v) for v in self.cal_intercept_ci],
            "cal_slope": _num(self.cal_slope),
            "cal_slope_ci": None if self.cal_slope_ci is None
            else [_num(v) for v in self.cal_slope_ci],
        }
        for t in self.thresholds:
            d[f"nb_{threshold_key(t)}"] = _num(self.net_benefit.get(float(t)))
        d["undefined"] = dict(sorted(self.undefined.items()))
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        """Rebuild the scalar parts of a report (plot data is not serialized)."""
        try:
            thresholds = tuple(float(t) for t in d["thresholds"])
            ci = lambda v: None if v is None else tuple(v)  # noqa: E731
            return cls(
                model_id=d["model_id"], group_id=d["group_id"], n=int(d["n"]),
                events_at_horizon=int(d["events_at_horizon"]), horizon=float(d["horizon_days"]),
                thresholds=thresholds, c_index=d["c_index"], c_low=d["c_low"],
                c_high=d["c_high"], n_usable_pairs=d["n_usable_pairs"], oe=d["oe"],
                oe_low=d["oe_low"], oe_high=d["oe_high"], gnd_stat=d["gnd_stat"],
                gnd_df=d["gnd_df"], gnd_p=d["gnd_p"], cal_intercept=d["cal_intercept"],
                cal_intercept_ci=ci(d["cal_intercept_ci"]), cal_slope=d["cal_slope"],
                cal_slope_ci=ci(d["cal_slope_ci"]),
                net_benefit={t: d[f"nb_{threshold_key(t)}"] for t in thresholds
                             if d[f"nb_{threshold_key(t)}"] is not None},
                undefined=dict(d.get("undefined", {})), flags=list(d.get("flags", [])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed evaluation report: {exc!r}") from None


def _record(report, name, fn):
    try:
        return fn()
    except (NumericalError, DataError) as exc:
        report.undefined[name] = str(exc)
        return None


def evaluate_model(model: RiskModel, cohort: Cohort, horizon: float = FIVE_YEARS_DAYS,
                   thresholds=DEFAULT_THRESHOLDS, *, model_id: str | None = None,
                   group_id: str = "all", seed: int = 0, n_boot: int = 200,
                   min_size: int = MIN_SUBGROUP_SIZE) -> EvaluationReport:
    """Discrimination, calibration and net-benefit report for one cohort.

    Predictions and expected hazards are computed once and shared by all
    metrics. Cohorts smaller than ``min_size`` get a ``small_sample`` flag
    and no metrics.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if not horizon > 0:
        raise ConfigError("horizon must be positive")
    t, e = cohort.time, cohort.event
    rep = EvaluationReport(model_id or model.kind, group_id, len(cohort),
                           int(np.sum(e & (t <= horizon))), float(horizon), thresholds)
    risk = model.risk(cohort, horizon)
    lp, h0 = model.hazard_parts(cohort)
    expected = h0 * np.exp(lp)
    if len(cohort) < min_size:
        rep.flags.append("small_sample")
        for name in ("c_index", "oe", "gnd", "calibration_line", "net_benefit"):
            rep.undefined[name] = f"subgroup smaller than {min_size} subjects"
        return rep

    c = _record(rep, "c_index", lambda: harrell_c(risk, t, e, horizon, n_boot=n_boot, seed=seed))
    if c is not None:
        rep.c_index, rep.c_low, rep.c_high = c.estimate, c.ci_low, c.ci_high
        rep.n_usable_pairs = c.n_usable_pairs

    oe = observed_expected(e, expected)["all"]
    rep.oe = oe.oe if np.isfinite(oe.oe) else None
    rep.oe_low, rep.oe_high = oe.ci_low, oe.ci_high
    if not oe.defined:
        rep.undefined["oe"] = oe.reason

    g = _record(rep, "gnd", lambda: gnd_test(risk, t, e, horizon))
    if g is not None:
        rep.gnd_stat, rep.gnd_df, rep.gnd_p = g.statistic, g.df, g.p_value

    with np.errstate(divide="ignore"):
        log_h0 = np.log(h0)
    line = _record(rep, "calibration_line", lambda: calibration_line(e, lp, log_h0))
    if line is not None:
        rep.cal_intercept, rep.cal_intercept_ci = line.intercept, line.intercept_ci
        rep.cal_slope, rep.cal_slope_ci = line.slope, line.slope_ci
        if line.n_excluded:
            rep.flags.append(f"calibration_line_excluded={line.n_excluded}")

    curve = _record(rep, "net_benefit", lambda: decision_curve(risk, t, e, horizon, thresholds))
    if curve is not None:
        rep.curve = curve
        rep.net_benefit = {float(p): float(v) for p, v in zip(curve.thresholds, curve.nb_model)}
        for p, k in zip(curve.thresholds, curve.n_treated):
            if k == 0:
                rep.flags.append(f"no_treated_at_{threshold_key(p)}")
    rep.bins = calibration_plot_data(risk, t, e, horizon)
    return rep


# --------------------------------------------------------------- subgroups

@dataclass(frozen=True)
class SubgroupSpec:
    """How to partition a cohort: by CKD, RA, location group or any boolean flag."""

    kind: str
    location_map: LocationMap | None = None
    flag: str | None = None

    def __post_init__(self):
        if self.kind not in SUBGROUP_KINDS:
            raise ConfigError(f"unknown subgroup kind {self.kind!r}")
        if self.kind == "location" and self.location_map is None:
            raise ConfigError("location subgroups need a location map")
        if self.kind == "flag" and self.flag not in BOOL_FIELDS:
            raise ConfigError(f"flag subgroups need one of {', '.join(BOOL_FIELDS)}")

    def labels(self, cohort: Cohort) -> np.ndarray:
        if self.kind == "location":
            return np.array([f"loc={g}" for g in self.location_map.assign(cohort)], dtype=object)
        name = self.flag if self.kind == "flag" else self.kind
        values = getattr(cohort, name)
        return np.array([f"{name}={int(v)}" for v in values], dtype=object)


def evaluate_subgroups(model: RiskModel, cohort: Cohort, spec: SubgroupSpec,
                       horizon: float = FIVE_YEARS_DAYS, thresholds=DEFAULT_THRESHOLDS, *,
                       model_id: str | None = None, seed: int = 0, n_boot: int = 200,
                       min_size: int = MIN_SUBGROUP_SIZE) -> list:
    """One report per non-empty subgroup, in sorted label order."""
    labels = spec.labels(cohort)
    out = []
    for label in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == label)
        sub = cohort.subset(idx, provenance=f"{cohort.provenance}[{label}]")
        out.append(evaluate_model(model, sub, horizon, thresholds, model_id=model_id,
                                  group_id=label, seed=seed, n_boot=n_boot, min_size=min_size))
    return out


# -------------------------------------------------------------- comparison

@dataclass
class ComparisonReport:
    baseline_id: str
    revised_id: str
    thresholds: tuple
    rows: list
    summary: dict

    def to_dict(self) -> dict:
        return {"baseline_id": self.baseline_id, "revised_id": self.revised_id,
                "thresholds": list(self.thresholds), "rows": self.rows, "summary": self.summary}

    def csv_columns(self) -> list:
        return (["group_id", "delta_c", "oe_impr", "alpha_impr", "slope_impr"]
                + [f"dnb_{threshold_key(t)}" for t in self.thresholds])


def _diff(a, b):
    return None if a is None or b is None else float(b - a)


def _impr(base, rev, ideal):
    if base is None or rev is None:
        return None
    return float(abs(base - ideal) - abs(rev - ideal))


def _summary(values):
    v = np.array([x for x in values if x is not None], dtype=float)
    if not len(v):
        return None
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)), n=int(len(v)))


def compare_models(baseline, revised) -> ComparisonReport:
    """Per-group deltas of a revised model against a baseline.

    ``delta_c`` and ``dnb_*`` are revised minus baseline; calibration
    improvements are ``|base - ideal| - |revised - ideal|`` with ideals 1
    (O/E), 0 (intercept) and 1 (slope), so positive always favours the
    revised model.
    """
    base = [baseline] if isinstance(baseline, EvaluationReport) else list(baseline)
    rev = [revised] if isinstance(revised, EvaluationReport) else list(revised)
    bmap = {r.group_id: r for r in base}
    rmap = {r.group_id: r for r in rev}
    if len(bmap) != len(base) or len(rmap) != len(rev):
        raise DataError("duplicate group ids in evaluation reports")
    if set(bmap) != set(rmap):
        missing = sorted(set(bmap) ^ set(rmap))
        raise DataError(f"group ids differ between reports: {', '.join(missing)}")
    thresholds = base[0].thresholds if base else ()
    if any(r.thresholds != thresholds for r in base + rev):
        raise DataError("reports were computed at different thresholds")

    rows = []
    for gid in sorted(bmap):
        b, r = bmap[gid], rmap[gid]
        row = {
            "group_id": gid,
            "delta_c": _diff(b.c_index, r.c_index),
            "oe_impr": _impr(b.oe, r.oe, 1.0),
            "alpha_impr": _impr(b.cal_intercept, r.cal_intercept, 0.0),
            "slope_impr": _impr(b.cal_slope, r.cal_slope, 1.0),
        }
        counts = {}
        for t in thresholds:
            key = threshold_key(t)
            d = _diff(b.nb(t), r.nb(t))
            row[f"dnb_{key}"] = d
            if d is not None:
                counts[key] = nb_difference_to_counts(r.nb(t), b.nb(t), t)
        row["counts"] = counts
        rows.append(row)
    cols = ["delta_c", "oe_impr", "alpha_impr", "slope_impr"] + \
        [f"dnb_{threshold_key(t)}" for t in thresholds]
    summary = {c: _summary(row[c] for row in rows) for c in cols}
    return ComparisonReport(base[0].model_id if base else "", rev[0].model_id if rev else "",
                            thresholds, rows, summary)


# ------------------------------------------------------------------ tuning

TUNING_RATE = 0.1
TUNING_TREES = 100
FINAL_RATE = 0.05
FINAL_TREES = 500
_GRID_KEYS = ("min_node", "max_depth", "row_subsample", "col_subsample")


def _candidates(grid):
    """Expand a grid (dict of lists, or list of dicts) into sorted candidate dicts."""
    if isinstance(grid, dict):
        keys = sorted(grid)
        cands = [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    else:
        cands = [dict(c) for c in grid]
    if not cands:
        raise ConfigError("hyperparameter grid is empty")
    for c in cands:
        bad = set(c) - set(_GRID_KEYS)
        if bad:
            raise ConfigError(f"unknown hyperparameter(s) in grid: {', '.join(sorted(bad))}")
    return sorted(cands, key=lambda c: sorted(c.items()))


def tune_boost_hyperparameters(train: Cohort, grid, folds: int = 5, seed: int = 0, *,
                               location_map: LocationMap | None = None,
                               covariates=REVISED_COVARIATES, base: BoostConfig | None = None,
                               return_scores: bool = False):
    """Grid search by K-fold cross-validation of the validation log partial likelihood.

    Each candidate is trained with learning rate 0.1 and at most 100 trees,
    early-stopped on the held-out fold; its score is the mean over folds of
    the best held-out negative log partial likelihood. The lowest score
    wins, ties going to the first candidate in sorted order. The returned
    config carries the winner's tree settings with learning rate 0.05 and
    500 trees.
    """
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    base = base or BoostConfig(seed=seed)
    cands = _candidates(grid)
    x, names = boost_features(train, covariates, location_map)
    t, e = train.time, train.event
    if len(train) < folds:
        raise DataError("fewer subjects than folds")
    fold_of = np.random.default_rng(seed).permutation(len(train)) % folds
    scores = []
    for cand in cands:
        cfg = BoostConfig(**{**base.to_dict(), **cand, "learning_rate": TUNING_RATE,
                             "max_trees": TUNING_TREES, "seed": seed}).validate()
        losses = []
        for k in range(folds):
            va, tr = fold_of == k, fold_of != k
            _check_xy(x[va], t[va], e[va], f"fold {k}")
            model = train_boosted(x[tr], t[tr], e[tr], x[va], t[va], e[va], cfg, names)
            losses.append(float(model.valid_loss[model.n_stages_used]))
        scores.append(float(np.mean(losses)))
    best = int(np.argmin(scores))  # first minimum
    final = BoostConfig(**{**base.to_dict(), **cands[best], "learning_rate": FINAL_RATE,
                           "max_trees": FINAL_TREES, "seed": seed}).validate()
    if return_scores:
        return final, list(zip(cands, scores))
    return final
