"""Fitted risk models behind one interface, with JSON persistence.

Four model kinds are supported:

``baseline``
    Cox model on the classic pooled-cohort covariates.
``fixed_effects``
    Cox model adding CKD, RA and one indicator per non-reference location
    group.
``frailty``
    Shared gamma frailty Cox model with location groups as clusters.
``boosted``
    Gradient-boosted Cox model on all covariates plus the location group as
    an integer code.

Every model exposes ``risk(cohort, horizon)`` and ``expected_hazard(cohort)``
(the cumulative hazard at each subject's observed time).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .boosting import BoostConfig, BoostedModel, train_boosted
from .cohort import Cohort, LocationMap, merge_locations
from .cox import CoxFit, encode_design, fit_cox
from .errors import ConfigError, DataError
from .frailty import FrailtyFit, fit_gamma_frailty

__all__ = [
    "MODEL_KINDS", "PCE_COVARIATES", "REVISED_COVARIATES", "SCHEMA_VERSION", "RiskModel",
    "fit_model", "boost_features", "load_model", "save_model", "model_to_dict", "model_from_dict",
]

SCHEMA_VERSION = 1
MODEL_KINDS = ("baseline", "fixed_effects", "frailty", "boosted")
PCE_COVARIATES = ("age", "sex", "hdl", "total_cholesterol", "hypertension", "diabetes",
                  "smoker", "antihypertensive")
REVISED_COVARIATES = PCE_COVARIATES + ("ckd", "ra")
LOCATION_FEATURE = "location"


def _covariate_matrix(cohort: Cohort, covariates, location_map=None):
    try:
        return encode_design(cohort, covariates, location_map).values
    except ConfigError as exc:
        raise ConfigError(f"cannot resolve model covariate from cohort: {exc}") from None


def boost_features(cohort: Cohort, covariates, location_map: LocationMap | None):
    """Feature matrix for the boosted model; the location group is integer-coded."""
    x = _covariate_matrix(cohort, covariates)
    names = list(covariates)
    if location_map is not None:
        codes = {g: i for i, g in enumerate(location_map.groups)}
        groups = location_map.assign(cohort)
        x = np.column_stack([x, [codes[g] for g in groups]])
        names.append(LOCATION_FEATURE)
    return x, names


@dataclass(frozen=True, eq=False)
class RiskModel:
    """A fitted model of one of :data:`MODEL_KINDS`."""

    kind: str
    covariates: tuple
    fit: object
    location_map: LocationMap | None = None

    def _lp(self, cohort: Cohort) -> np.ndarray:
        """Linear predictor / boosting score, including any location effect."""
        if self.kind == "boosted":
            x, _ = boost_features(cohort, self.covariates, self.location_map)
            return self.fit.score(x)
        if self.kind == "fixed_effects":
            return self.fit.linear_predictor(
                _covariate_matrix(cohort, self.covariates, self.location_map))
        x = _covariate_matrix(cohort, self.covariates)
        lp = self.fit.linear_predictor(x)
        if self.kind == "frailty":
            lp = lp + np.log(self.fit.frailty_of(self.location_map.assign(cohort)))
        return lp

    def expected_hazard(self, cohort: Cohort) -> np.ndarray:
        """Model cumulative hazard at each subject's own observed time."""
        return self.fit.baseline_cumhaz(cohort.time) * np.exp(self._lp(cohort))

    def hazard_parts(self, cohort: Cohort):
        """(linear predictor, baseline cumulative hazard at each observed time)."""
        return self._lp(cohort), self.fit.baseline_cumhaz(cohort.time)

    def risk(self, cohort: Cohort, horizon: float) -> np.ndarray:
        """Predicted probability of an event by ``horizon`` days."""
        return -np.expm1(-self.fit.baseline_cumhaz(float(horizon)) * np.exp(self._lp(cohort)))


def _location_map_for(train: Cohort, location_map, min_size):
    return location_map if location_map is not None else merge_locations(train, min_size)


def fit_model(kind: str, train: Cohort, *, location_map: LocationMap | None = None,
              valid: Cohort | None = None, boost_config: BoostConfig | None = None,
              min_location_size: int = 3000, covariates=None) -> RiskModel:
    """Fit a model of the given kind on ``train``.

    ``location_map`` defaults to merging the training cohort's zip3 groups
    to ``min_location_size``. The boosted kind needs a ``valid`` cohort
    for early stopping.
    """
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    if covariates is None:
        covariates = PCE_COVARIATES if kind == "baseline" else REVISED_COVARIATES
    covariates = tuple(covariates)
    t, e = train.time, train.event
    if kind == "baseline":
        fit = fit_cox(encode_design(train, covariates), t, e)
        return RiskModel(kind, covariates, fit)
    lmap = _location_map_for(train, location_map, min_location_size)
    if kind == "fixed_effects":
        fit = fit_cox(encode_design(train, covariates, lmap), t, e)
    elif kind == "frailty":
        fit = fit_gamma_frailty(encode_design(train, covariates), t, e, lmap.assign(train))
    else:
        if valid is None:
            raise ConfigError("the boosted model needs a validation cohort for early stopping")
        xt, names = boost_features(train, covariates, lmap)
        xv, _ = boost_features(valid, covariates, lmap)
        fit = train_boosted(xt, t, e, xv, valid.time, valid.event, boost_config, names)
    return RiskModel(kind, covariates, fit, lmap)


# ------------------------------------------------------------ persistence

_FIT_TYPES = {"baseline": CoxFit, "fixed_effects": CoxFit, "frailty": FrailtyFit,
              "boosted": BoostedModel}


def model_to_dict(model: RiskModel) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": model.kind,
        "covariates": list(model.covariates),
        "location_map": None if model.location_map is None else model.location_map.to_dict(),
        "fit": model.fit.to_dict(),
    }


def model_from_dict(d: dict) -> RiskModel:
    try:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported model schema_version {d.get('schema_version')!r}")
        kind = d["kind"]
        if kind not in _FIT_TYPES:
            raise DataError(f"unknown model kind {kind!r}")
        lmap = None if d["location_map"] is None else LocationMap.from_dict(d["location_map"])
        fit = _FIT_TYPES[kind].from_dict(d["fit"])
        return RiskModel(kind, tuple(d["covariates"]), fit, lmap)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed model document: {exc!r}") from None


def save_model(model: RiskModel, path, extra: dict | None = None) -> None:
    doc = model_to_dict(model)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_model(path) -> RiskModel:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read model file {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc.msg})") from None
    return model_from_dict(doc)
