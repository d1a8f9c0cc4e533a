"""Gradient-boosted Cox model with least-squares regression trees.

Each stage fits a regression tree ``h`` to the working response (the
negative gradient of the log partial likelihood with respect to the current
scores), finds a scalar stage weight ``w`` by line search on the training
loss, and updates ``F <- F + nu * w * h``. Early stopping monitors the
validation negative log partial likelihood.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cox import BaselineHazard, RiskSets, _breslow
from .errors import ConfigError, DataError

__all__ = [
    "BoostConfig",
    "BoostedModel",
    "RegressionTree",
    "fit_tree",
    "line_search_weight",
    "negative_log_pl",
    "predict_risk_boosted",
    "train_boosted",
    "working_response",
]

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class BoostConfig:
    max_trees: int = 500
    learning_rate: float = 0.05
    max_depth: int = 3
    min_node: int = 1000
    row_subsample: float = 0.9
    col_subsample: float = 1.0
    patience: int = 20
    seed: int = 0

    def validate(self, allow_zero_rate: bool = False) -> "BoostConfig":
        if int(self.max_trees) != self.max_trees or self.max_trees < 0:
            raise ConfigError("max_trees must be a non-negative integer")
        lo_ok = self.learning_rate >= 0 if allow_zero_rate else self.learning_rate > 0
        if not (lo_ok and self.learning_rate <= 1):
            raise ConfigError("learning_rate must lie in (0, 1]")
        if int(self.max_depth) != self.max_depth or self.max_depth < 0:
            raise ConfigError("max_depth must be a non-negative integer")
        if int(self.min_node) != self.min_node or self.min_node < 1:
            raise ConfigError("min_node must be a positive integer")
        for name in ("row_subsample", "col_subsample"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if int(self.patience) != self.patience or self.patience < 1:
            raise ConfigError("patience must be a positive integer")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------- loss

def _loss_sorted(f_sorted, rs: RiskSets) -> float:
    c = f_sorted.max()
    s0 = rs.risk_sums(np.exp(f_sorted - c))
    ev = rs.has_event
    return float(np.dot(rs.deaths[ev], np.log(s0[ev]) + c) - np.dot(rs.events, f_sorted))


def negative_log_pl(scores, times, events) -> float:
    """Breslow negative log partial likelihood of per-subject scores."""
    rs = RiskSets(times, events)
    return _loss_sorted(rs.sort(np.asarray(scores, dtype=float)), rs)


def _working_sorted(f_sorted, rs: RiskSets):
    c = f_sorted.max()
    w = np.exp(f_sorted - c)
    s0 = rs.risk_sums(w)
    haz = np.zeros(len(s0))
    ev = rs.has_event
    haz[ev] = rs.deaths[ev] / s0[ev]
    return rs.events - w * np.cumsum(haz)[rs.inverse]


def working_response(scores, times, events) -> np.ndarray:
    """Negative gradient of the negative log partial likelihood.

    ``z_i = delta_i - exp(F_i) * sum_{j: t_j <= t_i} delta_j / sum_{k: t_k >= t_j} exp(F_k)``

    Examples
    --------
    >>> working_response([0, 0, 0], [1, 2, 3], [1, 1, 1]).round(6).tolist()
    [0.666667, 0.166667, -0.833333]
    """
    rs = RiskSets(times, events)
    f = np.asarray(scores, dtype=float)
    if f.shape != (rs.n,):
        raise DataError("scores must have one entry per subject")
    out = np.empty(rs.n)
    out[rs.order] = _working_sorted(rs.sort(f), rs)
    return out


# ------------------------------------------------------------------- trees

@dataclass(frozen=True, eq=False)
class RegressionTree:
    """Binary tree in preorder; ``feature == -1`` marks a leaf.

    Rows with ``x[feature] <= threshold`` go to ``left``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        node = np.zeros(len(x), dtype=np.int64)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return self.value[node]
            rows = np.nonzero(inner)[0]
            n = node[rows]
            go_left = x[rows, feat[inner]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
            "left": self.left.tolist(), "right": self.right.tolist(), "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "RegressionTree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=float),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=float))

    @classmethod
    def constant(cls, value: float) -> "RegressionTree":
        return cls(np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]),
                   np.array([float(value)]))


def _best_split(x, z, rows, sorted_idx, cols, min_node):
    """Best (gain, feature, threshold, left-mask) for a node, or None."""
    n = len(rows)
    if n < 2 * min_node:
        return None
    zn = z[rows]
    mean = zn.mean()
    floor = 1e-12 * float(np.dot(zn, zn))
    in_node = np.zeros(len(z), dtype=bool)
    in_node[rows] = True
    best = None
    for f in cols:
        idx = sorted_idx[f][in_node[sorted_idx[f]]]
        xs = x[idx, f]
        cs = np.cumsum(z[idx] - mean)[:-1]
        n_left = np.arange(1, n)
        ok = (xs[:-1] < xs[1:]) & (n_left >= min_node) & (n - n_left >= min_node)
        if not ok.any():
            continue
        gain = np.where(ok, cs**2 * n / (n_left * (n - n_left)), -np.inf)
        k = int(np.argmax(gain))  # first maximum = lowest threshold
        if gain[k] > floor and (best is None or gain[k] > best[0]):
            a, b = xs[k], xs[k + 1]
            thr = a + (b - a) / 2.0
            if not thr < b:
                thr = a
            best = (float(gain[k]), int(f), float(thr))
    return best


def fit_tree(x, z, max_depth: int, min_node: int, rows=None, cols=None,
             sorted_idx=None) -> RegressionTree:
    """Greedy least-squares regression tree.

    Parameters
    ----------
    x : ndarray, shape (n, p)
    z : ndarray, shape (n,)
        Targets.
    max_depth, min_node : int
        Depth limit and minimum rows per leaf.
    rows : array of int, optional
        Active rows (default all).
    cols : array of int, optional
        Candidate split features (default all).
    sorted_idx : list of arrays, optional
        Per-feature ``argsort`` of ``x`` columns, reused across calls.

    Splits are chosen to maximise the reduction in squared error over
    midpoints between consecutive distinct values; ties go to the lowest
    feature index and then the lowest threshold. Leaves hold the mean
    target.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    n, p = x.shape
    rows = np.arange(n) if rows is None else np.sort(np.asarray(rows, dtype=np.int64))
    if len(rows) == 0:
        raise DataError("cannot fit a tree on zero rows")
    cols = np.arange(p) if cols is None else np.sort(np.asarray(cols, dtype=np.int64))
    if sorted_idx is None:
        sorted_idx = [np.argsort(x[:, f], kind="stable") for f in range(p)]

    feature, threshold, left, right, value = [], [], [], [], []

    def grow(node_rows, depth):
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(z[node_rows].mean()))
        if depth >= max_depth:
            return i
        split = _best_split(x, z, node_rows, sorted_idx, cols, min_node)
        if split is None:
            return i
        _, f, thr = split
        goes_left = x[node_rows, f] <= thr
        feature[i], threshold[i] = f, thr
        left[i] = grow(node_rows[goes_left], depth + 1)
        right[i] = grow(node_rows[~goes_left], depth + 1)
        return i

    grow(rows, 0)
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                          np.array(value))


# ------------------------------------------------------------- line search

def _golden(fn, lo, hi, tol):
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def _line_search_sorted(f_sorted, h_sorted, rs, bracket, tol):
    if not np.any(h_sorted != 0):
        return 0.0, True
    loss = lambda w: _loss_sorted(f_sorted + w * h_sorted, rs)  # noqa: E731
    w = _golden(loss, float(bracket[0]), float(bracket[1]), tol)
    if loss(bracket[0]) <= loss(w):
        w = float(bracket[0])
    return w, False


def line_search_weight(f_prev, h_values, times, events, bracket=(0.0, 10.0), tol=1e-6):
    """Stage weight minimising the loss along ``h`` by golden-section search.

    Returns
    -------
    w : float
    degenerate : bool
        True when ``h`` is identically zero (then ``w = 0``).
    """
    rs = RiskSets(times, events)
    f = rs.sort(np.asarray(f_prev, dtype=float))
    h = rs.sort(np.asarray(h_values, dtype=float))
    if f.shape != h.shape or len(f) != rs.n:
        raise DataError("scores and tree outputs must have one entry per subject")
    return _line_search_sorted(f, h, rs, bracket, tol)


# ----------------------------------------------------------------- model

@dataclass(frozen=True, eq=False)
class BoostedModel:
    trees: list
    weights: np.ndarray
    learning_rate: float
    baseline_cumhaz: BaselineHazard
    feature_names: tuple
    train_loss: np.ndarray
    valid_loss: np.ndarray
    degenerate_stages: tuple = ()
    config: BoostConfig = field(default_factory=BoostConfig)

    @property
    def n_stages_used(self) -> int:
        return len(self.trees)

    def score(self, x) -> np.ndarray:
        """F(x) = sum_m nu * w_m * h_m(x)."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != len(self.feature_names):
            raise ConfigError(f"expected {len(self.feature_names)} features, got {x.shape[1]}")
        f = np.zeros(len(x))
        for tree, w in zip(self.trees, self.weights):
            f += self.learning_rate * w * tree.predict(x)
        return f

    linear_predictor = score

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "learning_rate": self.learning_rate,
            "feature_names": list(self.feature_names),
            "trees": [t.to_dict() for t in self.trees],
            "weights": self.weights.tolist(),
            "baseline_cumhaz": self.baseline_cumhaz.to_dict(),
            "train_loss": self.train_loss.tolist(),
            "valid_loss": self.valid_loss.tolist(),
            "degenerate_stages": list(self.degenerate_stages),
        }

    @classmethod
    def from_dict(cls, d) -> "BoostedModel":
        return cls(
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            weights=np.asarray(d["weights"], dtype=float),
            learning_rate=float(d["learning_rate"]),
            baseline_cumhaz=BaselineHazard.from_dict(d["baseline_cumhaz"]),
            feature_names=tuple(d["feature_names"]),
            train_loss=np.asarray(d["train_loss"], dtype=float),
            valid_loss=np.asarray(d["valid_loss"], dtype=float),
            degenerate_stages=tuple(d.get("degenerate_stages", ())),
            config=BoostConfig(**d["config"]),
        )


def _check_xy(x, times, events, what):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DataError(f"{what} features must be a 2-D array")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{what} features must be finite")
    rs = RiskSets(times, events)
    if rs.n != len(x):
        raise DataError(f"{what} features and outcomes have different lengths")
    if rs.n_events == 0:
        raise DataError(f"{what} set has no events")
    return x, rs


def train_boosted(x_train, t_train, e_train, x_valid, t_valid, e_valid,
                  config: BoostConfig | None = None, feature_names=None,
                  *, allow_zero_rate: bool = False) -> BoostedModel:
    """Fit a boosted Cox model with validation early stopping.

    Starting from ``F = 0``, each stage draws a seeded row and column
    subsample, fits a tree to the working response computed on the full
    training set (using only the sampled rows and columns), line-searches
    the stage weight on the full training loss, and adds
    ``learning_rate * w * h``. Training stops once the validation loss has
    not improved for ``patience`` stages or after ``max_trees`` stages; the
    model keeps the prefix with the lowest validation loss. The baseline
    cumulative hazard is the Breslow estimate with ``F`` as the offset.
    """
    cfg = (config or BoostConfig()).validate(allow_zero_rate=allow_zero_rate)
    xt, rs = _check_xy(x_train, t_train, e_train, "training")
    xv, rsv = _check_xy(x_valid, t_valid, e_valid, "validation")
    n, p = xt.shape
    if xv.shape[1] != p:
        raise DataError("training and validation feature counts differ")
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise ConfigError("feature_names length does not match the feature matrix")

    rng = np.random.default_rng(int(cfg.seed))
    sorted_idx = [np.argsort(xt[:, f], kind="stable") for f in range(p)]
    n_rows = max(1, int(round(cfg.row_subsample * n)))
    n_cols = max(1, int(round(cfg.col_subsample * p)))

    f_train = np.zeros(n)
    f_valid = np.zeros(len(xv))
    train_trace = [_loss_sorted(rs.sort(f_train), rs)]
    valid_trace = [_loss_sorted(rsv.sort(f_valid), rsv)]
    trees, weights, degenerate = [], [], []
    best = 0
    for m in range(1, int(cfg.max_trees) + 1):
        rows = np.sort(rng.choice(n, size=n_rows, replace=False)) if n_rows < n else np.arange(n)
        cols = np.sort(rng.choice(p, size=n_cols, replace=False)) if n_cols < p else np.arange(p)
        z = np.empty(n)
        z[rs.order] = _working_sorted(rs.sort(f_train), rs)
        tree = fit_tree(xt, z, cfg.max_depth, cfg.min_node, rows, cols, sorted_idx)
        h = tree.predict(xt)
        w, flag = _line_search_sorted(rs.sort(f_train), rs.sort(h), rs, (0.0, 10.0), 1e-6)
        if flag:
            degenerate.append(m)
        f_train = f_train + cfg.learning_rate * w * h
        f_valid = f_valid + cfg.learning_rate * w * tree.predict(xv)
        trees.append(tree)
        weights.append(w)
        train_trace.append(_loss_sorted(rs.sort(f_train), rs))
        valid_trace.append(_loss_sorted(rsv.sort(f_valid), rsv))
        if valid_trace[m] < valid_trace[best]:
            best = m
        elif m - best >= cfg.patience:
            break

    kept_trees, kept_w = trees[:best], np.asarray(weights[:best], dtype=float)
    f_best = np.zeros(n)
    for tree, w in zip(kept_trees, kept_w):
        f_best += cfg.learning_rate * w * tree.predict(xt)
    baseline = _breslow(np.zeros((n, 0)), rs.sort(f_best), np.zeros(0), rs)
    return BoostedModel(kept_trees, kept_w, float(cfg.learning_rate), baseline, names,
                        np.asarray(train_trace), np.asarray(valid_trace),
                        tuple(d for d in degenerate if d <= best), cfg)


def predict_risk_boosted(model: BoostedModel, x, horizon):
    """1 - exp(-H0(horizon) * exp(F(x)))."""
    risk = -np.expm1(-model.baseline_cumhaz(horizon) * np.exp(model.score(x)))
    return float(risk[0]) if np.ndim(x) == 1 else risk
