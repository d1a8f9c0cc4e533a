"""Command-line interface: ``survrisk <command> [options]``.

Every command accepts ``--config PATH`` (a ``key = value`` file whose keys
are the long option names with underscores) and writes its outputs to
``--out DIR``. Command-line flags override config-file values. The fully
resolved configuration is embedded in every JSON output, and each CSV output
gets a ``<name>.run.json`` sidecar carrying it.

Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .boosting import BoostConfig
from .calibration import DEFAULT_THRESHOLDS, decision_curve
from .cohort import (FIVE_YEARS_DAYS, LocationMap, apply_eligibility, load_cohort,
                     merge_locations, split_train_test, write_cohort)
from .errors import ConfigError, DataError, NumericalError
from .harness import (EvaluationReport, SubgroupSpec, compare_models, evaluate_model,
                      evaluate_subgroups, tune_boost_hyperparameters)
from .models import MODEL_KINDS, fit_model, model_from_dict, model_to_dict
from .simulate import _SCALARS as SIM_SCALARS
from .simulate import parse_kv, simulate_cohort, simulation_config_from_mapping

SCHEMA_VERSION = 1

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


# ------------------------------------------------------------- value parsing

def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _grid(text):
    """``min_node=500,1000;max_depth=2,3`` -> {"min_node": [500, 1000], "max_depth": [2, 3]}."""
    out = {}
    for part in str(text).split(";"):
        if not part.strip():
            continue
        key, _, values = part.partition("=")
        conv = int if key.strip() in ("min_node", "max_depth") else float
        out[key.strip()] = [conv(v) for v in values.split(",")]
    if not out:
        raise ValueError("empty grid")
    return out


COMMON = {
    "seed": (_u64, 0),
    "horizon_days": (int, int(FIVE_YEARS_DAYS)),
    "thresholds": (_floats, DEFAULT_THRESHOLDS),
    "out": (str, None),
}

BOOST_KEYS = {
    "max_trees": (int, None), "learning_rate": (float, None), "max_depth": (int, None),
    "min_node": (int, None), "row_subsample": (float, None), "col_subsample": (float, None),
    "patience": (int, None),
}

COMMANDS = {
    "simulate": {**{k: (conv, None) for k, conv in SIM_SCALARS.items() if k != "seed"}},
    "ingest": {"input": (str, None), "eligibility": (_bool, True)},
    "merge-locations": {"input": (str, None), "min_size": (int, 3000)},
    "split": {"input": (str, None), "train_fraction": (float, 0.7)},
    "fit": {"model": (str, None), "train": (str, None), "valid": (str, None),
            "locations": (str, None), "min_location_size": (int, 3000),
            "boost_config": (str, None), **BOOST_KEYS},
    "evaluate": {"model": (str, None), "cohort": (str, None), "subgroup": (str, "none"),
                 "locations": (str, None), "n_boot": (int, 200), "min_subgroup_size": (int, 50),
                 "model_id": (str, None)},
    "dca": {"model": (str, None), "cohort": (str, None), "mode": (str, "km")},
    "compare": {"baseline": (str, None), "revised": (str, None)},
    "tune": {"train": (str, None), "grid": (_grid, None), "folds": (int, 5),
             "locations": (str, None), "min_location_size": (int, 3000)},
}

REQUIRED = {
    "ingest": ("input",), "merge-locations": ("input",), "split": ("input",),
    "fit": ("model", "train"), "evaluate": ("model", "cohort"), "dca": ("model", "cohort"),
    "compare": ("baseline", "revised"), "tune": ("train", "grid"),
}


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the optional config file and explicit flags (in that order)."""
    spec = {**COMMON, **COMMANDS[command]}
    resolved = {k: default for k, (_, default) in spec.items()}
    extra = {}
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        for key, value in parse_kv(text, str(path)).items():
            if key in spec:
                resolved[key] = _convert(spec, key, value)
            elif command == "simulate" and key.startswith(("beta.", "dist.")):
                extra[key] = value
            else:
                raise ConfigError(f"{path}: unknown key {key!r} for command {command!r}")
    for key in spec:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = _convert(spec, key, value)
    if resolved["out"] is None:
        raise ConfigError("--out DIR is required")
    for key in REQUIRED.get(command, ()):
        if resolved[key] in (None, ""):
            raise ConfigError(f"--{key.replace('_', '-')} is required for {command}")
    if not resolved["horizon_days"] > 0:
        raise ConfigError("horizon_days must be positive")
    resolved.update(extra)
    return resolved


def _convert(spec, key, value):
    conv = spec[key][0]
    try:
        return conv(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None


# ------------------------------------------------------------------ output

def _jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())}


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def write_json(path: Path, command: str, cfg: dict, payload: dict):
    doc = {"schema_version": SCHEMA_VERSION, "command": command, "config": _jsonable(cfg),
           **payload}
    _write_text(path, json.dumps(doc, indent=1, allow_nan=False) + "\n")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, command: str, cfg: dict, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_cell(row.get(c)) for c in columns))
    _write_text(path, "\n".join(lines) + "\n")
    _sidecar(path, command, cfg)


def _sidecar(path: Path, command: str, cfg: dict):
    write_json(path.with_name(path.name + ".run.json"), command, cfg, {"output": path.name})


def _read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc.msg})") from None


def _location_map(path):
    if path is None:
        return None
    doc = _read_json(path)
    try:
        return LocationMap.from_dict(doc.get("location_map", doc))
    except (KeyError, TypeError, ValueError):
        raise DataError(f"{path}: not a location map") from None


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg):
    values = {k: v for k, v in cfg.items()
              if (k in SIM_SCALARS or k.startswith(("beta.", "dist."))) and v is not None}
    values["seed"] = cfg["seed"]
    sim = simulation_config_from_mapping({k: str(v) for k, v in values.items()}, "simulate")
    cfg = {**cfg, **{k: v for k, v in sim.to_dict().items()
                     if k not in ("beta", "covariate_distributions")}}
    cfg.update({f"beta.{k}": v for k, v in sim.to_dict()["beta"].items()})
    cfg.update({f"dist.{k}": ",".join(repr(x) for x in v)
                for k, v in sim.to_dict()["covariate_distributions"].items()})
    out = Path(cfg["out"]) / "cohort.csv"
    _write_cohort(simulate_cohort(sim), out)
    _sidecar(out, "simulate", cfg)
    return [out]


def _write_cohort(cohort, path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        write_cohort(cohort, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def cmd_ingest(cfg):
    cohort = load_cohort(cfg["input"])
    n_in = len(cohort)
    if cfg["eligibility"]:
        cohort = apply_eligibility(cohort)
    out = Path(cfg["out"]) / "cohort.csv"
    _write_cohort(cohort, out)
    write_json(out.with_name(out.name + ".run.json"), "ingest", cfg,
               {"output": out.name, "n_read": n_in, "n_retained": len(cohort)})
    return [out]


def cmd_merge_locations(cfg):
    lmap = merge_locations(load_cohort(cfg["input"]), cfg["min_size"])
    out = Path(cfg["out"]) / "locations.json"
    write_json(out, "merge-locations", cfg, {"location_map": lmap.to_dict()})
    return [out]


def cmd_split(cfg):
    train, test = split_train_test(load_cohort(cfg["input"]), cfg["train_fraction"], cfg["seed"])
    outs = []
    for name, part in (("train.csv", train), ("test.csv", test)):
        out = Path(cfg["out"]) / name
        _write_cohort(part, out)
        _sidecar(out, "split", cfg)
        outs.append(out)
    return outs


def _boost_config(cfg):
    base = {"seed": cfg["seed"]}
    if cfg["boost_config"]:
        doc = _read_json(cfg["boost_config"])
        base.update(doc.get("boost_config", doc))
        base["seed"] = cfg["seed"]
    base.update({k: cfg[k] for k in BOOST_KEYS if cfg[k] is not None})
    try:
        return BoostConfig(**base).validate()
    except TypeError as exc:
        raise ConfigError(f"bad boosting configuration: {exc}") from None


def cmd_fit(cfg):
    kind = cfg["model"]
    if kind not in MODEL_KINDS:
        raise ConfigError(f"--model must be one of {', '.join(MODEL_KINDS)}")
    if kind == "boosted" and not cfg["valid"]:
        raise ConfigError("the boosted model needs --valid for early stopping")
    train = load_cohort(cfg["train"])
    valid = load_cohort(cfg["valid"]) if kind == "boosted" else None
    boost = _boost_config(cfg) if kind == "boosted" else None
    if boost is not None:
        cfg = {**cfg, **{k: v for k, v in boost.to_dict().items() if k in BOOST_KEYS}}
    model = fit_model(kind, train, location_map=_location_map(cfg["locations"]), valid=valid,
                      boost_config=boost, min_location_size=cfg["min_location_size"])
    out = Path(cfg["out"]) / "model.json"
    write_json(out, "fit", cfg, {"model": model_to_dict(model)})
    return [out]


def _load_model_doc(path):
    doc = _read_json(path)
    return model_from_dict(doc.get("model", doc))


def _subgroup_spec(cfg, model):
    kind = cfg["subgroup"]
    if kind in ("none", "", None):
        return None
    if kind == "location":
        lmap = _location_map(cfg["locations"]) or model.location_map
        if lmap is None:
            raise ConfigError("location subgroups need --locations or a model with a location map")
        return SubgroupSpec("location", location_map=lmap)
    if kind.startswith("flag:"):
        return SubgroupSpec("flag", flag=kind[5:])
    return SubgroupSpec(kind)


def cmd_evaluate(cfg):
    model = _load_model_doc(cfg["model"])
    cohort = load_cohort(cfg["cohort"])
    spec = _subgroup_spec(cfg, model)
    kw = dict(model_id=cfg["model_id"], seed=cfg["seed"], n_boot=cfg["n_boot"],
              min_size=cfg["min_subgroup_size"])
    horizon, thr = float(cfg["horizon_days"]), cfg["thresholds"]
    if spec is None:
        reports = [evaluate_model(model, cohort, horizon, thr, **kw)]
    else:
        reports = evaluate_subgroups(model, cohort, spec, horizon, thr, **kw)
    out_dir = Path(cfg["out"])
    report_path = out_dir / "report.json"
    write_json(report_path, "evaluate", cfg, {"reports": [r.to_dict() for r in reports]})
    bins, curves = [], []
    for r in reports:
        if r.bins is not None:
            bins += [{"group_id": r.group_id, **row} for row in r.bins.rows()]
        if r.curve is not None:
            curves += [{"group_id": r.group_id, **row} for row in r.curve.rows()]
    bins_path, curve_path = out_dir / "calibration_bins.csv", out_dir / "decision_curve.csv"
    write_csv(bins_path, "evaluate", cfg,
              ["group_id", "bin", "n", "events", "mean_predicted", "observed_risk", "ci_low",
               "ci_high"], bins)
    write_csv(curve_path, "evaluate", cfg,
              ["group_id", "threshold", "nb_model", "nb_treat_all", "nb_treat_none", "n_treated"],
              curves)
    return [report_path, bins_path, curve_path]


def cmd_dca(cfg):
    model = _load_model_doc(cfg["model"])
    cohort = load_cohort(cfg["cohort"])
    horizon = float(cfg["horizon_days"])
    curve = decision_curve(model.risk(cohort, horizon), cohort.time, cohort.event, horizon,
                           cfg["thresholds"], cfg["mode"])
    out = Path(cfg["out"]) / "decision_curve.csv"
    write_csv(out, "dca", cfg,
              ["threshold", "nb_model", "nb_treat_all", "nb_treat_none", "n_treated"], curve.rows())
    return [out]


def _reports(path):
    doc = _read_json(path)
    items = doc.get("reports", doc) if isinstance(doc, dict) else doc
    if not isinstance(items, list):
        raise DataError(f"{path}: no evaluation reports found")
    return [EvaluationReport.from_dict(r) for r in items]


def cmd_compare(cfg):
    comp = compare_models(_reports(cfg["baseline"]), _reports(cfg["revised"]))
    out_dir = Path(cfg["out"])
    json_path, csv_path = out_dir / "comparison.json", out_dir / "comparison.csv"
    write_json(json_path, "compare", cfg, {"comparison": comp.to_dict()})
    write_csv(csv_path, "compare", cfg, comp.csv_columns(), comp.rows)
    return [json_path, csv_path]


def cmd_tune(cfg):
    if cfg["folds"] < 2:
        raise ConfigError("--folds must be at least 2")
    train = load_cohort(cfg["train"])
    lmap = _location_map(cfg["locations"]) or merge_locations(train, cfg["min_location_size"])
    best, scores = tune_boost_hyperparameters(train, cfg["grid"], cfg["folds"], cfg["seed"],
                                              location_map=lmap, return_scores=True)
    out = Path(cfg["out"]) / "boost_config.json"
    write_json(out, "tune", cfg, {"boost_config": best.to_dict(),
                                  "scores": [{"candidate": c, "score": s} for c, s in scores]})
    return [out]


HANDLERS = {
    "simulate": cmd_simulate, "ingest": cmd_ingest, "merge-locations": cmd_merge_locations,
    "split": cmd_split, "fit": cmd_fit, "evaluate": cmd_evaluate, "dca": cmd_dca,
    "compare": cmd_compare, "tune": cmd_tune,
}

HELP = {
    "simulate": "simulate a cohort CSV from a key=value simulation config",
    "ingest": "validate a cohort CSV and apply the eligibility filter",
    "merge-locations": "merge small zip3 groups into a location map",
    "split": "random train/test split",
    "fit": "fit a baseline, fixed_effects, frailty or boosted model",
    "evaluate": "evaluate a model overall or by subgroup",
    "dca": "decision curve for a model",
    "compare": "compare two sets of evaluation reports",
    "tune": "cross-validated grid search for boosting hyperparameters",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survrisk", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, spec in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", metavar="PATH", help="key=value file; flags override it")
        p.add_argument("--seed", metavar="U64", help="master seed (default 0)")
        p.add_argument("--horizon-days", metavar="INT", help="risk horizon (default 1826)")
        p.add_argument("--thresholds", metavar="CSV",
                       help="risk thresholds (default 0.025,0.0375,0.1)")
        p.add_argument("--out", metavar="DIR", help="output directory")
        for key in spec:
            p.add_argument("--" + key.replace("_", "-"), dest=key, metavar=key.upper())
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        outputs = HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"survrisk {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"survrisk {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"survrisk {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
