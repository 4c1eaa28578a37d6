"""Command-line entry point: ``qkbench <command> [options]``.

Commands
--------
dataset gen|load   generate a synthetic set or load a CSV; prints C-bar
gram               write a training (or test-vs-train) Gram matrix as CSV
gram-dist          mean squared difference of two Gram CSV files
tune               hyperparameter study for one model template
grid               one study per (circuit, n_qubits, n_layers) cell
importance         fANOVA importances from a trial log
correlate          correlation matrix over a trial log
kta                kernel-target alignment training of circuit parameters

Settings resolve as built-in defaults < ``--config`` JSON file < flags.
Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 every trial failed.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import math
import sys
import time
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .circuits import CIRCUIT_NAMES, init_params
from .datasets import (
    Dataset,
    complexity_cbar,
    friedman1,
    hidden_manifold_diff,
    load_csv_regression,
    qfmnist,
    read_dataset,
    two_curves_diff,
    write_dataset,
)
from .errors import ConfigurationError, IngestionError, QKBenchError, SchemaError, StudyError
from .kernels import (
    AdamConfig,
    GramMatrix,
    OPERATOR_SETS,
    OUTER_KERNELS,
    expand_operator,
    extract_F,
    fqk_gram,
    gram_distance,
    gram_variance,
    kta_optimize,
    pqk_features,
    pqk_gram,
    read_gram_csv,
    squared_distances,
    write_gram_csv,
)
from .learners import ModelConfig, roc_auc, scaler_apply, scaler_fit, svc_decision, svc_fit
from .stats import corr_matrix, partial_corr, partial_corr_matrix
from .tuner import (
    SAMPLERS,
    Domain,
    SearchSpace,
    TPEConfig,
    TrialRecord,
    best_record,
    default_space,
    fanova_importance,
    grid_search,
    grid_summary,
    importance_space,
    read_records,
    run_study,
    with_cell_settings,
    write_records,
)

logger = logging.getLogger("qkbench")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_STUDY = 0, 2, 3, 4
MANIFEST_SCHEMA = "qkbench.manifest/1"

DEFAULTS: Dict = {
    "dataset": None,
    "data_seed": 0,
    "search_seed": 0,
    "model": {},
    "space": {},
    "tune_qubits": False,
    "sampler": "TPE",
    "n_trials": 100,
    "circuits": ["SeparableRx"],
    "qubits": "d",
    "layers": "1..8",
    "runs_dir": "runs",
    "study_id": None,
    "tpe": {},
    "evaluate_test": True,
}

MODEL_FLAGS = {
    "circuit": str, "n_qubits": int, "n_layers": int, "strategy": str, "kernel": str,
    "opset": str, "outer": str, "gamma": float, "ell": float, "alpha": float,
    "learner": str, "lam": float, "C": float, "epsilon": float,
    "f_min": float, "f_max": float, "param_seed": int,
}

_CANON = {
    "kernel": {"fqk": "FQK", "pqk": "PQK"},
    "learner": {"qkrr": "QKRR", "krr": "QKRR", "qsvr": "QSVR", "svr": "QSVR", "qsvc": "QSVC", "svc": "QSVC"},
    "outer": {k.lower(): k for k in OUTER_KERNELS},
    "opset": {k.lower(): k for k in OPERATOR_SETS},
    "circuit": {k.lower(): k for k in CIRCUIT_NAMES},
    "strategy": {"option1": "Option1", "option2": "Option2"},
}
_SAMPLER_CANON = {s.lower(): s for s in SAMPLERS}


def _canon(name: str, value):
    table = _CANON.get(name)
    if table is None or not isinstance(value, str):
        return value
    return table.get(value.lower(), value)


# --------------------------------------------------------------------------
# configuration


def _load_json(path: str) -> Dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return data


def resolve_config(args: argparse.Namespace) -> Dict:
    """Merge defaults, the ``--config`` file and explicit flags, in that order."""
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        file_cfg = _load_json(args.config)
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for key, value in file_cfg.items():
            if key in ("model", "space", "tpe"):
                if not isinstance(value, dict):
                    raise ConfigurationError(f"config key {key!r} must be an object")
                cfg[key].update(value)
            else:
                cfg[key] = value
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None and key not in ("model", "space", "tpe"):
            cfg[key] = value
    for key in MODEL_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            cfg["model"][key] = value
    cfg["model"] = {k: _canon(k, v) for k, v in cfg["model"].items()}
    cfg["sampler"] = _SAMPLER_CANON.get(str(cfg["sampler"]).lower(), cfg["sampler"])
    if cfg["sampler"] not in SAMPLERS:
        raise ConfigurationError(f"unknown sampler {cfg['sampler']!r}")
    return cfg


def model_template(cfg: Dict) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(cfg["model"]) - known
    if unknown:
        raise ConfigurationError(f"unknown model settings: {sorted(unknown)}")
    return ModelConfig(**cfg["model"])


def _tpe_config(cfg: Dict) -> TPEConfig:
    try:
        return TPEConfig(**cfg["tpe"])
    except TypeError as exc:
        raise ConfigurationError(f"bad TPE settings: {exc}") from None


def parse_int_list(text, n_features: Optional[int] = None) -> List[int]:
    """``"1..8"``, ``"1,2,4"``, ``"d"`` or ``"d,2d"`` (multiples of the feature count)."""
    if isinstance(text, int):
        return [text]
    if isinstance(text, (list, tuple)):
        out: List[int] = []
        for item in text:
            out += parse_int_list(item, n_features)
        return out
    values: List[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            values += list(range(int(lo), int(hi) + 1))
        elif part.endswith("d"):
            if n_features is None:
                raise ConfigurationError("'d' needs a dataset")
            factor = part[:-1]
            values.append((int(factor) if factor else 1) * n_features)
        else:
            try:
                values.append(int(part))
            except ValueError:
                raise ConfigurationError(f"cannot parse {part!r} as an integer") from None
    return values


def parse_circuits(value) -> List[str]:
    if isinstance(value, str):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if len(value) == 1 and str(value[0]).lower() == "all":
        return list(CIRCUIT_NAMES)
    return [_canon("circuit", v) for v in value]


# --------------------------------------------------------------------------
# datasets

FAMILY_ALIASES = {
    "friedman": "friedman",
    "two-curves": "two-curves",
    "twocurves": "two-curves",
    "two_curves": "two-curves",
    "hidden-manifold": "hidden-manifold",
    "hiddenmanifold": "hidden-manifold",
    "hidden_manifold": "hidden-manifold",
    "qfmnist": "qfmnist",
    "csv": "csv",
}


def generate_dataset(family: str, params: Dict, seed: int) -> Dataset:
    fam = FAMILY_ALIASES.get(family.lower())
    n = int(params.get("n", 300))
    try:
        if fam == "friedman":
            return friedman1(int(params["d"]), M_total=n, sigma=float(params.get("sigma", 0.01)), seed=seed)
        if fam == "two-curves":
            return two_curves_diff(int(params["D"]), M_total=n, seed=seed, d=int(params.get("d", 4)))
        if fam == "hidden-manifold":
            return hidden_manifold_diff(int(params["m"]), M_total=n, seed=seed, d=int(params.get("d", 4)))
        if fam == "qfmnist":
            return qfmnist(int(params["d"]), M_total=n, images_path=params["images"], seed=seed,
                           n_layers=int(params.get("layers", 2)))
        if fam == "csv":
            return load_csv_regression(params["path"], params.get("profile"), seed)
    except KeyError as exc:
        raise ConfigurationError(f"dataset {family!r} needs the setting {exc.args[0]!r}") from None
    except ValueError as exc:
        if isinstance(exc, QKBenchError):
            raise
        raise ConfigurationError(f"bad dataset setting: {exc}") from None
    raise ConfigurationError(f"unknown dataset family {family!r}")


def load_dataset_ref(ref, data_seed: int) -> Dataset:
    """A dataset directory written by ``dataset gen``, or ``family:key=value,...``."""
    if ref is None:
        raise ConfigurationError("no dataset given (use --dataset)")
    ref = str(ref)
    path = Path(ref)
    if path.exists():
        return read_dataset(path)
    family, _, rest = ref.partition(":")
    if family.lower() not in FAMILY_ALIASES:
        if "/" in ref or ref.endswith(".json"):
            raise IngestionError(f"dataset {ref} not found")
        raise ConfigurationError(f"unknown dataset family {family!r}")
    params = {}
    for item in rest.split(","):
        if item.strip():
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigurationError(f"dataset setting {item!r} is not key=value")
            params[key.strip()] = value.strip()
    seed = int(params.pop("seed", data_seed))
    return generate_dataset(family, params, seed)


def _dataset_info(ds: Dataset) -> Dict:
    return {
        "family": ds.family,
        "control": ds.control,
        "seed": ds.seed,
        "task": ds.task,
        "n_features": ds.n_features,
        "n_train": int(ds.train_idx.size),
        "n_test": int(ds.test_idx.size),
    }


# --------------------------------------------------------------------------
# output helpers


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _print_json(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True, default=_json_default))


def study_id_for(command: str, cfg: Dict) -> str:
    payload = {k: v for k, v in cfg.items() if k not in ("runs_dir", "study_id")}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()
    return f"{command}-{digest[:12]}"


def _prepare_study_dir(command: str, cfg: Dict, args, manifest: Dict) -> Path:
    study_id = cfg["study_id"] or study_id_for(command, cfg)
    study_dir = Path(cfg["runs_dir"]) / study_id
    trials = study_dir / "trials.jsonl"
    manifest_path = study_dir / "manifest.json"
    if trials.exists() and not args.resume:
        if not args.overwrite:
            raise ConfigurationError(f"{study_dir} already holds trials; pass --resume or --overwrite")
        trials.unlink()
    if args.resume and manifest_path.exists():
        old = json.loads(manifest_path.read_text()).get("config", {})
        new = json.loads(json.dumps(manifest["config"], default=str))
        location = ("study_id", "runs_dir")
        if {k: v for k, v in old.items() if k not in location} != {k: v for k, v in new.items() if k not in location}:
            raise ConfigurationError(f"--resume with a configuration that differs from {manifest_path}")
    manifest["study_id"] = study_id
    _write_json(manifest_path, manifest)
    return study_dir


def _manifest(command: str, cfg: Dict, ds: Dataset, space: Optional[SearchSpace]) -> Dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "version": __version__,
        "config": json.loads(json.dumps(cfg, default=str)),
        "seeds": {"data": cfg["data_seed"], "search": cfg["search_seed"]},
        "dataset": _dataset_info(ds),
        "space": space.to_dict() if space is not None else None,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


def _history(study_dir: Path, resume: bool) -> List[TrialRecord]:
    path = study_dir / "trials.jsonl"
    if resume and path.exists():
        return read_records(path)
    return []


def _scaled_split(config: ModelConfig, ds: Dataset):
    spec = config.circuit_spec(ds.n_features)
    scaler = scaler_fit(ds.X_train, config.f_min, config.f_max, chebyshev=spec.name == "ChebyshevPQC")
    return spec, scaler_apply(scaler, ds.X_train), scaler_apply(scaler, ds.X_test)


def build_gram(config: ModelConfig, ds: Dataset, split: str = "train", params=None) -> GramMatrix:
    """Gram matrix of a configuration on the dataset's scaled features."""
    config.validate(ds.n_features)
    spec, Xtr, Xte = _scaled_split(config, ds)
    if params is None:
        params = init_params(spec, config.param_seed)
    if split == "train":
        A, B = Xtr, None
    elif split == "test":
        A, B = Xte, Xtr
    elif split == "all":
        A, B = np.vstack([Xtr, Xte]), None
    else:
        raise ConfigurationError(f"unknown split {split!r}")
    meta = {"circuit": spec.to_dict(), "split": split, "param_seed": config.param_seed}
    if config.kernel == "FQK":
        G = fqk_gram(spec, params, A, B)
        G.meta.update(meta)
        return G
    ops = expand_operator(config.opset, spec.n_qubits)
    F = pqk_features(spec, params, A, ops)
    F2 = None if B is None else pqk_features(spec, params, B, ops)
    meta["opset"] = config.opset
    return pqk_gram(F, F2, config.outer_params(), meta)


def gram_diagnostics(G: GramMatrix, config: ModelConfig, ds: Dataset, split: str = "train") -> Dict:
    """Off-diagonal variance of the Gram and, for PQK, of its feature-distance matrix.

    For the Gaussian outer kernel the distance matrix is recovered from the
    Gram itself; the other outer kernels have no closed inverse, so the
    squared feature distances are recomputed directly.
    """
    out = {"var_G": gram_variance(G)}
    if G.kind != "PQK" or G.shape[0] != G.shape[1]:
        return out
    if config.outer == "Gaussian" and config.gamma > 0:
        out["var_F"] = gram_variance(extract_F(G, config.gamma))
    else:
        spec, Xtr, Xte = _scaled_split(config, ds)
        X = Xtr if split == "train" else np.vstack([Xtr, Xte])
        F = pqk_features(spec, init_params(spec, config.param_seed), X, expand_operator(config.opset, spec.n_qubits))
        out["var_F"] = gram_variance(squared_distances(F))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_dataset(args) -> int:
    if args.action == "gen":
        params = {"d": args.d, "D": args.control, "m": args.control, "n": args.n_samples,
                  "sigma": args.sigma, "images": args.images, "layers": args.qf_layers}
        params = {k: v for k, v in params.items() if v is not None}
        ds = generate_dataset(args.family, params, args.seed)
    else:
        ds = load_csv_regression(args.csv, args.profile, args.seed)
    out = Path(args.out) if args.out else Path("datasets") / f"{ds.family}-{ds.control}-s{ds.seed}"
    write_dataset(ds, out)
    cbar, flagged = complexity_cbar(ds, return_flags=True)
    info = _dataset_info(ds)
    info.update({"path": str(out), "cbar": cbar, "constant_features": flagged})
    _print_json(info)
    return EXIT_OK


def cmd_gram(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset_ref(cfg["dataset"], cfg["data_seed"])
    config = model_template(cfg)
    G = build_gram(config, ds, args.split)
    out = Path(args.out)
    write_gram_csv(out, G)
    report = {"path": str(out), "kind": G.kind, "shape": list(G.shape)}
    if args.diagnostics:
        diag = gram_diagnostics(G, config, ds, args.split)
        report.update(diag)
        _write_json(out.with_suffix(".diagnostics.json"), diag)
    _print_json(report)
    return EXIT_OK


def cmd_gram_dist(args) -> int:
    A, B = read_gram_csv(args.a), read_gram_csv(args.b)
    normalize = {"auto": None, "yes": True, "no": False}[args.normalize]
    print(repr(gram_distance(A, B, normalize)))
    return EXIT_OK


def _refit_gram(study_dir: Path, template: ModelConfig, best: TrialRecord, ds: Dataset) -> None:
    config = template.with_updates(**best.assignment, **(best.cell or {}))
    write_gram_csv(study_dir / "grams" / "best_train.csv", build_gram(config, ds, "train"))


def cmd_tune(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset_ref(cfg["dataset"], cfg["data_seed"])
    template = model_template(cfg)
    template.validate(ds.n_features)
    space = default_space(template, ds.n_features, bool(cfg["tune_qubits"])).updated(cfg["space"])
    space.validate(template)
    tpe = _tpe_config(cfg)
    study_dir = _prepare_study_dir("tune", cfg, args, _manifest("tune", cfg, ds, space))
    history = _history(study_dir, args.resume)
    log = study_dir / "trials.jsonl"
    try:
        records = run_study(
            ds, template, space, int(cfg["n_trials"]), cfg["sampler"], int(cfg["search_seed"]),
            cv_seed=int(cfg["data_seed"]), history=history, evaluate_test=bool(cfg["evaluate_test"]),
            on_record=lambda r: write_records(log, [r]), tpe=tpe,
        )
    except StudyError as exc:
        logger.error("%s", exc)
        return EXIT_STUDY
    best = best_record(records)
    _refit_gram(study_dir, template, best, ds)
    report = {"study_dir": str(study_dir), "n_trials": len(records),
              "n_failed": sum(not r.ok for r in records), "best": best.to_dict()}
    _write_json(study_dir / "best.json", report)
    _print_json(report)
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset_ref(cfg["dataset"], cfg["data_seed"])
    template = model_template(cfg)
    circuits = parse_circuits(cfg["circuits"])
    qubits = parse_int_list(cfg["qubits"], ds.n_features)
    layers = parse_int_list(cfg["layers"], ds.n_features)
    overrides = cfg["space"]

    def cell_space(cell_template: ModelConfig) -> SearchSpace:
        return default_space(cell_template, ds.n_features).updated(overrides)

    first = template.with_updates(circuit=circuits[0]) if circuits else template
    manifest = _manifest("grid", cfg, ds, cell_space(first))
    manifest["grid"] = {"circuits": circuits, "qubits": qubits, "layers": layers}
    study_dir = _prepare_study_dir("grid", cfg, args, manifest)
    history = _history(study_dir, args.resume)
    log = study_dir / "trials.jsonl"
    try:
        records = grid_search(
            ds, circuits, qubits, layers, template, int(cfg["n_trials"]), cell_space, cfg["sampler"],
            int(cfg["search_seed"]), cv_seed=int(cfg["data_seed"]), history=history,
            evaluate_test=bool(cfg["evaluate_test"]), on_record=lambda r: write_records(log, [r]),
            tpe=_tpe_config(cfg),
        )
    except StudyError as exc:
        logger.error("%s", exc)
        return EXIT_STUDY
    best = best_record(records)
    _refit_gram(study_dir, template, best, ds)
    report = {"study_dir": str(study_dir), "n_trials": len(records), "cells": grid_summary(records),
              "best": best.to_dict()}
    _write_json(study_dir / "best.json", report)
    _print_json({k: report[k] for k in ("study_dir", "n_trials", "best")})
    return EXIT_OK


def _trial_source(args):
    """Resolve ``--study`` / ``--trials`` to (records, study directory)."""
    if args.trials:
        path = Path(args.trials)
    elif args.study:
        path = Path(args.study) / "trials.jsonl"
    else:
        raise ConfigurationError("give --study or --trials")
    if not path.exists():
        raise IngestionError(f"trial log {path} not found")
    return read_records(path), path.parent


def infer_space(records: Sequence[TrialRecord], hint: Optional[SearchSpace] = None) -> SearchSpace:
    """Domains covering every value seen in the records.

    Kinds come from ``hint`` where available; its bounds are widened to the
    observed values (different grid cells may use different bounds).
    Settings that never vary are left out.
    """
    hint = hint or SearchSpace({})
    values: Dict[str, list] = {}
    for rec in records:
        for key, value in rec.assignment.items():
            values.setdefault(key, []).append(value)
    domains: Dict[str, Domain] = {}
    for name, vals in values.items():
        if len(set(vals)) < 2:
            continue
        if any(isinstance(v, str) for v in vals):
            domains[name] = Domain("categorical", choices=tuple(sorted(set(map(str, vals)))))
            continue
        lo, hi = float(min(vals)), float(max(vals))
        if name in hint.domains and hint[name].kind != "categorical":
            h = hint[name]
            domains[name] = Domain(h.kind, min(h.low, lo) if h.kind != "int" else math.floor(min(h.low, lo)),
                                   max(h.high, hi) if h.kind != "int" else math.ceil(max(h.high, hi)))
        elif name in hint.domains:
            domains[name] = Domain("categorical", choices=tuple(sorted(set(vals))))
        else:
            domains[name] = Domain("uniform", lo, hi)
    return SearchSpace(domains)


def cmd_importance(args) -> int:
    records, study_dir = _trial_source(args)
    hint = None
    manifest_path = study_dir / "manifest.json"
    if manifest_path.exists():
        space_dict = json.loads(manifest_path.read_text()).get("space")
        hint = SearchSpace.from_dict(space_dict) if space_dict else None
    if any(r.cell for r in records):
        records = with_cell_settings(records)
    space = infer_space([r for r in records if r.ok], hint)
    space = importance_space(records, space)
    if args.only:
        wanted = [v.strip() for v in args.only.split(",")]
        space = SearchSpace({k: space[k] for k in wanted if k in space.domains})
    report = fanova_importance(records, space, seed=args.seed)
    out = Path(args.out) if args.out else study_dir / "importance.json"
    _write_json(out, report.to_dict())
    _print_json(report.to_dict())
    return EXIT_OK


def cmd_correlate(args) -> int:
    records, study_dir = _trial_source(args)
    rows = [r.flat() for r in records]
    if args.variables:
        variables = [v.strip() for v in args.variables.split(",") if v.strip()]
    else:
        variables = _numeric_columns(rows)
    method = args.method
    out = Path(args.out) if args.out else study_dir / "correlation.json"
    if args.pair:
        x, y = [v.strip() for v in args.pair.split(",")]
        controls = [v.strip() for v in args.controls.split(",")] if args.controls else []
        table = [r for r in rows if r.get("status") == "ok"]
        try:
            cols = np.array([[float(r[v]) for v in [x, y, *controls]] for r in table
                             if all(r.get(v) is not None for v in [x, y, *controls])])
        except KeyError as exc:
            raise SchemaError(f"variable {exc.args[0]!r} missing from trial table") from None
        res = partial_corr(cols[:, 0], cols[:, 1], cols[:, 2:] if controls else None, method, args.mode)
        report = {"x": x, "y": y, "controls": controls, "method": method, "mode": args.mode,
                  "coefficient": res.coefficient, "p_value": res.p_value, "n": res.n,
                  "significant": res.significant}
        _write_json(out, report)
        _print_json(report)
        return EXIT_OK
    if args.controls:
        controls = [v.strip() for v in args.controls.split(",")]
        matrix = partial_corr_matrix(rows, variables, controls, method, args.adjust)
    else:
        matrix = corr_matrix(rows, variables, method, args.adjust)
    matrix.write_json(out)
    _print_json(matrix.to_dict())
    return EXIT_OK


def _numeric_columns(rows: List[Dict]) -> List[str]:
    skip = {"trial_id", "status", "wall_time"}
    names: List[str] = []
    for row in rows:
        for key, value in row.items():
            if key in skip or key in names:
                continue
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                names.append(key)
    # Columns that never vary carry no correlation information.
    varying = []
    for name in names:
        vals = {row.get(name) for row in rows if row.get("status") == "ok" and row.get(name) is not None}
        if len(vals) > 1:
            varying.append(name)
    if not varying:
        raise SchemaError("trial table has no varying numeric columns")
    return varying


def cmd_kta(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset_ref(cfg["dataset"], cfg["data_seed"])
    config = model_template(cfg)
    config.validate(ds.n_features)
    spec, Xtr, Xte = _scaled_split(config, ds)
    if spec.n_params == 0:
        raise ConfigurationError(f"{spec.name} has no trainable parameters")
    ytr, yte = ds.y_train, ds.y_test
    if args.max_samples and Xtr.shape[0] > args.max_samples:
        Xtr, ytr = Xtr[: args.max_samples], ytr[: args.max_samples]
    adam = AdamConfig(lr=args.lr, n_iter=args.steps, fd_step=args.fd_step)
    outer = config.outer_params() if config.kernel == "PQK" else None
    params0 = init_params(spec, config.param_seed)
    best, trace = kta_optimize(spec, params0, Xtr, ytr, adam, config.kernel, config.opset, outer)
    report = {
        "circuit": spec.to_dict(),
        "kernel": config.kernel,
        "initial_params": params0.tolist(),
        "best_params": best.tolist(),
        "trace": trace,
        "initial_kta": trace[0],
        "best_kta": max(trace),
    }
    if ds.task == "classification":
        report["roc_auc_before"] = _svc_test_auc(config, spec, params0, Xtr, ytr, Xte, yte)
        report["roc_auc_after"] = _svc_test_auc(config, spec, best, Xtr, ytr, Xte, yte)
    out = Path(args.out) if args.out else Path(cfg["runs_dir"]) / (cfg["study_id"] or study_id_for("kta", cfg))
    _write_json(out / "kta.json", report)
    _write_json(out / "manifest.json", _manifest("kta", cfg, ds, None))
    _print_json({k: v for k, v in report.items() if k != "trace"})
    return EXIT_OK


def _svc_test_auc(config, spec, params, Xtr, ytr, Xte, yte) -> float:
    from .kernels import make_gram_fn

    outer = config.outer_params() if config.kernel == "PQK" else None
    gram = make_gram_fn(spec, config.kernel, config.opset, outer)
    model = svc_fit(gram(params, Xtr), ytr, config.C)
    return roc_auc(svc_decision(model, gram(params, Xte, Xtr)), yte)


# --------------------------------------------------------------------------
# parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--circuit", help=f"one of {', '.join(CIRCUIT_NAMES)}")
    g.add_argument("--n-qubits", dest="n_qubits", type=int, help="default: number of features")
    g.add_argument("--n-layers", dest="n_layers", type=int)
    g.add_argument("--strategy", help="Option1 or Option2 feature assignment")
    g.add_argument("--kernel", help="fqk or pqk")
    g.add_argument("--opset", help=f"PQK operator set: {', '.join(OPERATOR_SETS)}")
    g.add_argument("--outer", help=f"PQK outer kernel: {', '.join(OUTER_KERNELS)}")
    g.add_argument("--gamma", type=float)
    g.add_argument("--ell", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--learner", help="qkrr, qsvr or qsvc")
    g.add_argument("--lam", type=float, help="QKRR regularization")
    g.add_argument("--C", dest="C", type=float)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--f-min", dest="f_min", type=float)
    g.add_argument("--f-max", dest="f_max", type=float)
    g.add_argument("--param-seed", dest="param_seed", type=int, help="seed of the circuit parameters")


def _add_common(p: argparse.ArgumentParser, study: bool = False) -> None:
    p.add_argument("--config", help="JSON file with settings (overridden by flags)")
    p.add_argument("--dataset", help="dataset directory or family:key=value,... (e.g. friedman:d=5)")
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--runs-dir", dest="runs_dir")
    p.add_argument("--study-id", dest="study_id")
    if study:
        p.add_argument("--search-seed", dest="search_seed", type=int)
        p.add_argument("--sampler", help="tpe or random")
        p.add_argument("--n-trials", dest="n_trials", type=int)
        p.add_argument("--resume", action="store_true", help="continue from an existing trial log")
        p.add_argument("--overwrite", action="store_true", help="discard an existing trial log")
        p.add_argument("--no-test", dest="evaluate_test", action="store_const", const=False,
                       help="score only the best trial on the test split")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qkbench", description="Quantum kernel benchmarking toolkit.")
    parser.add_argument("--version", action="version", version=f"qkbench {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap on numerical library threads")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="generate or load a dataset")
    dsub = p.add_subparsers(dest="action", required=True)
    g = dsub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--family", required=True, help="friedman, two-curves, hidden-manifold or qfmnist")
    g.add_argument("--d", type=int, help="number of features")
    g.add_argument("--control", type=int, help="curve degree D or manifold dimension m")
    g.add_argument("--n-samples", dest="n_samples", type=int)
    g.add_argument("--sigma", type=float, help="Friedman noise level")
    g.add_argument("--images", help="fashion-MNIST IDX image file (qfmnist)")
    g.add_argument("--qf-layers", dest="qf_layers", type=int, help="labelling circuit layers (qfmnist)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    l = dsub.add_parser("load", help="load a CSV regression set")
    l.add_argument("--csv", required=True)
    l.add_argument("--profile", choices=["nh3"])
    l.add_argument("--seed", type=int, default=0)
    l.add_argument("--out")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("gram", help="compute a Gram matrix")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--split", choices=["train", "test", "all"], default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", action="store_true", help="report Var(G) and, for Gaussian PQK, Var(F)")
    p.set_defaults(func=cmd_gram)

    p = sub.add_parser("gram-dist", help="distance between two Gram CSV files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--normalize", choices=["auto", "yes", "no"], default="auto")
    p.set_defaults(func=cmd_gram_dist)

    p = sub.add_parser("tune", help="hyperparameter study of one model template")
    _add_common(p, study=True)
    _add_model_flags(p)
    p.add_argument("--tune-qubits", dest="tune_qubits", action="store_const", const=True,
                   help="also search n_qubits over multiples of the feature count")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("grid", help="study per (circuit, n_qubits, n_layers) cell")
    _add_common(p, study=True)
    _add_model_flags(p)
    p.add_argument("--circuits", help="comma list or 'all'")
    p.add_argument("--qubits", help="e.g. d, 4,8 or d,2d")
    p.add_argument("--layers", help="e.g. 1..8 or 1,2,4")
    p.set_defaults(func=cmd_grid)

    for name, func, helptext in (("importance", cmd_importance, "fANOVA importances"),
                                 ("correlate", cmd_correlate, "correlation matrix of a trial log")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--study", help="study directory")
        p.add_argument("--trials", help="trials.jsonl path")
        p.add_argument("--out")
        p.set_defaults(func=func)
    imp = sub.choices["importance"]
    imp.add_argument("--seed", type=int, default=0)
    imp.add_argument("--only", help="comma list of hyperparameters to analyse")
    cor = sub.choices["correlate"]
    cor.add_argument("--variables", help="comma list (default: every varying numeric column)")
    cor.add_argument("--method", choices=["spearman", "pearson"], default="spearman")
    cor.add_argument("--adjust", action="store_true", help="Benjamini-Hochberg adjusted p-values")
    cor.add_argument("--controls", help="comma list of control variables (partial correlations)")
    cor.add_argument("--pair", help="x,y: a single (semi-)partial correlation")
    cor.add_argument("--mode", choices=["partial", "semipartial_x", "semipartial_y"], default="partial")

    p = sub.add_parser("kta", help="train circuit parameters by kernel-target alignment")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--fd-step", dest="fd_step", type=float, default=1e-3)
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_kta)
    return parser


def _thread_limit(n: Optional[int]):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except StudyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STUDY
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (QKBenchError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted; completed trials are kept, continue with --resume", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
