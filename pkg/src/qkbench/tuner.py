"""Hyperparameter search, the qubits x layers grid, and fANOVA importances.

Two samplers are available. ``Random`` draws every active hyperparameter
independently. ``TPE`` (tree-structured Parzen estimator) splits the finished
trials at the top ``gamma`` quantile of the objective, fits one-dimensional
Parzen densities ``l`` (good) and ``g`` (bad) per hyperparameter, draws
candidates from ``l`` and keeps the one maximizing ``l / g``.

Every trial gets a seed derived from ``(search seed, trial id)``, so a study
resumed from its JSON-lines history proposes exactly what an uninterrupted
run would have.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import ndtr, ndtri
from sklearn.ensemble import RandomForestRegressor

from .errors import ConfigurationError, InsufficientDataError, QKBenchError, SchemaError, StudyError
from .learners import HALF_PI, ModelConfig, cv_evaluate, fit_final_and_test

logger = logging.getLogger(__name__)

TRIAL_SCHEMA = "qkbench.trial/1"
SAMPLERS = ("Random", "TPE")
DOMAIN_KINDS = ("loguniform", "uniform", "int", "categorical")
MAX_QUBITS_STUDY = 15


# --------------------------------------------------------------------------
# Search space


@dataclass(frozen=True)
class Domain:
    """One hyperparameter range.

    ``when`` maps another setting's name to the values for which this one is
    active, e.g. ``{"learner": ("QSVR",)}`` for the SVR tube width.
    """

    kind: str
    low: float = 0.0
    high: float = 1.0
    choices: Tuple = ()
    when: Tuple[Tuple[str, Tuple], ...] = ()

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise ConfigurationError(f"unknown domain kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.choices:
                raise ConfigurationError("categorical domain needs at least one choice")
        elif not (math.isfinite(self.low) and math.isfinite(self.high)) or self.low > self.high:
            raise ConfigurationError(f"invalid bounds [{self.low}, {self.high}]")
        if self.kind == "loguniform" and self.low <= 0:
            raise ConfigurationError("log-uniform domain needs a positive lower bound")
        if self.kind == "int" and (int(self.low) != self.low or int(self.high) != self.high):
            raise ConfigurationError("integer domain needs integer bounds")

    def active(self, context: Mapping) -> bool:
        return all(context.get(key) in values for key, values in self.when)

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        if self.kind == "int" and int(value) != value:
            return False
        return self.low <= value <= self.high

    # Internal coordinates: log for log-uniform, index for categorical.
    def bounds(self) -> Tuple[float, float]:
        if self.kind == "loguniform":
            return math.log(self.low), math.log(self.high)
        if self.kind == "int":
            return self.low - 0.5, self.high + 0.5
        if self.kind == "categorical":
            return -0.5, len(self.choices) - 0.5
        return self.low, self.high

    def to_internal(self, value) -> float:
        if self.kind == "loguniform":
            return math.log(value)
        if self.kind == "categorical":
            return float(self.choices.index(value))
        return float(value)

    def from_internal(self, u: float):
        if self.kind == "loguniform":
            return float(min(max(math.exp(u), self.low), self.high))
        if self.kind == "int":
            return int(min(max(round(u), self.low), self.high))
        if self.kind == "categorical":
            return self.choices[int(round(u))]
        return float(min(max(u, self.low), self.high))

    def to_dict(self) -> Dict:
        out: Dict = {"kind": self.kind}
        if self.kind == "categorical":
            out["choices"] = list(self.choices)
        else:
            out["low"], out["high"] = self.low, self.high
        if self.when:
            out["when"] = {k: list(v) for k, v in self.when}
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "Domain":
        try:
            kind = d["kind"]
        except (KeyError, TypeError):
            raise ConfigurationError(f"domain needs a 'kind': {d!r}") from None
        when = tuple((k, tuple(v)) for k, v in dict(d.get("when", {})).items())
        if kind == "categorical":
            return cls(kind, choices=tuple(d.get("choices", ())), when=when)
        try:
            return cls(kind, float(d["low"]), float(d["high"]), when=when)
        except KeyError as exc:
            raise ConfigurationError(f"domain missing {exc.args[0]!r}") from None


class SearchSpace:
    """Ordered mapping of hyperparameter name to :class:`Domain`."""

    def __init__(self, domains: Mapping[str, Domain]):
        self.domains: Dict[str, Domain] = dict(domains)

    def __len__(self) -> int:
        return len(self.domains)

    def __iter__(self):
        return iter(self.domains)

    def __getitem__(self, name: str) -> Domain:
        return self.domains[name]

    def active(self, context: Mapping) -> Dict[str, Domain]:
        return {name: dom for name, dom in self.domains.items() if dom.active(context)}

    def validate(self, template: Optional[ModelConfig] = None) -> None:
        if not self.domains:
            raise ConfigurationError("search space is empty")
        if template is not None:
            known = set(asdict(template))
            unknown = set(self.domains) - known
            if unknown:
                raise ConfigurationError(f"search space names unknown settings: {sorted(unknown)}")

    def updated(self, overrides: Mapping[str, Union[Domain, Mapping, None]]) -> "SearchSpace":
        """Copy with domains replaced, added, or (``None``) removed."""
        domains = dict(self.domains)
        for name, dom in overrides.items():
            if dom is None:
                domains.pop(name, None)
            else:
                domains[name] = dom if isinstance(dom, Domain) else Domain.from_dict(dom)
        return SearchSpace(domains)

    def to_dict(self) -> Dict:
        return {name: dom.to_dict() for name, dom in self.domains.items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SearchSpace":
        return cls({name: Domain.from_dict(v) for name, v in d.items()})


def default_space(
    template: ModelConfig,
    n_features: Optional[int] = None,
    tune_qubits: bool = False,
) -> SearchSpace:
    """Default inner-search domains for a model template.

    Only the settings the template's learner and kernel actually use are
    included. ``tune_qubits`` adds ``n_qubits`` restricted to integer
    multiples of ``n_features`` up to 15.
    """
    chebyshev = template.circuit == "ChebyshevPQC"
    lo_edge = -1.0 if chebyshev else -HALF_PI
    hi_edge = 1.0 if chebyshev else HALF_PI
    d: Dict[str, Domain] = {
        "f_min": Domain("uniform", lo_edge, -1e-3),
        "f_max": Domain("uniform", 1e-3, hi_edge),
        "lam": Domain("loguniform", 1e-8, 1e1, when=(("learner", ("QKRR",)),)),
        "C": Domain("loguniform", 1e-2, 1e3, when=(("learner", ("QSVC", "QSVR")),)),
        "epsilon": Domain("loguniform", 1e-4, 1.0, when=(("learner", ("QSVR",)),)),
        "gamma": Domain("loguniform", 1e-4, 1e2, when=(("kernel", ("PQK",)), ("outer", ("Gaussian",)))),
        "ell": Domain("loguniform", 1e-2, 1e2, when=(("kernel", ("PQK",)), ("outer", ("Matern32", "RationalQuadratic")))),
        "alpha": Domain("loguniform", 1e-2, 1e2, when=(("kernel", ("PQK",)), ("outer", ("RationalQuadratic",)))),
    }
    context = asdict(template)
    space = {name: dom for name, dom in d.items() if dom.active(context)}
    if tune_qubits:
        if not n_features:
            raise ConfigurationError("tuning n_qubits needs the number of features")
        multiples = tuple(k * n_features for k in range(1, MAX_QUBITS_STUDY // n_features + 1))
        if not multiples:
            raise ConfigurationError(f"no multiple of {n_features} features fits in {MAX_QUBITS_STUDY} qubits")
        space["n_qubits"] = Domain("categorical", choices=multiples)
    return SearchSpace(space)


# --------------------------------------------------------------------------
# Trial records


@dataclass
class TrialRecord:
    trial_id: int
    assignment: Dict
    objective: float = float("nan")
    cv_scores: List[float] = field(default_factory=list)
    scoring: str = ""
    train_score: Optional[float] = None
    test_score: Optional[float] = None
    status: str = "ok"
    wall_time: float = 0.0
    seed: int = 0
    cell: Optional[Dict] = None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok" and math.isfinite(self.objective)

    def to_dict(self) -> Dict:
        out = {"schema": TRIAL_SCHEMA}
        out.update(asdict(self))
        out["objective"] = _json_float(self.objective)
        out["cv_scores"] = [_json_float(v) for v in self.cv_scores]
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrialRecord":
        if d.get("schema") != TRIAL_SCHEMA:
            raise SchemaError(f"unsupported trial schema {d.get('schema')!r}, expected {TRIAL_SCHEMA!r}")
        fields = dict(d)
        fields.pop("schema")
        fields["objective"] = _from_json_float(fields.get("objective"))
        fields["cv_scores"] = [_from_json_float(v) for v in fields.get("cv_scores", [])]
        try:
            return cls(**fields)
        except TypeError as exc:
            raise SchemaError(f"malformed trial record: {exc}") from None

    def flat(self) -> Dict:
        """One row for correlation tables: assignment, cell and scores side by side."""
        row = {"trial_id": self.trial_id, "status": self.status, "objective": self.objective}
        row.update(self.cell or {})
        row.update(self.assignment)
        row["train_score"] = self.train_score
        row["test_score"] = self.test_score
        row["wall_time"] = self.wall_time
        return row


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _from_json_float(v):
    return float("nan") if v is None else float(v)


def write_records(path: Union[str, Path], records: Iterable[TrialRecord], append: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            fh.flush()
    return path


def read_records(path: Union[str, Path]) -> List[TrialRecord]:
    path = Path(path)
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(TrialRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return records


def best_record(records: Sequence[TrialRecord]) -> TrialRecord:
    ok = [r for r in records if r.ok]
    if not ok:
        raise StudyError("no successful trials")
    # Earliest trial wins ties, so the best is stable as the study grows.
    return max(ok, key=lambda r: (r.objective, -r.trial_id))


# --------------------------------------------------------------------------
# Samplers


@dataclass(frozen=True)
class TPEConfig:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    bandwidth_floor: float = 0.01


def trial_rng(seed: int, trial_id: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(trial_id)])


def n_good(n: int, gamma: float) -> int:
    return max(1, int(math.ceil(gamma * n)))


def _random_value(dom: Domain, rng: np.random.Generator):
    if dom.kind == "categorical":
        return dom.choices[int(rng.integers(len(dom.choices)))]
    if dom.kind == "int":
        return int(rng.integers(int(dom.low), int(dom.high) + 1))
    lo, hi = dom.bounds()
    return dom.from_internal(float(rng.uniform(lo, hi)))


@dataclass
class _Parzen:
    """Truncated-Gaussian mixture on ``[lo, hi]`` with a uniform prior component."""

    lo: float
    hi: float
    mus: np.ndarray
    sigma: float

    @classmethod
    def fit(cls, obs: np.ndarray, lo: float, hi: float, floor: float) -> "_Parzen":
        width = hi - lo
        if obs.size > 1:
            sigma = 1.06 * float(np.std(obs)) * obs.size ** (-1.0 / 5.0)
        else:
            sigma = width
        return cls(lo, hi, obs, max(sigma, floor * width))

    def _mass(self) -> np.ndarray:
        return ndtr((self.hi - self.mus) / self.sigma) - ndtr((self.lo - self.mus) / self.sigma)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        k = self.mus.size
        comp = rng.integers(0, k + 1, size=size)
        out = rng.uniform(self.lo, self.hi, size=size)
        kern = comp < k
        if np.any(kern):
            mu = self.mus[comp[kern]]
            a = ndtr((self.lo - mu) / self.sigma)
            b = ndtr((self.hi - mu) / self.sigma)
            u = rng.uniform(size=mu.size)
            z = ndtri(np.clip(a + u * (b - a), 1e-300, 1 - 1e-16))
            out[kern] = np.clip(mu + self.sigma * z, self.lo, self.hi)
        return out

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        k = self.mus.size
        z = (x[:, None] - self.mus[None, :]) / self.sigma
        dens = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi)) / self._mass()[None, :]
        total = dens.sum(axis=1) + 1.0 / (self.hi - self.lo)
        return np.log(total / (k + 1))


def _tpe_value(dom: Domain, good: List, bad: List, rng: np.random.Generator, cfg: TPEConfig):
    if dom.kind == "categorical":
        k = len(dom.choices)
        idx_good = [dom.choices.index(v) for v in good]
        idx_bad = [dom.choices.index(v) for v in bad]
        # Count smoothing: one pseudo-observation per category.
        pl = (np.bincount(idx_good, minlength=k) + 1.0) / (len(idx_good) + k)
        pg = (np.bincount(idx_bad, minlength=k) + 1.0) / (len(idx_bad) + k)
        cand = rng.choice(k, size=cfg.n_candidates, p=pl)
        score = np.log(pl[cand]) - np.log(pg[cand])
        return dom.choices[int(cand[int(np.argmax(score))])]
    lo, hi = dom.bounds()
    l_model = _Parzen.fit(np.array([dom.to_internal(v) for v in good]), lo, hi, cfg.bandwidth_floor)
    g_model = _Parzen.fit(np.array([dom.to_internal(v) for v in bad]), lo, hi, cfg.bandwidth_floor)
    cand = l_model.sample(rng, cfg.n_candidates)
    score = l_model.log_pdf(cand) - g_model.log_pdf(cand)
    return dom.from_internal(float(cand[int(np.argmax(score))]))


def suggest(
    space: SearchSpace,
    history: Sequence[TrialRecord],
    sampler: str = "TPE",
    seed: int = 0,
    context: Optional[Mapping] = None,
    tpe: TPEConfig = TPEConfig(),
) -> Dict:
    """Propose one assignment of every hyperparameter active under ``context``.

    ``seed`` drives this suggestion only; ``run_study`` passes a value derived
    from the search seed and the trial id. Failed trials are ignored.
    """
    if sampler not in SAMPLERS:
        raise ConfigurationError(f"unknown sampler {sampler!r}; choose from {', '.join(SAMPLERS)}")
    if len(space) == 0:
        raise ConfigurationError("search space is empty")
    rng = np.random.default_rng(seed)
    context = dict(context or {})
    finished = [r for r in history if r.ok]
    use_tpe = sampler == "TPE" and len(finished) >= tpe.n_startup
    if use_tpe:
        order = sorted(finished, key=lambda r: (-r.objective, r.trial_id))
        cut = n_good(len(order), tpe.gamma)
        good_set, bad_set = order[:cut], order[cut:]
    assignment: Dict = {}
    for name, dom in space.domains.items():
        if not dom.active({**context, **assignment}):
            continue
        if use_tpe:
            good = [r.assignment[name] for r in good_set if name in r.assignment and dom.contains(r.assignment[name])]
            bad = [r.assignment[name] for r in bad_set if name in r.assignment and dom.contains(r.assignment[name])]
            assignment[name] = _tpe_value(dom, good, bad, rng, tpe)
        else:
            assignment[name] = _random_value(dom, rng)
    return assignment


def optimize(
    objective: Callable[[Dict], float],
    space: SearchSpace,
    n_trials: int,
    sampler: str = "TPE",
    seed: int = 0,
    tpe: TPEConfig = TPEConfig(),
) -> List[TrialRecord]:
    """Maximize a plain Python function of the assignment."""
    records: List[TrialRecord] = []
    for i in range(n_trials):
        trial_seed = int(trial_rng(seed, i).integers(2**31))
        a = suggest(space, records, sampler, trial_seed, tpe=tpe)
        records.append(TrialRecord(i, a, objective=float(objective(a)), seed=trial_seed))
    return records


# --------------------------------------------------------------------------
# Studies


def run_study(
    dataset,
    template: ModelConfig,
    space: SearchSpace,
    n_trials: int,
    sampler: str = "TPE",
    seed: int = 0,
    cv_seed: int = 0,
    history: Sequence[TrialRecord] = (),
    cell: Optional[Dict] = None,
    evaluate_test: bool = True,
    on_record: Optional[Callable[[TrialRecord], None]] = None,
    tpe: TPEConfig = TPEConfig(),
) -> List[TrialRecord]:
    """Sequential search maximizing the cross-validation objective.

    ``history`` holds records of an earlier, interrupted run of the same
    study; the loop continues at trial ``len(history)``. With
    ``evaluate_test`` every successful trial is refit on the full training
    split and scored on the test split; otherwise only the best trial is.
    The returned list includes ``history``.
    """
    if n_trials < 1:
        raise ConfigurationError("n_trials must be >= 1")
    space.validate(template)
    template.validate(dataset.n_features)
    records = list(history)
    context = asdict(template)
    for trial_id in range(len(records), n_trials):
        trial_seed = int(trial_rng(seed, trial_id).integers(2**31))
        assignment = suggest(space, records, sampler, trial_seed, context, tpe)
        rec = _evaluate(dataset, template, assignment, trial_id, trial_seed, cv_seed, cell, evaluate_test)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    if not any(r.ok for r in records):
        err = StudyError(f"all {len(records)} trials failed; first error: {records[0].error}")
        err.records = records
        raise err
    if not evaluate_test:
        best = best_record(records)
        if best.test_score is None:
            scores = fit_final_and_test(dataset, template.with_updates(**best.assignment))
            best.train_score, best.test_score = scores["train_score"], scores["test_score"]
    return records


def _evaluate(dataset, template, assignment, trial_id, trial_seed, cv_seed, cell, evaluate_test) -> TrialRecord:
    start = time.perf_counter()
    rec = TrialRecord(trial_id, dict(assignment), seed=trial_seed, cell=dict(cell) if cell else None)
    try:
        config = template.with_updates(**assignment)
        config.validate(dataset.n_features)
        cv = cv_evaluate(dataset, config, cv_seed)
        rec.cv_scores, rec.scoring = list(cv.fold_scores), cv.scoring
        if cv.failed:
            rec.status, rec.error = "failed", cv.error
        else:
            rec.objective = cv.objective
            if evaluate_test:
                scores = fit_final_and_test(dataset, config)
                rec.train_score, rec.test_score = scores["train_score"], scores["test_score"]
    except (QKBenchError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
    if rec.status == "failed":
        rec.objective = float("nan")
        logger.info("trial %d failed: %s", trial_id, rec.error)
    rec.wall_time = time.perf_counter() - start
    return rec


def grid_cells(circuits: Sequence[str], qubit_grid: Sequence[int], layer_grid: Sequence[int]) -> List[Dict]:
    for label, grid in (("circuit list", circuits), ("qubit grid", qubit_grid), ("layer grid", layer_grid)):
        if not grid:
            raise ConfigurationError(f"{label} is empty")
    return [
        {"circuit": c, "n_qubits": int(q), "n_layers": int(l)}
        for c in circuits
        for q in qubit_grid
        for l in layer_grid
    ]


def grid_search(
    dataset,
    circuits: Sequence[str],
    qubit_grid: Sequence[int],
    layer_grid: Sequence[int],
    template: ModelConfig,
    n_trials: int = 100,
    space: Union[SearchSpace, Callable[[ModelConfig], SearchSpace], None] = None,
    sampler: str = "TPE",
    seed: int = 0,
    cv_seed: int = 0,
    history: Sequence[TrialRecord] = (),
    evaluate_test: bool = True,
    on_record: Optional[Callable[[TrialRecord], None]] = None,
    tpe: TPEConfig = TPEConfig(),
) -> List[TrialRecord]:
    """An inner study per (circuit, n_qubits, n_layers) cell.

    ``space`` is a fixed space, a function of the cell's template, or ``None``
    for :func:`default_space` of each cell's template. Cell
    ``i`` searches with seed ``(seed, i)`` so cells are independent of the
    grid order of the others. ``history`` may hold records from any cells.
    """
    cells = grid_cells(circuits, qubit_grid, layer_grid)
    by_cell: Dict[Tuple, List[TrialRecord]] = {}
    for rec in history:
        if rec.cell:
            by_cell.setdefault(_cell_key(rec.cell), []).append(rec)
    # Validate every cell before any compute starts.
    plans = []
    for i, cell in enumerate(cells):
        cell_template = template.with_updates(**cell)
        cell_template.validate(dataset.n_features)
        if space is None:
            cell_space = default_space(cell_template, dataset.n_features)
        elif callable(space):
            cell_space = space(cell_template)
        else:
            cell_space = space
        cell_space.validate(cell_template)
        plans.append((i, cell, cell_template, cell_space))
    records: List[TrialRecord] = []
    for i, cell, cell_template, cell_space in plans:
        cell_seed = int(trial_rng(seed, i).integers(2**31))
        prior = sorted(by_cell.get(_cell_key(cell), []), key=lambda r: r.trial_id)
        records += run_study(
            dataset, cell_template, cell_space, n_trials, sampler, cell_seed, cv_seed,
            history=prior, cell=cell, evaluate_test=evaluate_test, on_record=on_record, tpe=tpe,
        )
    return records


def _cell_key(cell: Mapping) -> Tuple:
    return (cell["circuit"], int(cell["n_qubits"]), int(cell["n_layers"]))


def grid_summary(records: Sequence[TrialRecord]) -> List[Dict]:
    """Best objective per cell, plus the best layer count per (circuit, n_qubits)."""
    cells: Dict[Tuple, List[TrialRecord]] = {}
    for rec in records:
        if rec.cell:
            cells.setdefault(_cell_key(rec.cell), []).append(rec)
    rows = []
    for key in sorted(cells):
        ok = [r for r in cells[key] if r.ok]
        best = best_record(ok) if ok else None
        rows.append({
            "circuit": key[0],
            "n_qubits": key[1],
            "n_layers": key[2],
            "n_trials": len(cells[key]),
            "n_failed": len(cells[key]) - len(ok),
            "best_objective": best.objective if best else None,
            "best_test_score": best.test_score if best else None,
            "best_assignment": best.assignment if best else None,
        })
    groups: Dict[Tuple, List[Dict]] = {}
    for row in rows:
        groups.setdefault((row["circuit"], row["n_qubits"]), []).append(row)
    for group in groups.values():
        scored = [r for r in group if r["best_objective"] is not None]
        star = max(scored, key=lambda r: (r["best_objective"], -r["n_layers"]))["n_layers"] if scored else None
        for row in group:
            row["optimal_n_layers"] = star
    return rows


# --------------------------------------------------------------------------
# fANOVA


@dataclass
class ImportanceReport:
    importances: Dict[str, float]
    degenerate: bool = False
    n_trials: int = 0
    n_trees: int = 0

    def to_dict(self) -> Dict:
        return {
            "schema": "qkbench.importance/1",
            "importances": dict(self.importances),
            "degenerate": self.degenerate,
            "n_trials": self.n_trials,
            "n_trees": self.n_trees,
        }


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 64
    max_depth: int = 64
    min_samples_leaf: int = 2
    min_trials: int = 30


def _leaf_boxes(tree, lower: np.ndarray, upper: np.ndarray):
    """Axis-aligned boxes and values of every leaf, clipped to the domain box."""
    t = tree.tree_
    boxes_lo, boxes_hi, values = [], [], []
    stack = [(0, lower.copy(), upper.copy())]
    while stack:
        node, lo, hi = stack.pop()
        left, right = t.children_left[node], t.children_right[node]
        if left == right:
            boxes_lo.append(lo)
            boxes_hi.append(hi)
            values.append(float(t.value[node].ravel()[0]))
            continue
        f, thr = t.feature[node], t.threshold[node]
        lo_l, hi_l = lo.copy(), hi.copy()
        hi_l[f] = min(hi_l[f], thr)
        lo_r, hi_r = lo.copy(), hi.copy()
        lo_r[f] = max(lo_r[f], thr)
        stack.append((left, lo_l, hi_l))
        stack.append((right, lo_r, hi_r))
    return np.array(boxes_lo), np.array(boxes_hi), np.array(values)


def tree_variance_fractions(tree, lower: np.ndarray, upper: np.ndarray) -> Tuple[np.ndarray, float]:
    """Single-dimension variance contributions of one tree and its total variance.

    The tree is a piecewise-constant function on the domain box under the
    uniform measure. The main effect of dimension ``j`` averages the function
    over every other dimension; its variance is the individual contribution.
    """
    lo, hi, v = _leaf_boxes(tree, lower, upper)
    width = upper - lower
    frac = np.clip(hi - lo, 0.0, None) / width
    vol = frac.prod(axis=1)
    mean = float(vol @ v)
    total = float(vol @ (v * v)) - mean * mean
    k = lower.size
    contrib = np.zeros(k)
    for j in range(k):
        cuts = np.unique(np.concatenate([lo[:, j], hi[:, j]]))
        mids = 0.5 * (cuts[:-1] + cuts[1:])
        lens = np.diff(cuts) / width[j]
        others = np.prod(np.delete(frac, j, axis=1), axis=1) if k > 1 else np.ones(v.size)
        inside = (lo[None, :, j] <= mids[:, None]) & (mids[:, None] < hi[None, :, j])
        main = inside.astype(np.float64) @ (others * v)
        contrib[j] = float(lens @ (main - mean) ** 2)
    return contrib, max(total, 0.0)


def fanova_importance(
    records: Sequence[TrialRecord],
    space: SearchSpace,
    seed: int = 0,
    forest: ForestConfig = ForestConfig(),
) -> ImportanceReport:
    """Random-forest functional ANOVA importances of the searched hyperparameters.

    Only hyperparameters present in every successful trial are analysed.
    Importances are the tree-averaged individual variance fractions,
    renormalized to sum to one. A constant objective yields uniform
    importances with ``degenerate`` set.
    """
    ok = [r for r in records if r.ok]
    if len(ok) < forest.min_trials:
        raise InsufficientDataError(f"fANOVA needs at least {forest.min_trials} successful trials, got {len(ok)}")
    names = [n for n in space if all(n in r.assignment for r in ok)]
    if not names:
        raise SchemaError("no searched hyperparameter is present in every successful trial")
    doms = [space[n] for n in names]
    X = np.array([[d.to_internal(r.assignment[n]) for n, d in zip(names, doms)] for r in ok])
    y = np.array([r.objective for r in ok])
    lower = np.array([d.bounds()[0] for d in doms], dtype=np.float64)
    upper = np.array([d.bounds()[1] for d in doms], dtype=np.float64)
    # Zero-width domains would divide by zero; they carry no variance anyway.
    upper = np.where(upper > lower, upper, lower + 1.0)
    uniform = {n: 1.0 / len(names) for n in names}
    if np.ptp(y) == 0:
        return ImportanceReport(uniform, True, len(ok), 0)
    rf = RandomForestRegressor(
        n_estimators=forest.n_trees,
        max_depth=forest.max_depth,
        min_samples_leaf=forest.min_samples_leaf,
        bootstrap=True,
        random_state=seed,
    )
    rf.fit(X, y)
    fractions = []
    for est in rf.estimators_:
        contrib, total = tree_variance_fractions(est, lower, upper)
        if total > 0:
            fractions.append(contrib / total)
    if not fractions:
        return ImportanceReport(uniform, True, len(ok), forest.n_trees)
    mean = np.mean(fractions, axis=0)
    if mean.sum() <= 0:
        return ImportanceReport(uniform, True, len(ok), forest.n_trees)
    mean = mean / mean.sum()
    return ImportanceReport({n: float(m) for n, m in zip(names, mean)}, False, len(ok), forest.n_trees)


def importance_space(records: Sequence[TrialRecord], base: SearchSpace) -> SearchSpace:
    """``base`` extended with categorical/integer domains for grid-cell settings.

    Grid cells vary ``n_layers``, ``n_qubits`` and ``circuit``; adding them
    lets fANOVA rank those alongside the inner hyperparameters.
    """
    extra: Dict[str, Domain] = {}
    cells = [r.cell for r in records if r.cell]
    if cells:
        for key in ("circuit", "n_qubits", "n_layers"):
            values = sorted({c[key] for c in cells})
            if len(values) > 1:
                extra[key] = Domain("categorical", choices=tuple(values))
    return SearchSpace({**base.domains, **extra})


def with_cell_settings(records: Sequence[TrialRecord]) -> List[TrialRecord]:
    """Copies of the records whose assignments also carry their cell settings."""
    out = []
    for r in records:
        a = dict(r.assignment)
        a.update(r.cell or {})
        out.append(TrialRecord(r.trial_id, a, r.objective, r.cv_scores, r.scoring, r.train_score,
                               r.test_score, r.status, r.wall_time, r.seed, r.cell, r.error))
    return out
