"""Correlation statistics: Pearson, Spearman, (semi-)partial correlations, matrices.

Two-sided p-values use the Student-t approximation
``t = r * sqrt(dof / (1 - r^2))`` with ``dof = n - 2 - n_controls``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import numpy as np
from scipy import stats as sps

from .errors import ConditioningError, DegenerateError, InsufficientDataError, SchemaError, ShapeError

SIGNIFICANCE = 0.05


@dataclass(frozen=True)
class CorrResult:
    coefficient: float
    p_value: float
    n: int

    @property
    def significant(self) -> bool:
        return self.p_value <= SIGNIFICANCE


def rank(x: np.ndarray) -> np.ndarray:
    """Mid-ranks (ties share the average of their positions), starting at 1."""
    return sps.rankdata(np.asarray(x, dtype=np.float64))


def _as_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 3:
        raise InsufficientDataError("correlation needs at least 3 observations")
    return x, y


def _r(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise DegenerateError("correlation of a constant variable is undefined")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def t_p_value(r: float, dof: int) -> float:
    if dof <= 0:
        return float("nan")
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt(dof / (1.0 - r * r))
    return float(min(1.0, 2.0 * sps.t.sf(abs(t), dof)))


def pearson(x, y) -> CorrResult:
    x, y = _as_pair(x, y)
    r = _r(x, y)
    return CorrResult(r, t_p_value(r, x.size - 2), x.size)


def permutation_p_value(x, y, max_n: int = 10) -> float:
    """Exact two-sided permutation p-value of Spearman's rho (small n only)."""
    x, y = _as_pair(x, y)
    n = x.size
    if n > max_n:
        raise InsufficientDataError(f"exact permutation test limited to n <= {max_n}")
    rx, ry = rank(x), rank(y)
    observed = abs(_r(rx, ry))
    dx = rx - rx.mean()
    ry_c = ry - ry.mean()
    denom = math.sqrt(float(dx @ dx)) * math.sqrt(float(ry_c @ ry_c))
    hits = 0
    total = 0
    perms = itertools.permutations(range(n))
    while True:
        chunk = np.array(list(itertools.islice(perms, 50_000)), dtype=np.intp)
        if chunk.size == 0:
            break
        values = np.abs(ry_c[chunk] @ dx) / denom
        hits += int(np.count_nonzero(values >= observed - 1e-12))
        total += chunk.shape[0]
    return hits / total


def spearman(x, y, exact: bool = False) -> CorrResult:
    """Pearson correlation of mid-ranks; ``exact`` uses a permutation p-value (n <= 10)."""
    x, y = _as_pair(x, y)
    rho = _r(rank(x), rank(y))
    p = permutation_p_value(x, y) if exact else t_p_value(rho, x.size - 2)
    return CorrResult(rho, p, x.size)


def _residualize(v: np.ndarray, Z: np.ndarray) -> np.ndarray:
    design = np.column_stack([np.ones(v.size), Z])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ConditioningError("control matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(design, v, rcond=None)
    return v - design @ coef


def partial_corr(
    x,
    y,
    Z=None,
    method: str = "pearson",
    mode: str = "partial",
) -> CorrResult:
    """Correlation of ``x`` and ``y`` after regressing the controls ``Z`` out.

    ``mode="partial"`` removes ``Z`` from both variables; ``semipartial_x``
    (``semipartial_y``) removes it only from ``x`` (``y``) and correlates the
    residual with the other raw variable. ``method="spearman"`` rank-transforms
    every variable first.
    """
    x, y = _as_pair(x, y)
    if method not in ("pearson", "spearman"):
        raise ValueError(f"unknown method {method!r}")
    if mode not in ("partial", "semipartial_x", "semipartial_y"):
        raise ValueError(f"unknown mode {mode!r}")
    n = x.size
    if Z is None:
        Z = np.empty((n, 0))
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.shape[0] != n:
        raise ShapeError(f"controls have {Z.shape[0]} rows, expected {n}")
    k = Z.shape[1]
    if n <= k + 2:
        raise InsufficientDataError(f"need more than {k + 2} observations for {k} controls")
    if method == "spearman":
        x, y = rank(x), rank(y)
        Z = np.column_stack([rank(col) for col in Z.T]) if k else Z
    if k:
        rx = _residualize(x, Z) if mode in ("partial", "semipartial_x") else x
        ry = _residualize(y, Z) if mode in ("partial", "semipartial_y") else y
    else:
        rx, ry = x, y
    r = _r(rx, ry)
    return CorrResult(r, t_p_value(r, n - 2 - k), n)


def benjamini_hochberg(p_values: np.ndarray) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values (NaNs are left in place)."""
    p = np.asarray(p_values, dtype=np.float64)
    flat = p.ravel()
    ok = np.isfinite(flat)
    vals = flat[ok]
    m = vals.size
    out = flat.copy()
    if m:
        order = np.argsort(vals)
        scaled = vals[order] * m / np.arange(1, m + 1)
        adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
        res = np.empty(m)
        res[order] = np.minimum(adjusted, 1.0)
        out[ok] = res
    return out.reshape(p.shape)


@dataclass
class CorrMatrix:
    """Pairwise correlations; coefficients fill the lower triangle, p-values the upper."""

    variables: List[str]
    coefficients: np.ndarray
    p_values: np.ndarray
    method: str = "spearman"
    n: int = 0
    adjusted: bool = False

    @property
    def significant(self) -> np.ndarray:
        mask = self.p_values <= SIGNIFICANCE
        np.fill_diagonal(mask, False)
        return mask

    def layout(self) -> np.ndarray:
        """Single matrix in the lower-coefficient / upper-p-value arrangement."""
        out = np.tril(self.coefficients, -1) + np.triu(self.p_values, 1)
        np.fill_diagonal(out, 1.0)
        return out

    def to_dict(self) -> Dict:
        def clean(a):
            return [[None if not np.isfinite(v) else float(v) for v in row] for row in a]

        return {
            "schema": "qkbench.corr_matrix/1",
            "method": self.method,
            "n": self.n,
            "p_adjustment": "benjamini-hochberg" if self.adjusted else "none",
            "variables": list(self.variables),
            "coefficients": clean(self.coefficients),
            "p_values": clean(self.p_values),
            "significant": self.significant.tolist(),
            "layout": clean(self.layout()),
        }

    def write_json(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


CORR_MATRIX_SCHEMA = {
    "type": "object",
    "required": ["schema", "method", "n", "variables", "coefficients", "p_values", "significant"],
    "properties": {
        "schema": {"const": "qkbench.corr_matrix/1"},
        "method": {"enum": ["pearson", "spearman"]},
        "n": {"type": "integer", "minimum": 3},
        "p_adjustment": {"enum": ["none", "benjamini-hochberg"]},
        "variables": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "coefficients": {
            "type": "array",
            "items": {"type": "array", "items": {"type": ["number", "null"], "minimum": -1, "maximum": 1}},
        },
        "p_values": {
            "type": "array",
            "items": {"type": "array", "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1}},
        },
        "significant": {"type": "array", "items": {"type": "array", "items": {"type": "boolean"}}},
        "layout": {"type": "array", "items": {"type": "array"}},
    },
}


def corr_matrix(
    table: Union[Mapping[str, Sequence[float]], Sequence[Mapping]],
    variables: Sequence[str],
    method: str = "spearman",
    adjust: bool = False,
) -> CorrMatrix:
    """Correlation matrix over a trial table.

    ``table`` is either a column mapping or a list of row dicts. Rows with a
    ``status`` other than ``"ok"`` or with a missing/non-finite value in any
    selected variable are dropped.
    """
    if not variables:
        raise SchemaError("no variables selected")
    data = _complete_rows(_rows(table), variables)
    if data.shape[0] < 3:
        raise InsufficientDataError("correlation matrix needs at least 3 complete rows")
    k = len(variables)
    coef = np.eye(k)
    pval = np.zeros((k, k))
    fn = spearman if method == "spearman" else pearson
    for i in range(k):
        for j in range(i + 1, k):
            try:
                res = fn(data[:, i], data[:, j])
                coef[i, j] = coef[j, i] = res.coefficient
                pval[i, j] = pval[j, i] = res.p_value
            except DegenerateError:
                coef[i, j] = coef[j, i] = np.nan
                pval[i, j] = pval[j, i] = np.nan
    if adjust:
        iu = np.triu_indices(k, 1)
        adjusted = benjamini_hochberg(pval[iu])
        pval[iu] = adjusted
        pval[(iu[1], iu[0])] = adjusted
    return CorrMatrix(list(variables), coef, pval, method, data.shape[0], adjust)


def partial_corr_matrix(
    table: Union[Mapping[str, Sequence[float]], Sequence[Mapping]],
    variables: Sequence[str],
    controls: Sequence[str],
    method: str = "spearman",
    adjust: bool = False,
) -> CorrMatrix:
    """Pairwise partial correlations of ``variables`` given the ``controls`` columns."""
    if not variables:
        raise SchemaError("no variables selected")
    overlap = set(variables) & set(controls)
    if overlap:
        raise SchemaError(f"variables also listed as controls: {sorted(overlap)}")
    columns = list(variables) + list(controls)
    base = corr_matrix(table, columns, method, adjust=False)
    data = _complete_rows(_rows(table), columns)
    k = len(variables)
    Z = data[:, k:]
    coef = np.eye(k)
    pval = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            try:
                res = partial_corr(data[:, i], data[:, j], Z, method)
                coef[i, j] = coef[j, i] = res.coefficient
                pval[i, j] = pval[j, i] = res.p_value
            except DegenerateError:
                coef[i, j] = coef[j, i] = np.nan
                pval[i, j] = pval[j, i] = np.nan
    if adjust:
        iu = np.triu_indices(k, 1)
        adjusted = benjamini_hochberg(pval[iu])
        pval[iu] = adjusted
        pval[(iu[1], iu[0])] = adjusted
    return CorrMatrix(list(variables), coef, pval, method, base.n, adjust)


def _complete_rows(rows: List[Mapping], variables: Sequence[str]) -> np.ndarray:
    kept = []
    for row in rows:
        if row.get("status", "ok") != "ok":
            continue
        try:
            values = [float(row[v]) for v in variables]
        except KeyError as exc:
            raise SchemaError(f"variable {exc.args[0]!r} missing from trial table") from None
        except (TypeError, ValueError):
            continue
        if all(math.isfinite(v) for v in values):
            kept.append(values)
    return np.asarray(kept, dtype=np.float64).reshape(-1, len(variables))


def _rows(table) -> List[Mapping]:
    if isinstance(table, Mapping):
        keys = list(table)
        columns = [list(table[k]) for k in keys]
        lengths = {len(c) for c in columns}
        if len(lengths) > 1:
            raise SchemaError("table columns have different lengths")
        return [dict(zip(keys, vals)) for vals in zip(*columns)]
    return list(table)
