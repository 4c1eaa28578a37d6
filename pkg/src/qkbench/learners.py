"""Kernel machines on precomputed Gram matrices and the cross-validated pipeline.

QKRR solves ``(G + lambda I) c = y`` by Cholesky. QSVC and QSVR solve their
duals with a two-variable sequential optimizer (maximal-violating-pair
working set with second-order selection) on the precomputed kernel.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import linalg
from scipy.stats import rankdata
from sklearn.model_selection import KFold, StratifiedKFold

from .circuits import CircuitSpec, init_params, named_circuit
from .errors import ConditioningError, ConfigurationError, LabelError, QKBenchError, ScoreError, ShapeError
from .kernels import OuterKernelParams, expand_operator, fqk_gram, pqk_features, pqk_gram

logger = logging.getLogger(__name__)

HALF_PI = math.pi / 2


# --------------------------------------------------------------------------
# feature scaling


@dataclass
class ScalerSpec:
    f_min: float
    f_max: float
    data_min: np.ndarray
    data_max: np.ndarray
    clamp: bool = False

    @property
    def width(self) -> float:
        return self.f_max - self.f_min


def check_feature_range(f_min: float, f_max: float, chebyshev: bool = False) -> None:
    bound = 1.0 if chebyshev else HALF_PI
    if not (-bound <= f_min < 0.0):
        raise ConfigurationError(f"f_min must lie in [{-bound:.6g}, 0), got {f_min}")
    if not (0.0 < f_max <= bound):
        raise ConfigurationError(f"f_max must lie in (0, {bound:.6g}], got {f_max}")


def scaler_fit(X_train: np.ndarray, f_min: float, f_max: float, chebyshev: bool = False) -> ScalerSpec:
    """Learn a per-feature affine map sending the training range onto ``[f_min, f_max]``.

    ``chebyshev`` selects the ``[-1, 1]`` box and clamps transformed values
    into it, since those features feed an ``arccos``.
    """
    check_feature_range(f_min, f_max, chebyshev)
    X_train = np.atleast_2d(np.asarray(X_train, dtype=np.float64))
    return ScalerSpec(float(f_min), float(f_max), X_train.min(axis=0), X_train.max(axis=0), clamp=chebyshev)


def scaler_apply(scaler: ScalerSpec, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    span = scaler.data_max - scaler.data_min
    constant = span == 0
    safe = np.where(constant, 1.0, span)
    out = scaler.f_min + (X - scaler.data_min) / safe * scaler.width
    out[:, constant] = 0.5 * (scaler.f_min + scaler.f_max)
    if scaler.clamp:
        out = np.clip(out, -1.0, 1.0)
    return out


def _minmax_targets(y_train: np.ndarray) -> Tuple[float, float]:
    lo, hi = float(np.min(y_train)), float(np.max(y_train))
    return lo, (hi - lo) if hi > lo else 1.0


# --------------------------------------------------------------------------
# fitted models


@dataclass
class FittedModel:
    kind: str
    dual_coefficients: np.ndarray
    intercept: float = 0.0
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    n_train: int = 0
    converged: bool = True
    n_iter: int = 0
    dual_objective: float = float("nan")
    alphas: Optional[np.ndarray] = None


def krr_fit(G_train: np.ndarray, y: np.ndarray, lam: float) -> FittedModel:
    """Kernel ridge regression with Cholesky and jitter escalation 1e-12 .. 1e-6."""
    G = np.asarray(G_train, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if G.shape != (y.size, y.size):
        raise ShapeError(f"Gram shape {G.shape} does not match {y.size} targets")
    if lam < 0:
        raise ConfigurationError(f"lambda must be non-negative, got {lam}")
    A = G + lam * np.eye(y.size)
    jitter = 0.0
    while True:
        try:
            factor = linalg.cho_factor(A + jitter * np.eye(y.size), lower=True, check_finite=True)
            break
        except linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10
            if jitter > 1e-6 * (1 + 1e-9):
                raise ConditioningError("Cholesky failed even with jitter 1e-6") from None
    coef = linalg.cho_solve(factor, y)
    if jitter:
        logger.debug("krr_fit needed jitter %.1e", jitter)
    return FittedModel("QKRR", coef, 0.0, np.arange(y.size), y.size)


def krr_predict(model: FittedModel, G_test_train: np.ndarray) -> np.ndarray:
    return np.asarray(G_test_train, dtype=np.float64) @ model.dual_coefficients


def _smo(
    Q: np.ndarray,
    p: np.ndarray,
    y: np.ndarray,
    C: float,
    tol: float,
    max_iter: int,
) -> Tuple[np.ndarray, float, bool, int, np.ndarray]:
    """Minimise ``a'Qa/2 + p'a`` s.t. ``y'a = 0``, ``0 <= a <= C``.

    Returns ``(a, rho, converged, n_iter, gradient)``.
    """
    n = p.size
    a = np.zeros(n)
    grad = p.copy()
    diag = np.diag(Q).copy()
    pos = y > 0
    tau = 1e-12
    converged = False
    it = 0
    while it < max_iter:
        below = a < C
        above = a > 0
        up = (pos & below) | (~pos & above)
        low = (pos & above) | (~pos & below)
        minus_yg = -y * grad
        if not up.any() or not low.any():
            converged = True
            break
        cand = np.where(up, minus_yg, -np.inf)
        i = int(np.argmax(cand))
        g_max = cand[i]
        low_vals = np.where(low, minus_yg, np.inf)
        if g_max - low_vals.min() < tol:
            converged = True
            break
        b = g_max - minus_yg
        quad = diag[i] + diag - 2.0 * y[i] * y * Q[i]
        quad = np.where(quad > 0, quad, tau)
        score = np.where(low & (b > 0), -(b * b) / quad, np.inf)
        j = int(np.argmin(score))

        old_ai, old_aj = a[i], a[j]
        if y[i] != y[j]:
            quad_ij = diag[i] + diag[j] + 2.0 * Q[i, j]
            quad_ij = quad_ij if quad_ij > 0 else tau
            delta = (-grad[i] - grad[j]) / quad_ij
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = diff
            elif a[i] < 0:
                a[i] = 0.0
                a[j] = -diff
            if diff > 0:
                if a[i] > C:
                    a[i] = C
                    a[j] = C - diff
            elif a[j] > C:
                a[j] = C
                a[i] = C + diff
        else:
            quad_ij = diag[i] + diag[j] - 2.0 * Q[i, j]
            quad_ij = quad_ij if quad_ij > 0 else tau
            delta = (grad[i] - grad[j]) / quad_ij
            total = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if total > C:
                if a[i] > C:
                    a[i] = C
                    a[j] = total - C
                if a[j] > C:
                    a[j] = C
                    a[i] = total - C
            else:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = total
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = total
        grad += Q[:, i] * (a[i] - old_ai) + Q[:, j] * (a[j] - old_aj)
        it += 1

    # offset from free variables, or the midpoint of the feasible interval
    yg = y * grad
    at_upper = a >= C
    at_lower = a <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = float(yg[free].mean())
    else:
        ub_mask = (at_upper & ~pos) | (at_lower & pos)
        lb_mask = (at_upper & pos) | (at_lower & ~pos)
        ub = yg[ub_mask].min() if ub_mask.any() else np.inf
        lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
        rho = float((ub + lb) / 2) if np.isfinite(ub) and np.isfinite(lb) else float(ub if np.isfinite(ub) else lb)
    return a, rho, converged, it, grad


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise LabelError("labels must be -1 or +1")
    if np.unique(y).size < 2:
        raise LabelError("both classes must be present")
    return y


def svc_fit(
    G_train: np.ndarray,
    y: np.ndarray,
    C: float,
    tol: float = 1e-3,
    max_iter: int = 100_000,
) -> FittedModel:
    """C-SVC on a precomputed kernel. ``dual_coefficients`` holds ``y_i * alpha_i``."""
    G = np.asarray(G_train, dtype=np.float64)
    y = _check_labels(y)
    if C <= 0:
        raise ConfigurationError(f"C must be positive, got {C}")
    if G.shape != (y.size, y.size):
        raise ShapeError(f"Gram shape {G.shape} does not match {y.size} labels")
    Q = (y[:, None] * y[None, :]) * G
    a, rho, converged, it, grad = _smo(Q, -np.ones(y.size), y, C, tol, max_iter)
    if not converged:
        logger.warning("SVC solver stopped after %d updates without reaching tol=%g", it, tol)
    objective = 0.5 * float(a @ (grad - np.ones(y.size))) if y.size else 0.0
    return FittedModel(
        "QSVC", y * a, -rho, np.flatnonzero(a > 0), y.size, converged, it, objective, alphas=a
    )


def svc_decision(model: FittedModel, G_test_train: np.ndarray) -> np.ndarray:
    return np.asarray(G_test_train, dtype=np.float64) @ model.dual_coefficients + model.intercept


def svr_fit(
    G_train: np.ndarray,
    y: np.ndarray,
    C: float,
    epsilon: float,
    tol: float = 1e-3,
    max_iter: int = 100_000,
) -> FittedModel:
    """epsilon-SVR on a precomputed kernel. ``dual_coefficients`` holds ``alpha - alpha*``."""
    G = np.asarray(G_train, dtype=np.float64)
    z = np.asarray(y, dtype=np.float64).ravel()
    if C <= 0:
        raise ConfigurationError(f"C must be positive, got {C}")
    if epsilon < 0:
        raise ConfigurationError(f"epsilon must be non-negative, got {epsilon}")
    if G.shape != (z.size, z.size):
        raise ShapeError(f"Gram shape {G.shape} does not match {z.size} targets")
    n = z.size
    signs = np.concatenate([np.ones(n), -np.ones(n)])
    Q = np.block([[G, -G], [-G, G]])
    p = np.concatenate([epsilon - z, epsilon + z])
    a, rho, converged, it, grad = _smo(Q, p, signs, C, tol, max_iter)
    if not converged:
        logger.warning("SVR solver stopped after %d updates without reaching tol=%g", it, tol)
    beta = a[:n] - a[n:]
    objective = 0.5 * float(a @ (grad + p))
    return FittedModel("QSVR", beta, -rho, np.flatnonzero(np.abs(beta) > 0), n, converged, it, objective, alphas=a)


def svr_predict(model: FittedModel, G_test_train: np.ndarray) -> np.ndarray:
    return np.asarray(G_test_train, dtype=np.float64) @ model.dual_coefficients + model.intercept


# --------------------------------------------------------------------------
# scores


def mse(y: np.ndarray, y_hat: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ShapeError(f"length mismatch: {y.size} vs {y_hat.size}")
    return float(np.mean((y - y_hat) ** 2))


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic with mid-ranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"length mismatch: {scores.size} vs {labels.size}")
    positive = labels > 0
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ScoreError("ROC-AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


# --------------------------------------------------------------------------
# pipeline


@dataclass
class ModelConfig:
    """Everything needed to build one quantum kernel model."""

    circuit: str = "SeparableRx"
    n_qubits: Optional[int] = None
    n_layers: int = 1
    strategy: str = "Option1"
    kernel: str = "FQK"
    opset: str = "AllP1"
    outer: str = "Gaussian"
    gamma: float = 1.0
    ell: float = 1.0
    alpha: float = 1.0
    learner: str = "QKRR"
    lam: float = 1e-3
    C: float = 1.0
    epsilon: float = 0.1
    f_min: float = -HALF_PI
    f_max: float = HALF_PI
    param_seed: int = 0

    def with_updates(self, **updates) -> "ModelConfig":
        known = set(asdict(self))
        unknown = set(updates) - known
        if unknown:
            raise ConfigurationError(f"unknown model settings: {sorted(unknown)}")
        return replace(self, **updates)

    def outer_params(self) -> OuterKernelParams:
        if self.outer == "Gaussian":
            return OuterKernelParams("Gaussian", gamma=self.gamma)
        if self.outer == "Matern32":
            return OuterKernelParams("Matern32", ell=self.ell)
        return OuterKernelParams(self.outer, ell=self.ell, alpha=self.alpha)

    def circuit_spec(self, n_features: int) -> CircuitSpec:
        return named_circuit(self.circuit, self.n_qubits or n_features, self.n_layers, n_features, self.strategy)

    def validate(self, n_features: int) -> None:
        """Check every setting before compute starts."""
        spec = self.circuit_spec(n_features)
        if self.learner not in ("QKRR", "QSVR", "QSVC"):
            raise ConfigurationError(f"unknown learner {self.learner!r}")
        if self.kernel not in ("FQK", "PQK"):
            raise ConfigurationError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "PQK":
            expand_operator(self.opset, spec.n_qubits)
            self.outer_params()
        check_feature_range(self.f_min, self.f_max, spec.name == "ChebyshevPQC")


@dataclass
class CVResult:
    fold_scores: List[float]
    objective: float
    scoring: str
    failed: bool = False
    error: str = ""


def cv_objective(fold_scores) -> float:
    """Minimum of the mean and the median of the fold scores."""
    scores = np.asarray(fold_scores, dtype=np.float64)
    return float(min(scores.mean(), np.median(scores)))


def task_of(config: ModelConfig) -> str:
    return "classification" if config.learner == "QSVC" else "regression"


def kernel_matrices(
    config: ModelConfig, X_train: np.ndarray, X_eval: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Scale features on ``X_train`` and return ``(G_train, G_eval_train)``."""
    X_train = np.atleast_2d(X_train)
    spec = config.circuit_spec(X_train.shape[1])
    scaler = scaler_fit(X_train, config.f_min, config.f_max, chebyshev=spec.name == "ChebyshevPQC")
    Xs = scaler_apply(scaler, X_train)
    Xe = None if X_eval is None else scaler_apply(scaler, X_eval)
    params = init_params(spec, config.param_seed)
    if config.kernel == "FQK":
        G = fqk_gram(spec, params, Xs).entries
        Ge = None if Xe is None else fqk_gram(spec, params, Xe, Xs).entries
        return G, Ge
    ops = expand_operator(config.opset, spec.n_qubits)
    outer = config.outer_params()
    F = pqk_features(spec, params, Xs, ops)
    G = pqk_gram(F, None, outer).entries
    Ge = None if Xe is None else pqk_gram(pqk_features(spec, params, Xe, ops), F, outer).entries
    return G, Ge


def fit_predict(
    config: ModelConfig, X_train: np.ndarray, y_train: np.ndarray, X_eval: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Fit on the training part; return (training predictions, eval predictions).

    Regression targets are min-max scaled to ``[0, 1]`` on the training part and
    predictions are returned in that scaled space. Classification returns
    decision margins.
    """
    G, Ge = kernel_matrices(config, X_train, X_eval)
    if config.learner == "QSVC":
        model = svc_fit(G, y_train, config.C)
        return svc_decision(model, G), svc_decision(model, Ge)
    if config.learner == "QKRR":
        model = krr_fit(G, y_train, config.lam)
        return krr_predict(model, G), krr_predict(model, Ge)
    model = svr_fit(G, y_train, config.C, config.epsilon)
    return svr_predict(model, G), svr_predict(model, Ge)


def _score(task: str, y_true: np.ndarray, pred: np.ndarray) -> float:
    if task == "classification":
        return roc_auc(pred, y_true)
    return mse(y_true, pred)


def cv_evaluate(dataset, config: ModelConfig, seed: int, n_splits: int = 5) -> CVResult:
    """Five-fold CV on the training split with per-fold scaling.

    Scores are ROC-AUC for classification and negative MSE (on targets scaled to
    ``[0, 1]`` per fold) for regression.
    """
    X = dataset.X[dataset.train_idx]
    y = dataset.y[dataset.train_idx]
    task = task_of(config)
    scoring = "ROC_AUC" if task == "classification" else "NegMSE"
    if X.shape[0] < 10:
        raise ConfigurationError("cross-validation needs at least 10 training samples")
    if task == "classification":
        splitter = StratifiedKFold(n_splits=n_splits, shuffle=True, random_state=seed)
        splits = splitter.split(X, y)
    else:
        splits = KFold(n_splits=n_splits, shuffle=True, random_state=seed).split(X)
    scores: List[float] = []
    try:
        for tr, va in splits:
            y_tr, y_va = y[tr], y[va]
            if task == "regression":
                lo, span = _minmax_targets(y_tr)
                y_tr, y_va = (y_tr - lo) / span, (y_va - lo) / span
            _, pred = fit_predict(config, X[tr], y_tr, X[va])
            score = _score(task, y_va, pred)
            scores.append(score if task == "classification" else -score)
    except (QKBenchError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return CVResult(scores, float("nan"), scoring, failed=True, error=f"{type(exc).__name__}: {exc}")
    if not np.all(np.isfinite(scores)):
        return CVResult(scores, float("nan"), scoring, failed=True, error="non-finite fold score")
    return CVResult(scores, cv_objective(scores), scoring)


def fit_final_and_test(dataset, config: ModelConfig) -> Dict[str, float]:
    """Refit on the full training split and score train and test parts.

    Regression scores are MSEs on targets scaled with the training split's
    min and max; classification scores are ROC-AUCs.
    """
    X_tr, y_tr = dataset.X[dataset.train_idx], dataset.y[dataset.train_idx]
    X_te, y_te = dataset.X[dataset.test_idx], dataset.y[dataset.test_idx]
    task = task_of(config)
    if task == "regression":
        lo, span = _minmax_targets(y_tr)
        y_tr, y_te = (y_tr - lo) / span, (y_te - lo) / span
    start = time.perf_counter()
    pred_tr, pred_te = fit_predict(config, X_tr, y_tr, X_te)
    return {
        "train_score": _score(task, y_tr, pred_tr),
        "test_score": _score(task, y_te, pred_te),
        "scoring": "ROC_AUC" if task == "classification" else "MSE",
        "fit_seconds": time.perf_counter() - start,
    }
