"""Fidelity and projected quantum kernels plus Gram-matrix diagnostics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .circuits import CircuitSpec, encode_states
from .errors import ConfigurationError, DegenerateError, DomainError, ShapeError
from .statevec import PauliString, pauli_expectation_batch

OPERATOR_SETS = ("X1", "Z1", "XZ1", "AllP1", "X2", "Z2", "XZ2", "AllP2", "P1plus2")
OUTER_KERNELS = ("Gaussian", "Matern32", "RationalQuadratic")

_OPSET_PAULIS = {
    "X1": ("X",),
    "Z1": ("Z",),
    "XZ1": ("X", "Z"),
    "AllP1": ("X", "Y", "Z"),
    "X2": ("X",),
    "Z2": ("Z",),
    "XZ2": ("X", "Z"),
    "AllP2": ("X", "Y", "Z"),
}


@dataclass
class GramMatrix:
    entries: np.ndarray
    kind: str
    meta: Dict = field(default_factory=dict)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


@dataclass(frozen=True)
class OperatorSet:
    name: str
    terms: Tuple[PauliString, ...]

    def __len__(self) -> int:
        return len(self.terms)

    def labels(self) -> List[str]:
        return [t.label() for t in self.terms]


@dataclass(frozen=True)
class OuterKernelParams:
    """Hyperparameters of the classical kernel applied to projected features.

    ``gamma`` is used by the Gaussian, ``ell`` by Matern32 and
    RationalQuadratic, ``alpha`` by RationalQuadratic only.
    """

    kind: str = "Gaussian"
    gamma: Optional[float] = None
    ell: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind not in OUTER_KERNELS:
            raise ConfigurationError(f"unknown outer kernel {self.kind!r}")
        required = {"Gaussian": ("gamma",), "Matern32": ("ell",), "RationalQuadratic": ("alpha", "ell")}
        for name in required[self.kind]:
            value = getattr(self, name)
            if value is None:
                raise ConfigurationError(f"{self.kind} outer kernel needs {name}")
            # gamma = 0 is allowed: it degenerates to the all-ones kernel
            if value < 0 or (value == 0 and name != "gamma") or not math.isfinite(value):
                raise ConfigurationError(f"{name} must be positive, got {value}")

    def to_dict(self) -> Dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def expand_operator(name: str, n_qubits: int) -> OperatorSet:
    """Expand a named measurement-operator set into individual Pauli terms.

    One-qubit terms come first by qubit, then by Pauli (X, Y, Z); two-qubit
    terms ``P_i P_j`` follow the same rule over pairs ``(i, j)`` in
    lexicographic order.
    """
    if name not in OPERATOR_SETS:
        raise ConfigurationError(f"unknown operator set {name!r}")
    if name == "P1plus2":
        return OperatorSet(name, expand_operator("AllP1", n_qubits).terms + expand_operator("AllP2", n_qubits).terms)
    paulis = _OPSET_PAULIS[name]
    if name.endswith("1"):
        terms = [PauliString({q: p}) for q in range(n_qubits) for p in paulis]
    else:
        if n_qubits < 2:
            raise ConfigurationError(f"{name} needs at least two qubits")
        terms = [
            PauliString({i: p, j: p})
            for i in range(n_qubits)
            for j in range(i + 1, n_qubits)
            for p in paulis
        ]
    return OperatorSet(name, tuple(terms))


def _mirror_upper(G: np.ndarray) -> np.ndarray:
    return np.triu(G) + np.triu(G, 1).T


def fqk_gram(
    spec: CircuitSpec,
    params: np.ndarray,
    X: np.ndarray,
    X2: Optional[np.ndarray] = None,
) -> GramMatrix:
    """Fidelity kernel ``|<psi(x_i)|psi(x'_j)>|^2``; ``X2=None`` means training Gram."""
    A = encode_states(spec, X, params)
    if X2 is None:
        G = _mirror_upper(np.abs(A.conj() @ A.T) ** 2)
    else:
        B = encode_states(spec, X2, params)
        G = np.abs(A.conj() @ B.T) ** 2
    return GramMatrix(np.clip(G, 0.0, 1.0), "FQK", {"circuit": spec.to_dict()})


def pqk_features(spec: CircuitSpec, params: np.ndarray, X: np.ndarray, opset: Union[str, OperatorSet]) -> np.ndarray:
    """Expectation values of every operator-set term, one row per sample."""
    if isinstance(opset, str):
        opset = expand_operator(opset, spec.n_qubits)
    amps = encode_states(spec, X, params)
    F = np.empty((amps.shape[0], len(opset.terms)))
    for t, term in enumerate(opset.terms):
        F[:, t] = pauli_expectation_batch(amps, spec.n_qubits, term)
    return np.clip(F, -1.0, 1.0)


def squared_distances(F: np.ndarray, F2: Optional[np.ndarray] = None) -> np.ndarray:
    """Pairwise squared Euclidean distances between feature rows."""
    F = np.asarray(F, dtype=np.float64)
    symmetric = F2 is None
    F2 = F if symmetric else np.asarray(F2, dtype=np.float64)
    if F.shape[1] != F2.shape[1]:
        raise ShapeError(f"feature dimensions differ: {F.shape[1]} vs {F2.shape[1]}")
    sq = np.sum(F**2, axis=1)[:, None] + np.sum(F2**2, axis=1)[None, :] - 2.0 * F @ F2.T
    sq = np.maximum(sq, 0.0)
    if symmetric:
        sq = _mirror_upper(sq)
        np.fill_diagonal(sq, 0.0)
    return sq


def _outer_from_sqdist(sq: np.ndarray, p: OuterKernelParams) -> np.ndarray:
    if p.kind == "Gaussian":
        return np.exp(-p.gamma * sq)
    if p.kind == "Matern32":
        scaled = math.sqrt(3.0) * np.sqrt(sq) / p.ell
        return (1.0 + scaled) * np.exp(-scaled)
    return (1.0 + sq / (2.0 * p.alpha * p.ell**2)) ** (-p.alpha)


def outer_kernel(u: np.ndarray, v: np.ndarray, p: OuterKernelParams) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"feature vectors differ in shape: {u.shape} vs {v.shape}")
    return float(_outer_from_sqdist(np.array(np.sum((u - v) ** 2)), p))


def pqk_gram(F: np.ndarray, F2: Optional[np.ndarray], p: OuterKernelParams, meta: Optional[Dict] = None) -> GramMatrix:
    """Outer kernel applied to projected features; ``F2=None`` means training Gram."""
    G = _outer_from_sqdist(squared_distances(F, F2), p)
    info = {"outer": p.to_dict()}
    info.update(meta or {})
    return GramMatrix(G, "PQK", info)


def _entries(G) -> np.ndarray:
    return np.asarray(G.entries if isinstance(G, GramMatrix) else G, dtype=np.float64)


def minmax_normalize(G: np.ndarray) -> np.ndarray:
    lo, hi = float(G.min()), float(G.max())
    if hi == lo:
        return np.zeros_like(G)
    return (G - lo) / (hi - lo)


def gram_distance(G, G2, normalize: Optional[bool] = None) -> float:
    """Mean squared entry difference between two Gram matrices.

    With ``normalize=None`` both matrices are min-max scaled to ``[0, 1]``
    only when they are ``GramMatrix`` objects of different kinds.
    """
    A, B = _entries(G), _entries(G2)
    if A.shape != B.shape:
        raise ShapeError(f"Gram shapes differ: {A.shape} vs {B.shape}")
    if normalize is None:
        normalize = isinstance(G, GramMatrix) and isinstance(G2, GramMatrix) and G.kind != G2.kind
    if normalize:
        A, B = minmax_normalize(A), minmax_normalize(B)
    return float(np.sum((A - B) ** 2) / A.size)


def extract_F(G, gamma: float) -> np.ndarray:
    """Invert a Gaussian PQK Gram back to the summed squared feature differences."""
    A = _entries(G)
    if gamma <= 0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    if np.any(A <= 0):
        raise DomainError("Gram entries must be strictly positive to take the logarithm")
    return -np.log(A) / gamma


def gram_variance(G) -> float:
    """Population variance of the strictly off-diagonal entries."""
    A = _entries(G)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got {A.shape}")
    if A.shape[0] < 2:
        raise DomainError("a 1x1 matrix has no off-diagonal entries")
    off = A[~np.eye(A.shape[0], dtype=bool)]
    return float(np.var(off))


def kta(G, y: np.ndarray) -> float:
    """Kernel-target alignment between a training Gram and +-1 labels."""
    A = _entries(G)
    y = np.asarray(y, dtype=np.float64).ravel()
    if A.shape != (y.size, y.size):
        raise ShapeError(f"Gram shape {A.shape} does not match {y.size} labels")
    norm = np.linalg.norm(A)
    if norm == 0:
        raise DegenerateError("Gram matrix has zero Frobenius norm")
    Y = np.outer(y, y)
    return float(np.sum(A * Y) / (norm * np.linalg.norm(Y)))


@dataclass
class AdamConfig:
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_iter: int = 100
    fd_step: float = 1e-3


def make_gram_fn(
    spec: CircuitSpec,
    kind: str = "FQK",
    opset: str = "AllP1",
    outer: Optional[OuterKernelParams] = None,
) -> Callable[[np.ndarray, np.ndarray, Optional[np.ndarray]], np.ndarray]:
    """Return ``f(params, X, X2) -> Gram entries`` for a fixed kernel configuration."""
    if kind == "FQK":
        return lambda params, X, X2=None: fqk_gram(spec, params, X, X2).entries
    if kind != "PQK":
        raise ConfigurationError(f"unknown kernel kind {kind!r}")
    outer = outer or OuterKernelParams("Gaussian", gamma=1.0)
    ops = expand_operator(opset, spec.n_qubits)

    def gram(params, X, X2=None):
        F = pqk_features(spec, params, X, ops)
        F2 = None if X2 is None else pqk_features(spec, params, X2, ops)
        return pqk_gram(F, F2, outer).entries

    return gram


def kta_optimize(
    spec: CircuitSpec,
    params0: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    adam: Optional[AdamConfig] = None,
    kind: str = "FQK",
    opset: str = "AllP1",
    outer: Optional[OuterKernelParams] = None,
) -> Tuple[np.ndarray, List[float]]:
    """Maximise KTA over the trainable circuit parameters with Adam.

    Gradients are central finite differences. Returns the best parameters
    seen and the KTA of every iterate (the first entry is the start point).
    """
    if spec.n_params == 0:
        raise ConfigurationError(f"{spec.name} has no trainable parameters")
    adam = adam or AdamConfig()
    gram = make_gram_fn(spec, kind, opset, outer)

    def objective(theta):
        return kta(gram(theta, X), y)

    theta = np.asarray(params0, dtype=np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    current = objective(theta)
    trace = [current]
    best_theta, best = theta.copy(), current
    h = adam.fd_step
    for t in range(1, adam.n_iter + 1):
        grad = np.empty_like(theta)
        for k in range(theta.size):
            step = np.zeros_like(theta)
            step[k] = h
            grad[k] = (objective(theta + step) - objective(theta - step)) / (2 * h)
        m = adam.beta1 * m + (1 - adam.beta1) * grad
        v = adam.beta2 * v + (1 - adam.beta2) * grad**2
        m_hat = m / (1 - adam.beta1**t)
        v_hat = v / (1 - adam.beta2**t)
        theta = theta + adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)
        current = objective(theta)
        trace.append(current)
        if current > best:
            best, best_theta = current, theta.copy()
    return best_theta, trace


def write_gram_csv(path: Union[str, Path], G: GramMatrix) -> Path:
    """Write the full matrix as CSV plus a ``.json`` sidecar with its metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, _entries(G), delimiter=",", fmt="%.17g")
    sidecar = path.with_suffix(".json")
    meta = {"kind": G.kind, "shape": list(G.shape), "meta": G.meta} if isinstance(G, GramMatrix) else {}
    sidecar.write_text(json.dumps(meta, indent=2, default=_json_default))
    return path


def read_gram_csv(path: Union[str, Path]) -> GramMatrix:
    path = Path(path)
    entries = np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))
    sidecar = path.with_suffix(".json")
    kind, meta = "FQK", {}
    if sidecar.exists():
        info = json.loads(sidecar.read_text())
        kind = info.get("kind", kind)
        meta = info.get("meta", {})
    return GramMatrix(entries, kind, meta)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
