"""Parameterized data encoding circuits.

Nine circuit families are available. ``x`` is the (already scaled) feature
assigned to a qubit in a given layer, ``t`` a trainable parameter, and
"chain" the nearest-neighbour pairs ``(q, q+1)`` for ``q = 0..n-2``.
Every layer draws fresh trainable parameters.

================== ==========================================================
name               gates per layer
================== ==========================================================
YZ_CX              RY(t*x), RZ(t'*x) on each qubit; CX chain
HighDim            RZ(x), RY(x) on each qubit; CX chain (one H layer up front)
HZY_CZ             H, RZ(x), RY(t) on each qubit; CZ chain
ChebyshevPQC       RY(t) on each qubit; RX(arccos x) on each qubit; CRZ(t)
                   chain; a closing RY(t) layer after the last layer
ParamZFeatureMap   H, PHASE(t*x) on each qubit; CX chain
SeparableRx        RX(x) on each qubit
HardwareEfficientRx RX(x) on each qubit; CX chain
ZFeatureMap        H on each qubit; PHASE(2x) on each qubit
ZZFeatureMap       H on each qubit; PHASE(2x) on each qubit; for every pair
                   i < j: CX(i,j), PHASE(2(pi-x_i)(pi-x_j)) on j, CX(i,j)
================== ==========================================================

Within a layer, gates of one kind are emitted for all qubits before the next
kind, e.g. ``ZFeatureMap`` on two qubits gives ``H0 H1 P0 P1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError
from .statevec import Gate, StateVector, apply_gate_inplace, zero_states

CIRCUIT_NAMES = (
    "YZ_CX",
    "HighDim",
    "HZY_CZ",
    "ChebyshevPQC",
    "ParamZFeatureMap",
    "SeparableRx",
    "HardwareEfficientRx",
    "ZFeatureMap",
    "ZZFeatureMap",
)
STRATEGIES = ("Option1", "Option2")


@dataclass(frozen=True)
class CircuitSpec:
    name: str
    n_qubits: int
    n_layers: int
    n_features: int
    encoding_strategy: str = "Option1"
    nonlinearity: str = "Identity"
    n_params: int = 0

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "n_qubits": self.n_qubits,
            "n_layers": self.n_layers,
            "n_features": self.n_features,
            "encoding_strategy": self.encoding_strategy,
        }


def _chain(n: int) -> List[Tuple[int, int]]:
    return [(q, q + 1) for q in range(n - 1)]


def _all_pairs(n: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def _count_params(name: str, n: int, layers: int) -> int:
    if name == "YZ_CX":
        return 2 * n * layers
    if name in ("HZY_CZ", "ParamZFeatureMap"):
        return n * layers
    if name == "ChebyshevPQC":
        return layers * (n + len(_chain(n))) + n
    return 0


def named_circuit(
    name: str,
    n_qubits: int,
    n_layers: int,
    n_features: int,
    strategy: str = "Option1",
) -> CircuitSpec:
    """Build the spec of one of the nine circuit families."""
    if name not in CIRCUIT_NAMES:
        raise ConfigurationError(f"unknown circuit {name!r}; choose from {', '.join(CIRCUIT_NAMES)}")
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown encoding strategy {strategy!r}")
    for label, value in (("n_qubits", n_qubits), ("n_layers", n_layers), ("n_features", n_features)):
        if int(value) != value or value < 1:
            raise ConfigurationError(f"{label} must be a positive integer, got {value!r}")
    return CircuitSpec(
        name=name,
        n_qubits=int(n_qubits),
        n_layers=int(n_layers),
        n_features=int(n_features),
        encoding_strategy=strategy,
        nonlinearity="Arccos" if name == "ChebyshevPQC" else "Identity",
        n_params=_count_params(name, int(n_qubits), int(n_layers)),
    )


def feature_slot(spec: CircuitSpec, layer: int, qubit: int) -> int:
    if spec.encoding_strategy == "Option1":
        return qubit % spec.n_features
    return (layer * spec.n_qubits + qubit) % spec.n_features


def assign_features(spec: CircuitSpec) -> Dict[Tuple[int, int], int]:
    """Map every ``(layer, qubit)`` slot to the index of the feature it encodes.

    Option1 restarts the feature enumeration on every layer, so qubit ``q``
    always sees feature ``q mod d``. Option2 keeps counting across layers.
    """
    return {
        (layer, q): feature_slot(spec, layer, q)
        for layer in range(spec.n_layers)
        for q in range(spec.n_qubits)
    }


def init_params(spec: CircuitSpec, seed: int) -> np.ndarray:
    """Trainable parameters drawn uniformly from ``[0, 2*pi)``."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 2.0 * math.pi, size=spec.n_params)


def compile_batch(spec: CircuitSpec, X: np.ndarray, params: np.ndarray) -> List[Gate]:
    """Gate list whose angles are arrays with one entry per row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_features:
        raise ShapeError(f"expected samples with {spec.n_features} features, got shape {X.shape}")
    params = np.asarray(params, dtype=np.float64).ravel()
    if params.shape[0] != spec.n_params:
        raise ShapeError(f"{spec.name} needs {spec.n_params} parameters, got {params.shape[0]}")
    if spec.nonlinearity == "Arccos":
        if np.any(np.abs(X) > 1.0):
            raise DomainError("ChebyshevPQC features must lie in [-1, 1] for arccos encoding")
        X = np.arccos(X)

    n = spec.n_qubits
    pit = iter(params)
    gates: List[Gate] = []
    name = spec.name

    def feat(layer: int, q: int) -> np.ndarray:
        return X[:, feature_slot(spec, layer, q)]

    if name == "HighDim":
        gates += [Gate("H", (q,)) for q in range(n)]

    for layer in range(spec.n_layers):
        qubits = range(n)
        if name == "YZ_CX":
            for q in qubits:
                gates.append(Gate("RY", (q,), next(pit) * feat(layer, q)))
                gates.append(Gate("RZ", (q,), next(pit) * feat(layer, q)))
            gates += [Gate("CX", pair) for pair in _chain(n)]
        elif name == "HighDim":
            gates += [Gate("RZ", (q,), feat(layer, q)) for q in qubits]
            gates += [Gate("RY", (q,), feat(layer, q)) for q in qubits]
            gates += [Gate("CX", pair) for pair in _chain(n)]
        elif name == "HZY_CZ":
            gates += [Gate("H", (q,)) for q in qubits]
            gates += [Gate("RZ", (q,), feat(layer, q)) for q in qubits]
            gates += [Gate("RY", (q,), next(pit)) for q in qubits]
            gates += [Gate("CZ", pair) for pair in _chain(n)]
        elif name == "ChebyshevPQC":
            gates += [Gate("RY", (q,), next(pit)) for q in qubits]
            gates += [Gate("RX", (q,), feat(layer, q)) for q in qubits]
            gates += [Gate("CRZ", pair, next(pit)) for pair in _chain(n)]
        elif name == "ParamZFeatureMap":
            gates += [Gate("H", (q,)) for q in qubits]
            gates += [Gate("PHASE", (q,), next(pit) * feat(layer, q)) for q in qubits]
            gates += [Gate("CX", pair) for pair in _chain(n)]
        elif name == "SeparableRx":
            gates += [Gate("RX", (q,), feat(layer, q)) for q in qubits]
        elif name == "HardwareEfficientRx":
            gates += [Gate("RX", (q,), feat(layer, q)) for q in qubits]
            gates += [Gate("CX", pair) for pair in _chain(n)]
        elif name == "ZFeatureMap":
            gates += [Gate("H", (q,)) for q in qubits]
            gates += [Gate("PHASE", (q,), 2.0 * feat(layer, q)) for q in qubits]
        elif name == "ZZFeatureMap":
            gates += [Gate("H", (q,)) for q in qubits]
            gates += [Gate("PHASE", (q,), 2.0 * feat(layer, q)) for q in qubits]
            for i, j in _all_pairs(n):
                angle = 2.0 * (math.pi - feat(layer, i)) * (math.pi - feat(layer, j))
                gates.append(Gate("CX", (i, j)))
                gates.append(Gate("PHASE", (j,), angle))
                gates.append(Gate("CX", (i, j)))

    if name == "ChebyshevPQC":
        gates += [Gate("RY", (q,), next(pit)) for q in range(n)]
    return gates


def compile(spec: CircuitSpec, x: np.ndarray, params: np.ndarray) -> List[Gate]:
    """Concrete gate sequence for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single feature vector, got shape {x.shape}")
    gates = compile_batch(spec, x[None, :], params)
    return [
        g if g.angle is None else Gate(g.kind, g.targets, float(np.asarray(g.angle).reshape(-1)[0]))
        for g in gates
    ]


def encode_states(spec: CircuitSpec, X: np.ndarray, params: np.ndarray) -> np.ndarray:
    """Encoded states for every row of ``X`` as a ``(M, 2**n)`` array."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    gates = compile_batch(spec, X, params)
    amps = zero_states(spec.n_qubits, X.shape[0])
    for gate in gates:
        apply_gate_inplace(amps, spec.n_qubits, gate)
    return amps


def encode_state(spec: CircuitSpec, x: np.ndarray, params: np.ndarray) -> StateVector:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a single feature vector, got shape {x.shape}")
    return StateVector(spec.n_qubits, encode_states(spec, x[None, :], params)[0])


def count_two_qubit_gates(gates: List[Gate]) -> int:
    return sum(len(g.targets) == 2 for g in gates)
