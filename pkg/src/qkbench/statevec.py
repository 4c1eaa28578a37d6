"""Dense statevector simulation.

Amplitudes are little-endian: qubit 0 is the least significant bit of the
basis-state index, so ``|q1 q0> = |10>`` is index 1 (qubit 0 set).

Rotations follow ``R_P(theta) = exp(-i theta P / 2)`` and
``PHASE(theta) = diag(1, exp(i theta))``.

Internally every routine works on arrays of shape ``(batch, 2**n)`` so that a
whole data set can be pushed through one circuit structure at once; a gate
angle may then be a scalar or a length-``batch`` array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from .errors import CapacityError, ConfigurationError, QubitIndexError, ShapeError

MAX_QUBITS = 24

SINGLE_QUBIT_KINDS = frozenset({"H", "X", "RX", "RY", "RZ", "PHASE"})
TWO_QUBIT_KINDS = frozenset({"CX", "CZ", "CPHASE", "CRZ", "CRY", "CRX"})
ROTATION_KINDS = frozenset({"RX", "RY", "RZ", "PHASE", "CPHASE", "CRZ", "CRY", "CRX"})
GATE_KINDS = SINGLE_QUBIT_KINDS | TWO_QUBIT_KINDS

Angle = Union[float, np.ndarray]

_SQRT1_2 = 1.0 / np.sqrt(2.0)


@dataclass
class StateVector:
    """Pure state of ``n_qubits`` qubits."""

    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (2**self.n_qubits,):
            raise ShapeError(
                f"expected {2**self.n_qubits} amplitudes for {self.n_qubits} qubits, "
                f"got shape {self.amplitudes.shape}"
            )

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def copy(self) -> "StateVector":
        return StateVector(self.n_qubits, self.amplitudes.copy())


@dataclass(frozen=True)
class Gate:
    """One gate of a circuit.

    For controlled kinds ``targets`` is ``(control, target)``; CZ and CPHASE
    are symmetric so the order does not matter for them.
    """

    kind: str
    targets: Tuple[int, ...]
    angle: Angle = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ConfigurationError(f"unknown gate kind {self.kind!r}")
        targets = tuple(int(t) for t in self.targets)
        object.__setattr__(self, "targets", targets)
        arity = 1 if self.kind in SINGLE_QUBIT_KINDS else 2
        if len(targets) != arity:
            raise ConfigurationError(f"{self.kind} acts on {arity} qubit(s), got targets {targets}")
        if len(set(targets)) != len(targets):
            raise ConfigurationError(f"gate targets must be distinct, got {targets}")
        if (self.kind in ROTATION_KINDS) != (self.angle is not None):
            raise ConfigurationError(f"{self.kind} angle mismatch (angle={self.angle!r})")


@dataclass(frozen=True)
class PauliString:
    """Tensor product of Paulis; qubits not listed carry the identity."""

    terms: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        terms = {int(q): p for q, p in dict(self.terms).items()}
        for q, p in terms.items():
            if p not in ("X", "Y", "Z"):
                raise ConfigurationError(f"unknown Pauli {p!r} on qubit {q}")
            if q < 0:
                raise QubitIndexError(f"negative qubit index {q}")
        object.__setattr__(self, "terms", dict(sorted(terms.items())))

    @property
    def weight(self) -> int:
        return len(self.terms)

    def label(self) -> str:
        return "".join(f"{p}{q}" for q, p in self.terms.items()) or "I"

    def __hash__(self):
        return hash(tuple(self.terms.items()))


def new_state(n_qubits: int) -> StateVector:
    """Return ``|0...0>`` on ``n_qubits`` qubits."""
    _check_capacity(n_qubits)
    amps = np.zeros(2**n_qubits, dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(n_qubits, amps)


def zero_states(n_qubits: int, batch: int) -> np.ndarray:
    """Batch of ``|0...0>`` states with shape ``(batch, 2**n_qubits)``."""
    _check_capacity(n_qubits)
    amps = np.zeros((batch, 2**n_qubits), dtype=np.complex128)
    amps[:, 0] = 1.0
    return amps


def apply_gate(state: StateVector, gate: Gate) -> StateVector:
    """Return a new state with ``gate`` applied."""
    amps = state.amplitudes.copy()[None, :]
    apply_gate_inplace(amps, state.n_qubits, gate)
    return StateVector(state.n_qubits, amps[0])


def apply_gates(state: StateVector, gates: Sequence[Gate]) -> StateVector:
    amps = state.amplitudes.copy()[None, :]
    for gate in gates:
        apply_gate_inplace(amps, state.n_qubits, gate)
    return StateVector(state.n_qubits, amps[0])


def inner_product(a: StateVector, b: StateVector) -> complex:
    """``<a|b>`` with the first argument conjugated."""
    if a.n_qubits != b.n_qubits:
        raise ShapeError(f"cannot contract {a.n_qubits}-qubit state with {b.n_qubits}-qubit state")
    return complex(np.vdot(a.amplitudes, b.amplitudes))


def pauli_expectation(state: StateVector, op: PauliString) -> float:
    """Expectation value ``<psi|P|psi>``."""
    return float(pauli_expectation_batch(state.amplitudes[None, :], state.n_qubits, op)[0])


def pauli_expectation_batch(amps: np.ndarray, n_qubits: int, op: PauliString) -> np.ndarray:
    """Expectation of ``op`` for each row of a ``(batch, 2**n)`` array."""
    scratch = amps.copy()
    apply_pauli_inplace(scratch, n_qubits, op)
    values = np.einsum("bi,bi->b", amps.conj(), scratch)
    return values.real


def apply_pauli_inplace(amps: np.ndarray, n_qubits: int, op: PauliString) -> None:
    for q, p in op.terms.items():
        _check_qubit(q, n_qubits)
        view = _qubit_view(amps, n_qubits, q)
        lo = view[:, :, 0, :]
        hi = view[:, :, 1, :]
        if p == "Z":
            hi *= -1.0
        elif p == "X":
            tmp = lo.copy()
            lo[...] = hi
            hi[...] = tmp
        else:
            tmp = lo.copy()
            lo[...] = -1j * hi
            hi[...] = 1j * tmp


def single_qubit_matrix(kind: str, angle: Angle = None) -> Tuple:
    """Entries ``(u00, u01, u10, u11)`` of a single-qubit gate.

    Entries broadcast over array-valued angles.
    """
    if kind == "H":
        return (_SQRT1_2, _SQRT1_2, _SQRT1_2, -_SQRT1_2)
    if kind == "X":
        return (0.0, 1.0, 1.0, 0.0)
    theta = np.asarray(angle, dtype=np.float64)
    if kind == "RX":
        c, s = np.cos(theta / 2), np.sin(theta / 2)
        return (c, -1j * s, -1j * s, c)
    if kind == "RY":
        c, s = np.cos(theta / 2), np.sin(theta / 2)
        return (c, -s, s, c)
    if kind == "RZ":
        return (np.exp(-0.5j * theta), 0.0, 0.0, np.exp(0.5j * theta))
    if kind == "PHASE":
        return (1.0, 0.0, 0.0, np.exp(1j * theta))
    raise ConfigurationError(f"{kind} is not a single-qubit gate")


_CONTROLLED_BASE = {"CX": "X", "CRX": "RX", "CRY": "RY", "CRZ": "RZ"}


def apply_gate_inplace(amps: np.ndarray, n_qubits: int, gate: Gate) -> None:
    """Apply ``gate`` to every row of ``amps`` (shape ``(batch, 2**n)``)."""
    for t in gate.targets:
        _check_qubit(t, n_qubits)
    kind = gate.kind
    if kind in SINGLE_QUBIT_KINDS:
        q = gate.targets[0]
        view = _qubit_view(amps, n_qubits, q)
        if kind == "PHASE":
            view[:, :, 1, :] *= _per_row(np.exp(1j * np.asarray(gate.angle, dtype=np.float64)), 2)
            return
        if kind == "RZ":
            theta = np.asarray(gate.angle, dtype=np.float64)
            view[:, :, 0, :] *= _per_row(np.exp(-0.5j * theta), 2)
            view[:, :, 1, :] *= _per_row(np.exp(0.5j * theta), 2)
            return
        _apply_2x2(view[:, :, 0, :], view[:, :, 1, :], single_qubit_matrix(kind, gate.angle), 2)
        return

    control, target = gate.targets
    tensor = amps.reshape((amps.shape[0],) + (2,) * n_qubits)
    c_axis, t_axis = _axis(control, n_qubits), _axis(target, n_qubits)
    if kind in ("CZ", "CPHASE"):
        index = [slice(None)] * tensor.ndim
        index[c_axis] = 1
        index[t_axis] = 1
        sub = tensor[tuple(index)]
        if kind == "CZ":
            sub *= -1.0
        else:
            phase = np.exp(1j * np.asarray(gate.angle, dtype=np.float64))
            sub *= _per_row(phase, sub.ndim - 1)
        return
    base = _CONTROLLED_BASE[kind]
    lo_index = [slice(None)] * tensor.ndim
    hi_index = [slice(None)] * tensor.ndim
    lo_index[c_axis] = hi_index[c_axis] = 1
    lo_index[t_axis] = 0
    hi_index[t_axis] = 1
    lo = tensor[tuple(lo_index)]
    hi = tensor[tuple(hi_index)]
    _apply_2x2(lo, hi, single_qubit_matrix(base, gate.angle), lo.ndim - 1)


def _apply_2x2(lo: np.ndarray, hi: np.ndarray, u: Tuple, extra_dims: int) -> None:
    u00, u01, u10, u11 = (_per_row(np.asarray(v), extra_dims) for v in u)
    new_lo = u00 * lo + u01 * hi
    hi[...] = u10 * lo + u11 * hi
    lo[...] = new_lo


def _per_row(values: np.ndarray, extra_dims: int) -> np.ndarray:
    """Reshape a scalar or per-row array so it broadcasts over ``extra_dims`` trailing axes."""
    values = np.asarray(values)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * extra_dims)


def _qubit_view(amps: np.ndarray, n_qubits: int, q: int) -> np.ndarray:
    return amps.reshape(amps.shape[0], 2 ** (n_qubits - q - 1), 2, 2**q)


def _axis(q: int, n_qubits: int) -> int:
    # axis 0 is the batch; the most significant qubit comes first
    return 1 + (n_qubits - 1 - q)


def _check_qubit(q: int, n_qubits: int) -> None:
    if not 0 <= q < n_qubits:
        raise QubitIndexError(f"qubit {q} outside register of {n_qubits} qubits")


def _check_capacity(n_qubits: int) -> None:
    if not isinstance(n_qubits, (int, np.integer)) or not 1 <= n_qubits <= MAX_QUBITS:
        raise CapacityError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits!r}")


def gate_to_dict(gate: Gate) -> Dict:
    out = {"kind": gate.kind, "targets": list(gate.targets)}
    if gate.angle is not None:
        out["angle"] = float(gate.angle)
    return out
