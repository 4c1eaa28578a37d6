"""Dataset generators, loaders, train/test splitting, PCA and the C-bar complexity measure."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .circuits import encode_states, named_circuit
from .errors import ConfigurationError, GenerationError, IngestionError, SchemaError, ShapeError
from .statevec import PauliString, pauli_expectation_batch
from . import stats

logger = logging.getLogger(__name__)

GENERATOR_VERSION = "1"
FAMILIES = ("Friedman", "TwoCurvesDiff", "HiddenManifoldDiff", "QFMNIST", "NH3PES", "CsvCustom")
N_TRAIN, N_TEST = 240, 60
NH3_ROWS, NH3_TRAIN, NH3_TEST, NH3_FEATURES = 193, 155, 38, 6


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    family: str
    control: Optional[float] = None
    seed: Optional[int] = None
    task: str = "regression"
    meta: Dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def X_train(self) -> np.ndarray:
        return self.X[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_idx]

    @property
    def X_test(self) -> np.ndarray:
        return self.X[self.test_idx]

    @property
    def y_test(self) -> np.ndarray:
        return self.y[self.test_idx]


def split_indices(
    n_total: int, n_test: int, seed: int, labels: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded train/test split; stratified when ``labels`` are given."""
    if not 0 < n_test < n_total:
        raise ConfigurationError(f"test size {n_test} invalid for {n_total} samples")
    rng = np.random.default_rng(seed)
    if labels is None:
        perm = rng.permutation(n_total)
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    labels = np.asarray(labels)
    classes = np.unique(labels)
    test: List[np.ndarray] = []
    quota = {c: np.sum(labels == c) * n_test / n_total for c in classes}
    # largest-remainder allocation so the class quotas add up to n_test
    counts = {c: int(math.floor(q)) for c, q in quota.items()}
    for c in sorted(classes, key=lambda c: quota[c] - counts[c], reverse=True)[: n_test - sum(counts.values())]:
        counts[c] += 1
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        test.append(members[: counts[c]])
    test_idx = np.sort(np.concatenate(test))
    train_idx = np.setdiff1d(np.arange(n_total), test_idx)
    return train_idx, test_idx


def _split_sizes(M_total: int) -> int:
    if M_total == N_TRAIN + N_TEST:
        return N_TEST
    return max(1, int(round(0.2 * M_total)))


# --------------------------------------------------------------------------
# regression: Friedman #1


def friedman1_target(X: np.ndarray) -> np.ndarray:
    """Noise-free Friedman #1 response (only the first five columns enter)."""
    X = np.asarray(X, dtype=np.float64)
    return (
        10.0 * np.sin(np.pi * X[:, 0] * X[:, 1])
        + 20.0 * (X[:, 2] - 0.5) ** 2
        + 10.0 * X[:, 3]
        + 5.0 * X[:, 4]
    )


def friedman1(d: int, M_total: int = 300, sigma: float = 0.01, seed: int = 0) -> Dataset:
    if d < 5:
        raise ConfigurationError(f"Friedman #1 needs d >= 5, got {d}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 1.0, size=(M_total, d))
    y = friedman1_target(X) + sigma * rng.standard_normal(M_total)
    train, test = split_indices(M_total, _split_sizes(M_total), seed)
    return Dataset(X, y, train, test, "Friedman", d, seed, "regression", {"sigma": sigma})


# --------------------------------------------------------------------------
# classification: two curves diff and hidden manifold diff


def two_curves_diff(
    D: int, M_total: int = 300, seed: int = 0, d: int = 4, noise: float = 0.01
) -> Dataset:
    """Points on two offset degree-``D`` Fourier curves in ``d`` dimensions.

    Curve A has coordinates ``sum_k a_k cos(k t) + b_k sin(k t)`` for
    ``t ~ U[0, 1]`` with coefficients drawn from ``N(0, 1/D)``, so low degrees
    give gently bent arcs and the curvature grows with ``D``. Curve B is A
    shifted by ``1 / (2D)`` in every coordinate. Label +1 marks curve A.
    """
    if D < 1:
        raise ConfigurationError(f"degree D must be >= 1, got {D}")
    rng = np.random.default_rng(seed)
    offset = 1.0 / (2.0 * D)
    coeffs = rng.normal(0.0, math.sqrt(1.0 / D), size=(2, d, D))
    n_pos = M_total // 2 + (M_total % 2) * int(rng.integers(0, 2))
    labels = np.concatenate([np.ones(n_pos), -np.ones(M_total - n_pos)])
    t = rng.uniform(0.0, 1.0, size=M_total)
    k = np.arange(1, D + 1)
    phase = t[:, None] * k[None, :]
    X = np.cos(phase) @ coeffs[0].T + np.sin(phase) @ coeffs[1].T
    X = X + offset * (labels < 0)[:, None]
    X = X + noise * rng.standard_normal(X.shape)
    perm = rng.permutation(M_total)
    X, labels = X[perm], labels[perm]
    train, test = split_indices(M_total, _split_sizes(M_total), seed, labels)
    meta = {"offset": offset, "noise": noise, "generator_version": GENERATOR_VERSION}
    return Dataset(X, labels, train, test, "TwoCurvesDiff", D, seed, "classification", meta)


def hidden_manifold_diff(
    m: int, M_total: int = 300, seed: int = 0, d: int = 4, max_resamples: int = 100
) -> Dataset:
    """Latent points on ``[-1, 1]^m`` labelled by a random tanh network, embedded in ``d`` dims.

    The network output is thresholded at its median so the classes are
    balanced; a draw whose median is tied is resampled.
    """
    if m < 1:
        raise ConfigurationError(f"manifold dimension m must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    for _ in range(max_resamples):
        z = rng.uniform(-1.0, 1.0, size=(M_total, m))
        W1 = rng.standard_normal((m, 2 * m))
        w2 = rng.standard_normal(2 * m)
        score = np.tanh(z @ W1) @ w2
        threshold = np.median(score)
        labels = np.where(score > threshold, 1.0, -1.0)
        if abs(int(labels.sum())) <= 1:
            break
    else:
        raise GenerationError(f"could not balance classes in {max_resamples} resamples")
    embed = rng.standard_normal((d, m))
    X = np.tanh(z @ embed.T)
    train, test = split_indices(M_total, _split_sizes(M_total), seed, labels)
    meta = {"generator_version": GENERATOR_VERSION}
    return Dataset(X, labels, train, test, "HiddenManifoldDiff", m, seed, "classification", meta)


# --------------------------------------------------------------------------
# PCA


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray


def pca_fit(X: np.ndarray, k: int) -> PCAModel:
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= k <= min(X.shape):
        raise ShapeError(f"k={k} exceeds min(samples, dimension) = {min(X.shape)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    # thin SVD avoids forming the (possibly 784x784) covariance
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    var = s**2 / max(X.shape[0] - 1, 1)
    return PCAModel(mean, vt[:k], var[:k])


def pca_apply(model: PCAModel, X: np.ndarray) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - model.mean) @ model.components.T


# --------------------------------------------------------------------------
# fashion-MNIST IDX and QFMNIST

_IDX_TYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: Union[str, Path], expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse an IDX file (big-endian header, row-major payload)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4:
        raise IngestionError(f"{path}: truncated header at byte offset {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise IngestionError(f"{path}: bad magic prefix at byte offset 0")
    magic = int.from_bytes(raw[:4], "big")
    if expected_magic is not None and magic != expected_magic:
        raise IngestionError(f"{path}: magic 0x{magic:08x} != expected 0x{expected_magic:08x} at byte offset 0")
    dtype_code, ndim = raw[2], raw[3]
    if dtype_code not in _IDX_TYPES:
        raise IngestionError(f"{path}: unknown data type 0x{dtype_code:02x} at byte offset 2")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IngestionError(f"{path}: truncated dimension list at byte offset {len(raw)}")
    dims = tuple(int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    dtype = np.dtype(_IDX_TYPES[dtype_code])
    expected = header_end + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise IngestionError(
            f"{path}: payload size mismatch, expected {expected} bytes, file ends at byte offset {len(raw)}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def write_idx(path: Union[str, Path], array: np.ndarray) -> Path:
    """Write a uint8 array in IDX format (used for fixtures and exports)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + b"".join(int(s).to_bytes(4, "big") for s in array.shape)
    path = Path(path)
    path.write_bytes(header + array.tobytes())
    return path


def zz_z0_labels(features: np.ndarray, n_layers: int = 2) -> np.ndarray:
    """``<Z>`` on qubit 0 after the second-order Pauli-Z encoding of each row."""
    d = features.shape[1]
    spec = named_circuit("ZZFeatureMap", d, n_layers, d)
    amps = encode_states(spec, features, np.zeros(0))
    return pauli_expectation_batch(amps, d, PauliString({0: "Z"}))


def qfmnist(
    d: int,
    M_total: int = 300,
    images_path: Union[str, Path] = "train-images-idx3-ubyte",
    seed: int = 0,
    n_layers: int = 2,
) -> Dataset:
    """Quantum-labelled fashion-MNIST regression set with ``d`` principal components."""
    if d < 1:
        raise ConfigurationError(f"d must be >= 1, got {d}")
    images = read_idx(images_path, expected_magic=0x00000803)
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if M_total > flat.shape[0]:
        raise ConfigurationError(f"requested {M_total} samples, file has {flat.shape[0]}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(flat.shape[0], size=M_total, replace=False))
    sub = flat[chosen]
    model = pca_fit(sub, d)
    comps = pca_apply(model, sub)
    lo, hi = comps.min(axis=0), comps.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    X = 2.0 * (comps - lo) / span - 1.0
    y = zz_z0_labels(X, n_layers)
    train, test = split_indices(M_total, _split_sizes(M_total), seed)
    meta = {"source_rows": chosen.tolist(), "n_layers": n_layers, "explained_variance": model.explained_variance.tolist()}
    return Dataset(X, y, train, test, "QFMNIST", d, seed, "regression", meta)


# --------------------------------------------------------------------------
# CSV


def load_csv_regression(path: Union[str, Path], profile: Optional[str] = None, seed: int = 0) -> Dataset:
    """Load ``d`` feature columns plus a final target column (header row required).

    ``profile="nh3"`` enforces six features and 193 rows with a 155/38 split.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if not header or len(header) < 2:
        raise SchemaError(f"{path}: need a header with at least one feature and one target column")
    try:
        data = np.array([[float(v) for v in row] for row in rows], dtype=np.float64)
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric value ({exc})") from None
    if data.ndim != 2 or data.shape[1] != len(header):
        raise SchemaError(f"{path}: rows do not match the {len(header)} header columns")
    X, y = data[:, :-1], data[:, -1]
    if profile == "nh3":
        if X.shape[1] != NH3_FEATURES:
            raise SchemaError(f"NH3 profile expects {NH3_FEATURES} feature columns, found {X.shape[1]}")
        if X.shape[0] != NH3_ROWS:
            raise SchemaError(f"NH3 profile expects {NH3_ROWS} rows, found {X.shape[0]}")
        n_test, family = NH3_TEST, "NH3PES"
    elif profile is None:
        n_test, family = _split_sizes(X.shape[0]), "CsvCustom"
    else:
        raise ConfigurationError(f"unknown CSV profile {profile!r}")
    train, test = split_indices(X.shape[0], n_test, seed)
    meta = {"path": str(path), "columns": header}
    return Dataset(X, y, train, test, family, X.shape[1], seed, "regression", meta)


# --------------------------------------------------------------------------
# complexity


def complexity_cbar(dataset: Dataset, return_flags: bool = False):
    """Average absolute Spearman correlation between [0, 1]-normalised features and the target.

    Higher values mean easier problems. Constant features contribute 0 and are
    reported in the flag list.
    """
    X, y = dataset.X, dataset.y
    if X.shape[0] < 3:
        raise ShapeError("complexity needs at least 3 samples")
    values, flagged = [], []
    for j in range(X.shape[1]):
        col = X[:, j]
        lo, hi = col.min(), col.max()
        if hi == lo:
            values.append(0.0)
            flagged.append(j)
            continue
        values.append(abs(stats.spearman((col - lo) / (hi - lo), y).coefficient))
    if flagged:
        logger.warning("constant features %s contribute 0 to C-bar", flagged)
    cbar = float(np.mean(values))
    return (cbar, flagged) if return_flags else cbar


# --------------------------------------------------------------------------
# persistence


def write_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    """Write ``manifest.json`` and ``data.csv`` (features then target)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = [f"x{i}" for i in range(dataset.n_features)] + ["y"]
    with (directory / "data.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row, target in zip(dataset.X, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(target))])
    manifest = {
        "family": dataset.family,
        "control": dataset.control,
        "seed": dataset.seed,
        "task": dataset.task,
        "n_samples": int(dataset.X.shape[0]),
        "n_features": dataset.n_features,
        "train_idx": dataset.train_idx.tolist(),
        "test_idx": dataset.test_idx.tolist(),
        "payload": "data.csv",
        "meta": {k: v for k, v in dataset.meta.items() if k != "source_rows"},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        data = np.loadtxt(directory / manifest.get("payload", "data.csv"), delimiter=",", skiprows=1, ndmin=2)
    except OSError as exc:
        raise IngestionError(f"cannot read dataset in {directory}: {exc}") from exc
    return Dataset(
        data[:, :-1],
        data[:, -1],
        np.asarray(manifest["train_idx"], dtype=int),
        np.asarray(manifest["test_idx"], dtype=int),
        manifest["family"],
        manifest.get("control"),
        manifest.get("seed"),
        manifest.get("task", "regression"),
        manifest.get("meta", {}),
    )
