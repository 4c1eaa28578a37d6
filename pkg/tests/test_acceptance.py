"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are written
straight to the terminal even when output capture is on.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import stats as sps

from qkbench.circuits import CIRCUIT_NAMES, init_params, named_circuit
from qkbench.datasets import complexity_cbar, friedman1, friedman1_target, hidden_manifold_diff, two_curves_diff
from qkbench.kernels import (
    OPERATOR_SETS,
    OUTER_KERNELS,
    AdamConfig,
    OuterKernelParams,
    expand_operator,
    extract_F,
    fqk_gram,
    kta_optimize,
    pqk_features,
    pqk_gram,
)
from qkbench.learners import ModelConfig, krr_fit, roc_auc, scaler_apply, scaler_fit, svc_decision, svc_fit, svr_fit
from qkbench.statevec import GATE_KINDS, ROTATION_KINDS, SINGLE_QUBIT_KINDS, Gate, StateVector, apply_gate, apply_gates
from qkbench.stats import CORR_MATRIX_SCHEMA, corr_matrix, partial_corr, spearman
from qkbench.tuner import Domain, SearchSpace, TrialRecord, best_record, default_space, fanova_importance, grid_search, optimize

from oracles import dense_gate, svc_dual_reference, svr_dual_reference


@pytest.fixture
def report(capsys):
    def emit(number, checks, start):
        ok = all(passed for _, passed in checks)
        failed = [name for name, passed in checks if not passed]
        detail = "; ".join(failed) if failed else f"{len(checks)} checks"
        with capsys.disabled():
            print(f"\nCriterion {number}: {'PASS' if ok else 'FAIL'} ({detail}, {time.perf_counter() - start:.1f}s)")
        assert ok, f"criterion {number} failed: {', '.join(failed)}"

    return emit


def random_state(n, rng):
    v = rng.standard_normal(2**n) + 1j * rng.standard_normal(2**n)
    return StateVector(n, v / np.linalg.norm(v))


def random_gate(n, rng):
    kinds = sorted(GATE_KINDS) if n >= 2 else sorted(SINGLE_QUBIT_KINDS)
    kind = kinds[rng.integers(len(kinds))]
    arity = 1 if kind in SINGLE_QUBIT_KINDS else 2
    targets = tuple(int(t) for t in rng.choice(n, size=arity, replace=False))
    angle = float(rng.uniform(-2 * math.pi, 2 * math.pi)) if kind in ROTATION_KINDS else None
    return Gate(kind, targets, angle)


def test_criterion_1_simulator_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in (1, 2, 3):
        for kind in sorted(GATE_KINDS):
            arity = 1 if kind in SINGLE_QUBIT_KINDS else 2
            if arity > n:
                continue
            for targets in itertools.permutations(range(n), arity):
                for _ in range(3):
                    angle = float(rng.uniform(-2 * math.pi, 2 * math.pi)) if kind in ROTATION_KINDS else None
                    s = random_state(n, rng)
                    got = apply_gate(s, Gate(kind, targets, angle)).amplitudes
                    worst = max(worst, np.abs(got - dense_gate(kind, targets, angle, n) @ s.amplitudes).max())
    drift = 0.0
    for seed in range(20):
        g = np.random.default_rng(seed)
        n = int(g.integers(1, 9))
        drift = max(drift, abs(apply_gates(random_state(n, g), [random_gate(n, g) for _ in range(200)]).norm() - 1))
    elapsed = time.perf_counter() - start
    report(1, [("dense match 1e-12", worst < 1e-12), ("norm drift 1e-9", drift < 1e-9),
               ("runtime < 60s", elapsed < 60)], start)


def test_criterion_2_fqk_product_of_cosines(report):
    start = time.perf_counter()
    worst = 0.0
    for d in range(1, 7):
        rng = np.random.default_rng(d)
        spec = named_circuit("SeparableRx", d, 1, d)
        X, Y = rng.uniform(-math.pi, math.pi, size=(2, 64, d))
        G = fqk_gram(spec, init_params(spec, 0), X, Y).entries
        expected = np.prod(np.cos((X[:, None, :] - Y[None, :, :]) / 2) ** 2, axis=-1)
        worst = max(worst, np.abs(G - expected).max())
    report(2, [("match 1e-10", worst < 1e-10)], start)


def test_criterion_3_pqk_identity_chain(report):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    spec = named_circuit("HardwareEfficientRx", 4, 2, 4)
    X = rng.uniform(-math.pi / 2, math.pi / 2, size=(16, 4))
    gamma = 0.05
    checks = []
    for name in OPERATOR_SETS:
        F = pqk_features(spec, init_params(spec, 0), X, expand_operator(name, 4))
        sq = ((F[:, None, :] - F[None, :, :]) ** 2).sum(-1)
        G = pqk_gram(F, None, OuterKernelParams("Gaussian", gamma=gamma))
        checks.append((f"{name} recovers distances", np.abs(extract_F(G, gamma) - sq).max() < 1e-9))
    report(3, checks, start)


def test_criterion_4_psd_suite(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    pools = [friedman1(5, seed=0).X, two_curves_diff(5, seed=0).X, hidden_manifold_diff(5, seed=0).X]
    worst = np.inf
    for _ in range(100):
        name = CIRCUIT_NAMES[rng.integers(len(CIRCUIT_NAMES))]
        pool = pools[rng.integers(len(pools))]
        rows = rng.choice(pool.shape[0], size=32, replace=False)
        d = pool.shape[1]
        spec = named_circuit(name, d, int(rng.integers(1, 4)), d, ("Option1", "Option2")[rng.integers(2)])
        cheb = name == "ChebyshevPQC"
        X = scaler_apply(scaler_fit(pool[rows], -1.0, 1.0, chebyshev=cheb), pool[rows])
        params = init_params(spec, int(rng.integers(1000)))
        G = fqk_gram(spec, params, X).entries
        outer_kind = OUTER_KERNELS[rng.integers(len(OUTER_KERNELS))]
        outer = OuterKernelParams(outer_kind, gamma=float(rng.uniform(0.1, 2)), ell=float(rng.uniform(0.5, 3)),
                                  alpha=float(rng.uniform(0.5, 3)))
        opset = OPERATOR_SETS[rng.integers(len(OPERATOR_SETS))]
        P = pqk_gram(pqk_features(spec, params, X, expand_operator(opset, d)), None, outer).entries
        worst = min(worst, np.linalg.eigvalsh(G).min(), np.linalg.eigvalsh(P).min())
    report(4, [(f"min eigenvalue {worst:.2e} >= -1e-8", worst >= -1e-8)], start)


def rbf(A, B):
    return np.exp(-((A[:, None, :] - B[None, :, :]) ** 2).sum(-1))


def test_criterion_5_learner_oracles(report):
    start = time.perf_counter()
    checks = []
    rng = np.random.default_rng(5)
    spec = named_circuit("ZZFeatureMap", 3, 2, 3)
    X = rng.uniform(-1, 1, size=(20, 3))
    G = fqk_gram(spec, init_params(spec, 0), X).entries
    y = rng.standard_normal(20)
    lam = 1e-3
    model = krr_fit(G, y, lam)
    residual = np.linalg.norm((G + lam * np.eye(20)) @ model.dual_coefficients - y)
    checks.append(("KRR residual < 1e-8", residual < 1e-8))
    for seed in range(3):
        r = np.random.default_rng(seed)
        labels = np.where(np.arange(20) % 2 == 0, 1.0, -1.0)
        Xs = r.standard_normal((20, 2)) * 0.8 + labels[:, None]
        Gs = rbf(Xs, Xs)
        for C in (0.1, 1.0, 10.0):
            svc = svc_fit(Gs, labels, C)
            _, ref = svc_dual_reference(Gs, labels, C)
            checks.append((f"SVC dual seed {seed} C {C}", abs(svc.dual_objective - ref) <= 1e-4 * abs(ref)))
        z = np.sin(Xs[:, 0]) + 0.1 * r.standard_normal(20)
        svr = svr_fit(Gs, z, 2.0, 0.1)
        _, ref = svr_dual_reference(Gs, z, 2.0, 0.1)
        checks.append((f"SVR dual seed {seed}", abs(svr.dual_objective - ref) <= 1e-4 * abs(ref)))
    # Two clusters far apart on one feature, encoded by SeparableRx.
    toy = named_circuit("SeparableRx", 1, 1, 1)
    labels = np.repeat([1.0, -1.0], 10)
    Xtr = np.concatenate([rng.uniform(-1.4, -1.0, 10), rng.uniform(1.0, 1.4, 10)])[:, None]
    Xte = np.concatenate([rng.uniform(-1.4, -1.0, 8), rng.uniform(1.0, 1.4, 8)])[:, None]
    params = init_params(toy, 0)
    svc = svc_fit(fqk_gram(toy, params, Xtr).entries, labels, 1.0)
    auc = roc_auc(svc_decision(svc, fqk_gram(toy, params, Xte, Xtr).entries), np.repeat([1.0, -1.0], 8))
    checks.append(("separable toy AUC = 1", auc == 1.0))
    report(5, checks, start)


def test_criterion_6_friedman_generator(report):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    X = rng.uniform(size=(500, 8))
    direct = (10 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20 * (X[:, 2] - 0.5) ** 2 + 10 * X[:, 3] + 5 * X[:, 4])
    noiseless = friedman1(8, sigma=0.0, seed=6)
    direct_ds = (10 * np.sin(np.pi * noiseless.X[:, 0] * noiseless.X[:, 1]) + 20 * (noiseless.X[:, 2] - 0.5) ** 2
                 + 10 * noiseless.X[:, 3] + 5 * noiseless.X[:, 4])
    half = friedman1_target(np.full((1, 5), 0.5))[0]
    report(6, [
        ("target matches direct evaluation", np.abs(friedman1_target(X) - direct).max() < 1e-12),
        ("noiseless dataset matches", np.abs(noiseless.y - direct_ds).max() < 1e-12),
        (f"x = 0.5 gives {half:.6f}", abs(half - 14.5711) < 1e-4),
    ], start)


def trend_checks(label, make):
    controls = list(range(2, 21))
    means = np.array([np.mean([complexity_cbar(make(c, s)) for s in range(5)]) for c in controls])
    steps = int(np.sum(np.diff(means) < 0))
    rho = sps.spearmanr(controls, means).statistic
    return [
        (f"{label}: {steps}/18 decreasing steps (need 15), rank correlation {rho:.3f}", steps >= 15),
        (f"{label}: rank correlation {rho:.3f} (need <= -0.8)", rho <= -0.8),
    ]


def test_criterion_7_complexity_trend(report):
    start = time.perf_counter()
    checks = trend_checks("two curves", lambda D, s: two_curves_diff(D, seed=s))
    checks += trend_checks("hidden manifold", lambda m, s: hidden_manifold_diff(m, seed=s))
    checks.append(("runtime < 600s", time.perf_counter() - start < 600))
    report(7, checks, start)


def test_criterion_8_mini_study(report):
    start = time.perf_counter()
    ds = friedman1(5, seed=0)
    Xtr, Xte = ds.X_train, ds.X_test
    lo, hi = ds.y_train.min(), ds.y_train.max()
    ytr, yte = (ds.y_train - lo) / (hi - lo), (ds.y_test - lo) / (hi - lo)
    A = np.column_stack([np.ones(len(ytr)), Xtr])
    coef = np.linalg.lstsq(A, ytr, rcond=None)[0]
    ols = float(np.mean((np.column_stack([np.ones(len(yte)), Xte]) @ coef - yte) ** 2))
    results = {}
    for kernel in ("FQK", "PQK"):
        recs = grid_search(ds, ["SeparableRx", "ZZFeatureMap"], [5], [1, 2, 4], ModelConfig(learner="QKRR", kernel=kernel),
                           60, lambda c: default_space(c, 5), "TPE", 0, evaluate_test=False)
        results[kernel] = best_record(recs).test_score
    best = min(results.values())
    elapsed = time.perf_counter() - start
    report(8, [
        (f"best test MSE {best:.5f} (FQK {results['FQK']:.5f}, PQK {results['PQK']:.5f}) < OLS {ols:.5f}", best < ols),
        ("runtime < 1h", elapsed < 3600),
    ], start)


def test_criterion_9_tuner(report):
    start = time.perf_counter()
    space = SearchSpace({"x": Domain("uniform", -3.0, 3.0)})
    wins = 0
    for seed in range(10):
        dist = {}
        for sampler in ("TPE", "Random"):
            recs = optimize(lambda a: -(a["x"] - 0.7) ** 2, space, 60, sampler, seed)
            dist[sampler] = np.mean([abs(r.assignment["x"] - 0.7) for r in recs[-20:]])
        wins += dist["TPE"] < dist["Random"]
    two = SearchSpace({"a": Domain("uniform", 0.0, 1.0), "b": Domain("uniform", 0.0, 1.0)})
    recovered, worst_sum = 0, 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        recs = []
        for i in range(100):
            a, b = rng.uniform(size=2)
            recs.append(TrialRecord(i, {"a": a, "b": b}, objective=float(10 * a + b)))
        imp = fanova_importance(recs, two, seed=seed).importances
        recovered += imp["a"] > imp["b"]
        worst_sum = max(worst_sum, abs(sum(imp.values()) - 1))
    report(9, [(f"TPE beats Random in {wins}/10 seeds", wins == 10),
               (f"dominant variable in {recovered}/10 seeds", recovered >= 9),
               ("importances sum to 1 +- 1e-8", worst_sum <= 1e-8)], start)


def test_criterion_10_stats(report, tmp_path):
    import json

    import jsonschema

    start = time.perf_counter()
    closed = True
    for n in range(3, 9):
        rng = np.random.default_rng(n)
        for _ in range(20):
            x, y = rng.permutation(n).astype(float), rng.permutation(n).astype(float)
            d = sps.rankdata(x) - sps.rankdata(y)
            closed &= abs(spearman(x, y).coefficient - (1 - 6 * np.sum(d**2) / (n * (n**2 - 1)))) < 1e-12
    rng = np.random.default_rng(10)
    z = rng.standard_normal(200)
    x = z + 1e-3 * rng.standard_normal(200)
    y = z + 1e-3 * rng.standard_normal(200)
    rho = partial_corr(x, y, z).coefficient
    table = {"lam": rng.standard_normal(50), "gamma": rng.standard_normal(50), "objective": rng.standard_normal(50)}
    doc = json.loads(corr_matrix(table, list(table), adjust=True).write_json(tmp_path / "m.json").read_text())
    try:
        jsonschema.validate(doc, CORR_MATRIX_SCHEMA)
        valid = True
    except jsonschema.ValidationError:
        valid = False
    report(10, [("Spearman closed form n <= 8", closed), (f"partial |rho| = {abs(rho):.3f} < 0.2", abs(rho) < 0.2),
                ("matrix export validates", valid)], start)


def test_criterion_11_kta(report):
    start = time.perf_counter()
    ds = two_curves_diff(3, M_total=60, seed=11, d=4)
    spec = named_circuit("YZ_CX", 4, 1, 4)
    scaler = scaler_fit(ds.X_train, -1.0, 1.0)
    Xtr, Xte = scaler_apply(scaler, ds.X_train)[:24], scaler_apply(scaler, ds.X_test)
    ytr = ds.y_train[:24]
    params0 = init_params(spec, 0)
    best, trace = kta_optimize(spec, params0, Xtr, ytr, AdamConfig(n_iter=100))

    def auc(params):
        model = svc_fit(fqk_gram(spec, params, Xtr).entries, ytr, 1.0)
        return roc_auc(svc_decision(model, fqk_gram(spec, params, Xte, Xtr).entries), ds.y_test)

    before, after = auc(params0), auc(best)
    report(11, [(f"KTA {trace[0]:.3f} -> best {max(trace):.3f} (AUC {before:.3f} -> {after:.3f})",
                 max(trace) >= trace[0]), ("100 steps recorded", len(trace) == 101)], start)
