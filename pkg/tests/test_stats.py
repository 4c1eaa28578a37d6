import itertools
import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from qkbench.errors import ConditioningError, DegenerateError, InsufficientDataError, SchemaError, ShapeError
from qkbench.stats import (
    CORR_MATRIX_SCHEMA,
    CorrResult,
    benjamini_hochberg,
    corr_matrix,
    partial_corr,
    partial_corr_matrix,
    pearson,
    permutation_p_value,
    rank,
    spearman,
)


def mean_center_lstsq_residual(v, Z):
    # Independent residualization via the normal equations with an intercept column.
    A = np.column_stack([np.ones(len(v)), Z])
    coef = np.linalg.solve(A.T @ A, A.T @ v)
    return v - A @ coef


class TestPearson:
    def test_linear(self):
        x = np.arange(10.0)
        assert pearson(x, 2 * x + 1).coefficient == pytest.approx(1.0)
        assert pearson(x, -x).coefficient == pytest.approx(-1.0)

    def test_hand_example(self):
        assert pearson([1, 2, 3], [1, 3, 2]).coefficient == pytest.approx(0.5)

    def test_constant(self):
        with pytest.raises(DegenerateError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_too_short(self):
        with pytest.raises(InsufficientDataError):
            pearson([1, 2], [1, 2])

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            pearson([1, 2, 3], [1, 2])

    @pytest.mark.parametrize("seed", range(5))
    def test_against_scipy(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(40)
        y = 0.3 * x + rng.standard_normal(40)
        ref = sps.pearsonr(x, y)
        res = pearson(x, y)
        assert res.coefficient == pytest.approx(ref.statistic, abs=1e-12)
        assert res.p_value == pytest.approx(ref.pvalue, rel=1e-8)


class TestSpearman:
    def test_monotone(self):
        x = np.linspace(-2, 3, 11)
        assert spearman(x, x**3).coefficient == pytest.approx(1.0)

    def test_hand_example(self):
        assert spearman([1, 2, 3], [3, 1, 2]).coefficient == pytest.approx(-0.5)

    def test_mid_ranks(self):
        np.testing.assert_array_equal(rank([10, 20, 20, 5]), [2, 3.5, 3.5, 1])

    def test_ties_equal_pearson_of_ranks(self):
        x = [1, 2, 2, 3, 3, 3, 7]
        y = [4, 4, 1, 2, 9, 9, 0]
        assert spearman(x, y).coefficient == pearson(rank(x), rank(y)).coefficient

    @pytest.mark.parametrize("n", range(3, 9))
    def test_closed_form(self, n):
        rng = np.random.default_rng(n)
        for _ in range(20):
            x, y = rng.permutation(n) * 1.5, rng.permutation(n) - 3.0
            d = sps.rankdata(x) - sps.rankdata(y)
            expected = 1 - 6 * np.sum(d**2) / (n * (n**2 - 1))
            assert spearman(x, y).coefficient == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone_invariance(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal(25), rng.standard_normal(25)
        assert spearman(np.exp(x), y**3).coefficient == pytest.approx(spearman(x, y).coefficient, abs=1e-12)

    def test_exact_permutation(self):
        x = [1, 2, 3, 4, 5]
        y = [2, 1, 4, 3, 5]
        rho = spearman(x, y).coefficient
        # Brute-force count of permutations at least as extreme.
        count = 0
        for perm in itertools.permutations(y):
            count += abs(sps.spearmanr(x, perm).statistic) >= abs(rho) - 1e-12
        assert spearman(x, y, exact=True).p_value == pytest.approx(count / 120)

    def test_exact_limited(self):
        with pytest.raises(InsufficientDataError):
            permutation_p_value(np.arange(11), np.arange(11))


class TestPValues:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 60))
    def test_range(self, seed, n):
        rng = np.random.default_rng(seed)
        res = spearman(rng.standard_normal(n), rng.standard_normal(n))
        assert 0 <= res.p_value <= 1

    def test_monotone_in_coefficient(self):
        from qkbench.stats import t_p_value

        ps = [t_p_value(r, 20) for r in np.linspace(0, 0.99, 30)]
        assert all(a > b for a, b in zip(ps, ps[1:]))

    def test_significance_threshold(self):
        assert CorrResult(0.3, 0.05, 10).significant
        assert not CorrResult(0.3, 0.0501, 10).significant


class TestPartial:
    def test_no_controls(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal(30), rng.standard_normal(30)
        assert partial_corr(x, y).coefficient == pytest.approx(pearson(x, y).coefficient)
        assert partial_corr(x, y, method="spearman").coefficient == pytest.approx(spearman(x, y).coefficient)

    def test_shared_cause_removed(self):
        # The residuals are independent noise, so |r| < 0.2 is a ~2.8 sigma bound at n = 200.
        hits = 0
        for seed in range(40):
            rng = np.random.default_rng(seed)
            z = rng.standard_normal(200)
            x = z + 1e-3 * rng.standard_normal(200)
            y = z + 1e-3 * rng.standard_normal(200)
            assert pearson(x, y).coefficient > 0.99
            hits += abs(partial_corr(x, y, z).coefficient) < 0.2
        assert hits >= 38

    @pytest.mark.parametrize("method", ["pearson", "spearman"])
    def test_symmetry(self, method):
        rng = np.random.default_rng(3)
        Z = rng.standard_normal((50, 2))
        x = Z[:, 0] + rng.standard_normal(50)
        y = Z[:, 1] - x + rng.standard_normal(50)
        a = partial_corr(x, y, Z, method).coefficient
        assert a == pytest.approx(partial_corr(y, x, Z, method).coefficient, abs=1e-12)

    def test_independent_controls(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(500)
        y = 0.5 * x + rng.standard_normal(500)
        Z = rng.standard_normal((500, 3))
        assert abs(partial_corr(x, y, Z).coefficient - pearson(x, y).coefficient) < 0.1

    def test_residual_oracle(self):
        rng = np.random.default_rng(5)
        Z = rng.standard_normal((40, 2))
        x = Z @ [1.0, -0.5] + rng.standard_normal(40)
        y = Z @ [0.2, 0.7] + 0.4 * x + rng.standard_normal(40)
        rx, ry = mean_center_lstsq_residual(x, Z), mean_center_lstsq_residual(y, Z)
        res = partial_corr(x, y, Z)
        assert res.coefficient == pytest.approx(np.corrcoef(rx, ry)[0, 1], abs=1e-12)
        assert res.p_value == pytest.approx(
            2 * sps.t.sf(abs(res.coefficient) * np.sqrt(36 / (1 - res.coefficient**2)), 36), rel=1e-10
        )
        semi = partial_corr(x, y, Z, mode="semipartial_x")
        assert semi.coefficient == pytest.approx(np.corrcoef(rx, y)[0, 1], abs=1e-12)
        semi_y = partial_corr(x, y, Z, mode="semipartial_y")
        assert semi_y.coefficient == pytest.approx(np.corrcoef(x, ry)[0, 1], abs=1e-12)

    def test_rank_deficient(self):
        rng = np.random.default_rng(6)
        z = rng.standard_normal(20)
        with pytest.raises(ConditioningError):
            partial_corr(rng.standard_normal(20), rng.standard_normal(20), np.column_stack([z, 2 * z]))

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            partial_corr([1, 2, 3, 4], [2, 1, 4, 3], np.zeros((4, 2)))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            partial_corr([1, 2, 3, 4], [2, 1, 4, 3], mode="both")


class TestBH:
    def test_against_scipy(self):
        p = np.random.default_rng(0).uniform(0, 0.2, size=25)
        np.testing.assert_allclose(benjamini_hochberg(p), sps.false_discovery_control(p), rtol=1e-12)

    def test_nan_kept(self):
        out = benjamini_hochberg([0.01, np.nan, 0.04])
        assert np.isnan(out[1])
        np.testing.assert_allclose(out[[0, 2]], [0.02, 0.04])


class TestCorrMatrix:
    def test_duplicated_column(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal(20)
        m = corr_matrix({"a": a, "b": a, "c": rng.standard_normal(20)}, ["a", "b", "c"])
        assert m.coefficients[0, 1] == pytest.approx(1.0)
        np.testing.assert_array_equal(m.coefficients, m.coefficients.T)

    def test_null_distribution(self):
        ok = 0
        for seed in range(40):
            rng = np.random.default_rng(seed)
            table = {f"v{i}": rng.standard_normal(300) for i in range(4)}
            m = corr_matrix(table, list(table))
            off = m.coefficients[~np.eye(4, dtype=bool)]
            ok += bool(np.all(np.abs(off) < 0.15))
        assert ok >= 0.95 * 40

    def test_failed_rows_excluded(self):
        rows = [{"a": i, "b": i * i, "status": "ok"} for i in range(5)]
        rows.append({"a": 100, "b": -1e6, "status": "failed"})
        rows.append({"a": None, "b": 3, "status": "ok"})
        m = corr_matrix(rows, ["a", "b"])
        assert m.n == 5
        assert m.coefficients[1, 0] == pytest.approx(1.0)

    def test_empty_selection(self):
        with pytest.raises(SchemaError):
            corr_matrix({"a": [1, 2, 3]}, [])

    def test_missing_variable(self):
        with pytest.raises(SchemaError):
            corr_matrix({"a": [1, 2, 3]}, ["a", "zz"])

    def test_constant_pair_is_nan(self):
        m = corr_matrix({"a": [1, 2, 3, 4], "b": [1, 1, 1, 1]}, ["a", "b"])
        assert np.isnan(m.coefficients[0, 1])

    def test_layout_and_schema(self, tmp_path):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(50)
        table = {"x": x, "y": x + 0.1 * rng.standard_normal(50), "z": rng.standard_normal(50)}
        m = corr_matrix(table, ["x", "y", "z"], adjust=True)
        L = m.layout()
        assert L[1, 0] == m.coefficients[1, 0]
        assert L[0, 1] == m.p_values[0, 1]
        assert m.significant[0, 1] and not m.significant[0, 0]
        doc = json.loads(m.write_json(tmp_path / "m.json").read_text())
        jsonschema.validate(doc, CORR_MATRIX_SCHEMA)
        assert doc["p_adjustment"] == "benjamini-hochberg"

    def test_partial_matrix(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal(200)
        table = {"a": z + 0.01 * rng.standard_normal(200), "b": z + 0.01 * rng.standard_normal(200), "z": z}
        plain = corr_matrix(table, ["a", "b"], method="pearson")
        partial = partial_corr_matrix(table, ["a", "b"], ["z"], method="pearson")
        assert plain.coefficients[0, 1] > 0.99
        assert abs(partial.coefficients[0, 1]) < 0.2
        with pytest.raises(SchemaError):
            partial_corr_matrix(table, ["a", "z"], ["z"])
