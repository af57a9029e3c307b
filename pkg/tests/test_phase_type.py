import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import linalg as sla
from scipy import stats
from scipy.integrate import quad

from pdmpruin.phase_type import (
    PhaseType,
    coxian,
    density,
    erlang,
    exponential,
    matrix_exp,
    sample,
    tail,
    validate,
)


def exp_series(z, terms=60):
    # independent oracle: direct series summation of e^z
    total, term = 0.0, 1.0
    for k in range(terms):
        total += term
        term *= z / (k + 1)
    return total


class TestValidate:
    def test_exponential_valid(self):
        assert validate(exponential(2.0)).ok

    def test_positive_diagonal_invalid(self):
        report = validate(PhaseType([1.0], [[1.0]]))
        assert not report.ok
        names = [c.name for c in report.failures()]
        assert "diagonal must be negative" in names

    def test_erlang_valid(self):
        assert validate(erlang(2, 1.0)).ok

    def test_negative_offdiagonal_reported_with_index(self):
        report = validate(PhaseType([1.0, 0.0], [[-2.0, -0.5], [0.0, -1.0]]))
        bad = [c for c in report.failures() if "off-diagonal" in c.name]
        assert bad and "(0, 1)" in bad[0].detail

    def test_positive_row_sum_invalid(self):
        report = validate(PhaseType([1.0, 0.0], [[-1.0, 2.0], [0.0, -1.0]]))
        names = [c.name for c in report.failures()]
        assert "row sums of B nonpositive" in names
        assert "exit rates b = -B@1 nonnegative" in names

    def test_conservative_chain_invalid(self):
        # Zero row sums: no absorption, eigenvalue 0.
        report = validate(PhaseType([0.5, 0.5], [[-1.0, 1.0], [1.0, -1.0]]))
        names = [c.name for c in report.failures()]
        assert "at least one strictly negative row sum" in names
        assert "eigenvalues of B have negative real part" in names

    def test_beta_checks(self):
        report = validate(PhaseType([0.7, 0.7], [[-1.0, 0.0], [0.0, -1.0]]))
        assert "beta sums to 1" in [c.name for c in report.failures()]
        report = validate(PhaseType([1.5, -0.5], [[-1.0, 0.0], [0.0, -1.0]]))
        assert "beta entries nonnegative" in [c.name for c in report.failures()]


class TestTail:
    def test_at_zero(self):
        assert tail(exponential(2.0), 0.0) == pytest.approx(1.0, abs=1e-14)

    def test_exponential_closed_form(self):
        # scalar case checked against series summation of e^{-2}
        expected = exp_series(-2.0)
        assert_allclose(tail(exponential(2.0), 1.0), expected, rtol=1e-12)
        assert_allclose(expected, 0.1353352832366127, rtol=1e-15)

    def test_erlang2_by_convolution(self):
        # brute-force oracle: P[C1+C2 > x] = tail1(x) + int_0^x f1(s) tail2(x-s) ds
        mu, x = 1.0, 1.0
        conv, _ = quad(lambda s: mu * math.exp(-mu * s) * math.exp(-mu * (x - s)), 0, x)
        expected = math.exp(-mu * x) + conv
        assert_allclose(expected, 0.7357588823428847, rtol=1e-12)
        assert_allclose(tail(erlang(2, mu), x), expected, rtol=1e-12)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            tail(exponential(2.0), -0.1)

    def test_monotone_decreasing(self):
        rng = np.random.default_rng(3)
        pt = coxian([3.0, 2.0, 1.0], [0.7, 0.5])
        xs = np.sort(rng.uniform(0, 6, 40))
        vals = [tail(pt, float(x)) for x in xs]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert all(0.0 <= v <= 1.0 for v in vals)


class TestDensity:
    def test_exponential_at_zero_is_rate(self):
        assert_allclose(density(exponential(2.0), 0.0), 2.0, rtol=1e-14)

    def test_exponential_closed_form(self):
        assert_allclose(density(exponential(2.0), 1.0), 2.0 * exp_series(-2.0), rtol=1e-12)

    def test_erlang2_against_tail_derivative(self):
        # numerical differentiation of the tail as the independent oracle
        pt, x, h = erlang(2, 1.0), 2.0, 1e-6
        fd = -(tail(pt, x + h) - tail(pt, x - h)) / (2 * h)
        assert_allclose(fd, 0.2706705664732254, rtol=1e-8)
        assert_allclose(density(pt, x), 0.2706705664732254, rtol=1e-12)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            density(erlang(2, 1.0), -1e-9)

    @pytest.mark.parametrize(
        "pt", [exponential(2.0), erlang(2, 1.0), coxian([3.0, 2.0, 1.0], [0.7, 0.5])]
    )
    def test_integrates_to_one(self, pt):
        val, _ = quad(lambda x: density(pt, x), 0, np.inf, limit=200)
        assert_allclose(val, 1.0, rtol=1e-9)

    @pytest.mark.parametrize(
        "pt", [exponential(2.0), erlang(2, 1.0), coxian([3.0, 2.0, 1.0], [0.7, 0.5])]
    )
    def test_density_is_minus_tail_derivative(self, pt):
        h = 1e-6
        for x in np.linspace(0.1, 4.0, 9):
            fd = -(tail(pt, x + h) - tail(pt, x - h)) / (2 * h)
            assert density(pt, x) == pytest.approx(fd, abs=1e-6)


class TestSample:
    def test_exponential_mean(self):
        rng = np.random.default_rng(11)
        n = 10**6
        draws = sample(exponential(2.0), rng, size=n)
        # mean 1/mu = 0.5, sd of the mean = 0.5/sqrt(n)
        assert abs(draws.mean() - 0.5) < 3 * 0.5 / math.sqrt(n)

    def test_erlang_mean(self):
        rng = np.random.default_rng(12)
        n = 10**6
        draws = sample(erlang(2, 1.0), rng, size=n)
        assert abs(draws.mean() - 2.0) < 3 * math.sqrt(2.0) / math.sqrt(n)

    def test_seed_reproducibility(self):
        a = sample(erlang(2, 1.0), np.random.default_rng(5), size=1000)
        b = sample(erlang(2, 1.0), np.random.default_rng(5), size=1000)
        assert np.array_equal(a, b)

    def test_scalar_draw(self):
        v = sample(exponential(1.0), np.random.default_rng(0))
        assert isinstance(v, float) and v > 0

    @pytest.mark.parametrize(
        "pt", [exponential(2.0), erlang(2, 1.0), coxian([3.0, 2.0, 1.0], [0.7, 0.5])]
    )
    def test_ks_against_tail(self, pt):
        rng = np.random.default_rng(21)
        n = 10**5
        draws = sample(pt, rng, size=n)
        res = stats.kstest(draws, lambda x: 1.0 - np.vectorize(lambda v: tail(pt, v))(x))
        assert res.statistic < 1.63 / math.sqrt(n)  # 1% critical value
        assert res.pvalue > 0.01


class TestMatrixExp:
    def test_zero_matrix(self):
        assert_allclose(matrix_exp(np.zeros((3, 3)), 5.0), np.eye(3), atol=1e-15)

    def test_scalar(self):
        assert_allclose(matrix_exp(np.array([[-2.0]]), 1.0)[0, 0], math.exp(-2.0), rtol=1e-13)

    def test_nilpotent(self):
        M = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert_allclose(matrix_exp(M, 1.0), [[1.0, 1.0], [0.0, 1.0]], atol=1e-15)

    def test_semigroup_property(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            n = rng.integers(2, 6)
            M = rng.normal(size=(n, n))
            M -= (np.abs(M).sum(axis=1).max() + 0.5) * np.eye(n)  # stable
            s, t = rng.uniform(0.1, 2.0, size=2)
            left = matrix_exp(M, s + t)
            right = matrix_exp(M, s) @ matrix_exp(M, t)
            assert np.max(np.abs(left - right)) < 1e-10

    def test_against_scipy(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            n = rng.integers(1, 6)
            M = rng.normal(size=(n, n))
            ours = matrix_exp(M, 0.7)
            ref = sla.expm(M * 0.7)
            assert_allclose(ours, ref, rtol=1e-12, atol=1e-13)

    def test_overflow_signalled(self):
        with pytest.raises(OverflowError):
            matrix_exp(np.array([[1e306]]), 10.0)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            matrix_exp(np.ones((2, 3)), 1.0)
        with pytest.raises(ValueError):
            matrix_exp(np.array([[np.nan]]), 1.0)


class TestSerialization:
    def test_round_trip(self):
        pt = coxian([3.0, 2.0, 1.0], [0.7, 0.5])
        again = PhaseType.from_dict(pt.to_dict())
        assert_allclose(again.beta, pt.beta)
        assert_allclose(again.B, pt.B)

    def test_b_is_recomputed_not_read(self):
        d = exponential(2.0).to_dict()
        d["b"] = [123.0]  # must be ignored
        pt = PhaseType.from_dict(d)
        assert_allclose(pt.b, [2.0])

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            PhaseType.from_dict({"beta": [1.0], "B": [[-1.0]], "extra": 1})

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            PhaseType([1.0, 0.0], [[-1.0]])
