import numpy as np
import pytest
from scipy import special, stats

from model.errors import DegenerateInputError
from pipeline.stats import regularized_incomplete_beta, student_t_two_sided, welch_t_test


class TestIncompleteBeta:
    @pytest.mark.parametrize("a,b,x", [
        (0.5, 0.5, 0.3), (2.0, 3.0, 0.4), (10.0, 0.5, 0.95), (0.5, 10.0, 0.02), (50.0, 0.5, 0.99), (3.0, 3.0, 0.5),
    ])
    def test_matches_scipy(self, a, b, x):
        assert regularized_incomplete_beta(a, b, x) == pytest.approx(special.betainc(a, b, x), rel=1e-10, abs=1e-14)

    def test_endpoints(self):
        assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
        assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0

    def test_domain(self):
        with pytest.raises(ValueError):
            regularized_incomplete_beta(0.0, 1.0, 0.5)
        with pytest.raises(ValueError):
            regularized_incomplete_beta(1.0, 1.0, 1.5)


class TestStudentT:
    @pytest.mark.parametrize("t,df", [(0.5, 3.0), (2.1, 10.0), (-4.0, 7.5), (1.96, 1000.0), (12.0, 4.0)])
    def test_matches_scipy(self, t, df):
        assert student_t_two_sided(t, df) == pytest.approx(2.0 * stats.t.sf(abs(t), df), rel=1e-9, abs=1e-15)

    def test_zero_statistic(self):
        assert student_t_two_sided(0.0, 5.0) == 1.0


class TestWelch:
    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        a = rng.normal(25.0, 1.0, size=40)
        b = rng.normal(24.5, 2.5, size=25)
        t, p = welch_t_test(a, b)
        ref = stats.ttest_ind(a, b, equal_var=False)
        assert t == pytest.approx(ref.statistic, rel=1e-12)
        assert p == pytest.approx(ref.pvalue, rel=1e-8)

    def test_matches_scipy_over_random_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            a = rng.normal(rng.uniform(24.0, 26.0), rng.uniform(0.5, 4.0), size=int(rng.integers(2, 60)))
            b = rng.normal(rng.uniform(24.0, 26.0), rng.uniform(0.5, 4.0), size=int(rng.integers(2, 60)))
            t, p = welch_t_test(a, b)
            ref = stats.ttest_ind(a, b, equal_var=False)
            assert t == pytest.approx(ref.statistic, rel=1e-10)
            assert p == pytest.approx(ref.pvalue, rel=1e-7, abs=1e-300)

    def test_identical_samples(self):
        t, p = welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert t == 0.0 and p == 1.0

    def test_one_constant_sample(self):
        t, p = welch_t_test([5.0, 5.0, 5.0], [1.0, 2.0, 3.0, 4.0])
        ref = stats.ttest_ind([5.0, 5.0, 5.0], [1.0, 2.0, 3.0, 4.0], equal_var=False)
        assert t == pytest.approx(ref.statistic) and p == pytest.approx(ref.pvalue, rel=1e-8)

    def test_both_constant(self):
        with pytest.raises(DegenerateInputError):
            welch_t_test([1.0, 1.0], [2.0, 2.0])

    def test_too_few_values(self):
        with pytest.raises(ValueError):
            welch_t_test([1.0], [2.0, 3.0])
