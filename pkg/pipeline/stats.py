# ===========================================
# stats.py
# ===========================================

## \file stats.py
## \brief Welch's unequal-variance t-test with a self-contained Student-t tail.
##
## \details
## \par Description
##     The two-sided p-value is the regularized incomplete beta function
##         p = I_{df / (df + t^2)}(df / 2, 1 / 2)
##     evaluated with the modified Lentz continued fraction, switching to the
##     symmetry relation `I_x(a, b) = 1 - I_{1-x}(b, a)` where the fraction
##     converges slowly.


from math import exp, isfinite, lgamma, log, sqrt
import numpy as np

from model.errors import DegenerateInputError


_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 500


def _beta_fraction(a: float, b: float, x: float) -> float:
    """!Continued fraction of the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d

    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c

        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """!I_x(a, b) for a, b > 0 and x in [0, 1].

    @throws ValueError On parameters outside the domain.
    """
    if a <= 0 or b <= 0:
        raise ValueError("regularized_incomplete_beta: a and b must both be > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("regularized_incomplete_beta: x must be between 0 and 1")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0

    front = exp(lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log(1.0 - x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_fraction(a, b, x) / a
    return 1.0 - front * _beta_fraction(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, df: float) -> float:
    """!P(|T| >= |t|) for a Student-t variable with `df` degrees of freedom."""
    if df <= 0:
        raise ValueError(f"Degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 1.0
    if not isfinite(t):
        return 0.0
    return min(1.0, regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t)))


def welch_t_test(sample_a, sample_b) -> tuple:
    """!Unequal-variance t statistic with Welch-Satterthwaite degrees of freedom.

    @return `(t, p)` with a two-sided p-value.

    @throws ValueError If a sample has fewer than two values or non-finite entries.
    @throws DegenerateInputError If both samples have zero variance.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
        raise ValueError("welch_t_test needs two 1-D samples with at least two values each")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("welch_t_test samples must be finite")

    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    if va == 0.0 and vb == 0.0:
        raise DegenerateInputError("Both samples have zero variance")

    se2 = va + vb
    t = float((a.mean() - b.mean()) / sqrt(se2))
    df = se2 * se2 / (va * va / (len(a) - 1) + vb * vb / (len(b) - 1))
    return t, student_t_two_sided(t, float(df))
