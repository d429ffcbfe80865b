"""Scalar special functions used by the closed-form link analysis.

Gaussian tail probability, upper/lower incomplete gamma and the double
factorial. Everything here is pure and operates on Python floats.
"""

import math
import sys

_EPS = 1e-16
_TINY = sys.float_info.min / sys.float_info.epsilon
_MAX_ITER = 10_000


def _require_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"argument must be finite, got {v!r}")


def q_function(x: float) -> float:
    """Standard normal tail probability ``P(Z > x)``."""
    if math.isnan(x):
        raise ValueError("Q(x) undefined for NaN")
    if math.isinf(x):
        raise ValueError("Q(x) requires a finite argument; use the limits 0 and 1")
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def _gamma_series(s: float, x: float) -> float:
    # sum_{n>=0} x^n / (s (s+1) ... (s+n)), converges for all x, fast for x < s+1
    term = 1.0 / s
    total = term
    ap = s
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            return total
    raise ArithmeticError(f"incomplete gamma series did not converge (s={s}, x={x})")


def _gamma_cfrac(s: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Gamma(s, x) e^x x^-s
    b = x + 1.0 - s
    c = 1.0 / _TINY
    d = 1.0 / b if b != 0.0 else 1.0 / _TINY
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete gamma continued fraction did not converge (s={s}, x={x})")


def _check_gamma_args(s: float, x: float) -> None:
    _require_finite(s, x)
    if s <= 0.0:
        raise ValueError(f"shape s must be positive, got {s}")
    if x < 0.0:
        raise ValueError(f"lower limit x must be non-negative, got {x}")


def lower_incomplete_gamma(s: float, x: float) -> float:
    """``gamma(s, x) = int_0^x t^(s-1) e^-t dt``.

    Computed directly rather than as ``Gamma(s) - Gamma(s, x)`` so that small
    ``x`` keeps full relative accuracy.
    """
    _check_gamma_args(s, x)
    if x == 0.0:
        return 0.0
    if x < s + 1.0:
        return math.exp(s * math.log(x) - x) * _gamma_series(s, x)
    return math.gamma(s) - upper_incomplete_gamma(s, x)


def upper_incomplete_gamma(s: float, x: float) -> float:
    """``Gamma(s, x) = int_x^inf t^(s-1) e^-t dt`` for ``s > 0, x >= 0``.

    Series below ``x = s + 1``, continued fraction above it.
    """
    _check_gamma_args(s, x)
    if x == 0.0:
        return math.gamma(s)
    if x < s + 1.0:
        return math.gamma(s) - math.exp(s * math.log(x) - x) * _gamma_series(s, x)
    return math.exp(s * math.log(x) - x) * _gamma_cfrac(s, x)


def double_factorial(n: int) -> float:
    """n!! with the conventions (-1)!! = 0!! = 1."""
    if n < -1:
        raise ValueError(f"double factorial undefined for n={n}")
    out = 1.0
    for k in range(n, 0, -2):
        out *= k
    return out


def gaussian_central_moment(order: int, sigma: float) -> float:
    """E[X^order] for X ~ N(0, sigma^2); only even orders are accepted."""
    if order < 0 or order % 2:
        raise ValueError(f"order must be a non-negative even integer, got {order}")
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    return sigma**order * double_factorial(order - 1)
