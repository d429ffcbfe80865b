"""Empirical AM-AM response of the atomic sensor and its Taylor machinery.

The normalized transfer function is

    F[x] = exp(-a x^2 / (b + x^2)),   x >= 0  (threshold-removed field, mV/cm)

F is analytic on the real line with a pair of poles of the exponent at
x = +/- j sqrt(b), so its Taylor series about ``x_lo`` converges within
``sqrt(x_lo^2 + b)``. Coefficients beyond the third are produced by a
five-term linear recurrence instead of symbolic differentiation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_MAX_ORDER = 40


class SeriesDivergenceWarning(UserWarning):
    """A Taylor series was evaluated outside its disc of convergence."""


@dataclass(frozen=True)
class AmAmModel:
    """Fitted AM-AM model ``exp(-a x^2/(b + x^2))`` with detection threshold.

    Attributes:
        a: dimensionless depth coefficient; ``F`` saturates at ``exp(-a)``.
        b: width coefficient in (mV/cm)^2.
        x0: detection threshold in mV/cm. ``eval`` works in threshold-removed
            coordinates; use :meth:`remove_threshold` on raw fields first.
    """

    a: float
    b: float
    x0: float = 0.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"AM-AM model needs a > 0 and b > 0, got a={self.a}, b={self.b}")
        if not self.x0 >= 0:
            raise ValueError(f"threshold x0 must be >= 0, got {self.x0}")

    def remove_threshold(self, field_strength):
        """Map a raw field magnitude to the shifted coordinate, clamped at 0."""
        return np.maximum(np.asarray(field_strength, dtype=float) - self.x0, 0.0)

    def eval(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ValueError("F[x] is defined for x >= 0; add the LO bias before evaluating")
        x2 = x * x
        out = np.exp(-self.a * x2 / (self.b + x2))
        return float(out) if out.ndim == 0 else out

    def eval_raw(self, field_strength):
        """Response to a raw (threshold-including) field magnitude."""
        return self.eval(self.remove_threshold(field_strength))

    def derivative1(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ValueError("F'[x] is defined for x >= 0")
        x2 = x * x
        den = self.b + x2
        out = -2.0 * self.a * self.b * x / den**2 * np.exp(-self.a * x2 / den)
        return float(out) if out.ndim == 0 else out

    def max_slope_point(self) -> float:
        """Field where ``|F'|`` peaks (the argmin of the negative slope)."""
        a, b = self.a, self.b
        # (sqrt((a+1)^2 + 3) - (a+1)) b / 3, rationalized against cancellation at large a
        ap1 = a + 1.0
        x2 = b / (math.sqrt(ap1 * ap1 + 3.0) + ap1)
        return math.sqrt(x2)

    def convergence_radius(self, x_lo: float) -> float:
        """Distance from ``x_lo`` to the nearest complex singularity ``+/- j sqrt(b)``."""
        if x_lo < 0:
            raise ValueError("expansion point must be >= 0")
        return math.hypot(x_lo, math.sqrt(self.b))

    def taylor(self, x_lo: float, max_order: int = DEFAULT_MAX_ORDER) -> TaylorSeries:
        return taylor_coefficients(self, x_lo, max_order)


def seed_coefficients(model: AmAmModel, x: float) -> tuple[float, float, float, float]:
    """Closed-form ``c_0 .. c_3`` (derivatives divided by factorials) at ``x``."""
    a, b = model.a, model.b
    x2 = x * x
    s = b + x2
    f = math.exp(-a * x2 / s)
    c0 = f
    c1 = -2.0 * a * b * x / s**2 * f
    c2 = a * b * (3.0 * x2 * x2 + 2.0 * (a + 1.0) * b * x2 - b * b) / s**4 * f
    poly = (
        2.0 * a * a * b * b * x2
        - 3.0 * a * b**3
        + 6.0 * a * b * b * x2
        + 9.0 * a * b * x2 * x2
        - 6.0 * b**3
        - 6.0 * b * b * x2
        + 6.0 * b * x2 * x2
        + 6.0 * x2**3
    )
    c3 = -2.0 * a * b * x / (3.0 * s**6) * poly * f
    return c0, c1, c2, c3


def recursion_terms(model: AmAmModel, x: float, m: int) -> tuple[float, float, float, float, float]:
    """Weights multiplying ``c_m .. c_{m+4}`` in the five-term recurrence."""
    a, b = model.a, model.b
    s = b + x * x
    return (
        float(m),
        4.0 * x * (m + 1),
        2.0 * ((m + 2) * (3.0 * x * x + b) + a * b),
        2.0 * x * (2.0 * s * (m + 3) + a * b),
        (m + 4) * s * s,
    )


@dataclass(frozen=True)
class TaylorSeries:
    """Truncated Taylor expansion of ``F`` about ``x_lo``.

    ``coeffs[m]`` is ``F^(m)[x_lo] / m!``.
    """

    x_lo: float
    coeffs: tuple[float, ...]
    radius: float
    model: AmAmModel | None = field(default=None, compare=False, repr=False)

    @property
    def order(self) -> int:
        return len(self.coeffs) - 1

    def recursion_residuals(self) -> np.ndarray:
        """Residual of the recurrence for every window ``c_m .. c_{m+4}``."""
        if self.model is None:
            raise ValueError("series was built without its model; residuals need (a, b)")
        c = self.coeffs
        res = []
        for m in range(self.order - 3):
            w = recursion_terms(self.model, self.x_lo, m)
            res.append(sum(wk * c[m + k] for k, wk in enumerate(w)))
        return np.array(res)

    def __call__(self, x, order: int | None = None):
        return series_eval(self, x, order)


def taylor_coefficients(model: AmAmModel, x_lo: float, max_order: int = DEFAULT_MAX_ORDER) -> TaylorSeries:
    """Coefficients ``c_0 .. c_max_order`` of ``F`` about ``x_lo``.

    Four closed-form seeds, then the recurrence solved for its highest index:

        m c_m + 4x(m+1) c_{m+1} + 2((m+2)(3x^2+b) + ab) c_{m+2}
          + 2x(2(b+x^2)(m+3) + ab) c_{m+3} + (m+4)(b+x^2)^2 c_{m+4} = 0
    """
    if max_order < 3:
        raise ValueError("max_order must be >= 3: the recurrence needs four seeds")
    if x_lo < 0:
        raise ValueError("expansion point must be >= 0")
    c = list(seed_coefficients(model, x_lo))
    for m in range(max_order - 3):
        w0, w1, w2, w3, w4 = recursion_terms(model, x_lo, m)
        c.append(-(w0 * c[m] + w1 * c[m + 1] + w2 * c[m + 2] + w3 * c[m + 3]) / w4)
    if not all(math.isfinite(v) for v in c):
        raise ArithmeticError(f"non-finite Taylor coefficient at x_lo={x_lo}")
    return TaylorSeries(x_lo=float(x_lo), coeffs=tuple(c), radius=model.convergence_radius(x_lo), model=model)


def squared_series_coefficients(series: TaylorSeries, max_order: int | None = None) -> list[float]:
    """Cauchy-product coefficients of ``F^2`` about the same point."""
    if max_order is None:
        max_order = series.order
    if max_order > series.order:
        raise ValueError(f"need coefficients through order {max_order}, series has {series.order}")
    c = series.coeffs
    return [math.fsum(c[k] * c[m - k] for k in range(m + 1)) for m in range(max_order + 1)]


def series_eval(series: TaylorSeries, x, order: int | None = None):
    """Horner evaluation of the partial sum through ``order`` (default: all).

    Points at or beyond the radius of convergence are still evaluated but
    raise a :class:`SeriesDivergenceWarning`.
    """
    if order is None:
        order = series.order
    if order > series.order or order < 0:
        raise ValueError(f"order {order} not available (series has {series.order})")
    x = np.asarray(x, dtype=float)
    h = x - series.x_lo
    if np.any(np.abs(h) >= series.radius):
        warnings.warn(
            f"evaluating Taylor series about {series.x_lo} outside its radius {series.radius:.6g}",
            SeriesDivergenceWarning,
            stacklevel=2,
        )
    acc = np.zeros_like(h)
    for cm in reversed(series.coeffs[: order + 1]):
        acc = acc * h + cm
    return float(acc) if acc.ndim == 0 else acc
