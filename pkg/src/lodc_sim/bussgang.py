"""Closed-form Bussgang analysis of clipping followed by the AM-AM response.

For a zero-mean Gaussian input ``s`` of variance ``sigma_t2`` and the
composite response ``G`` (clip at +/- delta_x, shift by x_lo, apply F)::

    alpha   = E{G[s] s} / sigma_t2 = sum_i (2i+1) c_{2i+1} v_{2i}
    E{n_d}  = sum_i c_{2i} v_{2i}       + (F[x1] + F[x2]) Q(delta_x / sigma_t)
    E{s_d^2}= sum_i ctilde_{2i} v_{2i}  + (F[x1]^2 + F[x2]^2) Q(delta_x / sigma_t)
    sigma_d2 = E{s_d^2} - E{n_d}^2 - alpha^2 sigma_t2

where ``v_{2i}`` are the truncated Gaussian moments, ``c`` the Taylor
coefficients of F about x_lo and ``ctilde`` those of F^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from lodc_sim import specfun
from lodc_sim.amam import DEFAULT_MAX_ORDER, AmAmModel, squared_series_coefficients, taylor_coefficients

CONVERGED_RTOL = 1e-10
FAIL_RTOL = 1e-6
# 10 log10 sigma_t^2 below this is the "3 sigma_t < delta_x" regime at delta_x = 5
LOW_POWER_BOUNDARY_DB = 10 * math.log10((5 / 3) ** 2)


class ConvergenceError(ArithmeticError):
    """Truncated series did not settle; carries the partial sums computed."""

    def __init__(self, msg, partial_sums=None):
        super().__init__(msg)
        self.partial_sums = partial_sums or {}


class TruncationError(ArithmeticError):
    """Distortion power came out materially negative."""


@dataclass(frozen=True)
class OperatingPoint:
    """LO bias, clip level (mV/cm) and transmit power ((mV/cm)^2)."""

    x_lo: float
    delta_x: float
    sigma_t2: float

    def __post_init__(self):
        if not self.delta_x > 0:
            raise ValueError(f"clip level must be positive, got {self.delta_x}")
        if not self.x_lo >= self.delta_x:
            raise ValueError(
                f"LO bias must not be below the clip level (x_lo={self.x_lo}, delta_x={self.delta_x})"
            )
        if not self.sigma_t2 > 0:
            raise ValueError("signal power must be positive")

    @property
    def sigma_t(self) -> float:
        return math.sqrt(self.sigma_t2)

    @property
    def window(self) -> tuple[float, float]:
        return self.x_lo - self.delta_x, self.x_lo + self.delta_x


@dataclass(frozen=True)
class BussgangAnalysis:
    alpha: float
    e_nd: float
    e_sd2: float
    sigma_d2: float
    order_used: int
    converged: bool
    partial_alpha: tuple[float, ...] = field(default=(), repr=False)
    partial_sigma_d2: tuple[float, ...] = field(default=(), repr=False)
    sigma_t2: float = float("nan")


def clipped_gaussian_moment(i: int, sigma_t: float, delta_x: float) -> float:
    """``E{x^(2i) 1[|x| <= delta_x]}`` for ``x ~ N(0, sigma_t^2)``.

    Equal to ``sigma^2i (2i-1)!! - 2^i sigma^2i Gamma(i+1/2, dx~^2)/sqrt(pi)``
    with ``dx~ = delta_x / (sqrt(2) sigma_t)``; evaluated through the lower
    incomplete gamma so that small clip levels do not cancel.
    """
    if i < 0:
        raise ValueError("moment index must be >= 0")
    if sigma_t <= 0 or delta_x <= 0:
        raise ValueError("sigma_t and delta_x must be positive")
    if math.isinf(delta_x):
        return specfun.gaussian_central_moment(2 * i, sigma_t)
    z2 = (delta_x / (math.sqrt(2.0) * sigma_t)) ** 2
    return 2.0**i * sigma_t ** (2 * i) / math.sqrt(math.pi) * specfun.lower_incomplete_gamma(i + 0.5, z2)


def _check_domain(model: AmAmModel, op: OperatingPoint) -> None:
    r = model.convergence_radius(op.x_lo)
    if op.delta_x >= r:
        raise ValueError(
            f"clip window +/-{op.delta_x} leaves the Taylor disc of radius {r:.6g} about x_lo={op.x_lo}"
        )


def _settle(partials: list[float], tol: float) -> int | None:
    """First index where the last two increments are below ``tol`` relative."""
    for k in range(2, len(partials)):
        scale = max(abs(partials[k]), 1e-300)
        if abs(partials[k] - partials[k - 1]) <= tol * scale and abs(partials[k - 1] - partials[k - 2]) <= tol * scale:
            return k
    return None


def partial_sums(model: AmAmModel, op: OperatingPoint, max_order: int):
    """Partial sums of alpha, E{n_d}, E{s_d^2} and sigma_d2 for I = 0..max_order."""
    if max_order < 0:
        raise ValueError("truncation order must be >= 0")
    series = taylor_coefficients(model, op.x_lo, max(2 * max_order + 1, 3))
    c = series.coeffs
    ct = squared_series_coefficients(series, 2 * max_order)
    v = [clipped_gaussian_moment(i, op.sigma_t, op.delta_x) for i in range(max_order + 1)]
    x1, x2 = op.window
    tail = specfun.q_function(op.delta_x / op.sigma_t)
    f1, f2 = model.eval(x1), model.eval(x2)
    clip_mean = (f1 + f2) * tail
    clip_sq = (f1 * f1 + f2 * f2) * tail

    alpha, e_nd, e_sd2 = [], [], []
    sa = sn = ss = 0.0
    for i in range(max_order + 1):
        sa += (2 * i + 1) * c[2 * i + 1] * v[i]
        sn += c[2 * i] * v[i]
        ss += ct[2 * i] * v[i]
        alpha.append(sa)
        e_nd.append(sn + clip_mean)
        e_sd2.append(ss + clip_sq)
    sig = [s2 - n * n - a * a * op.sigma_t2 for a, n, s2 in zip(alpha, e_nd, e_sd2)]
    return alpha, e_nd, e_sd2, sig


def _finish(partials, name, max_order):
    k = _settle(partials, CONVERGED_RTOL)
    if k is not None:
        return k, True
    last = abs(partials[-1] - partials[-2]) / max(abs(partials[-1]), 1e-300)
    if last > FAIL_RTOL:
        raise ConvergenceError(
            f"{name} not converged at order I={max_order} (last relative change {last:.3e})",
            partial_sums={name: list(partials)},
        )
    return max_order, False


def attenuation_factor(model: AmAmModel, op: OperatingPoint, max_order: int = DEFAULT_MAX_ORDER):
    """Bussgang gain ``alpha`` and a convergence flag.

    Returns:
        (alpha, converged, order_used)
    """
    _check_domain(model, op)
    alpha, *_ = partial_sums(model, op, max_order)
    k, ok = _finish(alpha, "alpha", max_order)
    return alpha[-1], ok, k


def distortion_moments(model: AmAmModel, op: OperatingPoint, max_order: int = DEFAULT_MAX_ORDER):
    """``(E{n_d}, E{s_d^2})`` through order ``2 * max_order``."""
    _check_domain(model, op)
    _, e_nd, e_sd2, _ = partial_sums(model, op, max_order)
    _finish(e_nd, "e_nd", max_order)
    _finish(e_sd2, "e_sd2", max_order)
    return e_nd[-1], e_sd2[-1]


def distortion_power(alpha: float, e_nd: float, e_sd2: float, sigma_t2: float) -> float:
    """``E{s_d^2} - E{n_d}^2 - alpha^2 sigma_t^2`` with a round-off guard at zero."""
    val = e_sd2 - e_nd * e_nd - alpha * alpha * sigma_t2
    if val < 0:
        if val >= -1e-12 * abs(e_sd2):
            return 0.0
        raise TruncationError(f"negative distortion power {val:.3e}; series truncated too early")
    return val


def analyze(model: AmAmModel, op: OperatingPoint, max_order: int = DEFAULT_MAX_ORDER) -> BussgangAnalysis:
    """Full closed-form analysis at one operating point.

    Raises:
        ValueError: clip window outside the convergence disc.
        ConvergenceError: partial sums still moving by more than 1e-6.
    """
    _check_domain(model, op)
    alpha, e_nd, e_sd2, sig = partial_sums(model, op, max_order)
    try:
        ka, ok_a = _finish(alpha, "alpha", max_order)
        ks, ok_s = _finish(sig, "sigma_d2", max_order)
    except ConvergenceError as exc:
        exc.partial_sums = {"alpha": alpha, "sigma_d2": sig}
        raise
    return BussgangAnalysis(
        alpha=alpha[-1],
        e_nd=e_nd[-1],
        e_sd2=e_sd2[-1],
        sigma_d2=distortion_power(alpha[-1], e_nd[-1], e_sd2[-1], op.sigma_t2),
        order_used=max(ka, ks),
        converged=ok_a and ok_s,
        partial_alpha=tuple(alpha),
        partial_sigma_d2=tuple(sig),
        sigma_t2=op.sigma_t2,
    )


@dataclass(frozen=True)
class SnrSet:
    """Linear SNRs; ``inf`` when the relevant noise power is zero."""

    snr_d: float
    snr_r: float
    snr_d_k: float
    snr_r_k: float


def _ratio(num, den):
    if den == 0:
        return math.inf
    return num / den


def snr(analysis: BussgangAnalysis, op: OperatingPoint, n_half: int, sigma_r2: float = 0.0) -> SnrSet:
    if n_half < 2:
        raise ValueError("n_half must be >= 2")
    if sigma_r2 < 0:
        raise ValueError("sigma_r2 must be >= 0")
    useful = analysis.alpha**2 * op.sigma_t2
    snr_d = _ratio(useful, analysis.sigma_d2)
    snr_r = _ratio(useful, analysis.sigma_d2 + sigma_r2)
    k = n_half / (n_half - 1)
    return SnrSet(snr_d, snr_r, k * snr_d, k * snr_r)


def ber_prefactor(m_qam: int) -> float:
    _check_qam(m_qam)
    return 4.0 / math.log2(m_qam) * (1.0 - 1.0 / math.sqrt(m_qam))


def _check_qam(m_qam: int) -> None:
    root = math.isqrt(m_qam)
    if m_qam < 4 or root * root != m_qam or m_qam & (m_qam - 1):
        raise ValueError(f"M must be a square power of two >= 4, got {m_qam}")


def _q_or_zero(arg: float) -> float:
    return 0.0 if math.isinf(arg) else specfun.q_function(arg)


def ber_from_noise(alpha: float, sigma_d2: float, sigma_r2: float, m_qam: int, q0: float, n_half: int) -> float:
    """Per-subcarrier BER with total time-domain noise ``sigma_d2 + sigma_r2``."""
    var_k = (sigma_d2 + sigma_r2) / (2 * n_half)
    arg = math.inf if var_k == 0 else q0 * math.sqrt(2 * alpha * alpha / var_k)
    return ber_prefactor(m_qam) * _q_or_zero(arg)


def theoretical_ber(
    analysis: BussgangAnalysis, op: OperatingPoint, m_qam: int, q0: float, n_half: int, sigma_r2: float = 0.0
) -> tuple[float, float]:
    """``(BER_d_k, BER_r_k)``: distortion only, and distortion plus receiver noise."""
    if q0 <= 0:
        raise ValueError("q0 must be positive")
    if sigma_r2 < 0:
        raise ValueError("sigma_r2 must be >= 0")
    ber_d = ber_from_noise(analysis.alpha, analysis.sigma_d2, 0.0, m_qam, q0, n_half)
    ber_r = ber_from_noise(analysis.alpha, analysis.sigma_d2, sigma_r2, m_qam, q0, n_half)
    return ber_d, ber_r


def eb_over_n0(sigma_t2: float, m_qam: int, sigma_r2: float) -> float:
    """Normalized bit energy ``sigma_t^2 / (log2 M sigma_r^2)`` in dB."""
    if sigma_r2 <= 0:
        raise ValueError("Eb/Nr needs a positive receiver noise power")
    return 10 * math.log10(sigma_t2 / (math.log2(m_qam) * sigma_r2))


def sigma_r2_for_eb_n0(eb_n0_db: float, sigma_t2: float, m_qam: int) -> float:
    """Inverse of :func:`eb_over_n0` for the receiver noise power."""
    return sigma_t2 / (math.log2(m_qam) * 10 ** (eb_n0_db / 10))
