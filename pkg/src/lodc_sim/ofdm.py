"""Baseband LODC-OFDM chain: QAM, Hermitian framing, clipping, sensor, demodulation.

Arrays carry frames on the leading axes, so every stage works on a single
frame or a stack of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lodc_sim.amam import AmAmModel
from lodc_sim.bussgang import OperatingPoint

SUPPORTED_QAM = (4, 16, 64, 256)
IMAG_RESIDUE_RTOL = 1e-10


@dataclass(frozen=True)
class LinkConfig:
    """OFDM and front-end parameters. Fields in mV/cm, powers in (mV/cm)^2."""

    n_half: int = 128
    m_qam: int = 4
    q0: float = 0.063
    delta_x: float = 5.0
    x_lo: float = 10.0
    x0: float = 0.0
    sigma_r2: float = 0.0

    def __post_init__(self):
        if 2 * self.n_half < 64:
            raise ValueError(f"need 2N >= 64 carriers for the Gaussian approximation, got 2N={2 * self.n_half}")
        if self.m_qam not in SUPPORTED_QAM:
            raise ValueError(f"M must be one of {SUPPORTED_QAM}, got {self.m_qam}")
        if not self.q0 > 0:
            raise ValueError("q0 must be positive")
        if not self.delta_x > 0 or not self.x_lo >= self.delta_x:
            raise ValueError(f"need x_lo >= delta_x > 0 (x_lo={self.x_lo}, delta_x={self.delta_x})")
        if self.x0 < 0 or self.sigma_r2 < 0:
            raise ValueError("x0 and sigma_r2 must be non-negative")

    @property
    def n_fft(self) -> int:
        return 2 * self.n_half

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.m_qam))

    @property
    def bits_per_frame(self) -> int:
        return (self.n_half - 1) * self.bits_per_symbol

    @property
    def sigma_t2(self) -> float:
        return transmit_power(self.q0, self.m_qam, self.n_half)

    def operating_point(self) -> OperatingPoint:
        return OperatingPoint(x_lo=self.x_lo, delta_x=self.delta_x, sigma_t2=self.sigma_t2)


def transmit_power(q0: float, m_qam: int, n_half: int) -> float:
    """Total time-domain power ``2 q0^2 (M-1)(2N-2) / 3``."""
    return 2.0 * q0 * q0 * (m_qam - 1) * (2 * n_half - 2) / 3.0


@dataclass(frozen=True)
class OfdmFrame:
    freq_symbols: np.ndarray  # (..., 2N) complex, q0 not applied
    time_samples: np.ndarray  # (..., 2N) real


# --- QAM ----------------------------------------------------------------------


def _gray(n):
    return n ^ (n >> 1)


def _inverse_gray(g, nbits):
    b = g.copy()
    shift = 1
    while shift < nbits:
        b ^= b >> shift
        shift <<= 1
    return b


def _pam_params(m_qam: int) -> tuple[int, int]:
    if m_qam not in SUPPORTED_QAM:
        raise ValueError(f"M must be one of {SUPPORTED_QAM}, got {m_qam}")
    k = int(math.log2(m_qam)) // 2
    return k, 1 << k


def _bits_to_int(bits, k):
    weights = 1 << np.arange(k - 1, -1, -1)
    return bits @ weights


def qam_map(bits, m_qam: int) -> np.ndarray:
    """Gray-coded square QAM on odd-integer coordinates.

    The first half of each symbol's bits labels the in-phase level, the
    second half the quadrature level, MSB first. Average power is 2(M-1)/3.
    """
    k, levels = _pam_params(m_qam)
    bits = np.asarray(bits)
    if bits.shape[-1] % (2 * k):
        raise ValueError(f"bit count {bits.shape[-1]} not a multiple of log2(M)={2 * k}")
    if bits.size and (bits.min() < 0 or bits.max() > 1):
        raise ValueError("bits must be 0 or 1")
    groups = bits.reshape(*bits.shape[:-1], -1, 2, k).astype(np.int64)
    labels = _bits_to_int(groups, k)
    idx = _inverse_gray(labels, k)
    amp = 2 * idx - (levels - 1)
    return amp[..., 0] + 1j * amp[..., 1]


def _decide_levels(y, k, levels):
    t = (y + (levels - 1)) / 2.0
    lo = np.clip(np.floor(t), 0, levels - 1).astype(np.int64)
    hi = np.minimum(lo + 1, levels - 1)
    frac = t - np.floor(t)
    idx = np.where(frac > 0.5, hi, lo)
    # exact midpoint: pick the neighbour with the smaller Gray label
    tie = (frac == 0.5) & (t >= 0) & (t <= levels - 1)
    idx = np.where(tie, np.where(_gray(hi) < _gray(lo), hi, lo), idx)
    return np.where(t <= 0, 0, np.where(t >= levels - 1, levels - 1, idx))


def qam_demap(symbols, m_qam: int) -> np.ndarray:
    """Minimum-distance decisions back to bits (inverse of :func:`qam_map`)."""
    k, levels = _pam_params(m_qam)
    symbols = np.asarray(symbols)
    iq = np.stack([symbols.real, symbols.imag], axis=-1)
    idx = _decide_levels(iq, k, levels)
    labels = _gray(idx)
    shifts = np.arange(k - 1, -1, -1)
    bits = (labels[..., None] >> shifts) & 1
    return bits.reshape(*symbols.shape[:-1], -1).astype(np.uint8)


def constellation(m_qam: int) -> np.ndarray:
    """All M points indexed by their integer bit label."""
    nbits = int(math.log2(m_qam))
    labels = np.arange(m_qam)
    bits = (labels[:, None] >> np.arange(nbits - 1, -1, -1)) & 1
    return qam_map(bits.reshape(-1), m_qam)


# --- framing ------------------------------------------------------------------


def build_frame(data_symbols, config: LinkConfig) -> OfdmFrame:
    """Place N-1 symbols on carriers 1..N-1 with conjugate mirror on 2N-k.

    Time samples follow the unnormalized synthesis
    ``s_n = sum_k q0 S_k exp(j 2 pi n k / 2N)``.
    """
    data = np.asarray(data_symbols, dtype=complex)
    n = config.n_half
    if data.shape[-1] != n - 1:
        raise ValueError(f"need exactly N-1={n - 1} data symbols, got {data.shape[-1]}")
    spec = np.zeros((*data.shape[:-1], 2 * n), dtype=complex)
    spec[..., 1:n] = data
    spec[..., n + 1 :] = np.conj(data[..., ::-1])
    t = np.fft.ifft(config.q0 * spec, axis=-1) * (2 * n)
    rms = math.sqrt(float(np.mean(t.real**2))) if t.size else 0.0
    resid = float(np.max(np.abs(t.imag))) if t.size else 0.0
    if resid > IMAG_RESIDUE_RTOL * max(rms, 1e-300) and resid > 1e-300:
        raise ArithmeticError(f"frame not real: imaginary residue {resid:.3e} vs rms {rms:.3e}")
    return OfdmFrame(freq_symbols=spec, time_samples=np.ascontiguousarray(t.real))


def imaginary_residue(frame: OfdmFrame, config: LinkConfig) -> float:
    """max|Im(IDFT)| / rms for the frame's spectrum (0 for an all-zero frame)."""
    t = np.fft.ifft(config.q0 * frame.freq_symbols, axis=-1) * config.n_fft
    rms = math.sqrt(float(np.mean(t.real**2)))
    return float(np.max(np.abs(t.imag))) / rms if rms > 0 else 0.0


def clip(samples, delta_x: float):
    if not delta_x > 0:
        raise ValueError("clip level must be positive")
    return np.clip(samples, -delta_x, delta_x)


def composite_gain(model: AmAmModel, op: OperatingPoint | LinkConfig, x):
    """Clipping, LO bias and sensor response in one memoryless map.

    ``G[x] = F[x_lo + clip(x, delta_x)]``; the detection threshold cancels
    because the LO field already includes it.
    """
    return model.eval(op.x_lo + np.clip(x, -op.delta_x, op.delta_x))


def channel(frame, model: AmAmModel, config: LinkConfig, rng: np.random.Generator | None, gain=None):
    """Received samples ``G[s_t] + n_r`` with ``n_r ~ N(0, sigma_r2)``.

    Args:
        frame: an :class:`OfdmFrame` or raw time samples.
        gain: replacement for ``G`` (test hook), e.g. ``lambda s: s``.

    Returns:
        (s_r, s_d): received samples and the noiseless sensor output.
    """
    s_t = frame.time_samples if isinstance(frame, OfdmFrame) else np.asarray(frame, dtype=float)
    s_d = gain(s_t) if gain is not None else composite_gain(model, config, s_t)
    s_d = np.asarray(s_d, dtype=float)
    if config.sigma_r2 > 0:
        if rng is None:
            raise ValueError("receiver noise requested without an RNG")
        s_r = s_d + rng.normal(0.0, math.sqrt(config.sigma_r2), size=s_d.shape)
    else:
        s_r = s_d.copy()
    return s_r, s_d


def demodulate(received, config: LinkConfig, alpha: float) -> np.ndarray:
    """DFT with 1/2N, keep carriers 1..N-1, undo ``alpha * q0``."""
    if alpha == 0 or not math.isfinite(alpha):
        raise ValueError("degenerate Bussgang gain: cannot compensate alpha = 0")
    r = np.asarray(received, dtype=float)
    if r.shape[-1] != config.n_fft:
        raise ValueError(f"expected {config.n_fft} samples per frame, got {r.shape[-1]}")
    spec = np.fft.fft(r, axis=-1) / config.n_fft
    return spec[..., 1 : config.n_half] / (alpha * config.q0)


def square_qam_ber(m_qam: int, sigma: float) -> float:
    """Exact Gray-coded square-QAM bit error rate in AWGN.

    ``sigma`` is the per-dimension noise std in constellation units (points
    on odd integers, decision boundaries on even integers).
    """
    k, levels = _pam_params(m_qam)
    if sigma == 0:
        return 0.0
    amps = 2 * np.arange(levels) - (levels - 1)
    labels = _gray(np.arange(levels))
    total = 0.0
    for i in range(levels):
        for j in range(levels):
            if i == j:
                continue
            lower = -math.inf if j == 0 else amps[j] - 1
            upper = math.inf if j == levels - 1 else amps[j] + 1
            p = _q_safe((lower - amps[i]) / sigma) - _q_safe((upper - amps[i]) / sigma)
            total += p * bin(int(labels[i] ^ labels[j])).count("1")
    return total / (levels * k)


def _q_safe(z):
    if z == math.inf:
        return 0.0
    if z == -math.inf:
        return 1.0
    return 0.5 * math.erfc(z / math.sqrt(2.0))
