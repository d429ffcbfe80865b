"""Four-level ladder EIT model of the Rydberg sensor and AM-AM fitting.

Levels: |1> ground, |2> intermediate (probe), |3> Rydberg (coupling),
|4> neighbouring Rydberg state (RF). Rates and detunings are angular
frequencies in rad/s; density matrices use the column-stacking
vectorization ``vec(A rho B) = (B^T kron A) vec(rho)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import constants as sc
from scipy.integrate import simpson

from lodc_sim.amam import AmAmModel

HBAR = sc.hbar
K_B = sc.k
EPS0 = sc.epsilon_0
RB87_MASS = 86.909180527 * sc.atomic_mass
# 1 mV/cm = 0.1 V/m
MV_PER_CM_TO_V_PER_M = 0.1

CSV_HEADER = ("field_mV_per_cm", "response_norm")


class SteadyStateError(ArithmeticError):
    """The Liouvillian has no unique steady state."""


class FitError(RuntimeError):
    """AM-AM fit failed; ``last`` holds the last iterate when available."""

    def __init__(self, msg, last=None):
        super().__init__(msg)
        self.last = last


class CurveFormatError(ValueError):
    """Malformed AM-AM curve file; ``line`` is the 1-based offending line."""

    def __init__(self, msg, line=None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass(frozen=True)
class CellConstants:
    n0: float = 4.9e16  # atoms / m^3, Rb near 30 C
    mu_p: float = 2.53e-29  # C m, Rb D2
    length: float = 0.05
    lambda_p: float = 780.241e-9
    lambda_c: float = 479.8e-9
    temperature: float = 303.15
    mass: float = RB87_MASS

    def __post_init__(self):
        for name in ("n0", "mu_p", "length", "lambda_p", "lambda_c", "temperature", "mass"):
            if not getattr(self, name) > 0:
                raise ValueError(f"cell constant {name} must be positive")

    @property
    def doppler_width(self) -> float:
        """Most-probable-speed scale ``u = sqrt(k_B T / m)`` in m/s."""
        return math.sqrt(K_B * self.temperature / self.mass)


@dataclass(frozen=True)
class FourLevelSystem:
    omega_p: float
    omega_c: float
    omega_rf: float
    delta_p: float = 0.0
    delta_c: float = 0.0
    delta_rf: float = 0.0
    gamma2: float = 2 * math.pi * 6.0666e6
    gamma3: float = 0.0
    gamma4: float = 0.0
    cell: CellConstants = field(default_factory=CellConstants)

    def __post_init__(self):
        if min(self.omega_p, self.omega_c, self.omega_rf) < 0:
            raise ValueError("Rabi frequencies must be non-negative (magnitudes)")
        if self.gamma2 <= 0 or self.gamma3 < 0 or self.gamma4 < 0:
            raise ValueError("need gamma2 > 0 and gamma3, gamma4 >= 0")

    def with_rf(self, omega_rf: float) -> FourLevelSystem:
        return replace(self, omega_rf=omega_rf)


class CurveSource(str, Enum):
    MEASURED = "measured"
    SIMULATED = "simulated"


@dataclass(frozen=True)
class AmAmCurve:
    """Normalized response vs field (mV/cm), fields strictly increasing."""

    fields: np.ndarray
    responses: np.ndarray
    source: CurveSource = CurveSource.MEASURED

    def __post_init__(self):
        f = np.asarray(self.fields, dtype=float)
        r = np.asarray(self.responses, dtype=float)
        if f.shape != r.shape or f.ndim != 1:
            raise ValueError("fields and responses must be 1-D arrays of equal length")
        if f.size > 1 and np.any(np.diff(f) <= 0):
            raise ValueError("fields must be strictly increasing")
        object.__setattr__(self, "fields", f)
        object.__setattr__(self, "responses", r)

    @property
    def points(self):
        return list(zip(self.fields.tolist(), self.responses.tolist()))


def rabi_frequency(field_v_per_m, dipole: float):
    """``|E| mu / hbar`` in rad/s."""
    return np.abs(field_v_per_m) * dipole / HBAR


def hamiltonian(sys: FourLevelSystem) -> np.ndarray:
    """RWA Hamiltonian in units of hbar (rad/s)."""
    return _hamiltonian(sys.omega_p, sys.omega_c, sys.omega_rf, sys.delta_p, sys.delta_c, sys.delta_rf)


def _hamiltonian(op, oc, orf, dp, dc, drf):
    return 0.5 * np.array(
        [
            [0.0, op, 0.0, 0.0],
            [op, -2 * dp, oc, 0.0],
            [0.0, oc, -2 * (dp + dc), orf],
            [0.0, 0.0, orf, -2 * (dp + dc + drf)],
        ],
        dtype=complex,
    )


def _dissipator(sys: FourLevelSystem) -> np.ndarray:
    # cascade |2>->|1>, |3>->|2>, |4>->|3>
    eye = np.eye(4)
    d = np.zeros((16, 16), dtype=complex)
    for lower, rate in ((0, sys.gamma2), (1, sys.gamma3), (2, sys.gamma4)):
        if rate == 0:
            continue
        c = np.zeros((4, 4))
        c[lower, lower + 1] = math.sqrt(rate)
        cdc = c.T @ c
        d += np.kron(c, c) - 0.5 * np.kron(eye, cdc) - 0.5 * np.kron(cdc.T, eye)
    return d


def _commutator_super(h: np.ndarray) -> np.ndarray:
    eye = np.eye(4)
    return -1j * (np.kron(eye, h) - np.kron(h.T, eye))


def liouvillian(sys: FourLevelSystem) -> np.ndarray:
    """16x16 generator with ``d vec(rho)/dt = L vec(rho)``."""
    return _commutator_super(hamiltonian(sys)) + _dissipator(sys)


_TRACE_IDX = [0, 5, 10, 15]


def _steady_system(L: np.ndarray) -> np.ndarray:
    """Linear system for the steady state, on a stack of Liouvillians (..., 16, 16).

    Row 0 (the rho_11 equation) becomes the trace condition. A row that is
    identically zero is a matrix element with no dynamics at all (levels
    neither driven nor damped); it is pinned to 0, its value in the ground
    state the atoms start from.
    """
    A = L.copy()
    dead = np.all(A == 0, axis=-1)
    dead[..., 0] = False
    pin = np.broadcast_to(np.eye(A.shape[-1], dtype=A.dtype), A.shape)
    A = np.where(dead[..., None], pin, A)
    A[..., 0, :] = 0.0
    A[..., 0, _TRACE_IDX] = 1.0
    return A


def _solve_steady(L: np.ndarray) -> np.ndarray:
    A = _steady_system(L)
    rhs = np.zeros(A.shape[:-1], dtype=complex)
    rhs[..., 0] = 1.0
    x = np.linalg.solve(A, rhs[..., None])[..., 0]
    return np.swapaxes(x.reshape(*x.shape[:-1], 4, 4), -1, -2)


def steady_state_rho(sys: FourLevelSystem) -> np.ndarray:
    """Unique steady state of the master equation, trace 1.

    Raises:
        SteadyStateError: the generator's null space is not one-dimensional
            (after pinning levels with no dynamics to zero population).
    """
    L = liouvillian(sys)
    scale = max(np.abs(L).max(), 1e-300)
    A = _steady_system(L / scale)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] < 1e-12 * sv[0]:
        raise SteadyStateError(
            f"steady state not unique: smallest singular value {sv[-1]:.3e} of {sv[0]:.3e}"
        )
    rho = _solve_steady(L / scale)
    return 0.5 * (rho + rho.conj().T)


def rho21_resonant_closed_form(sys: FourLevelSystem) -> complex:
    """Probe coherence at zero detuning with gamma3 = gamma4 = 0."""
    op, oc, orf, g2 = sys.omega_p, sys.omega_c, sys.omega_rf, sys.gamma2
    den = 2 * op**4 + 2 * oc**2 * op**2 + (g2**2 + 2 * op**2) * orf**2
    if den == 0:
        raise ValueError("closed form undefined when all Rabi frequencies vanish")
    return -1j * g2 * op * orf**2 / den


def doppler_quadrature(sys: FourLevelSystem, n_nodes: int) -> complex:
    """Velocity-averaged rho_21 with composite Simpson over [-3u, 3u].

    The Maxwell weight is renormalized to unit mass on the window, which
    removes the 2e-5 bias of truncating the Gaussian at 3u.
    """
    if n_nodes < 3 or n_nodes % 2 == 0:
        raise ValueError("Simpson quadrature needs an odd node count >= 3")
    u = sys.cell.doppler_width
    v = np.linspace(-3 * u, 3 * u, n_nodes)
    kp = 2 * math.pi / sys.cell.lambda_p
    kc = 2 * math.pi / sys.cell.lambda_c
    vals = _rho21_batch(sys, sys.delta_p - kp * v, sys.delta_c + kc * v)
    weights = np.exp(-((v / u) ** 2))
    # normalize by the window's own mass so a constant integrand averages to itself
    return complex(simpson(vals * weights, x=v) / simpson(weights, x=v))


def _rho21_batch(sys: FourLevelSystem, dps: np.ndarray, dcs: np.ndarray, chunk: int = 20000) -> np.ndarray:
    scale = max(sys.gamma2, sys.omega_p, sys.omega_c, sys.omega_rf)
    D = _dissipator(sys) / scale
    out = np.empty(len(dps), dtype=complex)
    for start in range(0, len(dps), chunk):
        dp = dps[start : start + chunk] / scale
        dc = dcs[start : start + chunk] / scale
        n = len(dp)
        H = np.zeros((n, 4, 4), dtype=complex)
        H[:, 0, 1] = H[:, 1, 0] = sys.omega_p / scale / 2
        H[:, 1, 2] = H[:, 2, 1] = sys.omega_c / scale / 2
        H[:, 2, 3] = H[:, 3, 2] = sys.omega_rf / scale / 2
        H[:, 1, 1] = -dp
        H[:, 2, 2] = -(dp + dc)
        H[:, 3, 3] = -(dp + dc + sys.delta_rf / scale)
        eye = np.eye(4)
        HT = np.swapaxes(H, -1, -2)
        comm = -1j * (np.einsum("ij,nkl->nikjl", eye, H) - np.einsum("nij,kl->nikjl", HT, eye))
        L = comm.reshape(n, 16, 16) + D
        out[start : start + chunk] = _solve_steady(L)[:, 1, 0]
    return out


def doppler_averaged_rho21(
    sys: FourLevelSystem, n_nodes: int = 201, rtol: float = 1e-6, max_nodes: int = 200 * 2**12 + 1
) -> complex:
    """Doppler average with node doubling until the estimate settles to ``rtol``.

    Raises:
        ArithmeticError: ``max_nodes`` reached without convergence.
    """
    prev = doppler_quadrature(sys, n_nodes)
    n = n_nodes
    while True:
        n = 2 * n - 1
        if n > max_nodes:
            raise ArithmeticError(f"Doppler quadrature not converged at {n // 2 + 1} nodes")
        cur = doppler_quadrature(sys, n)
        if abs(cur - prev) <= rtol * abs(cur):
            return cur
        prev = cur


def absorption_coefficient(sys: FourLevelSystem) -> float:
    """Prefactor ``2 N0 mu_p^2 k L / (eps0 hbar Omega_p)`` multiplying Im(rho21)."""
    if sys.omega_p == 0:
        raise ValueError("transmittance undefined for a zero probe Rabi frequency")
    c = sys.cell
    k = 2 * math.pi / c.lambda_p
    return 2 * c.n0 * c.mu_p**2 * k * c.length / (EPS0 * HBAR * sys.omega_p)


def transmittance(sys: FourLevelSystem, rho21: complex) -> float:
    im = complex(rho21).imag
    if im > 0:
        raise ValueError("Im(rho21) must be <= 0 for an absorbing medium")
    return math.exp(absorption_coefficient(sys) * im)


def theoretical_amam_params(sys: FourLevelSystem, dipole_rf: float) -> tuple[float, float]:
    """Doppler-free (a, b) with b converted to (mV/cm)^2."""
    op, oc, g2 = sys.omega_p, sys.omega_c, sys.gamma2
    a = absorption_coefficient(sys) * g2 * op / (g2**2 + 2 * op**2)
    b_rabi = (2 * op**4 + 2 * oc**2 * op**2) / (g2**2 + 2 * op**2)
    field_v_per_m = math.sqrt(b_rabi) * HBAR / dipole_rf
    return a, (field_v_per_m / MV_PER_CM_TO_V_PER_M) ** 2


def simulate_amam_curve(
    sys: FourLevelSystem, field_grid, dipole_rf: float, doppler: bool = False
) -> AmAmCurve:
    """Normalized transmittance vs RF field, 1 at zero field."""
    fields = np.asarray(field_grid, dtype=float)
    if fields.size and np.any(np.diff(fields) <= 0):
        raise ValueError("field grid must be strictly increasing")

    def probe_t(e_mv_cm):
        s = sys.with_rf(float(rabi_frequency(e_mv_cm * MV_PER_CM_TO_V_PER_M, dipole_rf)))
        if doppler:
            rho = doppler_averaged_rho21(s)
        elif s.omega_rf == 0 and s.gamma3 == 0 and s.delta_p == s.delta_c == s.delta_rf == 0:
            rho = 0j
        elif s.delta_p == s.delta_c == s.delta_rf == 0 and s.gamma3 == s.gamma4 == 0:
            rho = rho21_resonant_closed_form(s)
        else:
            rho = steady_state_rho(s)[1, 0]
        return transmittance(s, rho)

    t0 = probe_t(0.0)
    resp = np.array([probe_t(e) / t0 for e in fields])
    return AmAmCurve(fields, resp, CurveSource.SIMULATED)


# --- fitting -----------------------------------------------------------------


@dataclass(frozen=True)
class FitResult:
    model: AmAmModel
    residual_rms: float
    iterations: int
    n_points: int
    x0_initial: float


def _estimate_threshold(fields, resp):
    dev = resp[:3] - 1.0
    noise = math.sqrt(float(np.mean(dev**2)))
    below = np.nonzero(resp < 1.0 - 3.0 * noise)[0]
    if below.size == 0:
        raise FitError("curve is flat: no point drops below the noise floor")
    i = int(below[0])
    return (float(fields[i - 1]) if i > 0 else float(fields[0])), max(i - 1, 0)


def _model_and_jac(theta, x):
    la, lb, x0 = theta
    a, b = math.exp(la), math.exp(lb)
    h = np.maximum(x - x0, 0.0)
    h2 = h * h
    s = b + h2
    f = np.exp(-a * h2 / s)
    jac = np.empty((x.size, 3))
    jac[:, 0] = f * (-a * h2 / s)  # d/dlog a
    jac[:, 1] = f * (a * h2 * b / s**2)  # d/dlog b
    jac[:, 2] = f * (2 * a * b * h / s**2)  # d/dx0 (zero on the clamped plateau)
    return f, jac


def fit_amam(curve: AmAmCurve, max_iter: int = 200, tol: float = 1e-14) -> FitResult:
    """Fit ``F[max(x - x0, 0)]`` to a measured or simulated curve.

    The threshold is first located as the last point of the flat region
    (response within three noise-sigmas of 1, noise taken from the first
    three points), then refined jointly with log a, log b by damped
    Gauss-Newton (Levenberg-Marquardt).
    """
    x, y = curve.fields, curve.responses
    if x.size < 8:
        raise FitError("need at least 8 points to fit")
    if np.ptp(y) < 0.3:
        raise FitError(f"response range {np.ptp(y):.3g} too small (need >= 0.3)")
    x0_init, start = _estimate_threshold(x, y)
    xs, ys = x[start:], y[start:]

    ymin = max(float(ys.min()), 1e-6)
    a0 = -math.log(ymin)
    target = -a0 / 2.0
    logy = np.log(np.clip(ys, 1e-12, None))
    k = int(np.argmax(logy <= target))
    h_half = max(float(xs[k]) - x0_init, float(np.diff(x).min()))
    theta = np.array([math.log(a0), 2 * math.log(h_half), x0_init])

    lam = 1e-3
    f, J = _model_and_jac(theta, xs)
    r = f - ys
    cost = float(r @ r)
    it = 0
    for it in range(1, max_iter + 1):
        g = J.T @ r
        A = J.T @ J
        step_ok = False
        while lam < 1e12:
            try:
                step = np.linalg.solve(A + lam * np.diag(np.diag(A) + 1e-300), -g)
                if theta[2] <= 0.0 and step[2] < 0.0:
                    # threshold pinned at its bound: solve for (log a, log b) only
                    sub = A[:2, :2]
                    step = np.append(np.linalg.solve(sub + lam * np.diag(np.diag(sub) + 1e-300), -g[:2]), 0.0)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = theta + step
            trial[2] = max(trial[2], 0.0)
            f_t, J_t = _model_and_jac(trial, xs)
            r_t = f_t - ys
            cost_t = float(r_t @ r_t)
            if cost_t <= cost:
                step_ok = True
                break
            lam *= 10
        if not step_ok:
            break
        rel = (cost - cost_t) / max(cost, 1e-300)
        theta, r, J, cost = trial, r_t, J_t, cost_t
        lam = max(lam / 10, 1e-12)
        if rel < tol or cost < 1e-30 or np.max(np.abs(step)) < 1e-13:
            break
    else:
        raise FitError(f"no convergence after {max_iter} iterations", last=theta.copy())

    model = AmAmModel(a=math.exp(theta[0]), b=math.exp(theta[1]), x0=float(theta[2]))
    return FitResult(
        model=model,
        residual_rms=math.sqrt(cost / xs.size),
        iterations=it,
        n_points=int(xs.size),
        x0_initial=x0_init,
    )


# --- CSV ---------------------------------------------------------------------


def read_curve_csv(path, source: CurveSource = CurveSource.MEASURED) -> AmAmCurve:
    """Load a two-column ``field_mV_per_cm,response_norm`` file."""
    fields, resp = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CurveFormatError("empty file", line=1)
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise CurveFormatError(f"expected header {','.join(CSV_HEADER)}", line=1)
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise CurveFormatError(f"expected 2 columns, got {len(row)}", line=lineno)
            try:
                fv, rv = float(row[0]), float(row[1])
            except ValueError as exc:
                raise CurveFormatError(str(exc), line=lineno) from None
            if not (math.isfinite(fv) and math.isfinite(rv)):
                raise CurveFormatError("non-finite value", line=lineno)
            if not 0.0 <= rv <= 1.0:
                raise CurveFormatError(f"response {rv} outside [0, 1]", line=lineno)
            if fields and fv <= fields[-1]:
                raise CurveFormatError("fields must be strictly increasing", line=lineno)
            fields.append(fv)
            resp.append(rv)
    if not fields:
        raise CurveFormatError("no data rows", line=2)
    return AmAmCurve(np.array(fields), np.array(resp), source)


def write_curve_csv(curve: AmAmCurve, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for f, r in curve.points:
            w.writerow([repr(f), repr(r)])
