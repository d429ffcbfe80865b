"""Monte Carlo validation of the closed-form link analysis.

Every random draw comes from a Philox generator keyed by
``(base_seed, stream, index)`` where ``index`` is a frame number or a
fixed-size sample block. Work is split into fixed chunks, each reduced to
partial sums, and the partial sums are combined in chunk order, so results
do not depend on the number of worker threads.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from lodc_sim import bussgang, ofdm
from lodc_sim.amam import AmAmModel
from lodc_sim.bussgang import OperatingPoint
from lodc_sim.ofdm import LinkConfig

STREAM_BITS = 0
STREAM_NOISE = 1
STREAM_GAUSS = 2

FRAMES_PER_CHUNK = 64
SAMPLES_PER_BLOCK = 1 << 18
MIN_ERROR_EVENTS = 10

_MASK64 = (1 << 64) - 1


def philox(base_seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-based generator for one (stream, frame/block) cell."""
    if not 0 <= index < 1 << 48 or not 0 <= stream < 1 << 16:
        raise ValueError("stream or index out of range")
    key = np.array([base_seed & _MASK64, (stream << 48) | index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def default_threads() -> int:
    env = os.environ.get("LODC_SIM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _map_ordered(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


@dataclass(frozen=True)
class TrialPlan:
    config: LinkConfig
    model: AmAmModel
    n_frames: int = 10_000
    base_seed: int = 0
    sweep_axis: tuple[str, tuple[float, ...]] | None = None

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.sweep_axis is not None:
            _, grid = self.sweep_axis
            d = np.diff(np.asarray(grid, dtype=float))
            if len(grid) == 0:
                raise ValueError("sweep grid is empty")
            if not (np.all(d > 0) or np.all(d < 0)):
                raise ValueError("sweep grid must be strictly monotone")


@dataclass(frozen=True)
class LinkTrialResult:
    ber_empirical: float
    bit_errors: int
    bits_total: int
    alpha_hat: float
    sigma_d2_hat: float
    e_nd_hat: float
    clip_fraction: float
    wall_time: float
    n_frames: int = 0
    ber_stderr: float = 0.0
    reliable: bool = True

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


_ACC_KEYS = ("n", "sd_st", "st_st", "sd", "sd_sd", "st", "clipped", "errors")


def _link_chunk(plan: TrialPlan, alpha: float, gain, first: int, count: int) -> dict:
    cfg = plan.config
    nbits = cfg.bits_per_frame
    bits = np.empty((count, nbits), dtype=np.uint8)
    noise = np.zeros((count, cfg.n_fft))
    sr = math.sqrt(cfg.sigma_r2)
    for j in range(count):
        f = first + j
        bits[j] = philox(plan.base_seed, STREAM_BITS, f).integers(0, 2, size=nbits, dtype=np.uint8)
        if cfg.sigma_r2 > 0:
            noise[j] = philox(plan.base_seed, STREAM_NOISE, f).normal(0.0, sr, size=cfg.n_fft)
    frame = ofdm.build_frame(ofdm.qam_map(bits, cfg.m_qam), cfg)
    s_t = frame.time_samples
    s_d = gain(s_t) if gain is not None else ofdm.composite_gain(plan.model, cfg, s_t)
    s_r = s_d + noise
    rx = ofdm.qam_demap(ofdm.demodulate(s_r, cfg, alpha), cfg.m_qam)
    return {
        "n": s_t.size,
        "sd_st": math.fsum((s_d * s_t).ravel()),
        "st_st": math.fsum((s_t * s_t).ravel()),
        "sd": math.fsum(s_d.ravel()),
        "sd_sd": math.fsum((s_d * s_d).ravel()),
        "st": math.fsum(s_t.ravel()),
        "clipped": int(np.count_nonzero(np.abs(s_t) > cfg.delta_x)),
        "errors": int(np.count_nonzero(rx != bits)),
    }


def _reduce(parts: list[dict]) -> dict:
    out = {}
    for k in _ACC_KEYS:
        vals = [p[k] for p in parts]
        out[k] = sum(vals) if isinstance(vals[0], int) else math.fsum(vals)
    return out


def _moments(acc: dict) -> tuple[float, float, float]:
    n = acc["n"]
    alpha = acc["sd_st"] / acc["st_st"]
    mean_nd = (acc["sd"] - alpha * acc["st"]) / n
    second = (acc["sd_sd"] - 2 * alpha * acc["sd_st"] + alpha * alpha * acc["st_st"]) / n
    return alpha, second - mean_nd * mean_nd, acc["sd"] / n


def run_link_trials(
    plan: TrialPlan,
    alpha: float | None = None,
    gain: Callable | None = None,
    threads: int | None = None,
) -> LinkTrialResult:
    """Random frames through the full chain; bit errors plus Bussgang estimators.

    Args:
        alpha: gain used for compensation at the receiver; defaults to the
            closed-form value (or 1 when ``gain`` overrides the sensor).
        gain: replacement for the composite response (test hook).
    """
    cfg = plan.config
    if alpha is None:
        if gain is not None:
            alpha = 1.0
        else:
            alpha = bussgang.analyze(plan.model, cfg.operating_point()).alpha
    threads = threads or default_threads()
    t0 = time.perf_counter()
    starts = list(range(0, plan.n_frames, FRAMES_PER_CHUNK))
    parts = _map_ordered(
        lambda s: _link_chunk(plan, alpha, gain, s, min(FRAMES_PER_CHUNK, plan.n_frames - s)), starts, threads
    )
    acc = _reduce(parts)
    a_hat, sig_hat, e_nd_hat = _moments(acc)
    bits_total = plan.n_frames * cfg.bits_per_frame
    ber = acc["errors"] / bits_total
    return LinkTrialResult(
        ber_empirical=ber,
        bit_errors=acc["errors"],
        bits_total=bits_total,
        alpha_hat=a_hat,
        sigma_d2_hat=sig_hat,
        e_nd_hat=e_nd_hat,
        clip_fraction=acc["clipped"] / acc["n"],
        wall_time=time.perf_counter() - t0,
        n_frames=plan.n_frames,
        ber_stderr=math.sqrt(max(ber * (1 - ber), 0.0) / bits_total),
        reliable=acc["errors"] >= MIN_ERROR_EVENTS,
    )


# --- direct Gaussian estimators ----------------------------------------------------


@dataclass(frozen=True)
class BussgangEstimate:
    alpha_hat: float
    sigma_d2_hat: float
    e_nd_hat: float
    e_sd2_hat: float
    clip_fraction: float
    stderr: dict = field(default_factory=dict)
    ortho_hat: float | None = None
    n_samples: int = 0


def _gauss_block(model, op, seed, block, count, gain):
    s = philox(seed, STREAM_GAUSS, block).normal(0.0, op.sigma_t, size=count)
    g = gain(s) if gain is not None else ofdm.composite_gain(model, op, s)
    return s, g


def _group_sums(s, g):
    return np.array(
        [s.size, np.sum(g * s), np.sum(s * s), np.sum(g), np.sum(g * g), np.sum(s), np.count_nonzero(np.abs(s) > 0)],
        dtype=float,
    )


def _estimators(t, alpha_ref):
    n, gs, ss, g, gg, s = t[0], t[1], t[2], t[3], t[4], t[5]
    alpha = gs / ss
    mean_nd = (g - alpha * s) / n
    sig = (gg - 2 * alpha * gs + alpha * alpha * ss) / n - mean_nd * mean_nd
    out = [alpha, sig, g / n, gg / n]
    if alpha_ref is not None:
        out.append((gs - alpha_ref * ss) / n)
    return np.array(out)


def estimate_bussgang(
    model: AmAmModel,
    op: OperatingPoint,
    n_samples: int = 10_000_000,
    seed: int = 0,
    alpha_ref: float | None = None,
    gain: Callable | None = None,
    n_groups: int = 100,
    threads: int | None = None,
) -> BussgangEstimate:
    """Sample ``s ~ N(0, sigma_t2)``, apply ``G``, estimate the Bussgang moments.

    Standard errors are delete-one-group jackknife over ``n_groups``
    contiguous groups. With ``alpha_ref`` the orthogonality statistic
    ``mean((G[s] - alpha_ref s) s)`` is also returned (key ``ortho``).
    """
    if n_samples < 10_000:
        raise ValueError("need at least 1e4 samples")
    threads = threads or default_threads()
    bounds = np.linspace(0, n_samples, n_groups + 1).astype(np.int64)

    # draw in fixed blocks; group sums are then split out of the block stream
    n_blocks = -(-n_samples // SAMPLES_PER_BLOCK)

    def block_sums(b):
        lo = b * SAMPLES_PER_BLOCK
        cnt = min(SAMPLES_PER_BLOCK, n_samples - lo)
        s, g = _gauss_block(model, op, seed, b, cnt, gain)
        clipped = np.abs(s) > op.delta_x
        # rows: per-group partial sums for the groups intersecting this block
        gid = np.searchsorted(bounds, np.arange(lo, lo + cnt), side="right") - 1
        rows = {}
        for k in np.unique(gid):
            m = gid == k
            row = _group_sums(s[m], g[m])
            row[6] = np.count_nonzero(clipped[m])
            rows[int(k)] = row
        return rows

    per_block = _map_ordered(block_sums, list(range(n_blocks)), threads)
    groups = np.zeros((n_groups, 7))
    for rows in per_block:
        for k, row in rows.items():
            groups[k] += row

    total = groups.sum(axis=0)
    full = _estimators(total, alpha_ref)
    loo = np.array([_estimators(total - groups[k], alpha_ref) for k in range(n_groups)])
    se = np.sqrt((n_groups - 1) / n_groups * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    names = ["alpha", "sigma_d2", "e_nd", "e_sd2"] + (["ortho"] if alpha_ref is not None else [])
    return BussgangEstimate(
        alpha_hat=float(full[0]),
        sigma_d2_hat=float(full[1]),
        e_nd_hat=float(full[2]),
        e_sd2_hat=float(full[3]),
        clip_fraction=float(total[6] / total[0]),
        stderr={k: float(v) for k, v in zip(names, se)},
        ortho_hat=float(full[4]) if alpha_ref is not None else None,
        n_samples=n_samples,
    )


# --- sweeps ------------------------------------------------------------------------

AXES = ("x_lo", "sigma_t2", "sigma_r2", "delta_x", "q0", "eb_n0_db", "taylor_order")


def _apply_axis(plan: TrialPlan, name: str, value: float) -> tuple[LinkConfig, float, int]:
    """Config, analytic signal power and truncation order for one grid point."""
    cfg = plan.config
    sigma_t2 = cfg.sigma_t2
    order = bussgang.DEFAULT_MAX_ORDER
    if name == "x_lo":
        cfg = replace(cfg, x_lo=float(value))
    elif name == "delta_x":
        cfg = replace(cfg, delta_x=float(value))
    elif name == "sigma_r2":
        cfg = replace(cfg, sigma_r2=float(value))
    elif name == "q0":
        cfg = replace(cfg, q0=float(value))
        sigma_t2 = cfg.sigma_t2
    elif name == "sigma_t2":
        sigma_t2 = float(value)
    elif name == "eb_n0_db":
        cfg = replace(cfg, sigma_r2=bussgang.sigma_r2_for_eb_n0(float(value), cfg.sigma_t2, cfg.m_qam))
    elif name == "taylor_order":
        order = int(value)
        if order != value or order < 0:
            raise ValueError(f"taylor order must be a non-negative integer, got {value}")
    else:
        raise ValueError(f"unknown sweep axis {name!r}; choose from {AXES}")
    return cfg, sigma_t2, order


def _analytic_row(plan, cfg, sigma_t2, order, name):
    op = OperatingPoint(cfg.x_lo, cfg.delta_x, sigma_t2)
    if name == "taylor_order":
        alpha, _, _, sig = bussgang.partial_sums(plan.model, op, order)
        return {"alpha": alpha[order], "sigma_d2": sig[order]}
    an = bussgang.analyze(plan.model, op)
    snr = bussgang.snr(an, op, cfg.n_half, cfg.sigma_r2)
    ber_d, ber_r = bussgang.theoretical_ber(an, op, cfg.m_qam, cfg.q0, cfg.n_half, cfg.sigma_r2)
    return {
        "alpha": an.alpha,
        "e_nd": an.e_nd,
        "sigma_d2": an.sigma_d2,
        "snr_d_db": _db(snr.snr_d),
        "snr_r_db": _db(snr.snr_r),
        "ber_d_theory": ber_d,
        "ber_theory": ber_r,
        "converged": an.converged,
    }


def _db(x):
    if x == math.inf:
        return math.inf
    return 10 * math.log10(x) if x > 0 else -math.inf


def sweep(plan: TrialPlan, analytic: bool = True, empirical: bool = False, threads: int | None = None) -> list[dict]:
    """One row per grid point of ``plan.sweep_axis``, in axis order.

    Rows that fail get ``status`` set to the error text; the sweep continues.
    """
    if plan.sweep_axis is None:
        raise ValueError("plan has no sweep axis")
    name, grid = plan.sweep_axis
    rows = []
    for idx, value in enumerate(grid):
        row = {name: value, "status": "ok"}
        try:
            cfg, sigma_t2, order = _apply_axis(plan, name, value)
            row.update({"x_lo": cfg.x_lo, "m_qam": cfg.m_qam, "sigma_t2": sigma_t2, "sigma_r2": cfg.sigma_r2})
            row[name] = value
            if analytic:
                row.update(_analytic_row(plan, cfg, sigma_t2, order, name))
            if empirical:
                if name in ("sigma_t2", "taylor_order"):
                    raise ValueError(f"axis {name} has no link-level simulation")
                sub = replace(plan, config=cfg, sweep_axis=None, base_seed=(plan.base_seed + idx) & _MASK64)
                res = run_link_trials(sub, threads=threads)
                row.update(
                    {
                        "ber_mc": res.ber_empirical,
                        "stderr": res.ber_stderr,
                        "bit_errors": res.bit_errors,
                        "alpha_hat": res.alpha_hat,
                        "sigma_d2_hat": res.sigma_d2_hat,
                        "reliable": res.reliable,
                    }
                )
        except (ValueError, ArithmeticError) as exc:
            row["status"] = f"error: {exc}"
        rows.append(row)
    return rows
