import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from lodc_sim import bussgang, ofdm, specfun
from lodc_sim.amam import AmAmModel
from lodc_sim.ofdm import LinkConfig
from tests import oracles

M = AmAmModel(oracles.A_SENSOR, oracles.B_SENSOR)


def test_link_config_validation():
    for kw in [
        {"n_half": 16},
        {"m_qam": 8},
        {"q0": 0.0},
        {"x_lo": 4.0},
        {"delta_x": 0.0},
        {"sigma_r2": -1.0},
    ]:
        with pytest.raises(ValueError):
            LinkConfig(**kw)


@pytest.mark.parametrize("m,power", [(4, 2.0163), (16, 10.0813), (64, 42.3413)])
def test_reference_powers(m, power):
    cfg = LinkConfig(m_qam=m)
    assert cfg.sigma_t2 == pytest.approx(power, abs=5e-5)
    assert cfg.bits_per_frame == 127 * int(math.log2(m))


def test_qam_constellations():
    c4 = ofdm.constellation(4)
    assert set(c4.tolist()) == {1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j}
    assert np.mean(np.abs(c4) ** 2) == pytest.approx(2.0, rel=1e-15)
    assert np.mean(np.abs(ofdm.constellation(16)) ** 2) == pytest.approx(10.0, rel=1e-15)
    assert np.mean(np.abs(ofdm.constellation(64)) ** 2) == pytest.approx(42.0, rel=1e-15)


@pytest.mark.parametrize("m", [4, 16, 64, 256])
def test_gray_neighbours_differ_in_one_bit(m):
    pts = ofdm.constellation(m)
    for i, p in enumerate(pts):
        for j, q in enumerate(pts):
            if abs(p - q) == 2.0:
                assert bin(i ^ j).count("1") == 1


@pytest.mark.parametrize("m", [4, 16, 64])
def test_qam_round_trip(m):
    k = int(math.log2(m))
    bits = (np.arange(m)[:, None] >> np.arange(k - 1, -1, -1)) & 1
    assert np.array_equal(ofdm.qam_demap(ofdm.qam_map(bits.reshape(-1), m), m), bits.reshape(-1))


def test_qam_errors():
    with pytest.raises(ValueError):
        ofdm.qam_map(np.zeros(3, int), 4)
    with pytest.raises(ValueError):
        ofdm.qam_map(np.array([0, 2]), 4)
    with pytest.raises(ValueError):
        ofdm.qam_map(np.zeros(4, int), 8)


def test_tie_break_lower_gray_label():
    # 16-QAM in-phase levels -3,-1,1,3 carry Gray labels 00,01,11,10
    bits = ofdm.qam_demap(np.array([0.0 + 3j, 2.0 + 3j, -2.0 + 3j]), 16)
    i_labels = [int("".join(map(str, bits[4 * n : 4 * n + 2])), 2) for n in range(3)]
    # 0 between -1 (01) and 1 (11) -> 01; 2 between 1 (11) and 3 (10) -> 10; -2 between -3 (00) and -1 (01) -> 00
    assert i_labels == [0b01, 0b10, 0b00]


def test_decisions_outside_range_saturate():
    bits = ofdm.qam_demap(np.array([100 - 100j]), 16)
    assert np.array_equal(ofdm.qam_map(bits, 16), [3 - 3j])


def test_build_frame_basics():
    cfg = LinkConfig()
    z = ofdm.build_frame(np.zeros(127), cfg)
    assert np.all(z.time_samples == 0)
    assert z.freq_symbols[0] == 0 and z.freq_symbols[128] == 0
    with pytest.raises(ValueError):
        ofdm.build_frame(np.zeros(128), cfg)


def test_single_carrier_is_cosine():
    cfg = LinkConfig()
    d = np.zeros(127, complex)
    d[0] = 1.0
    f = ofdm.build_frame(d, cfg)
    n = np.arange(256)
    assert np.allclose(f.time_samples, 2 * cfg.q0 * np.cos(2 * np.pi * n / 256), atol=1e-15)
    assert ofdm.imaginary_residue(f, cfg) < 1e-10


def random_frames(cfg, n, seed):
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=(n, cfg.bits_per_frame))
    return bits, ofdm.build_frame(ofdm.qam_map(bits, cfg.m_qam), cfg)


@pytest.mark.parametrize("m", [4, 16, 64])
def test_power_and_gaussianity(m):
    cfg = LinkConfig(m_qam=m)
    _, fr = random_frames(cfg, 10_000, m)
    s = fr.time_samples
    assert ofdm.imaginary_residue(fr, cfg) < 1e-10
    per_frame = np.mean(s * s, axis=1)
    # QPSK frames all carry the same energy (Parseval), so only the 1% bound applies there
    se = per_frame.std(ddof=1) / math.sqrt(per_frame.size)
    assert abs(per_frame.mean() - cfg.sigma_t2) <= max(5 * se, 1e-12 * cfg.sigma_t2)
    assert abs(per_frame.mean() / cfg.sigma_t2 - 1) < 0.01
    assert abs(stats.kurtosis(s.reshape(-1))) < 0.1


def test_clip():
    x = np.array([-10.0, -5.0, -1.0, 0.0, 4.9, 5.0, 10.0])
    assert np.array_equal(ofdm.clip(x, 5.0), [-5, -5, -1, 0, 4.9, 5, 5])
    with pytest.raises(ValueError):
        ofdm.clip(x, 0.0)
    s = np.random.default_rng(1).normal(0, 3.0, 10**6)
    p = 2 * specfun.q_function(5.0 / 3.0)
    frac = np.mean(np.abs(s) > 5.0)
    assert abs(frac - p) < 3 * math.sqrt(p * (1 - p) / s.size)


def test_composite_gain():
    cfg = LinkConfig()
    assert ofdm.composite_gain(M, cfg, 0.0) == M.eval(10.0)
    assert ofdm.composite_gain(M, cfg, 5.0) == M.eval(15.0)
    assert ofdm.composite_gain(M, cfg, 7.0) == ofdm.composite_gain(M, cfg, 5.0)
    s = np.linspace(-20, 20, 401)
    assert np.array_equal(ofdm.composite_gain(M, cfg, ofdm.clip(s, 5.0)), ofdm.composite_gain(M, cfg, s))


def test_gain_continuous_at_knee():
    cfg = LinkConfig()
    assert ofdm.composite_gain(M, cfg, 5.0) - ofdm.composite_gain(M, cfg, 5.0 + 1e-12) == 0.0


def test_channel_hooks():
    cfg = LinkConfig()
    _, fr = random_frames(cfg, 3, 0)
    r, d = ofdm.channel(fr, M, cfg, None, gain=lambda s: s)
    assert np.array_equal(r, fr.time_samples) and np.array_equal(d, r)
    r, _ = ofdm.channel(np.zeros(256), M, cfg, None)
    assert np.all(r == M.eval(10.0))
    noisy = LinkConfig(sigma_r2=1e-4)
    r, d = ofdm.channel(np.zeros(256), M, noisy, np.random.default_rng(0))
    assert np.all(d == M.eval(10.0)) and np.std(r - d) == pytest.approx(1e-2, rel=0.2)
    with pytest.raises(ValueError):
        ofdm.channel(np.zeros(256), M, noisy, None)


def test_channel_mean_matches_e_nd():
    cfg = LinkConfig()
    _, fr = random_frames(cfg, 4000, 5)  # ~1e6 samples
    _, d = ofdm.channel(fr, M, cfg, None)
    e_nd = bussgang.analyze(M, cfg.operating_point()).e_nd
    # frames are independent; use per-frame means for the standard error
    fm = d.mean(axis=1)
    assert abs(fm.mean() - e_nd) < 3 * fm.std(ddof=1) / math.sqrt(fm.size)


def test_demodulate_identity_and_dc():
    cfg = LinkConfig(m_qam=16)
    bits, fr = random_frames(cfg, 20, 9)
    sym = ofdm.demodulate(fr.time_samples, cfg, 1.0)
    assert np.max(np.abs(sym - fr.freq_symbols[:, 1:128])) < 1e-10
    assert np.array_equal(ofdm.qam_demap(sym, 16), bits)
    dc = ofdm.demodulate(np.full(256, 0.37), cfg, -0.02)
    assert np.all(dc == 0)
    with pytest.raises(ValueError):
        ofdm.demodulate(fr.time_samples, cfg, 0.0)
    with pytest.raises(ValueError):
        ofdm.demodulate(np.zeros(100), cfg, 1.0)


def _textbook_ber(m, x):
    # standard Gray square-QAM expressions, x = half-spacing / noise std
    q = specfun.q_function
    if m == 4:
        return q(x)
    if m == 16:
        return (3 * q(x) + 2 * q(3 * x) - q(5 * x)) / 4
    raise ValueError


@pytest.mark.parametrize("m", [4, 16])
@pytest.mark.parametrize("sigma", [0.4, 0.7, 1.0])
def test_exact_qam_ber_formula(m, sigma):
    assert ofdm.square_qam_ber(m, sigma) == pytest.approx(_textbook_ber(m, 1 / sigma), rel=1e-12)
    assert ofdm.square_qam_ber(m, 0.0) == 0.0


@pytest.mark.parametrize("m,sigma", [(4, 0.5), (16, 0.35), (64, 0.2)])
def test_awgn_ber_matches_formula(m, sigma):
    rng = np.random.default_rng(m)
    k = int(math.log2(m))
    bits = rng.integers(0, 2, size=200_000 * k // 2 * 2)
    sym = ofdm.qam_map(bits, m)
    rx = sym + sigma * (rng.normal(size=sym.shape) + 1j * rng.normal(size=sym.shape))
    ber = np.mean(ofdm.qam_demap(rx, m) != bits)
    p = ofdm.square_qam_ber(m, sigma)
    assert abs(ber - p) < 1.96 * math.sqrt(p * (1 - p) / bits.size) * 1.5


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([4, 16, 64]), st.integers(0, 2**32 - 1))
def test_chain_identity_property(m, seed):
    cfg = LinkConfig(m_qam=m)
    bits, fr = random_frames(cfg, 2, seed)
    r, _ = ofdm.channel(fr, M, cfg, None, gain=lambda s: s)
    assert np.array_equal(ofdm.qam_demap(ofdm.demodulate(r, cfg, 1.0), m), bits)
