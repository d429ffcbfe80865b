import math
from dataclasses import replace

import numpy as np
import pytest

from lodc_sim import bussgang, montecarlo, ofdm
from lodc_sim.amam import AmAmModel
from lodc_sim.bussgang import OperatingPoint
from lodc_sim.montecarlo import TrialPlan
from lodc_sim.ofdm import LinkConfig
from tests import oracles

M = AmAmModel(oracles.A_SENSOR, oracles.B_SENSOR)
OP = OperatingPoint(10.0, 5.0, 2.0163)


def test_philox_cells_are_independent_and_repeatable():
    a = montecarlo.philox(7, 0, 3).random(4)
    assert np.array_equal(a, montecarlo.philox(7, 0, 3).random(4))
    assert not np.array_equal(a, montecarlo.philox(7, 0, 4).random(4))
    assert not np.array_equal(a, montecarlo.philox(7, 1, 3).random(4))
    assert not np.array_equal(a, montecarlo.philox(8, 0, 3).random(4))
    with pytest.raises(ValueError):
        montecarlo.philox(0, 0, -1)


def test_default_threads_env(monkeypatch):
    monkeypatch.setenv("LODC_SIM_THREADS", "3")
    assert montecarlo.default_threads() == 3
    monkeypatch.delenv("LODC_SIM_THREADS")
    assert montecarlo.default_threads() >= 1


def test_plan_validation():
    cfg = LinkConfig()
    with pytest.raises(ValueError):
        TrialPlan(cfg, M, n_frames=0)
    with pytest.raises(ValueError):
        TrialPlan(cfg, M, sweep_axis=("x_lo", ()))
    with pytest.raises(ValueError):
        TrialPlan(cfg, M, sweep_axis=("x_lo", (5.0, 7.0, 6.0)))
    with pytest.raises(ValueError):
        montecarlo.sweep(TrialPlan(cfg, M))


def test_identity_gain_is_error_free():
    for m in (4, 16, 64):
        plan = TrialPlan(LinkConfig(m_qam=m), M, n_frames=100, base_seed=1)
        res = montecarlo.run_link_trials(plan, gain=lambda s: s)
        assert res.bit_errors == 0 and res.ber_empirical == 0.0
        assert res.bits_total == 100 * 127 * int(math.log2(m))
        assert not res.reliable


def test_awgn_only_matches_qam_formula():
    # identity sensor plus receiver noise is a plain AWGN link per carrier
    cfg = LinkConfig(m_qam=16, sigma_r2=0.6)
    plan = TrialPlan(cfg, M, n_frames=300, base_seed=2)
    res = montecarlo.run_link_trials(plan, gain=lambda s: s)
    # per-dimension noise on each carrier after the 1/(q0 N') scaling
    sigma = math.sqrt(cfg.sigma_r2 / (2 * cfg.n_fft)) / cfg.q0
    p = ofdm.square_qam_ber(16, sigma)
    assert res.reliable
    assert abs(res.ber_empirical - p) < 3 * math.sqrt(p * (1 - p) / res.bits_total) * 1.5


def test_thread_count_does_not_change_results():
    plan = TrialPlan(LinkConfig(m_qam=16, sigma_r2=1e-6), M, n_frames=200, base_seed=11)
    r1 = montecarlo.run_link_trials(plan, threads=1)
    r4 = montecarlo.run_link_trials(plan, threads=4)
    assert replace(r1, wall_time=0) == replace(r4, wall_time=0)
    e1 = montecarlo.estimate_bussgang(M, OP, 300_000, seed=3, threads=1)
    e3 = montecarlo.estimate_bussgang(M, OP, 300_000, seed=3, threads=3)
    assert e1 == e3


def test_link_estimates_near_closed_form():
    plan = TrialPlan(LinkConfig(), M, n_frames=2000, base_seed=5)
    res = montecarlo.run_link_trials(plan)
    an = bussgang.analyze(M, OP)
    assert res.alpha_hat == pytest.approx(an.alpha, rel=0.02)
    assert res.sigma_d2_hat == pytest.approx(an.sigma_d2, rel=0.05)
    assert res.e_nd_hat == pytest.approx(an.e_nd, rel=1e-3)
    assert res.clip_fraction == pytest.approx(2 * (1 - 0.5 * math.erfc(-5 / math.sqrt(2 * 2.0163))), rel=0.1)


def test_direct_estimates_within_three_se():
    an = bussgang.analyze(M, OP)
    est = montecarlo.estimate_bussgang(M, OP, 1_000_000, seed=9, alpha_ref=an.alpha)
    for key, ref in [("alpha", an.alpha), ("sigma_d2", an.sigma_d2), ("e_nd", an.e_nd), ("e_sd2", an.e_sd2)]:
        got = getattr(est, f"{key}_hat")
        assert abs(got - ref) < 3 * est.stderr[key], key
    # residual distortion is uncorrelated with the input
    assert abs(est.ortho_hat) < 3 * est.stderr["ortho"]
    assert est.n_samples == 1_000_000


def test_standard_error_scaling():
    # averaged over seeds so the jackknife's own noise does not dominate
    small = np.mean([montecarlo.estimate_bussgang(M, OP, 100_000, seed=s).stderr["alpha"] for s in range(6)])
    large = np.mean([montecarlo.estimate_bussgang(M, OP, 400_000, seed=s).stderr["alpha"] for s in range(6)])
    assert small / large == pytest.approx(2.0, rel=0.15)


def test_estimate_bussgang_guards():
    with pytest.raises(ValueError):
        montecarlo.estimate_bussgang(M, OP, 100)


def test_gain_hook_in_estimator():
    est = montecarlo.estimate_bussgang(M, OP, 100_000, seed=1, gain=lambda s: 2 * s)
    assert est.alpha_hat == pytest.approx(2.0, rel=1e-12)
    assert est.sigma_d2_hat < 1e-20


def test_sweep_row_isolation():
    plan = TrialPlan(LinkConfig(), M, sweep_axis=("x_lo", (4.0, 10.0, 12.0)))
    rows = montecarlo.sweep(plan)
    assert rows[0]["status"].startswith("error")
    assert [r["status"] for r in rows[1:]] == ["ok", "ok"]
    assert [r["x_lo"] for r in rows] == [4.0, 10.0, 12.0]


def test_sweep_empirical_and_unreliable_flag():
    plan = TrialPlan(LinkConfig(), M, n_frames=20, base_seed=4, sweep_axis=("x_lo", (10.0, 12.0)))
    rows = montecarlo.sweep(plan, empirical=True, threads=1)
    for r in rows:
        assert r["status"] == "ok"
        assert r["reliable"] == (r["bit_errors"] >= montecarlo.MIN_ERROR_EVENTS)
        assert r["ber_mc"] == r["bit_errors"] / (20 * 127 * 2)
    # axes without a link simulation report the row, not the whole sweep
    plan = TrialPlan(LinkConfig(), M, sweep_axis=("sigma_t2", (1.0, 2.0)))
    rows = montecarlo.sweep(plan, empirical=True)
    assert all(r["status"].startswith("error") for r in rows)


def test_sweep_axes():
    plan = TrialPlan(LinkConfig(), M, sweep_axis=("taylor_order", (0, 3, 20)))
    rows = montecarlo.sweep(plan)
    assert all(r["status"] == "ok" for r in rows)
    assert rows[-1]["alpha"] == pytest.approx(bussgang.analyze(M, LinkConfig().operating_point()).alpha, rel=1e-9)
    bad = montecarlo.sweep(replace(plan, sweep_axis=("taylor_order", (1.5, 2.0))))
    assert bad[0]["status"].startswith("error") and bad[1]["status"] == "ok"
    plan = TrialPlan(LinkConfig(), M, sweep_axis=("bogus", (1.0,)))
    assert montecarlo.sweep(plan)[0]["status"].startswith("error")
    rows = montecarlo.sweep(TrialPlan(LinkConfig(), M, sweep_axis=("eb_n0_db", (30.0, 60.0))))
    assert rows[0]["ber_theory"] > rows[1]["ber_theory"]
