"""Tests for the closed-loop experiment orchestration."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from qfbsim.experiment import (
    PI_HALF_INIT,
    THERMAL_INIT,
    CalibrationError,
    ExperimentConfig,
    _Protocol,
    _run_mc,
    build_pipeline_config,
    calibrate_noise,
    noiseless_filtered_means,
    optimize_threshold,
    oracle_probabilities,
    overlap_probability,
    readout_fidelity,
    run_experiment,
    run_feedback_comparison,
    threshold_sample,
)
from qfbsim.fxp import ADC_LSB_VOLTS, ConfigError
from qfbsim.sigmodel import DeviceParams, thermal_population

P_THERM = thermal_population(0.114, 6.148e9)


def bench_device(**kw):
    base = dict(t1=1.4e-6, p_therm=P_THERM, amp_ss=0.6, offset_i=0.013)
    base.update(kw)
    return DeviceParams(**base)


def make_config(scenario=PI_HALF_INIT, *, device=None, feedback=False,
                reps=8192, seed=11, threshold=0.016):
    return ExperimentConfig(device=device or bench_device(), scenario=scenario,
                            feedback_enabled=feedback, repetitions=reps,
                            master_seed=seed, threshold_volts=threshold)


def calibrated(cfg, target=0.03):
    sigma = calibrate_noise(target, cfg)
    return replace(cfg, device=replace(cfg.device, noise_sigma=sigma))


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    with pytest.raises(ConfigError):
        make_config(scenario="bogus")
    with pytest.raises(ConfigError):
        make_config(reps=0)
    good = make_config()
    with pytest.raises(ConfigError):
        replace(good, pipeline=replace(good.pipeline, sync_depth=4))
    with pytest.raises(ConfigError):
        replace(good, pipeline=replace(good.pipeline, delay=20))
    with pytest.raises(ConfigError):
        replace(good, pipeline=replace(good.pipeline, delay=2))
    with pytest.raises(ConfigError):
        replace(good, threshold_volts=0.05)  # no longer matches c_i


def test_threshold_quantization():
    assert threshold_sample(0.016).raw == 131
    assert threshold_sample(0.016).to_volts() == pytest.approx(0.016, abs=1e-4)


def test_default_pipeline_shape():
    cfg = make_config()
    pipe = cfg.pipeline
    assert pipe.window_len == 4 and pipe.delay == 10
    assert pipe.lut1 == (1, 1, 0, 0)
    assert pipe.sync_depth == 6
    q_mean = 0.3 * bench_device().steady_alpha(0).real
    assert pipe.c_q.to_volts() == pytest.approx(q_mean, abs=1e-4)


def test_timing_properties():
    cfg = make_config()
    assert cfg.tau_ro_ns == 100
    assert cfg.window_center_ns == 80.0
    assert cfg.t_pi_ns == pytest.approx(333.0)
    assert cfg.eval_tick(8) == 26
    assert cfg.eval_tick(44) == 62


# ---------------------------------------------------------------------------
# filtered means and overlap calibration


def test_noiseless_means_bracket_threshold():
    cfg = make_config()
    mu_g, mu_e = noiseless_filtered_means(cfg)
    assert mu_g < 0.016 < mu_e
    # conjugate-symmetric envelopes put the midpoint at the static offset
    assert 0.5 * (mu_g + mu_e) == pytest.approx(0.013, abs=1e-3)


def test_calibrate_noise_hits_target():
    cfg = make_config()
    for target in (0.01, 0.03, 0.1):
        sigma = calibrate_noise(target, cfg)
        assert overlap_probability(cfg, sigma) == pytest.approx(target, abs=1e-3)
    assert calibrate_noise(0.01, cfg) < calibrate_noise(0.03, cfg)


def test_calibrate_noise_remeasured_by_monte_carlo():
    # frozen trajectories isolate the overlap error; the measured misread
    # rates must reproduce the analytic target
    cfg = make_config(device=bench_device(t1=math.inf, p_therm=0.0),
                      reps=1 << 15)
    cfg = calibrated(cfg, 0.03)
    fid = readout_fidelity(cfg)
    measured = 0.5 * (fid.p_e_no_pulse + fid.p_g_pi_pulse)
    assert measured == pytest.approx(0.03, abs=0.003)


def test_calibrate_noise_asymmetry_matches_gaussian_tails():
    cfg = make_config(device=bench_device(t1=math.inf, p_therm=0.0),
                      reps=1 << 15)
    cfg = calibrated(cfg, 0.03)
    mu_g, mu_e = noiseless_filtered_means(cfg)
    c = cfg.pipeline.c_i.raw * ADC_LSB_VOLTS
    sigma_f = cfg.device.noise_sigma / math.sqrt(8)
    fid = readout_fidelity(cfg)
    q = lambda z: 0.5 * math.erfc(z / math.sqrt(2))
    assert fid.p_e_no_pulse == pytest.approx(q((c - mu_g) / sigma_f), abs=0.004)
    assert fid.p_g_pi_pulse == pytest.approx(q((mu_e - c) / sigma_f), abs=0.005)


def test_calibrate_noise_rejects_bad_targets():
    cfg = make_config()
    with pytest.raises(ValueError):
        calibrate_noise(0.0, cfg)
    with pytest.raises(CalibrationError):
        calibrate_noise(0.5, cfg)
    with pytest.raises(CalibrationError):
        calibrate_noise(0.03, make_config(threshold=0.5))


# ---------------------------------------------------------------------------
# analytic oracle


def test_oracle_frozen_perfect_readout():
    dev = bench_device(t1=math.inf, p_therm=0.0, noise_sigma=0.0)
    orc = oracle_probabilities(make_config(device=dev))
    assert orc["quadrants"] == {"gg": 0.5, "ge": 0.0, "eg": 0.0, "ee": 0.5}
    assert orc["p_e1"] == 0.5 and orc["p_e2"] == 0.5


def test_oracle_thermal_first_measurement():
    cfg = calibrated(make_config(THERMAL_INIT))
    orc = oracle_probabilities(cfg)
    eps = orc["readout_flip"]
    p = cfg.device.p_therm
    expect = p * (1 - eps) + (1 - p) * eps
    assert orc["p_e1"] == pytest.approx(expect, abs=1e-12)


def test_oracle_swap_identity_without_decay():
    # with frozen populations the conditional flip exchanges the roles of
    # the two first-excited quadrants exactly
    for sigma in (0.02, 0.05, 0.09):
        dev = bench_device(t1=math.inf, p_therm=0.0, noise_sigma=sigma)
        off = oracle_probabilities(make_config(device=dev, feedback=False))
        on = oracle_probabilities(make_config(device=dev, feedback=True))
        assert on["quadrants"]["ee"] == off["quadrants"]["eg"]
        assert on["quadrants"]["eg"] == off["quadrants"]["ee"]
        assert on["quadrants"]["gg"] == off["quadrants"]["gg"]
        eps = off["readout_flip"]
        assert off["quadrants"]["eg"] == pytest.approx(eps * (1 - eps), abs=1e-12)


def test_oracle_quadrants_sum_to_one():
    for scenario in (PI_HALF_INIT, THERMAL_INIT):
        for feedback in (False, True):
            cfg = calibrated(make_config(scenario, feedback=feedback))
            orc = oracle_probabilities(cfg)
            assert sum(orc["quadrants"].values()) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Monte Carlo engine


def test_perfect_feedback_removes_excited_population():
    dev = bench_device(t1=math.inf, p_therm=0.0, noise_sigma=0.0)
    rep = run_experiment(make_config(device=dev, feedback=True, reps=4096))
    assert rep.p_e2 == 0.0
    assert rep.quadrants["ge"] == 0.0 and rep.quadrants["ee"] == 0.0
    assert rep.p_e1 == pytest.approx(0.5, abs=0.03)


def test_noiseless_outputs_match_reference_synthesis():
    # without noise or jumps the scaled first-readout values take exactly
    # the two levels predicted by the standalone waveform model
    dev = bench_device(t1=math.inf, p_therm=0.0, noise_sigma=0.0)
    cfg = make_config(device=dev, reps=512)
    res = _run_mc(cfg, _Protocol("pi_half", double=True, conditional=True))
    mu_g, mu_e = noiseless_filtered_means(cfg)
    lvl_g = (round(mu_g / ADC_LSB_VOLTS) - 131) << 3
    lvl_e = (round(mu_e / ADC_LSB_VOLTS) - 131) << 3
    assert set(np.unique(res.it1)) == {lvl_g, lvl_e}
    assert res.saturated == 0


def test_report_identities_and_histogram_consistency():
    cfg = calibrated(make_config(reps=8192))
    rep = run_experiment(cfg)
    assert rep.p_e1 == rep.quadrants["eg"] + rep.quadrants["ee"]
    assert rep.p_e2 == rep.quadrants["ge"] + rep.quadrants["ee"]
    assert sum(rep.quadrants.values()) == pytest.approx(1.0, abs=1e-12)
    # bin 64 is the sign boundary of the scaled output, so the histogram
    # quadrants reproduce the report exactly
    assert rep.histogram.quadrant_probabilities(64) == rep.quadrants
    assert int(rep.histogram.marginal_i1().sum()) == rep.repetitions


def test_determinism_and_worker_independence():
    cfg = calibrated(make_config(reps=12288, seed=5))
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    c = run_experiment(cfg, jobs=2)
    assert a.to_json() == b.to_json() == c.to_json()
    assert a.histogram.dump_bytes() == b.histogram.dump_bytes()
    assert a.histogram.dump_bytes() == c.histogram.dump_bytes()
    d = run_experiment(replace(cfg, master_seed=6))
    assert d.to_json() != a.to_json()


def test_feedback_does_not_touch_first_measurement():
    cfg = calibrated(make_config(reps=8192, seed=3))
    comp = run_feedback_comparison(cfg)
    assert comp.off.p_e1 == comp.on.p_e1
    assert comp.off.quadrant_errs.keys() == comp.on.quadrant_errs.keys()
    # shared histogram holds both runs in separate segments
    seg_counts = [int(comp.histogram.marginal_i1(seg).sum()) for seg in (0, 1)]
    assert seg_counts == [cfg.repetitions, cfg.repetitions]


def test_monte_carlo_matches_oracle_within_allowance():
    for scenario in (PI_HALF_INIT, THERMAL_INIT):
        cfg = calibrated(make_config(scenario, reps=1 << 14, seed=21))
        comp = run_feedback_comparison(cfg)
        for rep in (comp.off, comp.on):
            for key, value in rep.quadrants.items():
                gap = abs(value - rep.oracle["quadrants"][key])
                allow = 0.015 + 3 * rep.quadrant_errs[key]
                assert gap < allow, (scenario, rep.feedback_enabled, key, gap, allow)


def test_mc_swap_identity_without_decay():
    # centered threshold makes the misread rates symmetric, so the
    # feedback flip maps (E, e-kept) records onto (E, g-kept) ones
    dev = bench_device(t1=math.inf, p_therm=0.0)
    cfg = calibrated(make_config(device=dev, reps=1 << 14, seed=9,
                                 threshold=0.013))
    comp = run_feedback_comparison(cfg)
    err = math.sqrt(2) * 3 * comp.off.quadrant_errs["eg"]
    assert abs(comp.on.quadrants["ee"] - comp.off.quadrants["eg"]) < err + 0.002
    assert abs(comp.on.quadrants["eg"] - comp.off.quadrants["ee"]) < err + 0.002


def test_feedback_swaps_quadrant_roles_with_decay():
    cfg = calibrated(make_config(reps=1 << 14, seed=13))
    comp = run_feedback_comparison(cfg)
    assert comp.on.quadrants["ee"] < comp.off.quadrants["ee"] / 2
    assert comp.on.quadrants["eg"] > 2 * comp.off.quadrants["eg"]
    assert comp.on.p_e2 < comp.off.p_e2


def test_report_json_structure():
    cfg = calibrated(make_config(reps=4096))
    rep = run_experiment(cfg)
    doc = json.loads(rep.to_json())
    assert doc["scenario"] == PI_HALF_INIT
    assert "histogram" not in doc
    assert doc["latency"]["tau_fb_ns"][0] == 352.0
    assert doc["latency"]["tau_ro_ns"] == 100
    assert doc["latency"]["conditional_pulse_center_ns"] == pytest.approx(333.0)
    assert doc["config_echo"]["threshold_raw"] == 131
    assert doc["oracle"]["quadrants"]["gg"] > 0
    assert doc["repetitions"] == 4096


# ---------------------------------------------------------------------------
# fidelity and threshold optimization


def test_perfect_readout_fidelity():
    dev = bench_device(t1=math.inf, p_therm=0.0, noise_sigma=0.0)
    fid = readout_fidelity(make_config(device=dev, reps=4096))
    assert fid.f_r == 1.0
    assert fid.p_decay == 0.0 and fid.p_overlap == 0.0


def test_fidelity_band_and_budget_identity():
    cfg = calibrated(make_config(reps=1 << 15, seed=17))
    fid = readout_fidelity(cfg)
    assert 0.74 < fid.f_r < 0.80
    assert fid.p_decay == pytest.approx(1 - math.exp(-80 / 1400), abs=1e-12)
    assert fid.identity_gap < 0.02


def test_optimize_threshold_below_configured_value():
    cfg = calibrated(make_config(reps=1 << 14, seed=19))
    best = optimize_threshold(cfg)
    assert best < 0.016
    assert best > 0.0


def test_optimize_threshold_midpoint_for_symmetric_ensembles():
    dev = bench_device(t1=math.inf, p_therm=0.0, offset_i=0.0)
    cfg = calibrated(make_config(device=dev, reps=1 << 14, seed=23,
                                 threshold=0.0))
    best = optimize_threshold(cfg)
    sigma_f = cfg.device.noise_sigma / math.sqrt(8)
    assert abs(best) < 0.25 * sigma_f


def test_optimize_threshold_shift_is_exact():
    cfg = calibrated(make_config(reps=1 << 13, seed=29))
    delta = 64 * ADC_LSB_VOLTS
    shifted = replace(cfg, device=replace(cfg.device,
                                          offset_i=cfg.device.offset_i + delta))
    assert optimize_threshold(shifted) - optimize_threshold(cfg) == delta


def test_optimize_threshold_flat_signal_errors():
    dev = bench_device(t1=math.inf, p_therm=0.0, amp_ss=0.0, noise_sigma=0.0)
    with pytest.raises(CalibrationError):
        optimize_threshold(make_config(device=dev, reps=1024))
