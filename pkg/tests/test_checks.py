import math

import numpy as np
import pytest

from samdyn.checks import (
    RegimeThresholds,
    SamDeactivationRecorder,
    TheoryConstants,
    activation_threshold,
    calibrate_sam_tau,
    check_coeff_bounds,
    check_good_batches,
    check_logit_ratio,
    check_sam_deactivation,
    check_set_monotonicity,
    classify_regime,
    effective_sigma0,
    first_stage_epochs,
    good_batch_fractions,
    regime_ratio,
    scaled_tau,
    write_report_csv,
)
from samdyn.data import DataParams, gen_dataset, make_signal, stack
from samdyn.decomposition import CoeffTracker
from samdyn.network import NetConfig
from samdyn.optim import TrainConfig, epoch_schedule, train


def _run(d=400, n=12, m=5, B=4, epochs=6, p=0.1, mu_norm=4.0, eta=0.05, seed=0,
         algo="sgd", tau=0.0, sigma_0=0.02, record_every=None):
    params = DataParams(d=d, P=2, sigma_p=1.0, p=p, mu_norm=mu_norm)
    ds = gen_dataset(params, make_signal(d, mu_norm), n, seed=seed)
    net = NetConfig(m=m, d=d, init="gaussian", sigma_0=sigma_0)
    tracker = CoeffTracker(ds, m)
    arrays = stack(ds)
    rec = SamDeactivationRecorder(arrays.y)
    cfg = TrainConfig(eta=eta, B=B, epochs=epochs, algo=algo, tau=tau, seed=seed,
                      record_every=record_every)
    traj = train(ds, net, cfg, hooks=(tracker, rec))
    return ds, net, arrays, traj, tracker, rec


def test_theory_constants_formulas():
    ds, net, arrays, traj, _, _ = _run(epochs=1)
    consts = TheoryConstants.from_run(traj.w0, arrays.mu, arrays.xi, 2, 1.0, t_star=50)
    assert consts.alpha == pytest.approx(4 * math.log(50))
    assert consts.snr == pytest.approx(4.0 / math.sqrt(400))
    assert consts.gamma_hat == pytest.approx(12 * consts.snr**2)
    mu_inner = np.abs(traj.w0 @ arrays.mu).max()
    xi_inner = np.abs(np.einsum("jmd,nd->jmn", traj.w0, arrays.xi)).max()
    assert consts.beta == pytest.approx(2 * max(mu_inner, xi_inner))
    assert consts.kappa == 10.0 and consts.c1_logit == 5.0


def test_effective_sigma0():
    g = NetConfig(m=2, d=100, init="gaussian", sigma_0=0.03)
    u = NetConfig(m=2, d=100, init="uniform_fan_in")
    assert effective_sigma0(g) == 0.03
    assert effective_sigma0(u) == pytest.approx(1 / math.sqrt(300))


def test_set_monotonicity_single_record_trivial():
    ds, net, arrays, traj, _, _ = _run(epochs=0)
    thr = activation_threshold(0.02, 1.0, 400)
    rep = check_set_monotonicity(traj, arrays.y, thr)
    assert rep.violations == 0


def test_set_monotonicity_benign_run():
    ds, net, arrays, traj, _, _ = _run(epochs=8, eta=0.02)
    thr = activation_threshold(0.02, 1.0, 400)
    rep = check_set_monotonicity(traj, arrays.y, thr)
    assert rep.violation_fraction <= 0.05


def test_set_monotonicity_reports_stress_violations():
    # small d + aggressive step: cross-sample interference knocks filters out
    ds, net, arrays, traj, _, _ = _run(d=24, n=12, eta=2.0, epochs=12, mu_norm=6.0,
                                       p=0.3, seed=3)
    thr = activation_threshold(0.02, 1.0, 24)
    rep = check_set_monotonicity(traj, arrays.y, thr)
    assert rep.violations > 0  # reported, not raised
    assert rep.total > 0


def test_logit_ratio_exactly_one_at_zero_weights():
    # two samples, zero init: every margin is 0, every l' is -1/2
    ds, net, arrays, traj, _, _ = _run(n=2, B=2, epochs=0, sigma_0=0.0)
    rep = check_logit_ratio(traj)
    assert rep.worst_case_value == 1.0
    assert rep.violations == 0


def test_logit_ratio_single_sample_is_one():
    ds, net, arrays, traj, _, _ = _run(n=1, B=1, epochs=3)
    rep = check_logit_ratio(traj)
    assert rep.worst_case_value == 1.0
    assert rep.violations == 0


def test_logit_ratio_detects_spread():
    ds, net, arrays, traj, _, _ = _run(epochs=10, eta=0.3, mu_norm=6.0, p=0.25, seed=2)
    rep = check_logit_ratio(traj, c1=0.0001)  # absurdly tight bound must flag
    assert rep.violations > 0
    loose = check_logit_ratio(traj, c1=50.0)
    assert loose.violations == 0
    assert loose.worst_case_value == rep.worst_case_value


def test_coeff_bounds_initial_state():
    ds, net, arrays, traj, tracker, _ = _run(epochs=0)
    consts = TheoryConstants.from_run(traj.w0, arrays.mu, arrays.xi, 2, 1.0, t_star=10)
    reports = check_coeff_bounds(tracker.history, consts, d=400)
    assert all(r.violations == 0 for r in reports)


def test_coeff_bounds_benign_run_within_alpha():
    ds, net, arrays, traj, tracker, _ = _run(epochs=10, eta=0.02)
    consts = TheoryConstants.from_run(traj.w0, arrays.mu, arrays.xi, 2, 1.0, t_star=10)
    reports = {r.check: r for r in check_coeff_bounds(tracker.history, consts, d=400)}
    assert reports["zeta_range"].violations == 0
    assert reports["omega_range"].violations == 0
    assert reports["gamma_range"].violations == 0
    assert "empirical_upper_ratio" in reports["gamma_range"].detail


def test_good_batches_full_batch_counts():
    y = np.array([1.0, 1.0, -1.0, -1.0])
    y_hat = y.copy()  # p=0: S_+ cap S_y == S_y
    schedules = [epoch_schedule(4, 4, np.random.default_rng(0))]
    fr = good_batch_fractions(schedules, y, y_hat, 4)
    # counts are 2 of B=4 for each label: inside [1, 3]
    assert fr.shape == (1, 2)
    assert np.all(fr == 1.0)
    rep = check_good_batches(schedules, y, y_hat, 4)
    assert rep.violations == 0


def test_good_batches_unbalanced_full_batch():
    y = np.ones(4)
    schedules = [epoch_schedule(4, 4, np.random.default_rng(0))]
    fr = good_batch_fractions(schedules, y, y.copy(), 4)
    # label +1 count = 4 > 3B/4, label -1 count = 0 < B/4: both bad
    assert np.all(fr == 0.0)


def test_good_batches_monte_carlo():
    rng = np.random.default_rng(5)
    n, B = 64, 8
    y_hat = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    flip = rng.random(n) < 0.1
    y = np.where(flip, -y_hat, y_hat)
    schedules = [epoch_schedule(n, B, rng) for _ in range(200)]
    fr = good_batch_fractions(schedules, y, y_hat, B)
    assert fr.mean() >= 0.5


def test_classify_regime_edges():
    assert classify_regime(20, 0.0, 1000, 2, 1.0) == "harmful"
    assert classify_regime(20, 10.0, 10**9, 2, 1.0) == "harmful"  # d -> infinity
    assert classify_regime(20, 10.0, 1000, 2, 1.0) == "benign"
    th = RegimeThresholds(c_lo=1e-9, c_hi=1e9)
    assert classify_regime(20, 3.0, 1000, 2, 1.0, th) == "indeterminate"
    assert regime_ratio(20, 10.0, 1000, 2, 1.0) == pytest.approx(20 * 1e4 / (1000 * 16))


def test_deactivation_recorder_tau_zero_vacuous():
    ds, net, arrays, traj, _, rec = _run(algo="sam", tau=0.0, epochs=3)
    rep = check_sam_deactivation(rec)
    assert rep.total == 0
    assert "vacuous" in rep.detail


def test_deactivation_large_radius_suppresses():
    """With the scaled radius large enough, every same-class activated
    (filter, sample) pair is deactivated by the perturbation."""
    d, n, B, m = 800, 8, 4, 4
    sigma_0 = 1.0 / (2 * math.sqrt(d))
    tau = scaled_tau(4.0, m, B, 2, 1.0, d)
    ds, net, arrays, traj, _, rec = _run(
        d=d, n=n, m=m, B=B, epochs=10, p=0.0, mu_norm=2.0, eta=5e-4,
        algo="sam", tau=tau, sigma_0=sigma_0, seed=1,
    )
    rep = check_sam_deactivation(rec)
    assert rep.total > 0
    assert rep.violations == 0


def test_deactivation_tiny_radius_reports_failures():
    d, n, B, m = 800, 8, 4, 4
    sigma_0 = 1.0 / (2 * math.sqrt(d))
    ds, net, arrays, traj, _, rec = _run(
        d=d, n=n, m=m, B=B, epochs=10, p=0.0, mu_norm=2.0, eta=5e-4,
        algo="sam", tau=1e-6, sigma_0=sigma_0, seed=1,
    )
    rep = check_sam_deactivation(rec)
    assert rep.violations > 0


def test_first_stage_and_tau_formulas():
    assert first_stage_epochs(8, 8, 16, 2e-4, 3.0) == pytest.approx(
        64 / (12 * 16 * 2e-4 * 9)
    )
    assert scaled_tau(1.0, 8, 8, 2, 1.0, 3000) == pytest.approx(
        8 * math.sqrt(8) / (2 * math.sqrt(3000))
    )


def test_calibrate_sam_tau_small_instance():
    params = DataParams(d=800, P=2, sigma_p=1.0, p=0.0, mu_norm=2.0)
    net = NetConfig(m=4, d=800, init="gaussian", sigma_0=1.0 / (2 * math.sqrt(800)))
    c, tau = calibrate_sam_tau(params, n=8, net=net, eta=1e-3, B=4, seeds=(0, 1),
                               c_lo=0.25, c_hi=8.0, iters=4)
    assert 0.25 <= c <= 8.0
    assert tau == pytest.approx(scaled_tau(c, 4, 4, 2, 1.0, 800))


def test_checkers_are_pure():
    """Re-running a checker on the same trajectory reproduces the report."""
    ds, net, arrays, traj, tracker, rec = _run(epochs=5)
    thr = activation_threshold(0.02, 1.0, 400)
    a = check_set_monotonicity(traj, arrays.y, thr)
    b = check_set_monotonicity(traj, arrays.y, thr)
    assert a == b
    assert check_logit_ratio(traj) == check_logit_ratio(traj)
    consts = TheoryConstants.from_run(traj.w0, arrays.mu, arrays.xi, 2, 1.0, t_star=5)
    assert check_coeff_bounds(tracker.history, consts, 400) == check_coeff_bounds(
        tracker.history, consts, 400
    )


def test_report_csv(tmp_path):
    ds, net, arrays, traj, tracker, rec = _run(epochs=2)
    reports = [check_logit_ratio(traj), check_sam_deactivation(rec)]
    path = tmp_path / "report.csv"
    write_report_csv(path, reports)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("check,window,violations")
    assert len(lines) == 3
