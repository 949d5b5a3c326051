"""Moving-horizon estimator: window contract, arrival cost and estimation oracles."""
import numpy as np
import pytest

from artic_mpc.model import (BETA_MAX, NoiseSpec, VehicleModel, integrate, output_map)
from artic_mpc.nmhe import (D_UPDATE_DEFAULT, P_CAP, ArrivalCost, EstimationWindow,
                            EstimatorWeights, NmheInstance, WindowContractError, initial_prior,
                            update_arrival_cost)
from artic_mpc.rti import RtiPhaseError

DT = 0.2


def simulate(p, steps, x0=None, rng=None, noise=None):
    """Open-loop data under a slowly varying steering sequence."""
    x = np.array([0.0, 0.0, 0.0, -2.4, 0.0, 0.0, 1.0]) if x0 is None else np.asarray(x0, float)
    xs, us, ys = [], [], []
    for k in range(steps):
        u = np.array([0.15 * np.sin(0.3 * k), -0.1 + 0.1 * np.cos(0.2 * k), 62.5 + 5 * np.sin(0.1 * k)])
        y = output_map(x, u, p)
        if noise is not None:
            y = y + rng.standard_normal(9) * noise.sigmas()
        xs.append(x)
        us.append(u)
        ys.append(y)
        x = integrate(x, u, p, DT, 8)
    return np.array(xs), np.array(us), np.array(ys)


def run_estimator(est, ys, us):
    win = est.new_window()
    out = []
    for k, (y, u) in enumerate(zip(ys, us)):
        win.push_measurement(y, u, k * DT)
        if k == 0:
            est.initialize(y, u)
        else:
            est.prepare()
        out.append(est.estimate_step(win))
    return out


def test_window_fills_and_evicts_oldest():
    win = EstimationWindow(16, DT)
    for k in range(16):
        win.push_measurement(np.full(9, k), np.zeros(3), k * DT)
    assert win.full and len(win) == 16
    win.push_measurement(np.full(9, 16.0), np.zeros(3), 16 * DT)
    assert len(win) == 16
    assert win.measurements[0, 0] == 1.0 and win.measurements[-1, 0] == 16.0
    np.testing.assert_allclose(np.diff(win.times), DT)


def test_window_rejects_gaps_and_nonfinite():
    win = EstimationWindow(16, DT).push_measurement(np.zeros(9), np.zeros(3), 0.0)
    with pytest.raises(WindowContractError):
        win.push_measurement(np.zeros(9), np.zeros(3), 0.4)
    with pytest.raises(WindowContractError):
        win.push_measurement(np.zeros(9), np.zeros(3), 0.0)
    with pytest.raises(ValueError):
        win.push_measurement(np.full(9, np.nan), np.zeros(3), DT)


def test_zero_forgetting_leaves_weight_unchanged():
    P = np.diag(np.arange(1.0, 12.0))
    out = update_arrival_cost(ArrivalCost(np.zeros(11), P), np.ones(11), np.zeros(11))
    np.testing.assert_array_equal(out.P, P)
    np.testing.assert_array_equal(out.prior, np.ones(11))


def test_forgetting_formula_and_cap():
    P = np.diag([4.0, 1e9])
    out = update_arrival_cost(ArrivalCost(np.zeros(2), P), np.zeros(2), [0.25, 0.0], cap=1e6)
    assert out.P[0, 0] == pytest.approx(1.0 / (1 / 4.0 + 0.25))
    assert out.P[1, 1] == pytest.approx(1e6)
    assert np.linalg.norm(out.P, 2) <= 1e6 * (1 + 1e-12)


def scalar_fixed_point(d, h=1.0, p0=1.0, iters=400):
    """Iterate p <- 1 / (1 / (p + h) + d): information h arrives, d is forgotten."""
    seq = [p0]
    for _ in range(iters):
        ac = update_arrival_cost(ArrivalCost([0.0], [[seq[-1]]]), [0.0], [d],
                                 info=[[seq[-1] + h]], transition=[[1.0]])
        seq.append(float(ac.P[0, 0]))
    return np.array(seq)


def test_repeated_updates_reach_fixed_point():
    seq = scalar_fixed_point(0.1)
    assert np.all(np.diff(seq) >= -1e-12)            # monotone from below
    d, h = 0.1, 1.0
    closed = (-h + np.sqrt(h * h + 4 * h / d)) / 2  # p = 1 / (1/(p+h) + d)
    assert seq[-1] == pytest.approx(closed, rel=1e-9)


def test_fixed_point_ordering_is_inverse_to_forgetting():
    finals = [scalar_fixed_point(d)[-1] for d in D_UPDATE_DEFAULT]
    order = np.argsort(D_UPDATE_DEFAULT, kind="stable")
    assert np.all(np.diff(np.array(finals)[order]) <= 1e-12)


def test_initial_prior_from_first_fix():
    y = np.array([3.0, 4.0, 0.0, 0.0, 1.1, 0.0, 0.0, 60.0, 0.05])
    ac = initial_prior(y)
    assert ac.prior[2] == pytest.approx(np.arctan2(4.0, 3.0))
    assert ac.prior[5] == pytest.approx(ac.prior[2])
    np.testing.assert_allclose(ac.prior[7:], [1.0, 1.0, 1.0, 0.05])
    assert np.all(np.diag(ac.P) > 0)


def test_weights():
    w = EstimatorWeights(NoiseSpec())
    np.testing.assert_allclose(np.diag(w.H), 1 / NoiseSpec().sigmas() ** 2)
    assert w.D.shape == (11, 11)


def test_noise_free_perfect_prior_reproduces_truth():
    p = np.array([1.0, 1.0, 1.0, 0.0])
    xs, us, ys = simulate(p, 30)
    prior = ArrivalCost(np.concatenate([xs[0], p]), np.eye(11) * 1e4)
    est = NmheInstance()
    win = est.new_window()
    for k in range(30):
        win.push_measurement(ys[k], us[k], k * DT)
        if k == 0:
            est.initialize(ys[0], us[0], arrival=prior)
        else:
            est.prepare()
        e = est.estimate_step(win)
    np.testing.assert_allclose(e.state.as_array(), xs[-1], atol=1e-6)
    np.testing.assert_allclose(e.params.as_array(), p, atol=1e-6)
    assert e.kkt <= 1e-8


def test_estimates_leave_upper_bound_toward_truth():
    p = np.array([0.8, 1.0, 1.0, 0.05])
    xs, us, ys = simulate(p, 80)
    out = run_estimator(NmheInstance(), ys, us)
    mus = np.array([e.params.mu for e in out])
    assert mus[-1] < 1.0 and mus[-1] == pytest.approx(0.8, abs=0.02)
    for e in out:
        q = e.params.as_array()
        assert np.all(q[:3] >= 0.0) and np.all(q[:3] <= 1.0) and abs(q[3]) <= BETA_MAX


def test_bounds_hold_under_heavy_noise(rng):
    p = np.array([1.0, 1.0, 1.0, 0.3])
    xs, us, ys = simulate(p, 60, rng=rng, noise=NoiseSpec().scaled(5.0))
    for e in run_estimator(NmheInstance(), ys, us):
        q = e.params.as_array()
        assert np.all(q[:3] >= 0.0) and np.all(q[:3] <= 1.0) and abs(q[3]) <= BETA_MAX


def test_arrival_weight_stays_capped(rng):
    p = np.array([0.9, 0.9, 0.9, 0.1])
    xs, us, ys = simulate(p, 60, rng=rng, noise=NoiseSpec())
    est = NmheInstance(forgetting=0.0)
    win = est.new_window()
    for k in range(60):
        win.push_measurement(ys[k], us[k], k * DT)
        if k == 0:
            est.initialize(ys[0], us[0])
        else:
            est.prepare()
        est.estimate_step(win)
        assert np.linalg.norm(est.arrival.P, 2) <= P_CAP * (1 + 1e-9)


def test_phase_and_window_contracts():
    est = NmheInstance()
    win = est.new_window()
    with pytest.raises(RtiPhaseError):
        est.estimate_step(win)
    xs, us, ys = simulate(np.array([1.0, 1.0, 1.0, 0.0]), 2)
    win.push_measurement(ys[0], us[0], 0.0)
    est.initialize(ys[0], us[0])
    win.push_measurement(ys[1], us[1], DT)
    with pytest.raises(WindowContractError):
        est.estimate_step(win)          # prepared for one sample, window holds two


def test_window_grows_then_stays_at_sixteen():
    p = np.array([1.0, 1.0, 1.0, 0.0])
    xs, us, ys = simulate(p, 20)
    est = NmheInstance()
    run_estimator(est, ys, us)
    assert est.trajectory.shape == (16, 7)
    assert est.window_size == 16
