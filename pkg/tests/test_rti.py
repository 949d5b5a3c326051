"""Shooting, condensing and the preparation/feedback split."""
import numpy as np
import pytest

from artic_mpc.model import P_LB, P_UB, U_LB, U_UB, VehicleModel, rk4_step
from artic_mpc.nmpc import NmpcInstance
from artic_mpc.qpcore import DenseQp, QpError, solve
from artic_mpc.rti import (AWAITING, PREPARED, LinearizationError, LinearizedOcp, PreparedQp,
                           RtiPhaseError, RtiSolver, ShootingGrid, TrackingWeights, condense,
                           condense_dynamics, shoot_and_linearize)

MODEL = VehicleModel()


def random_grid(rng, N=4, dt=0.2):
    xs = rng.normal(size=(N + 1, 7))
    xs[:, 6] = rng.uniform(0.5, 1.5, N + 1)
    us = rng.uniform(U_LB, U_UB, size=(N, 3))
    return ShootingGrid(dt, xs, us, rng.uniform(P_LB, P_UB))


def test_stationary_guess_has_zero_residuals():
    x = np.array([1.0, 2.0, 0.3, -0.5, 2.0, 0.2, 0.0])
    grid = ShootingGrid(0.2, np.tile(x, (4, 1)), np.zeros((3, 3)), [1, 1, 1, 0.0])
    lin = shoot_and_linearize(grid, MODEL)
    np.testing.assert_array_equal(lin.r, 0.0)
    assert np.max(np.abs(lin.A - np.eye(7))) < 0.2 * 1.0


def test_speed_sensitivity_is_rk4_polynomial():
    grid = ShootingGrid(0.2, np.zeros((2, 7)), np.zeros((1, 3)), [1, 1, 1, 0.0])
    lin = shoot_and_linearize(grid, MODEL)
    h = -0.2 / 2.05
    assert lin.A[0, 6, 6] == pytest.approx(1 + h + h ** 2 / 2 + h ** 3 / 6 + h ** 4 / 24, abs=1e-15)
    assert lin.A[0, 6, 6] == pytest.approx(0.90705, abs=1e-5)


def test_sensitivities_match_central_differences(rng):
    grid = random_grid(rng)
    lin = shoot_and_linearize(grid, MODEL)
    k, h = 2, 1e-5
    x, u, p = grid.xs[k], grid.us[k], grid.p

    def phi(x_, u_, p_):
        return rk4_step(MODEL.rhs, x_, u_, p_, grid.dt)

    for J, base, slot in ((lin.A[k], x, 0), (lin.B[k], u, 1), (lin.P[k], p, 2)):
        for j in range(base.size):
            plus = [x.copy(), u.copy(), p.copy()]
            minus = [x.copy(), u.copy(), p.copy()]
            plus[slot][j] += h
            minus[slot][j] -= h
            fd = (phi(*plus) - phi(*minus)) / (2 * h)
            assert np.max(np.abs(J[:, j] - fd)) / max(1.0, np.max(np.abs(fd))) <= 1e-4


def test_linearization_error_names_interval(rng):
    grid = random_grid(rng, N=3)
    grid.xs[2, 6] = 1e200
    with pytest.raises(LinearizationError) as err:
        shoot_and_linearize(grid, MODEL)
    assert err.value.interval == 2


def test_grid_contract():
    with pytest.raises(ValueError):
        ShootingGrid(0.2, np.zeros((3, 7)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ShootingGrid(0.0, np.zeros((2, 7)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ShootingGrid(0.2, np.full((2, 7), np.nan), np.zeros((1, 3)))
    g = ShootingGrid(0.2, np.arange(16.0).reshape(16, 1), np.arange(15.0).reshape(15, 1))
    assert g.N == 15 and g.horizon == pytest.approx(3.0)
    s = g.shifted()
    np.testing.assert_array_equal(s.xs[:, 0], list(range(1, 16)) + [15])
    np.testing.assert_array_equal(s.us[:, 0], list(range(1, 15)) + [14])


def scalar_lin(a, b, x0, x1_guess=None):
    x1 = a * x0 if x1_guess is None else x1_guess
    grid = ShootingGrid(0.2, [[x0], [x1]], [[0.0]])
    return LinearizedOcp(grid, np.array([[a * x0]]), np.array([[[a]]]), np.array([[[b]]]),
                         np.zeros((1, 1, 0)), np.array([[x1 - a * x0]]))


def test_condense_scalar_chain_by_hand():
    a, b, x0, xr = 0.9, 0.3, 2.0, 1.0
    Q, R, S = 2.0, 0.5, 5.0
    qp = condense(scalar_lin(a, b, x0), TrackingWeights([[Q]], [[R]], [[S]]), x_ref=[[0.0], [xr]])
    # 0.5 R du^2 + 0.5 S (a x0 + b du - xr)^2
    assert qp.H[0, 0] == pytest.approx(R + b * S * b)
    assert qp.g[0] == pytest.approx(b * S * (a * x0 - xr))


def test_condense_with_zero_state_weights_decouples(rng):
    lin = shoot_and_linearize(random_grid(rng), MODEL)
    Z = np.zeros((7, 7))
    R = np.diag([1.0, 2.0, 3.0])
    qp = condense(lin, TrackingWeights(Z, R, Z), bounds=(U_LB, U_UB))
    np.testing.assert_allclose(qp.H, np.kron(np.eye(4), R))
    sol = solve(qp)
    np.testing.assert_allclose(sol.primal, np.clip(-qp.g / np.diag(qp.H), qp.lb, qp.ub), atol=1e-10)


def test_condensed_qp_matches_sparse_kkt(rng):
    grid = random_grid(rng, N=4)
    lin = shoot_and_linearize(grid, MODEL)
    N, nx, nu = 4, 7, 3
    Q = np.diag(rng.uniform(0.5, 2, nx))
    R = np.diag(rng.uniform(0.5, 2, nu))
    S = 3 * Q
    xr = rng.normal(size=(N + 1, nx))
    w = TrackingWeights(Q, R, S)
    du = solve(condense(lin, w, x_ref=xr)).primal

    # sparse problem in (dx_1..dx_N, du_0..du_{N-1}) with dx_0 = 0
    nX, nU = N * nx, N * nu
    Hs = np.zeros((nX + nU, nX + nU))
    gs = np.zeros(nX + nU)
    for k in range(1, N + 1):
        W = S if k == N else Q
        sl = slice((k - 1) * nx, k * nx)
        Hs[sl, sl] = W
        gs[sl] = W @ (grid.xs[k] - xr[k])
    for k in range(N):
        sl = slice(nX + k * nu, nX + (k + 1) * nu)
        Hs[sl, sl] = R
        gs[sl] = R @ grid.us[k]
    E = np.zeros((nX, nX + nU))
    e = np.zeros(nX)
    for k in range(N):
        rows = slice(k * nx, (k + 1) * nx)
        E[rows, rows] = -np.eye(nx)
        if k:
            E[rows, (k - 1) * nx:k * nx] = lin.A[k]
        E[rows, nX + k * nu:nX + (k + 1) * nu] = lin.B[k]
        e[rows] = lin.r[k]
    K = np.block([[Hs, E.T], [E, np.zeros((nX, nX))]])
    sparse = np.linalg.solve(K, np.concatenate([-gs, e]))
    np.testing.assert_allclose(du, sparse[nX:nX + nU], atol=1e-6)
    # expansion satisfies the linearised dynamics
    dX = condense_dynamics(lin).states(np.zeros(nx), np.zeros(4), du)
    for k in range(N):
        resid = dX[k + 1] - (lin.A[k] @ dX[k] + lin.B[k] @ du[k * nu:(k + 1) * nu] - lin.r[k])
        assert np.max(np.abs(resid)) <= 1e-8


def test_condense_dimension_mismatch(rng):
    lin = shoot_and_linearize(random_grid(rng), MODEL)
    with pytest.raises(ValueError):
        condense(lin, TrackingWeights(np.eye(6), np.eye(3), np.eye(7)))


class _Quadratic(RtiSolver):
    """0.5 |z|^2 - a'z with the anchor a: optimum z = a."""

    def _build(self):
        return PreparedQp(DenseQp(np.eye(2), np.zeros(2)), -np.eye(2), np.zeros(2))


def test_phase_contract():
    s = _Quadratic()
    assert s.phase == AWAITING
    with pytest.raises(RtiPhaseError):
        s._feedback([1.0, 2.0])
    s._prepare()
    s._prepare()                       # re-preparation overwrites
    assert s.phase == PREPARED
    sol, _, qp = s._feedback([1.0, 2.0])
    np.testing.assert_allclose(sol.primal, [1.0, 2.0])
    assert s.phase == AWAITING
    assert s.state.prep_ms >= 0 and s.state.feedback_ms >= 0
    with pytest.raises(RtiPhaseError):
        s._feedback([1.0, 2.0])
    s._prepare()
    with pytest.raises(ValueError):
        s._feedback([1.0])


def test_anchor_at_linearisation_point_gives_plain_qp():
    s = _Quadratic()
    s._prepare()
    sol, prepared, qp = s._feedback(np.zeros(2))
    np.testing.assert_allclose(sol.primal, solve(prepared.qp).primal)


def test_infeasible_feedback_raises():
    class Bad(RtiSolver):
        def _build(self):
            qp = DenseQp(np.eye(1), [0.0], A=[[1.0], [1.0]], lbA=[1.0, -np.inf], ubA=[np.inf, 0.0])
            return PreparedQp(qp, np.zeros((1, 0)), np.zeros(0))

    s = Bad()
    s._prepare()
    with pytest.raises(QpError):
        s._feedback(np.zeros(0))


def test_gauss_newton_contracts_with_frozen_anchor():
    x0 = np.array([0.0, 0.3, 0.1, -2.4, 0.2, 0.0, 0.8])
    p = np.array([0.9, 0.9, 0.9, 0.1])
    refs = np.zeros((16, 7))
    refs[:, 0] = 0.2 * np.arange(16)
    refs[:, 3] = refs[:, 0] - 2.4
    refs[:, 6] = 1.0
    us = []
    for k in range(1, 9):
        ctl = NmpcInstance(iterations=k)
        ctl.initialize(x0, [0.0, 0.0, 50.0], p)
        us.append(ctl.control_step(x0, refs, p)[1].predicted_inputs)
    steps = [np.max(np.abs(us[i + 1] - us[i])) for i in range(len(us) - 1)]
    assert all(b < a for a, b in zip(steps[2:], steps[3:]))
