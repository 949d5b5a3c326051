"""Figure-eight reference: geometry, timing, windows and CSV export."""
import csv

import numpy as np
import pytest

from artic_mpc.trajectory import (CURVE, REFERENCE_COLUMNS, STRAIGHT, ConfigurationError,
                                  EightTrajectoryConfig, build_eight, sample_window, window_array)

CFG = EightTrajectoryConfig(straight_len=20.0, arc_radius=10.0, ref_speed=1.0)
DT = 0.2


@pytest.fixture(scope="module")
def traj():
    return build_eight(CFG, DT)


def lobe_turn(L=20.0, R=10.0):
    # the tangent from the crossing point meets the circle at angle asin(R/d)
    return np.pi + 2 * np.arcsin(R / np.hypot(R, L / 2))


def test_lap_time_from_geometry(traj):
    expected = (2 * 20.0 + 2 * 10.0 * lobe_turn()) / 1.0
    assert traj.lap_time == pytest.approx(expected, rel=1e-12)


def test_first_sample_is_start_pose():
    cfg = EightTrajectoryConfig(start_pose=(3.0, -1.0, 0.4))
    tr = build_eight(cfg, DT)
    st = tr.at(0.0)
    assert (st.x_t_r, st.y_t_r, st.psi_t_r) == pytest.approx((3.0, -1.0, 0.4), abs=1e-12)
    assert st.segment == STRAIGHT


def test_straight_spacing_equals_speed_times_dt(traj):
    t = np.arange(0.0, 20.0, DT)            # the first straight lasts 20 s
    states, curve = traj.evaluate(t)
    assert not np.any(curve)
    np.testing.assert_allclose(np.hypot(*np.diff(states[:, :2], axis=0).T), 1.0 * DT, atol=1e-12)


def test_curve_heading_rate(traj):
    t = np.arange(30.0, 40.0, DT)          # inside the first lobe
    states, curve = traj.evaluate(t)
    assert np.all(curve)
    np.testing.assert_allclose(np.abs(np.diff(states[:, 2])), 0.02, atol=1e-12)


def test_headings_continuous_at_junctions(traj):
    s = np.linspace(0, traj.lap_time, 20001)
    states, _ = traj.evaluate(s)
    assert np.max(np.abs(np.diff(states[:, 2]))) < 2e-3
    assert np.max(np.hypot(*np.diff(states[:, :2], axis=0).T)) < 1.0 * traj.lap_time / 20000 + 1e-9


def test_periodicity(traj):
    a, _ = traj.evaluate(np.array([7.3]))
    b, _ = traj.evaluate(np.array([7.3 + traj.lap_time]))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_trailer_reference_is_delayed_path(traj):
    delay = (CFG.constants.L_d + CFG.constants.L_i) / CFG.ref_speed
    t = np.array([12.0, 40.0, 90.0])
    now, _ = traj.evaluate(t)
    earlier, _ = traj.evaluate(t - delay)
    np.testing.assert_allclose(now[:, 3:6], earlier[:, 0:3], atol=1e-12)


def test_window_nodes_and_wrap(traj):
    w = sample_window(traj, 0.0, 3.0, DT)
    assert len(w) == 16
    single = sample_window(traj, 5.0, 0.0, DT)
    assert len(single) == 1
    np.testing.assert_allclose(single[0].as_array(), traj.at(5.0).as_array())
    wrap = sample_window(traj, traj.lap_time, 3.0, DT)
    np.testing.assert_allclose([r.as_array() for r in wrap], [r.as_array() for r in w], atol=1e-9)
    np.testing.assert_allclose(window_array(traj, 4.0, 15, DT),
                               [r.as_array() for r in sample_window(traj, 4.0, 3.0, DT)])


def test_window_errors(traj):
    with pytest.raises(ValueError):
        sample_window(traj, -0.1, 3.0, DT)
    with pytest.raises(ValueError):
        sample_window(traj, 0.0, 3.1, DT)


@pytest.mark.parametrize("kwargs", [dict(straight_len=0.0), dict(arc_radius=1.0),
                                    dict(ref_speed=2.5), dict(ref_speed=0.0),
                                    dict(arc_radius=1.5)])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigurationError):
        build_eight(EightTrajectoryConfig(**kwargs), DT)


def test_curvature_within_steering_limit(traj):
    assert 1.0 / CFG.arc_radius <= np.tan(np.deg2rad(35)) / CFG.constants.L_t


def test_csv_export(traj, tmp_path):
    path = tmp_path / "ref.csv"
    traj.to_csv(path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == REFERENCE_COLUMNS
    assert len(rows) - 1 == len(traj.times)
    assert {r[-1] for r in rows[1:]} == {STRAIGHT, CURVE}
    assert float(rows[2][0]) == pytest.approx(DT)
