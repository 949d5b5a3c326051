"""Time-based figure-eight reference.

The eight is built from two circles of radius ``R`` whose centres sit
``d = sqrt(R**2 + (L/2)**2)`` either side of the crossing point, joined by
their two internal tangents (each of length ``L``).  Each lobe turns through
``pi + 2*alpha`` with ``alpha = asin(R/d)``; one lobe turns clockwise and the
other anticlockwise, so the unwrapped heading returns to its start value after
every lap and never needs wrapping.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DEFAULT_CONSTANTS, DELTA_T_MAX, ModelConstants

STRAIGHT, CURVE = "straight", "curve"
REFERENCE_COLUMNS = ("t", "x_t_r", "y_t_r", "psi_t_r", "x_i_r", "y_i_r", "psi_i_r", "v_r", "segment")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EightTrajectoryConfig:
    straight_len: float = 20.0
    arc_radius: float = 10.0
    ref_speed: float = 1.0
    start_pose: tuple = (0.0, 0.0, 0.0)
    constants: ModelConstants = DEFAULT_CONSTANTS

    def validate(self):
        if not self.straight_len > 0:
            raise ConfigurationError("straight_len must be positive")
        if not self.arc_radius > self.constants.L_i:
            raise ConfigurationError("arc_radius must exceed the trailer wheelbase L_i")
        if not 0 < self.ref_speed <= 2.0:
            raise ConfigurationError("ref_speed must lie in (0, 2] m/s")
        if len(self.start_pose) != 3 or not np.all(np.isfinite(self.start_pose)):
            raise ConfigurationError("start_pose must be three finite numbers")
        if 1.0 / self.arc_radius > np.tan(DELTA_T_MAX) / self.constants.L_t:
            raise ConfigurationError("arc curvature exceeds the steering limit")


@dataclass(frozen=True)
class ReferenceState:
    x_t_r: float
    y_t_r: float
    psi_t_r: float
    x_i_r: float
    y_i_r: float
    psi_i_r: float
    v_r: float
    segment: str

    def as_array(self) -> np.ndarray:
        return np.array([self.x_t_r, self.y_t_r, self.psi_t_r, self.x_i_r,
                         self.y_i_r, self.psi_i_r, self.v_r])


class EightPath:
    """Arc-length parameterised closed path (one lap, ``0 <= s < length``)."""

    def __init__(self, straight_len: float, radius: float, start_pose=(0.0, 0.0, 0.0)):
        L, R = straight_len, radius
        d = np.hypot(R, L / 2.0)
        alpha = np.arcsin(R / d)
        self.radius = R
        self.turn = np.pi + 2.0 * alpha
        arc = R * self.turn
        # segment start arc-lengths: straight, cw arc, straight, ccw arc
        self.breaks = np.array([0.0, L, L + arc, 2 * L + arc, 2 * L + 2 * arc])
        self.length = float(self.breaks[-1])

        # local frame: crossing at the origin, lobes centred at (+-d, 0)
        half = L / 2.0
        p0 = -half * np.array([np.cos(alpha), np.sin(alpha)])
        h0 = alpha
        p1 = p0 + L * np.array([np.cos(h0), np.sin(h0)])
        c1 = p1 + R * np.array([np.sin(h0), -np.cos(h0)])      # right-hand centre
        h1 = h0 - self.turn
        p2 = c1 + R * np.array([-np.sin(h1), np.cos(h1)])
        p3 = p2 + L * np.array([np.cos(h1), np.sin(h1)])
        c2 = p3 + R * np.array([-np.sin(h1), np.cos(h1)])      # left-hand centre
        self._seg = [(p0, h0), (c1, h0), (p2, h1), (c2, h1)]

        # rigid transform putting the first point on start_pose
        sx, sy, spsi = (float(v) for v in start_pose)
        rot = spsi - h0
        cr, sr = np.cos(rot), np.sin(rot)
        self._R = np.array([[cr, -sr], [sr, cr]])
        self._offset = np.array([sx, sy]) - self._R @ p0
        self._rot = rot

    def evaluate(self, s):
        """Position, unwrapped heading and segment flag (True on curves)."""
        s = np.mod(np.asarray(s, float), self.length)
        pts = np.empty(s.shape + (2,))
        head = np.empty(s.shape)
        seg = np.searchsorted(self.breaks, s, side="right") - 1
        seg = np.clip(seg, 0, 3)
        ds = s - self.breaks[seg]
        R = self.radius
        for k in range(4):
            m = seg == k
            if not np.any(m):
                continue
            anchor, h = self._seg[k]
            if k in (0, 2):
                pts[m] = anchor + ds[m, None] * np.array([np.cos(h), np.sin(h)])
                head[m] = h
            else:
                sign = -1.0 if k == 1 else 1.0
                hk = h + sign * ds[m] / R
                pts[m, 0] = anchor[0] + sign * R * np.sin(hk)
                pts[m, 1] = anchor[1] - sign * R * np.cos(hk)
                head[m] = hk
        pts = pts @ self._R.T + self._offset
        return pts, head + self._rot, (seg == 1) | (seg == 3)


class TimedReference:
    """Immutable sampled reference, periodic in time with period ``lap_time``."""

    def __init__(self, config: EightTrajectoryConfig, dt: float):
        config.validate()
        if dt <= 0:
            raise ConfigurationError("dt must be positive")
        self.config = config
        self.dt = dt
        self.path = EightPath(config.straight_len, config.arc_radius, config.start_pose)
        self.lap_time = self.path.length / config.ref_speed
        self.hitch_delay = config.constants.L_d + config.constants.L_i
        n = int(np.ceil(self.lap_time / dt - 1e-9))
        self.times = np.arange(n) * dt
        self.states, self.curve = self.evaluate(self.times)

    def evaluate(self, t):
        """Arrays ``(states (..., 7), on_curve (...))`` at times ``t``."""
        t = np.asarray(t, float)
        v = self.config.ref_speed
        s = v * t
        pt, ht, curve = self.path.evaluate(s)
        pi, hi, _ = self.path.evaluate(s - self.hitch_delay)
        out = np.empty(t.shape + (7,))
        out[..., 0:2] = pt
        out[..., 2] = ht
        out[..., 3:5] = pi
        out[..., 5] = hi
        out[..., 6] = v
        return out, curve

    def at(self, t: float) -> ReferenceState:
        st, curve = self.evaluate(np.array([t]))
        return ReferenceState(*(float(v) for v in st[0]), CURVE if curve[0] else STRAIGHT)

    def segments(self, t) -> np.ndarray:
        _, curve = self.evaluate(t)
        return np.where(curve, CURVE, STRAIGHT)

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REFERENCE_COLUMNS)
            for t, row, c in zip(self.times, self.states, self.curve):
                w.writerow([f"{t:.6f}", *(repr(float(v)) for v in row), CURVE if c else STRAIGHT])


def build_eight(config: EightTrajectoryConfig, dt: float) -> TimedReference:
    return TimedReference(config, dt)


def sample_window(traj: TimedReference, t0: float, horizon: float, dt: float):
    """Reference states at ``t0, t0 + dt, ..., t0 + horizon``."""
    if t0 < 0:
        raise ValueError("t0 must be non-negative")
    n = horizon / dt
    N = int(round(n))
    if abs(n - N) > 1e-9 or N < 0:
        raise ValueError("horizon must be a non-negative integer multiple of dt")
    t = np.mod(t0 + dt * np.arange(N + 1), traj.lap_time)
    states, curve = traj.evaluate(t)
    return [ReferenceState(*(float(v) for v in row), CURVE if c else STRAIGHT)
            for row, c in zip(states, curve)]


def window_array(traj: TimedReference, t0: float, N: int, dt: float) -> np.ndarray:
    """Array form of :func:`sample_window` used inside the control loop."""
    t = np.mod(t0 + dt * np.arange(N + 1), traj.lap_time)
    return traj.evaluate(t)[0]
