"""Adaptive kinematic tractor-trailer model.

State ``x = (x_t, y_t, psi_t, x_i, y_i, psi_i, v)``, input
``u = (delta_t, delta_i, hp)``, varying parameters ``p = (mu, kappa, eta, beta)``
and measurement ``y = (x_t, y_t, x_i, y_i, v, delta_t, delta_i, hp, beta)``.

All numerical routines work on plain numpy arrays and accept arbitrary leading
batch dimensions, so a whole shooting grid can be evaluated in one call.  The
frozen dataclasses are thin named views over those arrays.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

NX, NU, NP, NY = 7, 3, 4, 9

DEG = np.pi / 180.0
DELTA_T_MAX = 35.0 * DEG
DELTA_I_MAX = 25.0 * DEG
HP_MIN, HP_MAX = 0.0, 100.0
BETA_MAX = 20.0 * DEG

U_LB = np.array([-DELTA_T_MAX, -DELTA_I_MAX, HP_MIN])
U_UB = np.array([DELTA_T_MAX, DELTA_I_MAX, HP_MAX])
P_LB = np.array([0.0, 0.0, 0.0, -BETA_MAX])
P_UB = np.array([1.0, 1.0, 1.0, BETA_MAX])

STATE_NAMES = ("x_t", "y_t", "psi_t", "x_i", "y_i", "psi_i", "v")
INPUT_NAMES = ("delta_t", "delta_i", "hp")
PARAM_NAMES = ("mu", "kappa", "eta", "beta")
MEAS_NAMES = ("x_t", "y_t", "x_i", "y_i", "v", "delta_t", "delta_i", "hp", "beta")

# rows of x / u / p picked out by the output map
_Y_FROM_X = (0, 1, 3, 4, 6)
_Y_FROM_U = (0, 1, 2)
_Y_FROM_P = (3,)


class _Vector:
    """Mixin giving a dataclass array round-tripping."""

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        names = [f.name for f in fields(cls)]
        if a.shape != (len(names),):
            raise ValueError(f"{cls.__name__} needs {len(names)} entries, got shape {a.shape}")
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class VehicleState(_Vector):
    x_t: float
    y_t: float
    psi_t: float
    x_i: float
    y_i: float
    psi_i: float
    v: float

    def __post_init__(self):
        if not np.all(np.isfinite(astuple(self))):
            raise ValueError("VehicleState fields must be finite")


@dataclass(frozen=True)
class ControlInput(_Vector):
    delta_t: float
    delta_i: float
    hp: float

    def within_bounds(self, tol: float = 0.0) -> bool:
        a = self.as_array()
        return bool(np.all(a >= U_LB - tol) and np.all(a <= U_UB + tol))

    def clamped(self) -> "ControlInput":
        return ControlInput.from_array(np.clip(self.as_array(), U_LB, U_UB))


@dataclass(frozen=True)
class VaryingParams(_Vector):
    mu: float = 1.0
    kappa: float = 1.0
    eta: float = 1.0
    beta: float = 0.0

    def within_bounds(self, tol: float = 0.0) -> bool:
        a = self.as_array()
        return bool(np.all(a >= P_LB - tol) and np.all(a <= P_UB + tol))


@dataclass(frozen=True)
class Measurement(_Vector):
    x_t: float
    y_t: float
    x_i: float
    y_i: float
    v: float
    delta_t: float
    delta_i: float
    hp: float
    beta: float


@dataclass(frozen=True)
class ModelConstants:
    L_t: float = 1.4
    L_i: float = 1.3
    L_d: float = 1.1
    tau: float = 2.05
    K: float = 0.016

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"model constant {f.name} must be strictly positive")


@dataclass(frozen=True)
class NoiseSpec:
    sigma_pos: float = 0.03
    sigma_v: float = 0.1
    sigma_delta_t: float = 0.0175
    sigma_delta_i: float = 0.0175
    sigma_hp: float = 3.0
    sigma_beta: float = 0.0175

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"noise level {f.name} must be non-negative")

    def sigmas(self) -> np.ndarray:
        """Standard deviations in measurement order."""
        s = self.sigma_pos
        return np.array([s, s, s, s, self.sigma_v, self.sigma_delta_t,
                         self.sigma_delta_i, self.sigma_hp, self.sigma_beta])

    def scaled(self, factor: float) -> "NoiseSpec":
        return NoiseSpec(*(factor * getattr(self, f.name) for f in fields(self)))


DEFAULT_CONSTANTS = ModelConstants()


def dynamics(x, u, p, c: ModelConstants = DEFAULT_CONSTANTS) -> np.ndarray:
    """Time derivative of the state; broadcasts over leading axes."""
    x, u, p = np.asarray(x, float), np.asarray(u, float), np.asarray(p, float)
    psi_t, psi_i, v = x[..., 2], x[..., 5], x[..., 6]
    d_t, d_i, hp = u[..., 0], u[..., 1], u[..., 2]
    mu, kappa, eta, beta = p[..., 0], p[..., 1], p[..., 2], p[..., 3]

    ground = mu * v
    tan_t = np.tan(kappa * d_t)
    a = eta * d_i + beta
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (NX,), p.shape[:-1] + (NX,)))
    out[..., 0] = ground * np.cos(psi_t)
    out[..., 1] = ground * np.sin(psi_t)
    out[..., 2] = ground * tan_t / c.L_t
    out[..., 3] = ground * np.cos(psi_i)
    out[..., 4] = ground * np.sin(psi_i)
    out[..., 5] = ground / c.L_i * (np.sin(a) + c.L_d / c.L_t * tan_t * np.cos(a))
    out[..., 6] = -v / c.tau + c.K / c.tau * hp
    return out


def dynamics_jacobians(x, u, p, c: ModelConstants = DEFAULT_CONSTANTS):
    """Return ``(f, df/dx, df/du, df/dp)`` evaluated analytically."""
    x, u, p = np.asarray(x, float), np.asarray(u, float), np.asarray(p, float)
    f = dynamics(x, u, p, c)
    batch = f.shape[:-1]
    psi_t, psi_i, v = x[..., 2], x[..., 5], x[..., 6]
    d_t, d_i = u[..., 0], u[..., 1]
    mu, kappa, eta, beta = p[..., 0], p[..., 1], p[..., 2], p[..., 3]

    tan_t = np.tan(kappa * d_t)
    sec2 = 1.0 + tan_t**2
    a = eta * d_i + beta
    sa, ca = np.sin(a), np.cos(a)
    ratio = c.L_d / c.L_t
    g = sa + ratio * tan_t * ca
    dg_da = ca - ratio * tan_t * sa
    ct, st, ci, si = np.cos(psi_t), np.sin(psi_t), np.cos(psi_i), np.sin(psi_i)

    fx = np.zeros(batch + (NX, NX))
    fu = np.zeros(batch + (NX, NU))
    fp = np.zeros(batch + (NX, NP))

    fx[..., 0, 2] = -mu * v * st
    fx[..., 0, 6] = mu * ct
    fp[..., 0, 0] = v * ct
    fx[..., 1, 2] = mu * v * ct
    fx[..., 1, 6] = mu * st
    fp[..., 1, 0] = v * st

    fx[..., 2, 6] = mu * tan_t / c.L_t
    fu[..., 2, 0] = mu * v * kappa * sec2 / c.L_t
    fp[..., 2, 0] = v * tan_t / c.L_t
    fp[..., 2, 1] = mu * v * d_t * sec2 / c.L_t

    fx[..., 3, 5] = -mu * v * si
    fx[..., 3, 6] = mu * ci
    fp[..., 3, 0] = v * ci
    fx[..., 4, 5] = mu * v * ci
    fx[..., 4, 6] = mu * si
    fp[..., 4, 0] = v * si

    k6 = mu * v / c.L_i
    fx[..., 5, 6] = mu * g / c.L_i
    fu[..., 5, 0] = k6 * ratio * ca * kappa * sec2
    fu[..., 5, 1] = k6 * dg_da * eta
    fp[..., 5, 0] = v * g / c.L_i
    fp[..., 5, 1] = k6 * ratio * ca * d_t * sec2
    fp[..., 5, 2] = k6 * dg_da * d_i
    fp[..., 5, 3] = k6 * dg_da

    fx[..., 6, 6] = -1.0 / c.tau
    fu[..., 6, 2] = c.K / c.tau
    return f, fx, fu, fp


def output_map(x, u, p) -> np.ndarray:
    """Noise-free measurement vector; broadcasts over leading axes."""
    x, u, p = np.asarray(x, float), np.asarray(u, float), np.asarray(p, float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], p.shape[:-1])
    parts = [np.broadcast_to(a[..., list(rows)], batch + (len(rows),))
             for a, rows in ((x, _Y_FROM_X), (u, _Y_FROM_U), (p, _Y_FROM_P))]
    return np.concatenate(parts, axis=-1)


def output_jacobians():
    """Constant selection matrices ``(dy/dx, dy/du, dy/dp)``."""
    hx = np.zeros((NY, NX))
    hu = np.zeros((NY, NU))
    hp = np.zeros((NY, NP))
    for row, col in enumerate(_Y_FROM_X):
        hx[row, col] = 1.0
    for k, col in enumerate(_Y_FROM_U):
        hu[len(_Y_FROM_X) + k, col] = 1.0
    hp[NY - 1, _Y_FROM_P[0]] = 1.0
    return hx, hu, hp


class VehicleModel:
    """Model adaptor consumed by the shooting machinery (``rhs``/``jacobians``)."""

    nx, nu, npar = NX, NU, NP

    def __init__(self, constants: ModelConstants = DEFAULT_CONSTANTS):
        self.constants = constants

    def rhs(self, x, u, p):
        return dynamics(x, u, p, self.constants)

    def jacobians(self, x, u, p):
        return dynamics_jacobians(x, u, p, self.constants)


def rk4_step(rhs, x, u, p, dt: float, substeps: int = 1) -> np.ndarray:
    """Classical RK4 with zero-order-hold ``u`` and ``p``."""
    h = dt / substeps
    x = np.asarray(x, float)
    for _ in range(substeps):
        k1 = rhs(x, u, p)
        k2 = rhs(x + 0.5 * h * k1, u, p)
        k3 = rhs(x + 0.5 * h * k2, u, p)
        k4 = rhs(x + h * k3, u, p)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def integrate(s, u, p, dt: float, substeps: int = 1,
              c: ModelConstants = DEFAULT_CONSTANTS):
    """Advance the state by ``dt`` seconds.

    Accepts either the dataclass types or raw arrays and returns the same kind
    that was passed in for ``s``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    as_obj = isinstance(s, VehicleState)
    xa = s.as_array() if as_obj else s
    ua = u.as_array() if isinstance(u, ControlInput) else u
    pa = p.as_array() if isinstance(p, VaryingParams) else p
    out = rk4_step(lambda x, uu, pp: dynamics(x, uu, pp, c), xa, ua, pa, dt, substeps)
    return VehicleState.from_array(out) if as_obj else out


def rk4_step_sensitivities(model, x, u, p, dt: float, substeps: int = 1):
    """RK4 step with forward sensitivities.

    Differentiates the integrator itself (not the exact flow), so the
    returned Jacobians are exact derivatives of the discrete map returned.

    Returns
    -------
    x_next : (..., nx)
    A : (..., nx, nx)  d x_next / d x
    B : (..., nx, nu)  d x_next / d u
    P : (..., nx, np)  d x_next / d p
    """
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    p = np.asarray(p, float)
    nx, nu, npar = model.nx, model.nu, model.npar
    batch = x.shape[:-1]
    h = dt / substeps
    ncol = nx + nu + npar
    # sensitivity of the current state w.r.t. (x0, u, p)
    S = np.zeros(batch + (nx, ncol))
    S[..., :, :nx] = np.eye(nx)

    def stage(xs, Ss):
        f, fx, fu, fp = model.jacobians(xs, u, p)
        dk = fx @ Ss
        dk[..., :, nx:nx + nu] += fu
        dk[..., :, nx + nu:] += fp
        return f, dk

    for _ in range(substeps):
        k1, d1 = stage(x, S)
        k2, d2 = stage(x + 0.5 * h * k1, S + 0.5 * h * d1)
        k3, d3 = stage(x + 0.5 * h * k2, S + 0.5 * h * d2)
        k4, d4 = stage(x + h * k3, S + h * d3)
        x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        S = S + h / 6.0 * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
    return x, S[..., :, :nx], S[..., :, nx:nx + nu], S[..., :, nx + nu:]
