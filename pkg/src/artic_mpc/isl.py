"""Input-state linearisation framework: transforms, linear MPC and EKF.

With ``z = (x_t, y_t, v cos psi_t, v sin psi_t, x_i, y_i, v cos psi_i, v sin psi_i)``
the traction-free model becomes two damped double integrators

    z1' = z3,   z3' = -z3 / tau + u_z1,   (same for z2/z4, z5/z7, z6/z8)

once the physical inputs are chosen by :func:`input_transform`.  The tractor
block is exact; the trailer block relies on ``cos(delta_i + beta) ~ 1``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .model import (DEFAULT_CONSTANTS, NX, U_LB, U_UB, ControlInput, Measurement,
                    ModelConstants, NoiseSpec, VehicleModel, VehicleState, _Vector,
                    dynamics, rk4_step, rk4_step_sensitivities)
from .nmpc import as_weight_matrix
from .qpcore import INFEASIBLE, ActiveSetSolver, DenseQp, QpError, QpSolution

log = logging.getLogger(__name__)

V_MIN = 0.05
UZ_CAP = 5.0
NZ, NV = 8, 4
VELOCITY_ROWS = (2, 3, 6, 7)


class LowSpeedError(ValueError):
    """The input transform divides by ``v**2``; refused below ``V_MIN``."""


@dataclass(frozen=True)
class LinearState(_Vector):
    z1: float
    z2: float
    z3: float
    z4: float
    z5: float
    z6: float
    z7: float
    z8: float


@dataclass(frozen=True)
class VirtualInput(_Vector):
    u_z1: float
    u_z2: float
    u_z3: float
    u_z4: float


def state_transform(s):
    """Map a vehicle state to linear coordinates (batched for arrays)."""
    as_obj = isinstance(s, VehicleState)
    x = s.as_array() if as_obj else np.asarray(s, float)
    v = x[..., 6]
    z = np.stack([x[..., 0], x[..., 1], v * np.cos(x[..., 2]), v * np.sin(x[..., 2]),
                  x[..., 3], x[..., 4], v * np.cos(x[..., 5]), v * np.sin(x[..., 5])], axis=-1)
    return LinearState.from_array(z) if as_obj else z


def _near(angle, hint):
    return hint + np.angle(np.exp(1j * (angle - hint)))


def inverse_state_transform(z, psi_hint=None):
    """Recover the vehicle state; headings are unwrapped towards ``psi_hint``.

    The speed is taken from the tractor velocity pair.  Exact for ``v > 0``.
    """
    as_obj = isinstance(z, LinearState)
    a = z.as_array() if as_obj else np.asarray(z, float)
    psi_t = np.arctan2(a[..., 3], a[..., 2])
    psi_i = np.arctan2(a[..., 7], a[..., 6])
    if psi_hint is not None:
        psi_t = _near(psi_t, psi_hint[0])
        psi_i = _near(psi_i, psi_hint[1])
    v = np.hypot(a[..., 2], a[..., 3])
    x = np.stack([a[..., 0], a[..., 1], psi_t, a[..., 4], a[..., 5], psi_i, v], axis=-1)
    return VehicleState.from_array(x) if as_obj else x


def input_transform(s, beta: float, u_z, c: ModelConstants = DEFAULT_CONSTANTS,
                    events: Optional[list] = None, v_min: float = V_MIN,
                    uz_cap: Optional[float] = UZ_CAP):
    """Physical inputs realising the virtual accelerations ``u_z``.

    Raises
    ------
    LowSpeedError
        When ``v < v_min``; the caller should hold the last input.
    """
    x = s.as_array() if isinstance(s, VehicleState) else np.asarray(s, float)
    u = u_z.as_array() if isinstance(u_z, VirtualInput) else np.asarray(u_z, float)
    v = x[6]
    if not v >= v_min:
        raise LowSpeedError(f"speed {v:.4f} m/s below {v_min} m/s")
    events = [] if events is None else events
    if uz_cap is not None and np.max(np.abs(u)) > uz_cap:
        u = np.clip(u, -uz_cap, uz_cap)
        events.append("uz_cap")
    st, ct = np.sin(x[2]), np.cos(x[2])
    si, ci = np.sin(x[5]), np.cos(x[5])
    a_t = -u[0] * st + u[1] * ct
    a_i = -u[2] * si + u[3] * ci
    v2 = v * v
    delta_t = np.arctan(c.L_t * a_t / v2)
    arg = (c.L_i * a_i - c.L_d * a_t) / v2
    if abs(arg) > 1.0:
        arg = np.clip(arg, -1.0, 1.0)
        events.append("arcsin_clamp")
    delta_i = np.arcsin(arg) - beta
    hp = c.tau / c.K * (u[0] * ct + u[1] * st)
    raw = np.array([delta_t, delta_i, hp])
    out = np.clip(raw, U_LB, U_UB)
    if np.any(out != raw):
        events.append("input_clamp")
    if events:
        log.debug("input transform events: %s", events)
    return ControlInput.from_array(out)


@dataclass(frozen=True)
class LinearSystem:
    """``z' = A z + B u_z``, ``y = C z`` (two damped double integrators)."""

    tau: float = DEFAULT_CONSTANTS.tau

    @property
    def A(self) -> np.ndarray:
        A = np.zeros((NZ, NZ))
        for pos, vel in ((0, 2), (1, 3), (4, 6), (5, 7)):
            A[pos, vel] = 1.0
            A[vel, vel] = -1.0 / self.tau
        return A

    @property
    def B(self) -> np.ndarray:
        B = np.zeros((NZ, NV))
        for j, row in enumerate(VELOCITY_ROWS):
            B[row, j] = 1.0
        return B

    @property
    def C(self) -> np.ndarray:
        C = np.zeros((4, NZ))
        for j, row in enumerate((0, 1, 4, 5)):
            C[j, row] = 1.0
        return C

    def controllability_rank(self) -> int:
        A, B = self.A, self.B
        blocks = [B]
        for _ in range(NZ - 1):
            blocks.append(A @ blocks[-1])
        return int(np.linalg.matrix_rank(np.hstack(blocks)))

    def rk4_discretization(self, dt: float):
        """Exact one-step RK4 map for constant input: ``(Ad, Bd)``."""
        hA = dt * self.A
        I = np.eye(NZ)
        Ad = I + hA + hA @ hA / 2 + hA @ hA @ hA / 6 + hA @ hA @ hA @ hA / 24
        Bd = dt * (I + hA / 2 + hA @ hA / 6 + hA @ hA @ hA / 24) @ self.B
        return Ad, Bd

    def exact_discretization(self, dt: float):
        M = np.zeros((NZ + NV, NZ + NV))
        M[:NZ, :NZ] = self.A
        M[:NZ, NZ:] = self.B
        E = sla.expm(dt * M)
        return E[:NZ, :NZ], E[:NZ, NZ:]


class LinearZModel:
    """The linear system wrapped in the model protocol used by :mod:`rti`."""

    nx, nu, npar = NZ, NV, 0

    def __init__(self, system: LinearSystem = LinearSystem()):
        self.system = system
        self._A, self._B = system.A, system.B

    def rhs(self, z, u, p):
        return np.asarray(z, float) @ self._A.T + np.asarray(u, float) @ self._B.T

    def jacobians(self, z, u, p):
        f = self.rhs(z, u, p)
        batch = f.shape[:-1]
        return (f, np.broadcast_to(self._A, batch + (NZ, NZ)),
                np.broadcast_to(self._B, batch + (NZ, NV)), np.zeros(batch + (NZ, 0)))


@dataclass
class Discrepancy:
    z_nonlinear: np.ndarray
    z_linear: np.ndarray
    hp_tractor: float
    hp_trailer: float

    @property
    def error(self) -> np.ndarray:
        return self.z_nonlinear - self.z_linear

    @property
    def tractor(self) -> float:
        return float(np.max(np.abs(self.error[:4])))

    @property
    def trailer(self) -> float:
        return float(np.max(np.abs(self.error[4:])))


def verify_linearization(s, u_z, dt: float, beta: float = 0.0,
                         c: ModelConstants = DEFAULT_CONSTANTS, substeps: int = 8,
                         hold: str = "continuous") -> Discrepancy:
    """Integrate the nonlinear model under the transform and the linear model under ``u_z``.

    ``hold="continuous"`` re-evaluates the transform inside every RK4 stage
    (the feedback law the linearisation assumes); ``hold="zoh"`` freezes the
    physical input over the step as a sampled implementation would.
    """
    x0 = s.as_array() if isinstance(s, VehicleState) else np.asarray(s, float)
    u = u_z.as_array() if isinstance(u_z, VirtualInput) else np.asarray(u_z, float)
    p = np.array([1.0, 1.0, 1.0, beta])

    def law(x):
        return input_transform(x, beta, u, c, uz_cap=None).as_array()

    if hold == "continuous":
        x1 = rk4_step(lambda x, _u, _p: dynamics(x, law(x), p, c), x0, None, p, dt, substeps)
    elif hold == "zoh":
        x1 = rk4_step(lambda x, uu, pp: dynamics(x, uu, pp, c), x0, law(x0), p, dt, substeps)
    else:
        raise ValueError("hold must be 'continuous' or 'zoh'")
    Ad, Bd = LinearSystem(c.tau).exact_discretization(dt)
    z_lin = Ad @ state_transform(x0) + Bd @ u
    ci, si = np.cos(x0[5]), np.sin(x0[5])
    return Discrepancy(state_transform(x1), z_lin, hp_tractor=float(law(x0)[2]),
                       hp_trailer=float(c.tau / c.K * (u[2] * ci + u[3] * si)))


# -- linear MPC -----------------------------------------------------------------
@dataclass(frozen=True)
class LmpcWeights:
    """``symmetric_trailer`` also weights ``z6`` like ``z5``."""

    Q: tuple = (1.0, 1.0, 0.0, 0.0, 0.01, 0.0, 0.0, 0.0)
    R: tuple = (1.0, 1.0, 0.01, 0.01)
    terminal_factor: float = 10.0
    symmetric_trailer: bool = False

    def matrices(self):
        Q = as_weight_matrix(self.Q).copy()
        if self.symmetric_trailer:
            Q[5, 5] = Q[4, 4]
        return Q, as_weight_matrix(self.R), self.terminal_factor * Q


@dataclass
class LmpcInfo:
    slack: float
    kkt: float
    status: str
    qp_iterations: int
    solve_ms: float
    predicted: np.ndarray = field(repr=False)


class Lmpc:
    """Condensed linear MPC on virtual-input moves with softened speed bounds.

    Everything except the anchor-dependent vectors is built once here.
    """

    def __init__(self, system: LinearSystem = LinearSystem(), weights: LmpcWeights = LmpcWeights(),
                 N: int = 15, dt: float = 0.2, v_max: float = 2.0, slack_penalty: float = 1e4,
                 qp_solver: Optional[ActiveSetSolver] = None):
        self.N, self.dt, self.v_max = N, dt, v_max
        self.qp_solver = qp_solver or ActiveSetSolver()
        Q, R, S = weights.matrices()
        Ad, Bd = system.rk4_discretization(dt)
        nz, nv = NZ, NV
        nm = N * nv
        # z_k = Phi[k] z0 + Gam[k] U
        Phi = np.empty((N + 1, nz, nz))
        Gam = np.zeros((N + 1, nz, nm))
        Phi[0] = np.eye(nz)
        powers = [np.eye(nz)]
        for k in range(1, N + 1):
            powers.append(Ad @ powers[-1])
            Phi[k] = powers[k]
            for j in range(k):
                Gam[k, :, j * nv:(j + 1) * nv] = powers[k - 1 - j] @ Bd
        T = np.kron(np.tril(np.ones((N, N))), np.eye(nv))
        M = Gam @ T                                  # moves -> states
        E = Gam @ np.tile(np.eye(nv), (N, 1))        # u_prev -> states
        W = np.array([Q] * N + [S])
        WM = W @ M
        H = np.zeros((nm + 1, nm + 1))
        H[:nm, :nm] = np.kron(np.eye(N), R) + np.einsum("kin,kim->nm", M, WM)
        H[nm, nm] = 2.0 * slack_penalty
        self._H = 0.5 * (H + H.T)
        self._WM, self._Phi, self._E, self._M = WM, Phi, E, M
        rows = list(VELOCITY_ROWS)
        V = M[1:, rows, :].reshape(-1, nm)
        self._Vz = Phi[1:, rows, :].reshape(-1, nz)
        self._Vu = E[1:, rows, :].reshape(-1, nv)
        nv_rows = V.shape[0]
        A = np.zeros((2 * nv_rows, nm + 1))
        A[:nv_rows, :nm] = V
        A[:nv_rows, nm] = -1.0
        A[nv_rows:, :nm] = V
        A[nv_rows:, nm] = 1.0
        self._A = A
        self._lb = np.concatenate([np.full(nm, -np.inf), [0.0]])
        self.u_prev = np.zeros(nv)
        self._warm: Optional[QpSolution] = None
        self.hessian = self._H

    def lmpc_step(self, z_hat, z_refs, u_prev=None):
        """Solve the condensed QP; returns ``(VirtualInput, LmpcInfo)``."""
        t0 = time.perf_counter()
        N, nv = self.N, NV
        z0 = z_hat.as_array() if isinstance(z_hat, LinearState) else np.asarray(z_hat, float)
        if not np.all(np.isfinite(z0)):
            raise ValueError("linear state must be finite")
        refs = np.asarray(z_refs, float)
        if refs.shape != (N + 1, NZ):
            raise ValueError(f"need {N + 1} reference nodes, got shape {refs.shape}")
        if u_prev is not None:
            self.u_prev = np.asarray(u_prev, float).copy()
        free = self._Phi @ z0 + self._E @ self.u_prev - refs     # (N+1, nz) error at zero moves
        g = np.concatenate([np.einsum("kin,ki->n", self._WM, free), [0.0]])
        vel0 = self._Vz @ z0 + self._Vu @ self.u_prev
        n_rows = vel0.size
        lbA = np.concatenate([np.full(n_rows, -np.inf), -self.v_max - vel0])
        ubA = np.concatenate([self.v_max - vel0, np.full(n_rows, np.inf)])
        qp = DenseQp(self._H, g, lb=self._lb, A=self._A, lbA=lbA, ubA=ubA)
        warm = self._warm
        if warm is None or not self._feasible(qp, warm.primal):
            start = np.zeros(qp.n)
            start[-1] = max(0.0, float(np.max(np.abs(vel0), initial=0.0)) - self.v_max)
            warm = QpSolution(start, np.zeros(qp.n), np.zeros(qp.m), np.nan, "start")
        sol = self.qp_solver.solve(qp, warm)
        if sol.status == INFEASIBLE:
            raise QpError("LMPC QP infeasible", qp=qp, solution=sol)
        moves = sol.primal[:-1]
        U = self.u_prev + np.cumsum(moves.reshape(N, nv), axis=0)
        u0 = U[0]
        pred = free + refs + np.einsum("kin,n->ki", self._M, moves)
        self.u_prev = u0.copy()
        nxt = np.concatenate([moves[nv:], np.zeros(nv), [sol.primal[-1]]])
        self._warm = QpSolution(nxt, np.zeros(qp.n), np.zeros(qp.m), np.nan, sol.status)
        slack = float(sol.primal[-1])
        if slack > 1e-9:
            log.debug("LMPC speed-bound slack active: %.3g", slack)
        info = LmpcInfo(slack=slack, kkt=sol.kkt_residual, status=sol.status,
                        qp_iterations=sol.iterations,
                        solve_ms=1e3 * (time.perf_counter() - t0), predicted=pred)
        return VirtualInput.from_array(u0), info

    @staticmethod
    def _feasible(qp, z):
        if z.shape != (qp.n,):
            return False
        Az = qp.A @ z
        return bool(np.all(z >= qp.lb) and np.all(Az >= qp.lbA - 1e-9) and np.all(Az <= qp.ubA + 1e-9))


# -- EKF ------------------------------------------------------------------------
@dataclass
class EkfState:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, float).reshape(NX)
        self.covariance = np.asarray(self.covariance, float).reshape(NX, NX)

    @property
    def state(self) -> VehicleState:
        return VehicleState.from_array(self.mean)


_EKF_ROWS = (0, 1, 3, 4, 6)   # x_t, y_t, x_i, y_i, v


class Ekf:
    """Traction-free EKF on the vehicle state.

    Process noise is ``diag(process_rates) * dt * q_scale``; the rates default
    to the state block of the estimator's forgetting weights.
    """

    def __init__(self, constants: ModelConstants = DEFAULT_CONSTANTS,
                 noise: NoiseSpec = NoiseSpec(), dt: float = 0.2, substeps: int = 1,
                 process_rates=(10.0, 10.0, 0.1, 10.0, 10.0, 0.1, 1.0), q_scale: float = 1e-3,
                 min_meas_var: float = 1e-12):
        self.model = VehicleModel(constants)
        self.dt, self.substeps = dt, substeps
        self.Qn = np.diag(np.asarray(process_rates, float)) * dt * q_scale
        sig = noise.sigmas()[[0, 1, 2, 3, 4]]
        self.Rm = np.diag(np.maximum(sig ** 2, min_meas_var))
        self.Hm = np.zeros((len(_EKF_ROWS), NX))
        for r, col in enumerate(_EKF_ROWS):
            self.Hm[r, col] = 1.0
        self.resets = 0

    def ekf_step(self, ekf: EkfState, m: Measurement, u: ControlInput,
                 dt: Optional[float] = None) -> EkfState:
        dt = self.dt if dt is None else dt
        y = m.as_array() if isinstance(m, Measurement) else np.asarray(m, float)
        ua = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, float)
        p = np.array([1.0, 1.0, 1.0, y[8]])
        x, F, _, _ = rk4_step_sensitivities(self.model, ekf.mean, ua, p, dt, self.substeps)
        Pc = F @ ekf.covariance @ F.T + self.Qn
        innov = y[[0, 1, 2, 3, 4]] - self.Hm @ x
        Sm = self.Hm @ Pc @ self.Hm.T + self.Rm
        K = np.linalg.solve(Sm, self.Hm @ Pc).T
        x = x + K @ innov
        IKH = np.eye(NX) - K @ self.Hm
        Pc = IKH @ Pc @ IKH.T + K @ self.Rm @ K.T
        Pc = 0.5 * (Pc + Pc.T)
        if not np.all(np.isfinite(Pc)) or np.min(np.linalg.eigvalsh(Pc)) < -1e-10:
            log.warning("EKF covariance lost positive semidefiniteness; resetting")
            self.resets += 1
            Pc = np.eye(NX)
        return EkfState(x, Pc)
