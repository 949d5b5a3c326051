"""Real-time iteration building blocks.

Multiple-shooting discretisation, forward-sensitivity linearisation,
condensing, and the preparation/feedback phase split shared by the moving
horizon estimator and the predictive controller.

Deviation variables follow the usual multiple-shooting convention.  With
node guesses ``xbar_k`` and ``ubar_k`` the linearised dynamics read::

    dx_{k+1} = A_k dx_k + B_k du_k + P_k dp - r_k,
    r_k      = xbar_{k+1} - Phi(xbar_k, ubar_k, pbar)

and condensing writes every ``dx_k`` as an affine function of ``dx_0``,
``dp`` and the stacked input deviations.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from .model import rk4_step_sensitivities
from .qpcore import INFEASIBLE, ActiveSetSolver, DenseQp, QpError, QpSolution

PREPARED, AWAITING = "prepared", "awaiting_preparation"


class LinearizationError(ArithmeticError):
    """Integration of one shooting interval produced non-finite values."""

    def __init__(self, interval: int, message: str = ""):
        super().__init__(message or f"non-finite integration on shooting interval {interval}")
        self.interval = interval


class RtiPhaseError(RuntimeError):
    """Feedback requested without a fresh preparation (or vice versa)."""


@dataclass
class ShootingGrid:
    """Node guesses for one horizon.

    ``us`` may carry one extra row (an input attached to the last node, as
    the estimator needs); only the first ``N`` rows drive the dynamics.
    """

    dt: float
    xs: np.ndarray
    us: np.ndarray
    p: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        self.us = np.asarray(self.us, dtype=float)
        if self.us.ndim != 2:
            raise ValueError("us must be a 2-D array of node inputs")
        self.p = np.asarray(self.p, dtype=float).ravel()
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.us.shape[0] < self.N:
            raise ValueError("need at least one input per shooting interval")
        if not (np.all(np.isfinite(self.xs)) and np.all(np.isfinite(self.us))
                and np.all(np.isfinite(self.p))):
            raise ValueError("shooting grid guesses must be finite")

    @property
    def N(self) -> int:
        return self.xs.shape[0] - 1

    @property
    def horizon(self) -> float:
        return self.N * self.dt

    def shifted(self, u_last=None) -> "ShootingGrid":
        """Drop the first node and duplicate the last one."""
        xs = np.vstack([self.xs[1:], self.xs[-1:]])
        tail = self.us[-1:] if u_last is None else np.reshape(u_last, (1, -1))
        us = np.vstack([self.us[1:], tail])
        return replace(self, xs=xs, us=us)


@dataclass
class LinearizedOcp:
    grid: ShootingGrid
    phi: np.ndarray   # (N, nx) integrated end points
    A: np.ndarray     # (N, nx, nx)
    B: np.ndarray     # (N, nx, nu)
    P: np.ndarray     # (N, nx, np)
    r: np.ndarray     # (N, nx) node mismatch xbar_{k+1} - phi_k

    @property
    def N(self) -> int:
        return self.A.shape[0]


def shoot_and_linearize(grid: ShootingGrid, model, substeps: int = 1) -> LinearizedOcp:
    """Integrate every interval from its node guess, with RK4 sensitivities."""
    N, nx = grid.N, model.nx
    if N == 0:
        return LinearizedOcp(grid, np.zeros((0, nx)), np.zeros((0, nx, nx)),
                             np.zeros((0, nx, model.nu)), np.zeros((0, nx, model.npar)),
                             np.zeros((0, nx)))
    x0 = grid.xs[:-1]
    u = grid.us[:N]
    p = np.broadcast_to(grid.p, (N, model.npar))
    with np.errstate(all="ignore"):
        phi, A, B, P = rk4_step_sensitivities(model, x0, u, p, grid.dt, substeps)
    ok = (np.all(np.isfinite(phi), axis=1) & np.all(np.isfinite(A), axis=(1, 2))
          & np.all(np.isfinite(B), axis=(1, 2)) & np.all(np.isfinite(P), axis=(1, 2)))
    if not np.all(ok):
        raise LinearizationError(int(np.flatnonzero(~ok)[0]))
    return LinearizedOcp(grid, phi, A, B, P, grid.xs[1:] - phi)


@dataclass
class CondensedDynamics:
    """``dx_k = Gx[k] dx0 + Gp[k] dp + Gu[k] du + c[k]`` for ``k = 0..N``."""

    Gx: np.ndarray    # (N+1, nx, nx)
    Gp: np.ndarray    # (N+1, nx, np)
    Gu: np.ndarray    # (N+1, nx, N*nu)
    c: np.ndarray     # (N+1, nx)

    def states(self, dx0, dp, du) -> np.ndarray:
        dx0 = np.asarray(dx0, float)
        dp = np.asarray(dp, float)
        du = np.asarray(du, float).ravel()
        return self.Gx @ dx0 + self.Gp @ dp + self.Gu @ du + self.c


def condense_dynamics(lin: LinearizedOcp) -> CondensedDynamics:
    N = lin.N
    nx = lin.A.shape[1] if N else lin.grid.xs.shape[1]
    nu = lin.B.shape[2] if N else lin.grid.us.shape[1]
    npar = lin.P.shape[2] if N else lin.grid.p.size
    Gx = np.zeros((N + 1, nx, nx))
    Gp = np.zeros((N + 1, nx, npar))
    Gu = np.zeros((N + 1, nx, N * nu))
    c = np.zeros((N + 1, nx))
    Gx[0] = np.eye(nx)
    for k in range(N):
        Ak = lin.A[k]
        Gx[k + 1] = Ak @ Gx[k]
        Gp[k + 1] = Ak @ Gp[k] + lin.P[k]
        Gu[k + 1, :, :k * nu] = Ak @ Gu[k, :, :k * nu]
        Gu[k + 1, :, k * nu:(k + 1) * nu] = lin.B[k]
        c[k + 1] = Ak @ c[k] - lin.r[k]
    return CondensedDynamics(Gx, Gp, Gu, c)


@dataclass
class TrackingWeights:
    """Tracking objective ``0.5 sum_k (|x_k - xr_k|_Q^2 + |u_k - ur_k|_R^2) + 0.5 |x_N - xr_N|_S^2``."""

    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray


def condense(lin: LinearizedOcp, weights: TrackingWeights, bounds=None,
             x_ref=None, u_ref=None) -> DenseQp:
    """Condensed QP in the input deviations for a fixed initial state.

    Parameters
    ----------
    lin : LinearizedOcp
    weights : TrackingWeights
    bounds : (lb, ub), optional
        Absolute input bounds, mapped onto the deviations.
    x_ref, u_ref : arrays, optional
        References; zero when omitted.
    """
    grid = lin.grid
    N = lin.N
    nx, nu = grid.xs.shape[1], grid.us.shape[1]
    Q, R, S = (np.atleast_2d(np.asarray(w, float)) for w in (weights.Q, weights.R, weights.S))
    if Q.shape != (nx, nx) or S.shape != (nx, nx) or R.shape != (nu, nu):
        raise ValueError("weight dimensions do not match the shooting grid")
    x_ref = np.zeros((N + 1, nx)) if x_ref is None else np.asarray(x_ref, float).reshape(N + 1, nx)
    u_ref = np.zeros((N, nu)) if u_ref is None else np.asarray(u_ref, float).reshape(N, nu)
    cd = condense_dynamics(lin)
    H = np.kron(np.eye(N), R)
    g = (R @ (grid.us[:N] - u_ref).T).T.ravel()
    for k in range(1, N + 1):
        W = S if k == N else Q
        Gk = cd.Gu[k]
        H += Gk.T @ W @ Gk
        g += Gk.T @ W @ (grid.xs[k] + cd.c[k] - x_ref[k])
    lb = ub = None
    if bounds is not None:
        lo, hi = (np.asarray(b, float) for b in bounds)
        lb = (lo - grid.us[:N]).ravel()
        ub = (hi - grid.us[:N]).ravel()
    return DenseQp(H=0.5 * (H + H.T), g=g, lb=lb, ub=ub)


@dataclass
class PreparedQp:
    """A condensed QP plus the affine map injecting the feedback anchor.

    At feedback the gradient becomes ``qp.g + anchor_gradient @ (a - anchor_ref)``.
    """

    qp: DenseQp
    anchor_gradient: np.ndarray
    anchor_ref: np.ndarray
    payload: Any = None


@dataclass
class RtiPhaseState:
    phase: str = AWAITING
    prepared: Optional[PreparedQp] = None
    solution: Optional[QpSolution] = None
    prep_ms: float = float("nan")
    feedback_ms: float = float("nan")


class RtiSolver:
    """Preparation/feedback skeleton; subclasses implement ``_build``.

    Parameters
    ----------
    qp_solver : ActiveSetSolver, optional
        Owned solver instance (one per client).
    """

    def __init__(self, qp_solver: Optional[ActiveSetSolver] = None):
        self.qp_solver = qp_solver or ActiveSetSolver()
        self.state = RtiPhaseState()

    @property
    def phase(self) -> str:
        return self.state.phase

    def _build(self, *args, **kwargs) -> PreparedQp:  # pragma: no cover - abstract
        raise NotImplementedError

    def _warm_start(self, prepared: PreparedQp) -> Optional[QpSolution]:
        sol = self.state.solution
        if sol is not None and sol.primal.shape == (prepared.qp.n,):
            return sol
        return None

    def _prepare(self, *args, **kwargs) -> RtiPhaseState:
        t0 = time.perf_counter()
        prepared = self._build(*args, **kwargs)
        self.qp_solver.prefactor(prepared.qp.H)
        self.state.prepared = prepared
        self.state.phase = PREPARED
        self.state.prep_ms = 1e3 * (time.perf_counter() - t0)
        return self.state

    def _feedback(self, anchor) -> tuple:
        """Inject the anchor and solve exactly one QP.

        Returns ``(solution, prepared, qp)`` where ``qp`` is the anchored problem.
        """
        if self.state.phase != PREPARED:
            raise RtiPhaseError("feedback requires a prepared phase state")
        t0 = time.perf_counter()
        prepared = self.state.prepared
        a = np.asarray(anchor, dtype=float).ravel()
        if a.shape != prepared.anchor_ref.shape:
            raise ValueError(f"anchor has {a.size} entries, expected {prepared.anchor_ref.size}")
        qp = prepared.qp
        if a.size:
            # the prepared QP was validated at build time; only the gradient changes
            qp = copy.copy(qp)
            qp.g = qp.g + prepared.anchor_gradient @ (a - prepared.anchor_ref)
        sol = self.qp_solver.solve(qp, self._warm_start(prepared))
        self.state.phase = AWAITING
        if sol.status == INFEASIBLE:
            raise QpError("QP infeasible", qp=qp, solution=sol)
        self.state.solution = sol
        self.state.feedback_ms = 1e3 * (time.perf_counter() - t0)
        return sol, prepared, qp


def nlp_kkt(qp: DenseQp, sol: QpSolution) -> float:
    """ACADO-style KKT tolerance ``|g'dz| + sum |lambda_i c_i|``."""
    z = sol.primal
    val = abs(float(qp.g @ z))
    C = np.concatenate([z, qp.A @ z])
    lo = np.concatenate([qp.lb, qp.lbA])
    hi = np.concatenate([qp.ub, qp.ubA])
    y = sol.dual
    with np.errstate(invalid="ignore"):
        gap = np.where(y > 0, C - lo, np.where(y < 0, hi - C, 0.0))
    gap = np.where(np.isfinite(gap), gap, 0.0)
    return val + float(np.sum(np.abs(y * gap)))
