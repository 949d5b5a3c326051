"""Nonlinear MPC on input moves, solved by one real-time iteration per sample."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import NU, U_LB, U_UB, ControlInput, VehicleModel, rk4_step
from .qpcore import DenseQp, QpSolution
from .rti import (PreparedQp, RtiSolver, ShootingGrid, condense_dynamics, nlp_kkt,
                  shoot_and_linearize)


def as_weight_matrix(w) -> np.ndarray:
    """Diagonal entries or a full matrix, returned as a 2-D array."""
    w = np.asarray(w, dtype=float)
    return np.diag(w) if w.ndim == 1 else w


@dataclass(frozen=True)
class ControllerWeights:
    """Stage weight ``Q`` on state error, ``R`` on input moves, terminal ``S``.

    ``S`` defaults to ``terminal_factor * Q``.  ``R`` acts on the moves
    after multiplying them by ``input_scale``; the default expresses the
    hydrostat move as a fraction rather than a percentage so that it is
    commensurate with the steering moves in radians.
    """

    Q: tuple = (2.0, 2.0, 0.0, 4.0, 4.0, 0.0, 0.0)
    R: tuple = (7.0, 7.0, 7.0)
    S: Optional[tuple] = None
    terminal_factor: float = 10.0
    input_scale: Optional[tuple] = (1.0, 1.0, 0.01)

    def matrices(self):
        Q = as_weight_matrix(self.Q)
        R = as_weight_matrix(self.R)
        if self.input_scale is not None:
            sc = np.diag(np.asarray(self.input_scale, float))
            R = sc @ R @ sc
        S = self.terminal_factor * Q if self.S is None else as_weight_matrix(self.S)
        for name, M in (("Q", Q), ("S", S)):
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T)), initial=0.0) < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
            raise ValueError("R must be positive definite")
        return Q, R, S


@dataclass(frozen=True)
class InputBounds:
    lb: tuple = tuple(U_LB)
    ub: tuple = tuple(U_UB)

    def arrays(self):
        return np.asarray(self.lb, float), np.asarray(self.ub, float)


@dataclass
class DeltaUStructure:
    """``U = offset + T @ dU`` with bounds ``lbA <= T @ dU <= ubA``."""

    T: np.ndarray
    offset: np.ndarray
    lbA: np.ndarray
    ubA: np.ndarray


def delta_u_formulation(prev_u, N: int, lb, ub) -> DeltaUStructure:
    """Input-move parameterisation anchored at the last applied input.

    ``u_k = u_prev + sum_{j<=k} du_j``, so the absolute bounds on every
    ``u_k`` become general constraints on the cumulative sums of the moves.
    """
    prev_u = np.asarray(prev_u, dtype=float).ravel()
    if not np.all(np.isfinite(prev_u)):
        raise ValueError("previous input must be finite")
    nu = prev_u.size
    T = np.kron(np.tril(np.ones((N, N))), np.eye(nu))
    offset = np.tile(prev_u, N)
    lbA = np.tile(np.asarray(lb, float), N) - offset
    ubA = np.tile(np.asarray(ub, float), N) - offset
    return DeltaUStructure(T, offset, lbA, ubA)


@dataclass
class NmpcDiagnostics:
    kkt: float
    nlp_kkt: float
    status: str
    qp_iterations: int
    prep_ms: float
    feedback_ms: float
    predicted_states: np.ndarray = field(repr=False)
    predicted_inputs: np.ndarray = field(repr=False)


def _reference_array(refs, N: int, nx: int) -> np.ndarray:
    if len(refs) and hasattr(refs[0], "as_array"):
        refs = np.array([r.as_array() for r in refs])
    refs = np.asarray(refs, dtype=float)
    if refs.shape != (N + 1, nx):
        raise ValueError(f"need {N + 1} reference nodes of size {nx}, got shape {refs.shape}")
    return refs


class NmpcInstance(RtiSolver):
    """Tracking NMPC in input moves with initial-value embedding.

    Parameters
    ----------
    model : object, optional
        Provides ``nx``, ``nu``, ``npar``, ``rhs`` and ``jacobians``;
        defaults to the tractor-trailer :class:`VehicleModel`.
    weights : ControllerWeights
    bounds : InputBounds
    N, dt : int, float
        Shooting intervals and sample time.
    substeps : int
        RK4 substeps per interval inside the predictor.
    iterations : int
        Gauss-Newton iterations per sample.  One is the real-time setting;
        larger values are a debugging aid.
    """

    def __init__(self, model=None, weights: ControllerWeights = ControllerWeights(),
                 bounds: InputBounds = InputBounds(), N: int = 15, dt: float = 0.2,
                 substeps: int = 1, iterations: int = 1, qp_solver=None):
        super().__init__(qp_solver)
        self.model = model or VehicleModel()
        self.Q, self.R, self.S = weights.matrices()
        self.lb, self.ub = bounds.arrays()
        nx, nu = self.model.nx, self.model.nu
        if self.Q.shape != (nx, nx) or self.R.shape != (nu, nu):
            raise ValueError("weights do not match the model dimensions")
        self.N, self.dt, self.substeps = N, dt, substeps
        self.iterations = max(1, int(iterations))
        self.grid: Optional[ShootingGrid] = None
        self.u_prev: Optional[np.ndarray] = None
        self._warm: Optional[QpSolution] = None

    # -- setup ---------------------------------------------------------------
    def initialize(self, x0, u_prev, p=None):
        """Cold start: roll the model forward holding ``u_prev``."""
        m = self.model
        x0 = np.asarray(x0, float)
        u_prev = np.asarray(u_prev, float)
        p = np.zeros(m.npar) if p is None else np.asarray(p, float)
        xs = [x0]
        for _ in range(self.N):
            xs.append(rk4_step(m.rhs, xs[-1], u_prev, p, self.dt, self.substeps))
        self.grid = ShootingGrid(self.dt, np.array(xs), np.tile(u_prev, (self.N, 1)), p)
        self.u_prev = u_prev.copy()
        self._warm = None
        return self

    def prepare(self):
        if self.grid is None:
            raise RuntimeError("controller not initialised")
        return self._prepare()

    # -- RTI phases -----------------------------------------------------------
    def _build(self) -> PreparedQp:
        grid, m = self.grid, self.model
        N, nx, nu = self.N, m.nx, m.nu
        lin = shoot_and_linearize(grid, m, self.substeps)
        cd = condense_dynamics(lin)
        du = delta_u_formulation(self.u_prev, N, self.lb, self.ub)
        d = du.offset - grid.us[:N].ravel()
        W = np.empty((N + 1, nx, nx))
        W[:N] = self.Q
        W[N] = self.S
        M = cd.Gu @ du.T                                  # (N+1, nx, nz)
        WM = W @ M
        H = np.kron(np.eye(N), self.R) + np.einsum("kin,kim->nm", M, WM)
        base = grid.xs + cd.c + cd.Gu @ d                # predicted nodes at zero moves
        g = np.einsum("kin,ki->n", WM, base)
        Fx = np.einsum("kin,kij->nj", WM, cd.Gx)
        Fp = np.einsum("kin,kij->nj", WM, cd.Gp)
        Fr = WM.transpose(2, 0, 1).reshape(N * nu, -1)
        qp = DenseQp(H=0.5 * (H + H.T), g=g, A=du.T, lbA=du.lbA, ubA=du.ubA)
        anchor_gradient = np.hstack([Fx, Fp, -Fr])
        anchor_ref = np.concatenate([grid.xs[0], grid.p, np.zeros((N + 1) * nx)])
        return PreparedQp(qp, anchor_gradient, anchor_ref, payload=(cd, du, d))

    def _warm_start(self, prepared):
        return self._warm

    def _solve_once(self, x0, p, refs):
        sol, prepared, qp = self._feedback(np.concatenate([x0, p, refs.ravel()]))
        cd, du, d = prepared.payload
        nu = self.model.nu
        dU = d + du.T @ sol.primal
        U = self.grid.us[:self.N] + dU.reshape(self.N, nu)
        X = self.grid.xs + cd.states(x0 - self.grid.xs[0], p - self.grid.p, dU)
        return sol, qp, X, U

    def control_step(self, x_hat, refs, params=None):
        """One feedback: embed the estimate, solve, shift, return the first input.

        Parameters
        ----------
        x_hat : Estimate or array
            Current state estimate; an ``Estimate`` also supplies parameters.
        refs : sequence of ReferenceState or array (N+1, nx)
        params : array, optional
            Model parameters when ``x_hat`` is a plain array.
        """
        m = self.model
        if hasattr(x_hat, "state"):
            params = x_hat.params.as_array() if params is None else params
            x_hat = x_hat.state.as_array()
        x0 = np.asarray(x_hat, float).ravel()
        if not np.all(np.isfinite(x0)):
            raise ValueError("state estimate must be finite")
        p = np.zeros(m.npar) if params is None else np.asarray(params, float).ravel()
        r = _reference_array(refs, self.N, m.nx)
        if self.grid is None:
            self.initialize(x0, np.clip(np.zeros(m.nu), self.lb, self.ub), p)
        if self.phase != "prepared":
            self.prepare()

        feedback_ms = 0.0
        prep_ms = self.state.prep_ms
        for it in range(self.iterations):
            if it:
                self.grid = ShootingGrid(self.dt, X, U, p)
                self.prepare()
                prep_ms += self.state.prep_ms
            sol, qp, X, U = self._solve_once(x0, p, r)
            feedback_ms += self.state.feedback_ms

        u0 = np.clip(U[0], self.lb, self.ub)
        diag = NmpcDiagnostics(kkt=sol.kkt_residual, nlp_kkt=nlp_kkt(qp, sol), status=sol.status,
                               qp_iterations=sol.iterations, prep_ms=prep_ms,
                               feedback_ms=feedback_ms, predicted_states=X, predicted_inputs=U)
        self._shift(X, U, p, sol)
        out = ControlInput.from_array(u0) if m.nu == NU and isinstance(m, VehicleModel) else u0
        return out, diag

    def _shift(self, X, U, p, sol):
        N, nu = self.N, self.model.nu
        self.grid = ShootingGrid(self.dt, np.vstack([X[1:], X[-1:]]),
                                 np.vstack([U[1:], U[-1:]]), p)
        self.u_prev = U[0].copy()
        moves = np.concatenate([sol.primal[nu:], np.zeros(nu)])
        ws = tuple((j - nu, s) for j, s in sol.working_set if j >= N * nu + nu)
        self._warm = QpSolution(moves, np.zeros(N * nu), np.zeros(N * nu), np.nan,
                                sol.status, working_set=ws)
