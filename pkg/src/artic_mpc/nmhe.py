"""Moving-horizon estimation of the state and the varying parameters.

The window objective is

    |(x_0, p) - prior|_P^2 + sum_k |y_k - h(x_k, u_k, p)|_H^2

subject to the model dynamics and the parameter bounds.  The inputs are
decision variables pulled towards their measured values through ``H``, and
the parameters are constant over the window.  Each sample runs one
Gauss-Newton real-time iteration.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import (NP, NU, NX, NY, P_LB, P_UB, U_LB, U_UB, BETA_MAX, ControlInput,
                    Measurement, NoiseSpec, VaryingParams, VehicleModel, VehicleState,
                    output_jacobians, output_map)
from .qpcore import DenseQp
from .rti import (PreparedQp, RtiPhaseError, RtiSolver, ShootingGrid, condense_dynamics,
                  nlp_kkt, shoot_and_linearize)

log = logging.getLogger(__name__)

NAUG = NX + NP
P_CAP = 1e6
# forgetting weights over (x_t, y_t, psi_t, x_i, y_i, psi_i, v, mu, kappa, eta, beta)
D_UPDATE_DEFAULT = (10.0, 10.0, 0.1, 10.0, 10.0, 0.1, 1.0, 0.25, 0.25, 0.25, 1.0)


class WindowContractError(ValueError):
    """Measurements must arrive contiguously in time."""


class EstimationWindow:
    """Fixed-capacity buffer of ``(Measurement, ControlInput)`` pairs.

    Parameters
    ----------
    size : int
        Number of samples held once full (16 for a 3 s horizon at 0.2 s).
    dt : float
        Required spacing between consecutive timestamps.
    """

    def __init__(self, size: int = 16, dt: float = 0.2):
        if size < 1:
            raise ValueError("window size must be >= 1")
        self.size, self.dt = size, dt
        self._items = deque(maxlen=size)

    def push_measurement(self, m, u, t: float) -> "EstimationWindow":
        if self._items:
            expected = self._items[-1][0] + self.dt
            if abs(t - expected) > 1e-9 * max(1.0, abs(expected)):
                raise WindowContractError(f"timestamp {t} does not follow {self._items[-1][0]} by dt")
        y = m.as_array() if isinstance(m, Measurement) else np.asarray(m, float).reshape(NY)
        ua = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, float).reshape(NU)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(ua))):
            raise ValueError("measurement and input must be finite")
        self._items.append((float(t), y, ua))
        return self

    def __len__(self):
        return len(self._items)

    @property
    def full(self) -> bool:
        return len(self._items) == self.size

    @property
    def times(self) -> np.ndarray:
        return np.array([it[0] for it in self._items])

    @property
    def measurements(self) -> np.ndarray:
        return np.array([it[1] for it in self._items]).reshape(-1, NY)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([it[2] for it in self._items]).reshape(-1, NU)


@dataclass
class ArrivalCost:
    """Quadratic prior on ``(x_0, p)`` at the window start."""

    prior: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.prior = np.asarray(self.prior, float).reshape(-1)
        self.P = np.asarray(self.P, float)
        n = self.prior.size
        if self.P.shape != (n, n):
            raise ValueError("arrival weight has the wrong shape")


def _cap(P, cap):
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    w = np.clip(w, 0.0, cap)
    return (V * w) @ V.T


def update_arrival_cost(ac: ArrivalCost, new_prior, D_update, *, info=None,
                        transition=None, scale: float = 1.0, cap: float = P_CAP) -> ArrivalCost:
    """Forget old information and move the prior forward.

    The covariance ``P^-1`` is propagated through ``transition`` and inflated
    by ``scale * D_update``::

        P_next = (T info^-1 T' + scale * D_update)^-1

    With ``info = P`` and ``T = I`` (the defaults) this is
    ``(P^-1 + scale * D_update)^-1``; ``D_update = 0`` leaves ``P`` unchanged.
    The result is symmetrised and its spectrum clipped to ``[0, cap]``.
    """
    D = np.asarray(D_update, float)
    D = np.diag(D) if D.ndim == 1 else D
    info = ac.P if info is None else np.asarray(info, float)
    n = ac.P.shape[0]
    T = np.eye(n) if transition is None else np.asarray(transition, float)
    if T.shape != (n, info.shape[0]) or D.shape != (n, n):
        raise ValueError("arrival-cost update dimensions are inconsistent")
    if not np.any(D):
        P_next = ac.P if transition is None else np.linalg.pinv(T @ np.linalg.pinv(info) @ T.T)
    else:
        cov = T @ np.linalg.solve(info, T.T) + scale * D
        P_next = np.linalg.inv(0.5 * (cov + cov.T))
    return ArrivalCost(np.asarray(new_prior, float).reshape(n).copy(), _cap(P_next, cap))


@dataclass(frozen=True)
class EstimatorWeights:
    """Measurement weights ``H = diag(1 / sigma^2)`` and forgetting weights.

    ``d_update`` is ordered ``(x_t, y_t, psi_t, x_i, y_i, psi_i, v, mu, kappa, eta, beta)``,
    i.e. the state vector followed by the parameters.
    """

    noise: NoiseSpec = NoiseSpec()
    d_update: tuple = D_UPDATE_DEFAULT
    min_sigma: float = 1e-4

    @property
    def H(self) -> np.ndarray:
        s = np.maximum(self.noise.sigmas(), self.min_sigma)
        return np.diag(1.0 / s ** 2)

    @property
    def D(self) -> np.ndarray:
        return np.diag(np.asarray(self.d_update, float))


@dataclass
class Estimate:
    state: VehicleState
    params: VaryingParams
    kkt: float
    timestamp: float
    nlp_kkt: float = float("nan")
    status: str = "optimal"
    qp_iterations: int = 0

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.state.as_array(), self.params.as_array()])


def initial_prior(y, psi_sigma: float = 0.1, param_sigma: float = 0.1,
                  noise: NoiseSpec = NoiseSpec()) -> ArrivalCost:
    """Prior from a single measurement.

    Both headings are taken from the trailer-to-tractor direction, the
    traction coefficients start at 1 and ``beta`` at its measured value.
    """
    y = y.as_array() if isinstance(y, Measurement) else np.asarray(y, float)
    psi = float(np.arctan2(y[1] - y[3], y[0] - y[2]))
    x0 = np.array([y[0], y[1], psi, y[2], y[3], psi, y[4]])
    beta = float(np.clip(y[8], -BETA_MAX, BETA_MAX))
    prior = np.concatenate([x0, [1.0, 1.0, 1.0, beta]])
    s = noise.sigmas()
    sig = np.array([s[0], s[1], psi_sigma, s[2], s[3], psi_sigma, s[4],
                    param_sigma, param_sigma, param_sigma, s[8]])
    return ArrivalCost(prior, np.diag(1.0 / np.maximum(sig, 1e-4) ** 2))


class NmheInstance(RtiSolver):
    """Real-time-iteration MHE over a window of up to ``N + 1`` samples.

    Parameters
    ----------
    weights : EstimatorWeights
    N, dt : int, float
        Horizon intervals and sample time.
    substeps : int
        RK4 substeps per interval.
    forgetting : float
        Scale applied to ``D_update`` when it is added to the propagated
        arrival covariance.
    """

    def __init__(self, weights: EstimatorWeights = EstimatorWeights(), N: int = 15,
                 dt: float = 0.2, substeps: int = 1, forgetting: float = 1e-5,
                 model=None, qp_solver=None, p_cap: float = P_CAP):
        super().__init__(qp_solver)
        self.model = model or VehicleModel()
        self.weights = weights
        self.W = weights.H
        self.D = weights.D
        self.N, self.dt, self.substeps = N, dt, substeps
        self.forgetting, self.p_cap = forgetting, p_cap
        self.hx, self.hu, self.hp = output_jacobians()
        self.arrival: Optional[ArrivalCost] = None
        self.grid: Optional[ShootingGrid] = None
        self._last = None          # (solution trajectory, prepared payload, measurements)

    @property
    def window_size(self) -> int:
        return self.N + 1

    def new_window(self) -> EstimationWindow:
        return EstimationWindow(self.window_size, self.dt)

    # -- setup ----------------------------------------------------------------
    def initialize(self, y0, u0, arrival: Optional[ArrivalCost] = None):
        """Set the prior from the first sample and prepare the one-node problem."""
        self.arrival = arrival or initial_prior(y0, noise=self.weights.noise)
        u0 = u0.as_array() if isinstance(u0, ControlInput) else np.asarray(u0, float)
        self.grid = ShootingGrid(self.dt, self.arrival.prior[None, :NX], u0[None, :],
                                 self.arrival.prior[NX:])
        self._last = None
        self.state.solution = None
        return self.prepare()

    def prepare(self, u_next=None):
        """Shift to the next window (if a solution exists) and linearise.

        ``u_next`` is a guess for the input attached to the new last node.
        That input only enters the (linear) output map, so the guess does
        not change the QP solution; by default the last input is repeated.
        This keeps the preparation independent of the controller feedback.
        """
        if self._last is not None:
            if u_next is not None:
                u_next = np.asarray(u_next.as_array() if isinstance(u_next, ControlInput)
                                    else u_next, float)
            self._shift(u_next)
        if self.grid is None:
            raise RuntimeError("estimator not initialised")
        return self._prepare()

    def _shift(self, u_next):
        X, U, p, payload, Y = self._last
        n = X.shape[0]
        if n == self.window_size:
            self._update_arrival(X, U, p, payload, Y)
            X, U = X[1:], U[1:]
        tail = U[-1:] if u_next is None else u_next[None, :]
        self.grid = ShootingGrid(self.dt, np.vstack([X, X[-1:]]), np.vstack([U, tail]), p)
        self._last = None

    def _update_arrival(self, X, U, p, payload, Y):
        lin = payload["lin"]
        A0, B0, P0 = lin.A[0], lin.B[0], lin.P[0]
        # information on (x0, p, u0) from the prior and the first measurement
        J0 = np.hstack([self.hx, self.hp, self.hu])
        info = np.zeros((NAUG + NU, NAUG + NU))
        info[:NAUG, :NAUG] = self.arrival.P
        info += J0.T @ self.W @ J0
        T = np.zeros((NAUG, NAUG + NU))
        T[:NX, :NX] = A0
        T[:NX, NX:NAUG] = P0
        T[:NX, NAUG:] = B0
        T[NX:, NX:NAUG] = np.eye(NP)
        new_prior = np.concatenate([X[1], p])
        self.arrival = update_arrival_cost(self.arrival, new_prior, self.D, info=info,
                                           transition=T, scale=self.forgetting, cap=self.p_cap)

    # -- RTI phases -----------------------------------------------------------
    def _build(self) -> PreparedQp:
        grid, m = self.grid, self.model
        n = grid.xs.shape[0]
        N = n - 1
        lin = shoot_and_linearize(grid, m, self.substeps)
        cd = condense_dynamics(lin)
        nw = NAUG + n * NU
        # J[k] maps w = (dx0, dp, du_0..du_N) to the node-k output deviation
        J = np.zeros((n, NY, nw))
        J[:, :, :NX] = self.hx @ cd.Gx
        J[:, :, NX:NAUG] = self.hx @ cd.Gp + self.hp
        J[:, :, NAUG:NAUG + N * NU] = self.hx @ cd.Gu
        for k in range(n):
            J[k, :, NAUG + k * NU:NAUG + (k + 1) * NU] += self.hu
        ybar = output_map(grid.xs, grid.us[:n], grid.p) + cd.c @ self.hx.T
        WJ = self.W @ J                                      # (n, NY, nw)
        H = np.einsum("kyi,kyj->ij", J, WJ)
        g = np.einsum("kyi,ky->i", WJ, ybar)
        Pa = self.arrival.P
        H[:NAUG, :NAUG] += Pa
        g[:NAUG] += Pa @ (np.concatenate([grid.xs[0], grid.p]) - self.arrival.prior)
        lb = np.concatenate([np.full(NX, -np.inf), P_LB - grid.p,
                             (U_LB - grid.us[:n]).ravel()])
        ub = np.concatenate([np.full(NX, np.inf), P_UB - grid.p,
                             (U_UB - grid.us[:n]).ravel()])
        qp = DenseQp(H=0.5 * (H + H.T), g=g, lb=lb, ub=ub)
        anchor_gradient = -WJ.transpose(2, 0, 1).reshape(nw, n * NY)
        return PreparedQp(qp, anchor_gradient, np.zeros(n * NY),
                          payload={"lin": lin, "cd": cd, "n": n})

    def _warm_start(self, prepared):
        return None

    def estimate_step(self, win: EstimationWindow) -> Estimate:
        """One feedback on the current window; returns the newest-time estimate."""
        if self.phase != "prepared":
            raise RtiPhaseError("estimate_step requires a prepared estimator")
        n = self.state.prepared.payload["n"]
        if len(win) != n:
            raise WindowContractError(f"window holds {len(win)} samples, prepared for {n}")
        Y = win.measurements
        sol, prepared, qp = self._feedback(Y.ravel())
        cd = prepared.payload["cd"]
        w = sol.primal
        grid = self.grid
        dx0, dp, du = w[:NX], w[NX:NAUG], w[NAUG:].reshape(n, NU)
        p = np.clip(grid.p + dp, P_LB, P_UB)
        U = np.clip(grid.us[:n] + du, U_LB, U_UB)
        X = grid.xs + cd.states(dx0, dp, du[:n - 1])
        self._last = (X, U, p, prepared.payload, Y)
        return Estimate(VehicleState.from_array(X[-1]), VaryingParams.from_array(p),
                        kkt=sol.kkt_residual, timestamp=float(win.times[-1]),
                        nlp_kkt=nlp_kkt(qp, sol), status=sol.status, qp_iterations=sol.iterations)

    @property
    def trajectory(self) -> Optional[np.ndarray]:
        return None if self._last is None else self._last[0]
