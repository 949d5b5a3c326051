"""Independent reference checks used by ``artic-mpc selftest`` and the test suite.

Each oracle returns an :class:`OracleResult` with the worst observed
discrepancy so that callers can compare it against their own tolerance.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .isl import LinearSystem, LinearZModel, Lmpc, LmpcWeights, NZ, NV, verify_linearization
from .model import (DEFAULT_CONSTANTS, NU, NX, P_LB, P_UB, U_LB, U_UB, VehicleModel,
                    rk4_step_sensitivities)
from .nmpc import ControllerWeights, InputBounds, NmpcInstance
from .qpcore import OPTIMAL, ActiveSetSolver, DenseQp, kkt_residual


@dataclass
class OracleResult:
    name: str
    worst: float
    tolerance: float
    cases: int
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.worst <= self.tolerance)

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{mark} {self.name}: worst {self.worst:.3e} <= {self.tolerance:.0e} over {self.cases} cases{extra}"


# -- QP: brute-force active-set enumeration -------------------------------------------
def random_qp(rng: np.random.Generator, n: int, m: int) -> DenseQp:
    """Strictly convex QP with bounds and ``m`` two-sided rows, feasible by construction."""
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 3.0
    z_feas = rng.uniform(-0.5, 0.5, n)
    lb = z_feas - rng.uniform(0.1, 1.5, n)
    ub = z_feas + rng.uniform(0.1, 1.5, n)
    A = rng.normal(size=(m, n))
    Az = A @ z_feas
    lbA = Az - rng.uniform(0.05, 1.0, m)
    ubA = Az + rng.uniform(0.05, 1.0, m)
    # leave some sides open to exercise one-sided rows
    lb[rng.random(n) < 0.2] = -np.inf
    ubA[rng.random(m) < 0.2] = np.inf
    return DenseQp(0.5 * (H + H.T), g, lb, ub, A, lbA, ubA)


def enumerate_qp(qp: DenseQp, tol: float = 1e-9) -> np.ndarray:
    """Global minimiser of a strictly convex QP by trying active sets.

    Candidate sets are visited by increasing size and the first one whose
    equality-constrained solution is primal feasible with correctly signed
    multipliers is returned: for a strictly convex QP that KKT point is the
    unique global minimiser.
    """
    n = qp.n
    C = np.vstack([np.eye(n), qp.A])
    lo = np.concatenate([qp.lb, qp.lbA])
    hi = np.concatenate([qp.ub, qp.ubA])
    sides = []
    for i in range(C.shape[0]):
        opts = []
        if np.isfinite(lo[i]):
            opts.append((lo[i], 1.0))
        if np.isfinite(hi[i]) and hi[i] != lo[i]:
            opts.append((hi[i], -1.0))
        sides.append(opts)
    rows = [i for i in range(C.shape[0]) if sides[i]]
    for size in range(min(n, len(rows)) + 1):
        for act in itertools.combinations(rows, size):
            Ca = C[list(act)]
            for combo in itertools.product(*(sides[i] for i in act)):
                K = np.block([[qp.H, -Ca.T], [Ca, np.zeros((size, size))]])
                rhs = np.concatenate([-qp.g, [v for v, _ in combo]])
                try:
                    sol = np.linalg.solve(K, rhs)
                except np.linalg.LinAlgError:
                    break
                z, y = sol[:n], sol[n:]
                Cz = C @ z
                signs = np.array([s for _, s in combo])
                if (np.all(Cz >= lo - tol) and np.all(Cz <= hi + tol)
                        and np.all(y * signs >= -tol)):
                    return z
    raise ValueError("QP has no KKT point")


def qp_oracle(instances: int = 200, seed: int = 0, max_n: int = 6, max_m: int = 4) -> OracleResult:
    rng = np.random.default_rng(seed)
    solver = ActiveSetSolver()
    worst, bad_status, worst_kkt = 0.0, 0, 0.0
    for _ in range(instances):
        n = int(rng.integers(1, max_n + 1))
        m = int(rng.integers(0, max_m + 1))
        qp = random_qp(rng, n, m)
        sol = solver.solve(qp)
        if sol.status != OPTIMAL:
            bad_status += 1
            worst = np.inf
            continue
        ref = enumerate_qp(qp)
        worst = max(worst, float(np.max(np.abs(sol.primal - ref))))
        worst_kkt = max(worst_kkt, kkt_residual(qp, sol))
    return OracleResult("qp-enumeration", worst, 1e-6, instances,
                        f"non-optimal {bad_status}, worst KKT {worst_kkt:.1e}")


# -- RK4 sensitivities vs central differences ------------------------------------------
def random_operating_point(rng: np.random.Generator):
    x = np.concatenate([rng.uniform(-20, 20, 2), rng.uniform(-np.pi, np.pi, 1),
                        rng.uniform(-20, 20, 2), rng.uniform(-np.pi, np.pi, 1),
                        rng.uniform(0.1, 2.0, 1)])
    u = rng.uniform(U_LB, U_UB)
    p = rng.uniform(P_LB, P_UB)
    return x, u, p


def sensitivity_oracle(points: int = 100, seed: int = 0, dt: float = 0.2, substeps: int = 1,
                       step: float = 1e-6) -> OracleResult:
    """Relative error ``max|J - J_fd| / max(1, max|J_fd|)`` per point, maximised."""
    rng = np.random.default_rng(seed)
    model = VehicleModel()
    worst = 0.0
    for _ in range(points):
        x, u, p = random_operating_point(rng)
        _, A, B, P = rk4_step_sensitivities(model, x, u, p, dt, substeps)
        J = np.hstack([A, B, P])
        w = np.concatenate([x, u, p])
        scale = np.maximum(1.0, np.abs(w))
        J_fd = np.empty_like(J)
        for j in range(w.size):
            h = step * scale[j]
            wp, wm = w.copy(), w.copy()
            wp[j] += h
            wm[j] -= h
            fp = rk4_step_sensitivities(model, wp[:NX], wp[NX:NX + NU], wp[NX + NU:], dt, substeps)[0]
            fm = rk4_step_sensitivities(model, wm[:NX], wm[NX:NX + NU], wm[NX + NU:], dt, substeps)[0]
            J_fd[:, j] = (fp - fm) / (2 * h)
        err = np.max(np.abs(J - J_fd)) / max(1.0, float(np.max(np.abs(J_fd))))
        worst = max(worst, float(err))
    return OracleResult("rk4-sensitivities", worst, 1e-4, points)


# -- input-state linearisation exactness ---------------------------------------------------
def isl_oracle(cases: int = 100, seed: int = 0, dt: float = 0.2) -> OracleResult:
    """Tractor-block discrepancy with ``delta_i + beta = 0`` and unit traction.

    Virtual inputs are drawn so that the physical inputs stay inside their
    bounds (forward hydrostat, moderate steering) and so that the trailer
    steering argument vanishes.
    """
    c = DEFAULT_CONSTANTS
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        psi_t = rng.uniform(-np.pi, np.pi)
        s = np.array([*rng.uniform(-10, 10, 2), psi_t, *rng.uniform(-10, 10, 2),
                      psi_t + rng.uniform(-0.3, 0.3), rng.uniform(0.5, 2.0)])
        lon, lat = rng.uniform(0.2, 0.6), rng.uniform(-0.1, 0.1)
        ct, st = np.cos(psi_t), np.sin(psi_t)
        a_i = c.L_d * lat / c.L_i
        u = np.array([lon * ct - lat * st, lon * st + lat * ct,
                      -a_i * np.sin(s[5]), a_i * np.cos(s[5])])
        beta = rng.uniform(-0.3, 0.3)
        worst = max(worst, verify_linearization(s, u, dt, beta=beta).tractor)
    rank = LinearSystem(c.tau).controllability_rank()
    return OracleResult("isl-exactness", worst if rank == NZ else np.inf, 1e-6, cases,
                        f"controllability rank {rank}")


# -- NMPC machinery on the linear plant vs LMPC ------------------------------------------------
def lq_oracle(cases: int = 20, seed: int = 0, N: int = 15, dt: float = 0.2) -> OracleResult:
    """One RTI feedback of the NMPC on the linear z-model against the LMPC.

    Both use the same weights and the same RK4 discretisation; the LMPC speed
    bounds and the NMPC input bounds are removed so the two QPs coincide.
    """
    rng = np.random.default_rng(seed)
    lw = LmpcWeights()
    system = LinearSystem(DEFAULT_CONSTANTS.tau)
    worst = 0.0
    inf = (np.inf,) * NV
    for _ in range(cases):
        z0 = rng.normal(size=NZ)
        u_prev = rng.normal(size=NV) * 0.2
        refs = rng.normal(size=(N + 1, NZ))
        lmpc = Lmpc(system, lw, N=N, dt=dt, v_max=np.inf)
        u_l, _ = lmpc.lmpc_step(z0, refs, u_prev=u_prev)
        nmpc = NmpcInstance(LinearZModel(system),
                            ControllerWeights(Q=lw.Q, R=lw.R, terminal_factor=lw.terminal_factor,
                                              input_scale=None),
                            InputBounds(tuple(-v for v in inf), inf), N=N, dt=dt)
        nmpc.initialize(rng.normal(size=NZ), u_prev)
        u_n, _ = nmpc.control_step(z0, refs)
        worst = max(worst, float(np.max(np.abs(u_l.as_array() - u_n))))
    return OracleResult("lq-degeneracy", worst, 1e-6, cases)


def run_all(quick: bool = False) -> list:
    scale = 4 if quick else 1
    return [qp_oracle(200 // scale), sensitivity_oracle(100 // scale), isl_oracle(100 // scale),
            lq_oracle(20 // scale)]
