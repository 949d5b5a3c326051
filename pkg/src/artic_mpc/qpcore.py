"""Dense convex QP solver (primal active-set, warm-startable).

Problem form::

    minimize    0.5 z'Hz + g'z
    subject to  lb  <=  z  <= ub
                lbA <= A z <= ubA

Multipliers follow the usual signed convention: a positive entry means the
lower side of that bound/constraint is active, a negative entry the upper
side, so that at the optimum ``H z + g = dual_bounds + A' dual_constraints``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

log = logging.getLogger(__name__)

OPTIMAL, MAX_ITER, INFEASIBLE = "optimal", "max_iter", "infeasible"


class QpError(RuntimeError):
    """Raised by callers that cannot continue without an optimal QP."""

    def __init__(self, message, qp=None, solution=None):
        super().__init__(message)
        self.qp = qp
        self.solution = solution


def _vec(a, n, fill):
    if a is None:
        return np.full(n, fill)
    return np.asarray(a, dtype=float).reshape(n).copy()


@dataclass
class DenseQp:
    H: np.ndarray
    g: np.ndarray
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    lbA: Optional[np.ndarray] = None
    ubA: Optional[np.ndarray] = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H must be square")
        if not np.allclose(self.H, self.H.T, atol=1e-10, rtol=0.0):
            raise ValueError("H must be symmetric")
        self.g = np.asarray(self.g, dtype=float).reshape(n)
        self.lb = _vec(self.lb, n, -np.inf)
        self.ub = _vec(self.ub, n, np.inf)
        if self.A is None:
            self.A = np.zeros((0, n))
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.lbA = _vec(self.lbA, m, -np.inf)
        self.ubA = _vec(self.ubA, m, np.inf)
        if np.any(self.lb > self.ub) or np.any(self.lbA > self.ubA):
            raise ValueError("lower bounds must not exceed upper bounds")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.g @ z)


@dataclass
class QpSolution:
    primal: np.ndarray
    dual_bounds: np.ndarray
    dual_constraints: np.ndarray
    kkt_residual: float
    status: str
    iterations: int = 0
    working_set: tuple = ()
    objective: float = float("nan")
    certificate: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dual(self) -> np.ndarray:
        return np.concatenate([self.dual_bounds, self.dual_constraints])


def kkt_residual(qp: DenseQp, sol: QpSolution) -> float:
    """Max of stationarity, primal infeasibility and complementarity violation."""
    z = np.asarray(sol.primal, dtype=float)
    if z.shape != (qp.n,):
        raise ValueError("primal dimension does not match the QP")
    yb = np.asarray(sol.dual_bounds, dtype=float)
    yA = np.asarray(sol.dual_constraints, dtype=float)
    stat = qp.H @ z + qp.g - yb - qp.A.T @ yA
    Az = qp.A @ z
    infeas = np.concatenate([qp.lb - z, z - qp.ub, qp.lbA - Az, Az - qp.ubA, [0.0]])

    def comp(y, val, lo, hi):
        with np.errstate(invalid="ignore"):
            lo_gap = np.where(np.isfinite(lo), val - lo, np.inf)
            hi_gap = np.where(np.isfinite(hi), hi - val, np.inf)
            pos = np.where(y > 0, np.where(np.isfinite(lo_gap), y * np.abs(lo_gap), y), 0.0)
            neg = np.where(y < 0, np.where(np.isfinite(hi_gap), -y * np.abs(hi_gap), -y), 0.0)
        return np.concatenate([pos, neg, [0.0]])

    c = np.concatenate([comp(yb, z, qp.lb, qp.ub), comp(yA, Az, qp.lbA, qp.ubA)])
    return float(max(np.max(np.abs(stat), initial=0.0), np.max(infeas), np.max(c)))


class ActiveSetSolver:
    """Primal active-set QP solver using a null-space step.

    One instance owns its scratch state; use one per thread.

    Parameters
    ----------
    tol : float
        Feasibility / dual-sign / step tolerance.
    max_iter : int, optional
        Working-set change cap; defaults to ``10 * n``.
    regularization : float
        Added to the reduced Hessian diagonal when its Cholesky fails.
    trace : callable, optional
        ``trace(iteration, z, working_set, objective)`` after every iteration.
    """

    def __init__(self, tol: float = 1e-8, max_iter: Optional[int] = None,
                 regularization: float = 1e-8, trace: Optional[Callable] = None):
        self.tol = tol
        self.max_iter = max_iter
        self.regularization = regularization
        self.trace = trace
        self.regularized = False
        self._factor = None          # (H, Cholesky factor) cached by prefactor()

    def prefactor(self, H) -> bool:
        """Factorise ``H`` ahead of time for unconstrained steps with this exact array.

        Returns ``False`` (and caches nothing) when ``H`` is not positive definite.
        """
        try:
            self._factor = (H, sla.cho_factor(H, check_finite=False))
        except np.linalg.LinAlgError:
            self._factor = None
        return self._factor is not None

    # constraint j < n is bound j, otherwise general row j - n
    def _rows(self, qp):
        C = np.vstack([np.eye(qp.n), qp.A])
        lo = np.concatenate([qp.lb, qp.lbA])
        hi = np.concatenate([qp.ub, qp.ubA])
        return C, lo, hi

    def _feasible(self, C, lo, hi, z) -> bool:
        Cz = C @ z
        scale = 1.0 + np.abs(Cz)
        return bool(np.all(Cz >= lo - self.tol * scale) and np.all(Cz <= hi + self.tol * scale))

    def _phase_one(self, qp, C, lo, hi):
        """Feasible point via an LP minimising the largest violation."""
        n, m = qp.n, qp.m
        if m == 0:
            return np.clip(np.zeros(n), qp.lb, qp.ub), None
        # variables (z, t): lbA - t <= A z <= ubA + t, t >= 0
        cost = np.zeros(n + 1)
        cost[-1] = 1.0
        rows, rhs = [], []
        for i in range(m):
            if np.isfinite(qp.ubA[i]):
                rows.append(np.append(qp.A[i], -1.0))
                rhs.append(qp.ubA[i])
            if np.isfinite(qp.lbA[i]):
                rows.append(np.append(-qp.A[i], -1.0))
                rhs.append(-qp.lbA[i])
        bounds = [(None if not np.isfinite(l) else l, None if not np.isfinite(u) else u)
                  for l, u in zip(qp.lb, qp.ub)] + [(0.0, None)]
        res = linprog(cost, A_ub=np.array(rows) if rows else None,
                      b_ub=np.array(rhs) if rhs else None, bounds=bounds, method="highs")
        if res.status != 0:
            return None, None
        z, t = res.x[:n], res.x[-1]
        if t > self.tol:
            cert = getattr(res, "ineqlin", None)
            return None, (None if cert is None else np.asarray(cert.marginals))
        return z, None

    def _null_step(self, H, grad, Cw):
        """Minimise 0.5 p'Hp + grad'p subject to Cw p = 0."""
        n = H.shape[0]
        k = Cw.shape[0]
        if k == 0:
            if self._factor is not None and self._factor[0] is H:
                return -sla.cho_solve(self._factor[1], grad, check_finite=False)
            Z = None
            Hr, gr = H, grad
        else:
            Q, _ = np.linalg.qr(Cw.T, mode="complete")
            Z = Q[:, k:]
            if Z.shape[1] == 0:
                return np.zeros(n)
            Hr = Z.T @ H @ Z
            gr = Z.T @ grad
        try:
            cf = sla.cho_factor(Hr, check_finite=False)
        except np.linalg.LinAlgError:
            self.regularized = True
            cf = sla.cho_factor(Hr + self.regularization * np.eye(Hr.shape[0]), check_finite=False)
        pr = -sla.cho_solve(cf, gr, check_finite=False)
        return pr if Z is None else Z @ pr

    def solve(self, qp: DenseQp, warm_start: Optional[QpSolution] = None) -> QpSolution:
        n = qp.n
        C, lo, hi = self._rows(qp)
        nc = C.shape[0]
        tol = self.tol
        max_iter = self.max_iter if self.max_iter is not None else 10 * max(n, 1)
        self.regularized = False
        is_eq = lo == hi

        z = None
        if warm_start is not None and warm_start.primal.shape == (n,):
            cand = np.asarray(warm_start.primal, dtype=float).copy()
            if self._feasible(C, lo, hi, cand):
                z = cand
        if z is None:
            cand = np.zeros(n)
            if self._feasible(C, lo, hi, cand):
                z = cand
            elif qp.m == 0 or self._feasible(C, lo, hi, np.clip(cand, qp.lb, qp.ub)):
                z = np.clip(cand, qp.lb, qp.ub)
            else:
                z, cert = self._phase_one(qp, C, lo, hi)
                if z is None:
                    return self._finish(qp, np.zeros(n), {}, INFEASIBLE, 0, certificate=cert)

        # working set: {constraint index: side}, side -1 lower, +1 upper, 0 equality
        W: dict[int, int] = {}
        for j in np.flatnonzero(is_eq):
            W[int(j)] = 0
        if warm_start is not None and warm_start.working_set:
            Cz = C @ z
            for j, side in warm_start.working_set:
                if j >= nc or j in W or side == 0:
                    continue
                target = lo[j] if side < 0 else hi[j]
                if not np.isfinite(target) or abs(Cz[j] - target) > tol * (1.0 + abs(target)):
                    continue
                trial = np.vstack([C[list(W)], C[j]]) if W else C[j:j + 1]
                if np.linalg.matrix_rank(trial) == trial.shape[0]:
                    W[int(j)] = int(side)
        # snap working-set constraints exactly onto their bounds where possible
        for j, side in W.items():
            if j < n:
                z[j] = lo[j] if side <= 0 else hi[j]

        status = MAX_ITER
        it = 0
        skip_step = False
        obj = qp.objective(z)
        for it in range(1, max_iter + 1):
            grad = qp.H @ z + qp.g
            idx = list(W)
            Cw = C[idx] if idx else np.zeros((0, n))
            p = np.zeros(n) if skip_step else self._null_step(qp.H, grad, Cw)
            skip_step = False
            if np.max(np.abs(p), initial=0.0) <= 1e-12 * (1.0 + np.max(np.abs(z), initial=0.0)):
                y = self._multipliers(Cw, grad)
                dual_tol = tol * (1.0 + np.max(np.abs(grad), initial=0.0))
                worst, worst_j = dual_tol, None
                for pos, j in enumerate(idx):
                    side = W[j]
                    if side == 0:
                        continue
                    viol = -y[pos] if side < 0 else y[pos]
                    if viol > worst or (worst_j is not None and viol == worst and j < worst_j):
                        worst, worst_j = viol, j
                if worst_j is None:
                    status = OPTIMAL
                    if self.trace:
                        self.trace(it, z.copy(), tuple(W.items()), obj)
                    break
                del W[worst_j]
            else:
                alpha, block, block_side = self._ratio_test(C, lo, hi, z, p, idx)
                z = z + alpha * p
                if block is not None:
                    W[block] = block_side
                    if block < n:
                        z[block] = lo[block] if block_side < 0 else hi[block]
                else:
                    skip_step = True
                obj = qp.objective(z)
            if self.trace:
                self.trace(it, z.copy(), tuple(W.items()), obj)
        return self._finish(qp, z, W, status, it)

    @staticmethod
    def _ratio_test(C, lo, hi, z, p, working):
        """Longest feasible step along ``p``; ties go to the lowest index."""
        Cz = C @ z
        Cp = C @ p
        free = np.ones(C.shape[0], dtype=bool)
        free[working] = False
        with np.errstate(divide="ignore", invalid="ignore"):
            to_lo = np.where(free & (Cp < -1e-14) & np.isfinite(lo), (lo - Cz) / Cp, np.inf)
            to_hi = np.where(free & (Cp > 1e-14) & np.isfinite(hi), (hi - Cz) / Cp, np.inf)
        ratio = np.maximum(np.minimum(to_lo, to_hi), 0.0)
        j = int(np.argmin(ratio))           # argmin returns the first (lowest) index
        if not ratio[j] < 1.0:
            return 1.0, None, 0
        return float(ratio[j]), j, (-1 if to_lo[j] <= to_hi[j] else 1)

    @staticmethod
    def _multipliers(Cw, grad):
        if Cw.shape[0] == 0:
            return np.zeros(0)
        y, *_ = np.linalg.lstsq(Cw.T, grad, rcond=None)
        return y

    def _finish(self, qp, z, W, status, it, certificate=None):
        n = qp.n
        yb = np.zeros(n)
        yA = np.zeros(qp.m)
        if W:
            C, _, _ = self._rows(qp)
            idx = list(W)
            y = self._multipliers(C[idx], qp.H @ z + qp.g)
            for pos, j in enumerate(idx):
                if j < n:
                    yb[j] = y[pos]
                else:
                    yA[j - n] = y[pos]
        sol = QpSolution(primal=z, dual_bounds=yb, dual_constraints=yA, kkt_residual=np.nan,
                         status=status, iterations=it, working_set=tuple(W.items()),
                         objective=qp.objective(z), certificate=certificate)
        if status != INFEASIBLE:
            sol.kkt_residual = kkt_residual(qp, sol)
        if status == MAX_ITER:
            log.debug("QP hit the iteration cap (%d)", it)
        return sol


def solve(qp: DenseQp, warm_start: Optional[QpSolution] = None, **options) -> QpSolution:
    return ActiveSetSolver(**options).solve(qp, warm_start)


def dump_qp(qp: DenseQp, path) -> None:
    """Write a QP as labelled plain-text blocks: ``[name] rows cols`` then one line per row."""
    with Path(path).open("w") as fh:
        fh.write(f"# dense qp n={qp.n} m={qp.m}\n")
        for name in ("H", "g", "lb", "ub", "A", "lbA", "ubA"):
            arr = np.asarray(getattr(qp, name), dtype=float)
            arr = arr.reshape(1, -1) if arr.ndim == 1 else arr
            fh.write(f"[{name}] {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_qp(path) -> DenseQp:
    blocks = {}
    with Path(path).open() as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        name, r, c = head[0].strip("[]"), int(head[1]), int(head[2])
        rows = [np.array(lines[i + 1 + k].split(), dtype=float) for k in range(r)]
        blocks[name] = np.array(rows, dtype=float).reshape(r, c)
        i += 1 + r
    n = blocks["H"].shape[0]
    return DenseQp(H=blocks["H"], g=blocks["g"].ravel(), lb=blocks["lb"].ravel(),
                   ub=blocks["ub"].ravel(), A=blocks["A"].reshape(-1, n),
                   lbA=blocks["lbA"].ravel(), ubA=blocks["ubA"].ravel())
