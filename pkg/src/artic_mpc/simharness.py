"""Closed-loop simulation of both frameworks on a synthetic plant.

Per sample ``k`` (time ``t_k = k dt``):

1. the plant state ``x_k`` is measured with Gaussian noise;
2. the estimator runs its feedback on the newest measurement;
3. the controller receives the estimate propagated one sample ahead
   (the input it computes is applied from ``t_{k+1}``: one-sample delay);
4. both real-time iterations prepare the next sample;
5. the plant integrates ``dt`` under the input computed at ``k - 1``.
"""
from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .isl import (Ekf, EkfState, LinearSystem, Lmpc, LmpcWeights, LowSpeedError,
                  input_transform, state_transform)
from .model import (BETA_MAX, DEFAULT_CONSTANTS, INPUT_NAMES, MEAS_NAMES, NX, PARAM_NAMES,
                    STATE_NAMES, ModelConstants, NoiseSpec, VehicleModel, integrate,
                    output_map, rk4_step)
from .nmhe import EstimatorWeights, NmheInstance
from .nmpc import ControllerWeights, NmpcInstance
from .trajectory import (ConfigurationError, EightTrajectoryConfig, TimedReference,
                         build_eight, window_array)

log = logging.getLogger(__name__)

FRAMEWORKS = ("nmhe-nmpc", "isl-lmpc")
THREADS_ENV = "ARTIC_MPC_THREADS"


class SimulationError(RuntimeError):
    """Raised when the closed loop cannot continue; carries the sample index."""

    def __init__(self, message, sample: Optional[int] = None, row: Optional[dict] = None):
        super().__init__(message if sample is None else f"sample {sample}: {message}")
        self.sample = sample
        self.row = row


# -- plant schedules -----------------------------------------------------------------
@dataclass(frozen=True)
class TractionSchedule:
    """True ``(mu, kappa, eta)`` over time.

    ``mode="sinusoid"``: independent slow sinusoids around ``mean`` with a
    seeded phase each, plus smooth seeded noise, clipped to ``[lo, hi]``.
    ``mode="constant"``: the fixed triple ``constant``.
    """

    mode: str = "sinusoid"
    mean: float = 0.9
    amplitude: float = 0.07
    period: float = 60.0
    noise: float = 0.02
    lo: float = 0.8
    hi: float = 1.0
    constant: tuple = (0.9, 0.85, 0.9)

    def validate(self):
        if self.mode not in ("sinusoid", "constant"):
            raise ConfigurationError("traction_mode must be 'sinusoid' or 'constant'")
        if not 0.0 <= self.lo <= self.hi <= 1.0:
            raise ConfigurationError("traction bounds must satisfy 0 <= lo <= hi <= 1")
        if len(self.constant) != 3 or not all(0.0 <= c <= 1.0 for c in self.constant):
            raise ConfigurationError("traction_constant needs three values in [0, 1]")
        if self.period <= 0:
            raise ConfigurationError("traction_period must be positive")

    def sampler(self, seed: int):
        if self.mode == "constant":
            const = np.array(self.constant, float)
            return lambda t: const.copy()
        rng = np.random.default_rng([seed, 1])
        phase = rng.uniform(0, 2 * np.pi, 3)
        # smooth noise: a few slow harmonics with random phases per coefficient
        periods = np.array([17.0, 29.0, 43.0])
        nphase = rng.uniform(0, 2 * np.pi, (3, periods.size))
        namp = rng.normal(size=(3, periods.size)) / np.sqrt(periods.size)

        def at(t):
            base = self.mean + self.amplitude * np.sin(2 * np.pi * t / self.period + phase)
            wig = np.sum(namp * np.sin(2 * np.pi * t / periods + nphase), axis=1)
            return np.clip(base + self.noise * wig, self.lo, self.hi)
        return at


@dataclass(frozen=True)
class BetaSchedule:
    """Drawbar angle of the plant.

    ``mode="schedule"`` drives ``beta`` as a slow exogenous signal;
    ``mode="identity"`` recomputes ``beta = psi_i - psi_t - delta_i`` at
    every sample from the plant state and the applied input.
    """

    mode: str = "schedule"
    offset: float = 0.15
    amplitude: float = 0.02
    period: float = 60.0

    def validate(self):
        if self.mode not in ("schedule", "identity"):
            raise ConfigurationError("beta_mode must be 'schedule' or 'identity'")
        if abs(self.offset) + abs(self.amplitude) > BETA_MAX:
            raise ConfigurationError("beta schedule exceeds the 20 degree drawbar limit")

    def at(self, t: float) -> float:
        return float(self.offset + self.amplitude * np.sin(2 * np.pi * t / self.period))


@dataclass
class PlantTruth:
    """True plant: state, schedules and the fixed-step integrator."""

    state: np.ndarray
    traction: object
    beta: BetaSchedule
    constants: ModelConstants = DEFAULT_CONSTANTS
    substeps: int = 8

    def params(self, t: float, u) -> np.ndarray:
        tr = self.traction(t)
        if self.beta.mode == "identity":
            b = float(self.state[5] - self.state[2] - u[1])
        else:
            b = self.beta.at(t)
        return np.array([tr[0], tr[1], tr[2], b])

    def step(self, u, p, dt: float):
        self.state = integrate(self.state, u, p, dt, self.substeps, self.constants)
        return self.state


# -- run configuration -------------------------------------------------------------
@dataclass(frozen=True)
class RunConfig:
    framework: str = "nmhe-nmpc"
    trajectory: EightTrajectoryConfig = EightTrajectoryConfig()
    seed: int = 0
    laps: float = 2.0
    duration: Optional[float] = None
    dt: float = 0.2
    horizon_steps: int = 15
    noise: NoiseSpec = NoiseSpec()
    noise_scale: float = 1.0
    traction: TractionSchedule = TractionSchedule()
    beta: BetaSchedule = BetaSchedule()
    constants: ModelConstants = DEFAULT_CONSTANTS
    plant_substeps: int = 8
    controller_substeps: int = 1
    arrival_forgetting: float = 1e-5
    terminal_factor: float = 10.0
    hp_move_scale: float = 0.01
    lmpc_symmetric_trailer: bool = False
    initial_speed: Optional[float] = None
    warmup: float = 5.0
    threads: Optional[int] = None
    dump_horizon: bool = False

    def validate(self):
        if self.framework not in FRAMEWORKS:
            raise ConfigurationError(f"framework must be one of {FRAMEWORKS}")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if self.laps <= 0 and self.duration is None:
            raise ConfigurationError("laps must be positive")
        if self.duration is not None and self.duration <= 0:
            raise ConfigurationError("duration must be positive")
        if self.horizon_steps < 1 or self.plant_substeps < 1 or self.controller_substeps < 1:
            raise ConfigurationError("horizon and substep counts must be >= 1")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be non-negative")
        if self.threads not in (None, 1, 2):
            raise ConfigurationError("threads must be 1 or 2")
        self.trajectory.validate()
        self.traction.validate()
        self.beta.validate()

    def resolved_threads(self) -> int:
        if self.threads is not None:
            return self.threads
        raw = os.environ.get(THREADS_ENV, "1").strip()
        if raw not in ("1", "2"):
            raise ConfigurationError(f"{THREADS_ENV} must be 1 or 2, got {raw!r}")
        return int(raw)


# -- log -----------------------------------------------------------------------------
def _cols(prefix, names):
    return tuple(f"{prefix}{n}" for n in names)


TRUE_COLS = _cols("true_", STATE_NAMES) + _cols("true_", PARAM_NAMES)
MEAS_COLS = _cols("meas_", MEAS_NAMES)
EST_COLS = _cols("est_", STATE_NAMES) + _cols("est_", PARAM_NAMES)
INPUT_COLS = _cols("u_", INPUT_NAMES)
REF_COLS = ("ref_x_t", "ref_y_t", "ref_psi_t", "ref_x_i", "ref_y_i", "ref_psi_i", "ref_v")
TIMING_COLS = ("est_prep_ms", "est_feedback_ms", "ctl_prep_ms", "ctl_feedback_ms", "critical_ms")
DIAG_COLS = ("est_kkt", "ctl_kkt", "est_nlp_kkt", "ctl_nlp_kkt", "est_qp_iter", "ctl_qp_iter",
             "lmpc_slack")
LOG_COLUMNS = (("k", "t", "segment", "input_from") + TRUE_COLS + MEAS_COLS + EST_COLS
               + INPUT_COLS + REF_COLS + ("err_tractor", "err_trailer") + TIMING_COLS
               + DIAG_COLS + ("events",))
TEXT_COLS = ("segment", "events")
INT_COLS = ("k", "input_from", "est_qp_iter", "ctl_qp_iter")


class SimLog:
    """Per-sample closed-loop record with a fixed column schema."""

    columns = LOG_COLUMNS

    def __init__(self, framework: str = "", meta: Optional[dict] = None):
        self.framework = framework
        self.meta = dict(meta or {})
        self.rows: list = []
        self.horizons: list = []

    def append(self, row: dict):
        if self.rows and not row["t"] > self.rows[-1]["t"]:
            raise SimulationError("log time must be strictly increasing", row.get("k"))
        missing = set(self.columns) - set(row)
        if missing:
            raise ValueError(f"log row lacks columns {sorted(missing)}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name) -> np.ndarray:
        vals = [r[name] for r in self.rows]
        return np.array(vals, dtype=object if name in TEXT_COLS else float)

    def non_timing_columns(self):
        return [c for c in self.columns if not c.endswith("_ms")]

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            meta = {"framework": self.framework, **self.meta}
            fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])

    @classmethod
    def from_csv(cls, path) -> "SimLog":
        path = Path(path)
        text = path.read_text().splitlines()
        meta = {}
        if text and text[0].startswith("#"):
            for item in text[0][1:].split():
                key, _, value = item.partition("=")
                meta[key] = value
            text = text[1:]
        framework = meta.pop("framework", "")
        if "lap_time" in meta:
            meta["lap_time"] = float(meta["lap_time"])
        if not text:
            raise ValueError(f"{path} is empty")
        reader = csv.reader(text)
        header = next(reader)
        if tuple(header) != cls.columns:
            raise ValueError(f"{path} does not carry the simulation log schema")
        out = cls(framework, meta)
        for rec in reader:
            if not rec:
                continue
            row = {}
            for c, v in zip(header, rec):
                if c in TEXT_COLS:
                    row[c] = v
                elif c in INT_COLS:
                    row[c] = int(v)
                else:
                    row[c] = float(v)
            out.rows.append(row)
        if not out.rows:
            raise ValueError(f"{path} holds no samples")
        return out


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# -- closed loop ---------------------------------------------------------------------
def _initial_state(traj: TimedReference, speed: float) -> np.ndarray:
    x = traj.evaluate(np.array(0.0))[0].copy()
    x[6] = speed
    return x


class _NmheNmpcPipeline:
    def __init__(self, cfg: RunConfig, noise: NoiseSpec, threads: int):
        self.cfg = cfg
        N = cfg.horizon_steps
        model = VehicleModel(cfg.constants)
        self.model = model
        est_noise = noise if cfg.noise_scale > 0 else cfg.noise
        self.est = NmheInstance(EstimatorWeights(noise=est_noise), N=N, dt=cfg.dt,
                                substeps=cfg.controller_substeps,
                                forgetting=cfg.arrival_forgetting, model=model)
        weights = ControllerWeights(terminal_factor=cfg.terminal_factor,
                                    input_scale=(1.0, 1.0, cfg.hp_move_scale))
        self.ctl = NmpcInstance(model, weights, N=N, dt=cfg.dt, substeps=cfg.controller_substeps)
        self.win = self.est.new_window()
        self.pool = ThreadPoolExecutor(max_workers=1) if threads == 2 else None
        self.prev_prep = 0.0

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def step(self, k, t, y, u_app, refs_next):
        cfg = self.cfg
        self.win.push_measurement(y, u_app, t)
        if k == 0:
            self.est.initialize(y, u_app)
        est = self.est.estimate_step(self.win)
        x_hat = est.state.as_array()
        p_hat = est.params.as_array()
        x_next = rk4_step(self.model.rhs, x_hat, u_app, p_hat, cfg.dt, cfg.controller_substeps)
        if k == 0:
            self.ctl.initialize(x_next, u_app, p_hat)
            self.ctl.prepare()
        fut = self.pool.submit(self.est.prepare) if self.pool else None
        u_cmd, diag = self.ctl.control_step(x_next, refs_next, p_hat)
        ctl_fb = diag.feedback_ms
        if fut is None:
            self.est.prepare()
        self.ctl.prepare()
        if fut is not None:
            fut.result()
        est_prep, ctl_prep = self.est.state.prep_ms, self.ctl.state.prep_ms
        critical = self.prev_prep + self.est.state.feedback_ms + ctl_fb
        self.prev_prep = max(est_prep, ctl_prep)
        row = {
            "est": np.concatenate([x_hat, p_hat]),
            "est_prep_ms": est_prep, "est_feedback_ms": self.est.state.feedback_ms,
            "ctl_prep_ms": ctl_prep, "ctl_feedback_ms": ctl_fb, "critical_ms": critical,
            "est_kkt": est.kkt, "ctl_kkt": diag.kkt, "est_nlp_kkt": est.nlp_kkt,
            "ctl_nlp_kkt": diag.nlp_kkt, "est_qp_iter": est.qp_iterations,
            "ctl_qp_iter": diag.qp_iterations, "lmpc_slack": float("nan"), "events": [],
        }
        return u_cmd.as_array(), row, diag.predicted_states


class _IslLmpcPipeline:
    def __init__(self, cfg: RunConfig, noise: NoiseSpec):
        self.cfg = cfg
        c = cfg.constants
        self.c = c
        self.model = VehicleModel(c)
        self.ekf = Ekf(c, noise if cfg.noise_scale > 0 else cfg.noise, dt=cfg.dt,
                       substeps=cfg.controller_substeps)
        self.lmpc = Lmpc(LinearSystem(c.tau),
                         LmpcWeights(symmetric_trailer=cfg.lmpc_symmetric_trailer),
                         N=cfg.horizon_steps, dt=cfg.dt)
        self.state: Optional[EkfState] = None
        self.u_prev_app = None

    def close(self):
        pass

    def step(self, k, t, y, u_app, refs_next):
        cfg = self.cfg
        events = []
        t0 = time.perf_counter()
        if k == 0:
            from .nmhe import initial_prior
            prior = initial_prior(y, noise=self.cfg.noise)
            self.state = EkfState(prior.prior[:NX], np.diag(1.0 / np.diag(prior.P)[:NX]))
        else:
            self.state = self.ekf.ekf_step(self.state, y, self.u_prev_app)
        if self.ekf.resets:
            events.append("ekf_reset")
            self.ekf.resets = 0
        ekf_ms = 1e3 * (time.perf_counter() - t0)
        x_hat = self.state.mean
        beta = float(np.clip(y[8], -BETA_MAX, BETA_MAX))
        p_hat = np.array([1.0, 1.0, 1.0, beta])
        x_next = rk4_step(self.model.rhs, x_hat, u_app, p_hat, cfg.dt, cfg.controller_substeps)
        if k == 0:
            self.lmpc.u_prev = state_transform(x_next)[[2, 3, 6, 7]] / self.c.tau
        t1 = time.perf_counter()
        z = state_transform(x_next)
        z_refs = state_transform(refs_next)
        u_z, info = self.lmpc.lmpc_step(z, z_refs)
        if info.slack > 1e-9:
            events.append("speed_slack")
        try:
            u_cmd = input_transform(x_next, beta, u_z, self.c, events=events).as_array()
        except LowSpeedError:
            events.append("low_speed_hold")
            u_cmd = np.asarray(u_app, float).copy()
        lmpc_ms = 1e3 * (time.perf_counter() - t1)
        self.u_prev_app = np.asarray(u_app, float).copy()
        row = {
            "est": np.concatenate([x_hat, p_hat]),
            "est_prep_ms": 0.0, "est_feedback_ms": ekf_ms,
            "ctl_prep_ms": 0.0, "ctl_feedback_ms": lmpc_ms, "critical_ms": ekf_ms + lmpc_ms,
            "est_kkt": float("nan"), "ctl_kkt": info.kkt, "est_nlp_kkt": float("nan"),
            "ctl_nlp_kkt": float("nan"), "est_qp_iter": 0, "ctl_qp_iter": info.qp_iterations,
            "lmpc_slack": info.slack, "events": events,
        }
        return u_cmd, row, None


def noise_generator(cfg: RunConfig):
    """Seeded Gaussian measurement noise with the configured standard deviations."""
    rng = np.random.default_rng([cfg.seed, 0])
    sig = cfg.noise.sigmas() * cfg.noise_scale
    return lambda: rng.standard_normal(sig.size) * sig


def run_closed_loop(cfg: RunConfig) -> SimLog:
    """Simulate one run; deterministic for a given configuration and seed."""
    cfg.validate()
    threads = cfg.resolved_threads()
    traj = build_eight(cfg.trajectory, cfg.dt)
    duration = cfg.duration if cfg.duration is not None else cfg.laps * traj.lap_time
    n_samples = int(np.floor(duration / cfg.dt + 1e-9))
    speed = cfg.trajectory.ref_speed if cfg.initial_speed is None else cfg.initial_speed
    plant = PlantTruth(_initial_state(traj, speed), cfg.traction.sampler(cfg.seed), cfg.beta,
                       cfg.constants, cfg.plant_substeps)
    noise = noise_generator(cfg)
    if cfg.framework == "nmhe-nmpc":
        pipe = _NmheNmpcPipeline(cfg, cfg.noise, threads)
    else:
        pipe = _IslLmpcPipeline(cfg, cfg.noise)
    simlog = SimLog(cfg.framework, meta={"seed": cfg.seed, "lap_time": traj.lap_time,
                                          "threads": threads})
    u_app = np.array([0.0, 0.0, cfg.trajectory.ref_speed / cfg.constants.K])
    N = cfg.horizon_steps
    try:
        for k in range(n_samples):
            t = k * cfg.dt
            p_true = plant.params(t, u_app)
            if abs(p_true[3]) > BETA_MAX:
                raise SimulationError(f"drawbar angle {p_true[3]:.3f} rad exceeds 20 degrees", k)
            x_true = plant.state.copy()
            y = output_map(x_true, u_app, p_true) + noise()
            refs_next = window_array(traj, t + cfg.dt, N, cfg.dt)
            u_cmd, row, horizon = pipe.step(k, t, y, u_app, refs_next)
            ref_now, curve = traj.evaluate(np.array(t))
            row_full = _assemble(k, t, "curve" if curve else "straight", x_true, p_true, y,
                                 u_app, ref_now, row)
            bad = [c for c in LOG_COLUMNS if c not in TEXT_COLS and not c.endswith("_ms")
                   and c not in DIAG_COLS and not np.isfinite(row_full[c])]
            if bad or not np.all(np.isfinite(u_cmd)):
                raise SimulationError(f"non-finite values in {bad or ['u_cmd']}", k, row_full)
            simlog.append(row_full)
            if cfg.dump_horizon and horizon is not None:
                simlog.horizons.append((k, horizon))
            plant.step(u_app, p_true, cfg.dt)
            u_app = u_cmd
    finally:
        pipe.close()
    return simlog


def _assemble(k, t, segment, x_true, p_true, y, u_app, ref, row) -> dict:
    out = {"k": k, "t": t, "segment": segment, "input_from": k - 1}
    out.update(zip(TRUE_COLS, np.concatenate([x_true, p_true])))
    out.update(zip(MEAS_COLS, y))
    out.update(zip(EST_COLS, row.pop("est")))
    out.update(zip(INPUT_COLS, u_app))
    out.update(zip(REF_COLS, ref))
    out["err_tractor"] = float(np.hypot(x_true[0] - ref[0], x_true[1] - ref[1]))
    out["err_trailer"] = float(np.hypot(x_true[3] - ref[3], x_true[4] - ref[4]))
    events = row.pop("events")
    out.update(row)
    out["events"] = ";".join(events)
    return out


# -- metrics ------------------------------------------------------------------------
@dataclass
class ErrorStats:
    mean: float
    max: float
    count: int


@dataclass
class Metrics:
    framework: str
    warmup: float
    errors: dict              # {(body, segment): ErrorStats}
    timing: dict              # {component: {phase: (mean, max)}}
    kkt: dict                 # {component: (mean, fraction <= 1e-2)}
    critical_max_ms: float
    critical_mean_ms: float
    per_lap: dict = field(default_factory=dict)   # {lap: {(body, segment): mean}}

    def error(self, body: str, segment: str) -> float:
        return self.errors[(body, segment)].mean

    def to_text(self) -> str:
        lines = [f"framework: {self.framework}",
                 f"warm-up excluded: first {self.warmup:g} s",
                 "", "Euclidean tracking error [cm]",
                 f"{'body':<10}{'segment':<10}{'mean':>10}{'max':>10}{'samples':>10}"]
        for (body, seg), st in sorted(self.errors.items()):
            lines.append(f"{body:<10}{seg:<10}{100 * st.mean:>10.2f}{100 * st.max:>10.2f}{st.count:>10d}")
        if self.per_lap:
            lines += ["", "per-lap mean error [cm]"]
            for lap, vals in sorted(self.per_lap.items()):
                cells = "  ".join(f"{b}/{s}={100 * v:.2f}" for (b, s), v in sorted(vals.items()))
                lines.append(f"lap {lap}: {cells}")
        lines += ["", "Execution time [ms]",
                  f"{'component':<12}{'phase':<14}{'mean':>10}{'max':>10}"]
        for comp, phases in self.timing.items():
            for phase, (mean, mx) in phases.items():
                lines.append(f"{comp:<12}{phase:<14}{mean:>10.4f}{mx:>10.4f}")
        lines.append(f"{'critical':<12}{'path':<14}{self.critical_mean_ms:>10.4f}"
                     f"{self.critical_max_ms:>10.4f}")
        lines += ["", "KKT residual"]
        for comp, (mean, frac) in self.kkt.items():
            lines.append(f"{comp:<12} mean {mean:.3e}   share <= 1e-2: {100 * frac:.1f}%")
        return "\n".join(lines) + "\n"


COMPONENTS = {"nmhe-nmpc": ("NMHE", "NMPC"), "isl-lmpc": ("EKF", "LMPC")}


def compute_metrics(simlog: SimLog, traj: Optional[TimedReference] = None,
                    warmup: float = 5.0) -> Metrics:
    """Aggregate time-based Euclidean errors, timings and KKT residuals.

    When ``traj`` is given the reference is re-evaluated from it at every
    logged time; otherwise the logged reference columns are used.
    """
    if len(simlog) == 0:
        raise ValueError("cannot compute metrics of an empty log")
    t = simlog.column("t")
    seg = simlog.column("segment")
    if any(s not in ("straight", "curve") for s in seg):
        raise ValueError("every log row needs a straight/curve segment label")
    keep = t >= warmup - 1e-9
    if not np.any(keep):
        raise ValueError("no samples after the warm-up period")
    if traj is not None:
        ref = traj.evaluate(t)[0]
        ref_t, ref_i = ref[:, 0:2], ref[:, 3:5]
    else:
        ref_t = np.column_stack([simlog.column("ref_x_t"), simlog.column("ref_y_t")])
        ref_i = np.column_stack([simlog.column("ref_x_i"), simlog.column("ref_y_i")])
    act_t = np.column_stack([simlog.column("true_x_t"), simlog.column("true_y_t")])
    act_i = np.column_stack([simlog.column("true_x_i"), simlog.column("true_y_i")])
    err = {"tractor": np.linalg.norm(act_t - ref_t, axis=1),
           "trailer": np.linalg.norm(act_i - ref_i, axis=1)}
    errors = {}
    for body, e in err.items():
        for s in ("straight", "curve"):
            m = keep & (seg == s)
            if np.any(m):
                errors[(body, s)] = ErrorStats(float(np.mean(e[m])), float(np.max(e[m])), int(m.sum()))
    per_lap = {}
    lap_time = simlog.meta.get("lap_time") or (traj.lap_time if traj is not None else None)
    if lap_time:
        lap = np.floor(t / lap_time + 1e-9).astype(int)
        for L in np.unique(lap[keep]):
            vals = {}
            for body, e in err.items():
                for s in ("straight", "curve"):
                    m = keep & (seg == s) & (lap == L)
                    if np.any(m):
                        vals[(body, s)] = float(np.mean(e[m]))
            per_lap[int(L) + 1] = vals
    est_name, ctl_name = COMPONENTS.get(simlog.framework, ("estimator", "controller"))

    def stats(col):
        v = simlog.column(col)[keep]
        return float(np.mean(v)), float(np.max(v))

    timing = {}
    for name, pre in ((est_name, "est"), (ctl_name, "ctl")):
        prep = simlog.column(f"{pre}_prep_ms")[keep]
        fb = simlog.column(f"{pre}_feedback_ms")[keep]
        total = prep + fb
        timing[name] = {"preparation": (float(prep.mean()), float(prep.max())),
                        "feedback": (float(fb.mean()), float(fb.max())),
                        "overall": (float(total.mean()), float(total.max()))}
    kkt = {}
    for name, pre in ((est_name, "est"), (ctl_name, "ctl")):
        v = simlog.column(f"{pre}_kkt")[keep]
        v = v[np.isfinite(v)]
        if v.size:
            kkt[name] = (float(v.mean()), float(np.mean(v <= 1e-2)))
    crit = simlog.column("critical_ms")[keep]
    return Metrics(simlog.framework, warmup, errors, timing, kkt, float(crit.max()),
                   float(crit.mean()), per_lap)


def compare_table(a: Metrics, b: Metrics) -> str:
    """Side-by-side execution-time and error tables for two runs."""
    lines = ["Execution times [ms] (mean / max)",
             f"{'component':<12}{'phase':<14}{a.framework:>24}{b.framework:>24}"]
    for m, other in ((a, b), (b, a)):
        for comp, phases in m.timing.items():
            for phase, (mean, mx) in phases.items():
                cell = f"{mean:.4f} / {mx:.4f}"
                left, right = (cell, "-") if m is a else ("-", cell)
                lines.append(f"{comp:<12}{phase:<14}{left:>24}{right:>24}")
    lines += ["", "Mean Euclidean error [cm]",
              f"{'body':<10}{'segment':<10}{a.framework:>14}{b.framework:>14}"]
    for key in sorted(set(a.errors) & set(b.errors)):
        lines.append(f"{key[0]:<10}{key[1]:<10}{100 * a.errors[key].mean:>14.2f}"
                     f"{100 * b.errors[key].mean:>14.2f}")
    lines += ["", "Mean KKT residual"]
    for m in (a, b):
        for comp, (mean, _) in m.kkt.items():
            lines.append(f"{m.framework:<12}{comp:<8}{mean:.3e}")
    return "\n".join(lines) + "\n"


def write_run_outputs(simlog: SimLog, cfg: RunConfig, out_dir) -> Metrics:
    """Write ``log.csv``, ``metrics.txt``, ``trajectory.csv`` (and ``horizon.csv``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = build_eight(cfg.trajectory, cfg.dt)
    simlog.to_csv(out / "log.csv")
    traj.to_csv(out / "trajectory.csv")
    metrics = compute_metrics(simlog, traj, cfg.warmup)
    (out / "metrics.txt").write_text(metrics.to_text())
    if simlog.horizons:
        with (out / "horizon.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("k", "node") + STATE_NAMES)
            for k, X in simlog.horizons:
                for j, x in enumerate(X):
                    w.writerow([k, j, *(repr(float(v)) for v in x)])
    return metrics


# -- configuration file ----------------------------------------------------------------
def _floats(text, n=None):
    vals = tuple(float(v) for v in text.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers")
    return vals


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


# key -> (section, field, parser)
CONFIG_KEYS = {
    "framework": (None, "framework", str),
    "seed": (None, "seed", int),
    "laps": (None, "laps", float),
    "duration": (None, "duration", float),
    "dt": (None, "dt", float),
    "horizon_steps": (None, "horizon_steps", int),
    "noise_scale": (None, "noise_scale", float),
    "plant_substeps": (None, "plant_substeps", int),
    "controller_substeps": (None, "controller_substeps", int),
    "arrival_forgetting": (None, "arrival_forgetting", float),
    "terminal_factor": (None, "terminal_factor", float),
    "hp_move_scale": (None, "hp_move_scale", float),
    "lmpc_symmetric_trailer": (None, "lmpc_symmetric_trailer", _bool),
    "initial_speed": (None, "initial_speed", float),
    "warmup": (None, "warmup", float),
    "threads": (None, "threads", int),
    "dump_horizon": (None, "dump_horizon", _bool),
    "straight_len": ("trajectory", "straight_len", float),
    "arc_radius": ("trajectory", "arc_radius", float),
    "ref_speed": ("trajectory", "ref_speed", float),
    "start_pose": ("trajectory", "start_pose", lambda s: _floats(s, 3)),
    "sigma_pos": ("noise", "sigma_pos", float),
    "sigma_v": ("noise", "sigma_v", float),
    "sigma_delta_t": ("noise", "sigma_delta_t", float),
    "sigma_delta_i": ("noise", "sigma_delta_i", float),
    "sigma_hp": ("noise", "sigma_hp", float),
    "sigma_beta": ("noise", "sigma_beta", float),
    "traction_mode": ("traction", "mode", str),
    "traction_mean": ("traction", "mean", float),
    "traction_amplitude": ("traction", "amplitude", float),
    "traction_period": ("traction", "period", float),
    "traction_noise": ("traction", "noise", float),
    "traction_lo": ("traction", "lo", float),
    "traction_hi": ("traction", "hi", float),
    "traction_constant": ("traction", "constant", lambda s: _floats(s, 3)),
    "beta_mode": ("beta", "mode", str),
    "beta_offset": ("beta", "offset", float),
    "beta_amplitude": ("beta", "amplitude", float),
    "beta_period": ("beta", "period", float),
    "L_t": ("constants", "L_t", float),
    "L_i": ("constants", "L_i", float),
    "L_d": ("constants", "L_d", float),
    "tau": ("constants", "tau", float),
    "K": ("constants", "K", float),
}


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """Parse the flat ``key = value`` format (``#`` starts a comment)."""
    top, sections = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        section, name, parser = CONFIG_KEYS[key]
        try:
            parsed = parser(value)
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key!r}: {exc}") from None
        (top if section is None else sections.setdefault(section, {}))[name] = parsed
    try:
        for section, values in sections.items():
            top[section] = replace(getattr(base, section), **values)
        cfg = replace(base, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None
    cfg.validate()
    return cfg


def load_config(path, base: RunConfig = RunConfig()) -> RunConfig:
    return parse_config(Path(path).read_text(), base)
