"""Closed-loop simulation of the self-triggered controllers.

Only the sensor-to-controller channel is imperfect: every output (or
state) measurement is corrupted by bounded noise, and the sensor sends
packets only at triggering times. Inputs reach the plant exactly.
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ddmpc, statefb
from .ddmpc import MpcConfig, TerminalIngredients
from .model import LtiSystem
from .trajectory import TrajectoryData, hankel, is_persistently_exciting
from .trigger_output import (RhoBounds, TriggerParams, next_trigger_time,
                             prediction_error_bound)

log = logging.getLogger(__name__)


class NoiseDistribution(str, enum.Enum):
    UNIFORM_BALL = "uniform-ball"
    ZERO = "zero"


@dataclass(frozen=True)
class NoiseModel:
    """Measurement noise with ``||n_t|| <= bound``."""

    bound: float
    distribution: NoiseDistribution = NoiseDistribution.UNIFORM_BALL
    seed: int = 0

    def __post_init__(self):
        if not self.bound >= 0:
            raise ValueError("noise bound must be nonnegative")
        object.__setattr__(self, "distribution", NoiseDistribution(self.distribution))

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_noise(model: NoiseModel, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One draw, uniform on the Euclidean ball of radius ``model.bound``.

    The direction is a normalized Gaussian and the radius follows the
    ``U^(1/dim)`` law.
    """
    if model.distribution is NoiseDistribution.ZERO or model.bound == 0:
        return np.zeros(dim)
    v = rng.standard_normal(dim)
    nv = np.linalg.norm(v)
    while nv == 0.0:
        v = rng.standard_normal(dim)
        nv = np.linalg.norm(v)
    radius = model.bound * rng.uniform() ** (1.0 / dim)
    n = v * (radius / nv)
    norm = np.linalg.norm(n)
    if norm > model.bound:
        n *= model.bound / norm
    return n


def noise_sequence(model: NoiseModel, dim: int, count: int) -> np.ndarray:
    """``count`` consecutive draws of the seeded stream."""
    rng = model.rng()
    return np.array([sample_noise(model, dim, rng) for _ in range(count)]).reshape(count, dim)


@dataclass
class EventLog:
    """Triggering history of a closed-loop run.

    ``audits`` holds, per completed inter-trigger interval, the realized
    prediction error and the bound it was checked against.
    """

    eta: int = 1
    trigger_times: list[int] = field(default_factory=list)
    inter_trigger: list[int] = field(default_factory=list)
    measurements_per_packet: list[int] = field(default_factory=list)
    costs: list[float] = field(default_factory=list)
    audits: list[dict] = field(default_factory=list)
    threshold_violated: list[bool] = field(default_factory=list)
    feasibility_violations: list[int] = field(default_factory=list)

    @property
    def packets_sent(self) -> int:
        return len(self.trigger_times)

    @property
    def measurements_sent(self) -> int:
        return int(sum(self.measurements_per_packet))

    def record_trigger(self, t: int) -> None:
        """Log a packet at time ``t``.

        A packet carries the ``eta`` most recent measurements, except that
        samples already delivered by the previous packet are not resent.
        """
        if self.trigger_times:
            prev = self.trigger_times[-1]
            if t <= prev:
                raise ValueError("trigger times must increase")
            self.inter_trigger.append(t - prev)
            new = min(self.eta, t - prev)
        else:
            new = self.eta
        self.trigger_times.append(t)
        self.measurements_per_packet.append(new)


@dataclass
class RunResult:
    """Trajectories (states ``T+1``, inputs and outputs ``T``) and the event log."""

    states: np.ndarray
    inputs: np.ndarray
    outputs: np.ndarray
    received: np.ndarray
    log: EventLog
    mode: str
    reference: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def feasible(self) -> bool:
        return not self.log.feasibility_violations

    def triggered_mask(self) -> np.ndarray:
        mask = np.zeros(self.T, dtype=int)
        for t in self.log.trigger_times:
            if t < self.T:
                mask[t] = 1
        return mask


def _free_run(sys: LtiSystem, x0, u, steps: int):
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    us, ys = [], []
    for _ in range(steps):
        y = sys.C @ x + sys.D @ u
        us.append(np.array(u, dtype=float))
        ys.append(y)
        x = sys.A @ x + sys.B @ u
    return x, us, ys


def run_output_feedback(sys: LtiSystem, data: TrajectoryData, cfg: MpcConfig,
                        term: TerminalIngredients, trig: TriggerParams, rho: RhoBounds,
                        noise: NoiseModel, x0, T: int, tol: float = 1e-8,
                        check_data: bool = True) -> RunResult:
    """Self-triggered data-driven MPC in closed loop.

    Before ``t = 0`` the plant runs ``eta`` steps from ``x0`` under the
    equilibrium input so that the first packet exists. At each triggering
    time the MPC is solved from the last ``eta`` applied inputs and received
    outputs, its inputs are applied until the next trigger, and the next
    trigger time follows from the threshold tests.

    Args:
        sys: ground-truth plant (simulation only).
        data: offline trajectory.
        cfg, term, trig, rho: controller ingredients.
        noise: measurement-noise model; its seed fixes the noise stream.
        x0: plant state ``eta`` steps before ``t = 0``.
        T: closed-loop horizon.
        check_data: require persistency of excitation of order
            ``L + n_x + eta`` (uses the plant order, known to the harness).
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    eta, L = cfg.eta, cfg.L
    if check_data and not is_persistently_exciting(data.inputs, L + sys.n_x + eta):
        raise ValueError(f"data are not persistently exciting of order {L + sys.n_x + eta}")
    Hu = hankel(data.inputs, L + eta)
    Hy = hankel(data.outputs, L + eta)
    ddmpc.check_data_rank(cfg, Hu)
    basis = ddmpc.hankel_row_basis(Hu, Hy)

    n_y = sys.n_y
    total = T + eta
    nz = noise_sequence(noise, n_y, total)
    x, us, ys = _free_run(sys, x0, cfg.u_e, eta)
    states = [x.copy()]
    inputs, outputs = [], []
    all_u = list(us)
    all_y = list(ys)
    zeta = [ys[k] + nz[k] for k in range(eta)]
    log_ = EventLog(eta=eta)
    pending = None  # (solution, trigger time, tau) awaiting its audit
    plan = None
    t_next = 0
    plan_start = 0
    for t in range(T + 1):
        if t == t_next:
            if pending is not None:
                _audit_output(log_, pending, all_u, all_y, t, eta, trig, rho, cfg)
            if t == T and t > 0:
                break
            log_.record_trigger(t)
            u_past = np.array(all_u[-eta:])
            z_past = np.array(zeta[-eta:])
            sol = ddmpc.solve_mpc(cfg, Hu, Hy, u_past, z_past, term, tol=tol,
                                  check_rank=False, basis=basis)
            if sol.ok:
                dec = next_trigger_time(sol, trig, rho, cfg)
                tau = dec.tau
                log_.costs.append(sol.cost)
                log_.threshold_violated.append(dec.threshold_violated)
                plan = sol.u_bar[eta:]
                pending = (sol, t, tau)
            else:
                log_.feasibility_violations.append(t)
                log_.costs.append(np.nan)
                log_.threshold_violated.append(True)
                tau = 1
                plan = np.tile(cfg.u_e, (L, 1))
                pending = None
            plan_start = t
            t_next = t + tau
        if t == T:
            break
        u = plan[t - plan_start]
        y = sys.C @ x + sys.D @ u
        inputs.append(u.copy())
        outputs.append(y)
        all_u.append(u.copy())
        all_y.append(y)
        zeta.append(y + nz[eta + t])
        x = sys.A @ x + sys.B @ u
        states.append(x.copy())
    # output at time T, with the input the plan would apply next
    u_T = all_u[-1]
    y_T = sys.C @ x + sys.D @ u_T
    return RunResult(np.array(states), np.array(inputs).reshape(T, sys.n_u),
                     np.array(outputs).reshape(T, n_y),
                     np.array(zeta[eta:eta + T]).reshape(T, n_y), log_,
                     "output-feedback", np.asarray(cfg.y_e),
                     {"seed": noise.seed, "noise_bound": noise.bound,
                      "terminal_output": y_T.tolist()})


def _audit_output(log_: EventLog, pending, all_u, all_y, t, eta, trig, rho, cfg):
    """Compare the realized extended state with its prediction."""
    sol, t_l, tau = pending
    k = t + eta  # index of time t in the all_* buffers
    xi = np.concatenate([np.ravel(all_u[k - eta:k]), np.ravel(all_y[k - eta:k])])
    err = float(np.linalg.norm(xi - sol.xi_bar[tau]))
    log_.audits.append({
        "t": t_l, "tau": tau, "error": err,
        "bound": prediction_error_bound(sol, tau, rho, cfg.noise_bound, eta, "window"),
        "bound_shifted": prediction_error_bound(sol, tau, rho, cfg.noise_bound, eta,
                                                "shifted"),
    })


def run_state_feedback(sys: LtiSystem, data: TrajectoryData, cfg: statefb.StateFbConfig,
                       noise: NoiseModel, x0, T: int,
                       check_data: bool = True) -> RunResult:
    """Self-triggered state feedback ``u_t = K zeta_{t_l}`` in closed loop.

    The prediction uses order-``L`` Hankel matrices and the drift gains use
    order ``L + 1``. A prediction that the data cannot explain forces the
    next sample one step later and is logged as a threshold violation.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    L = cfg.L
    if not sys.is_state_output:
        raise ValueError("state feedback needs C = I and D = 0")
    if check_data and not is_persistently_exciting(data.inputs, L + sys.n_x + 1):
        raise ValueError(f"data are not persistently exciting of order {L + sys.n_x + 1}")
    Hu = hankel(data.inputs, L)
    Hx = hankel(data.outputs, L)
    basis = statefb.hankel_row_basis(Hu, Hx)
    rho = statefb.rho_bounds_state(hankel(data.inputs, L + 1), hankel(data.outputs, L + 1), L)

    n_x = sys.n_x
    nz = noise_sequence(noise, n_x, T + 1)
    x = np.asarray(x0, dtype=float).reshape(-1).copy()
    states, inputs, received = [x.copy()], [], []
    log_ = EventLog(eta=1)
    u = np.zeros(sys.n_u)
    t_next = 0
    pending = None
    for t in range(T + 1):
        zeta_t = x + nz[t]
        if t == t_next:
            if pending is not None:
                z_l, phi = pending
                log_.audits.append({"t": log_.trigger_times[-1],
                                    "tau": t - log_.trigger_times[-1],
                                    "error": float(np.max(np.abs(z_l - x))),
                                    "bound": phi})
            if t == T and t > 0:
                break
            log_.record_trigger(t)
            u = cfg.K @ zeta_t
            try:
                pred = statefb.worst_case_prediction(Hu, Hx, zeta_t, cfg.K, cfg.noise_bound,
                                                     basis=basis)
                dec = statefb.next_trigger_time_sf(pred, rho, zeta_t, cfg)
                tau = dec.tau
                log_.threshold_violated.append(not dec.norm_condition_met)
                pending = (zeta_t.copy(), float(dec.phi[tau - 1]))
            except statefb.PredictionInfeasible:
                tau = 1
                log_.threshold_violated.append(True)
                pending = None
            t_next = t + tau
        if t == T:
            break
        received.append(zeta_t if t in log_.trigger_times else np.full(n_x, np.nan))
        inputs.append(u.copy())
        x = sys.A @ x + sys.B @ u
        states.append(x.copy())
    return RunResult(np.array(states), np.array(inputs).reshape(T, sys.n_u),
                     np.array(states[:T]).reshape(T, n_x),
                     np.array(received).reshape(T, n_x), log_, "state-feedback",
                     np.zeros(n_x), {"seed": noise.seed, "noise_bound": noise.bound})


def metrics(run: RunResult) -> dict:
    """Transmission counts, mean inter-trigger time and terminal errors."""
    lg = run.log
    inter = lg.inter_trigger
    out = {
        "mode": run.mode,
        "T": run.T,
        "packets_sent": lg.packets_sent,
        "measurements_sent": lg.measurements_sent,
        "mean_inter_trigger": float(np.mean(inter)) if inter else math.nan,
        "threshold_violations": int(sum(lg.threshold_violated)),
        "feasibility_violations": len(lg.feasibility_violations),
        "audit_violations": sum(1 for a in lg.audits if a["error"] > a["bound"] * (1 + 1e-9) + 1e-12),
    }
    if run.mode == "output-feedback":
        y_T = np.asarray(run.meta["terminal_output"])
        out["terminal_error"] = float(np.linalg.norm(y_T - run.reference))
    else:
        out["terminal_error"] = float(np.max(np.abs(run.states[-1])))
    costs = [c for c in lg.costs if np.isfinite(c)]
    out["final_cost"] = costs[-1] if costs else math.nan
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def save_run(run: RunResult, out_dir, header: dict | None = None) -> dict[str, Path]:
    """Write a run as ``trajectory.csv``, ``events.csv`` and ``summary.txt``.

    The trajectory file uses the offline-data schema plus a ``triggered``
    column; outputs are the true plant outputs. ``header`` entries become
    ``# key=value`` lines in every file (config echo and seed).

    Returns:
        Mapping from file role to path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    head = {"seed": run.meta.get("seed"), **(header or {})}
    lines = [f"# {k}={v}\n" for k, v in head.items()]
    n_u, n_y = run.inputs.shape[1], run.outputs.shape[1]
    paths = {"trajectory": out / "trajectory.csv", "events": out / "events.csv",
             "summary": out / "summary.txt"}

    mask = run.triggered_mask()
    with paths["trajectory"].open("w", newline="") as fh:
        fh.writelines(lines)
        fh.write(f"# mode={run.mode}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"u{i}" for i in range(n_u)] + [f"y{i}" for i in range(n_y)]
                   + ["triggered"])
        for t in range(run.T):
            w.writerow([t] + [_fmt(float(v)) for v in run.inputs[t]]
                       + [_fmt(float(v)) for v in run.outputs[t]] + [int(mask[t])])

    lg = run.log
    audits = {a["t"]: a for a in lg.audits}
    with paths["events"].open("w", newline="") as fh:
        fh.writelines(lines)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["l", "t", "tau", "measurements", "cost", "threshold_violated",
                    "audit_error", "audit_bound"])
        times = lg.trigger_times
        for l, t in enumerate(times):
            tau = times[l + 1] - t if l + 1 < len(times) else run.T - t
            cost = lg.costs[l] if l < len(lg.costs) else math.nan
            a = audits.get(t, {})
            w.writerow([l, t, tau, lg.measurements_per_packet[l], _fmt(float(cost)),
                        int(lg.threshold_violated[l]) if l < len(lg.threshold_violated) else 0,
                        _fmt(float(a.get("error", math.nan))),
                        _fmt(float(a.get("bound", math.nan)))])

    m = metrics(run)
    with paths["summary"].open("w") as fh:
        fh.writelines(lines)
        for k, v in m.items():
            fh.write(f"{k}={_fmt(v)}\n")
        fh.write(f"feasibility_violated_at={','.join(map(str, lg.feasibility_violations))}\n")
        for k, v in head.items():
            fh.write(f"{k}={v}\n")
    return paths


def read_summary(path) -> dict[str, str]:
    """Parse the ``key=value`` lines of a summary file, skipping comments."""
    out = {}
    for line in Path(path).read_text().splitlines():
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k] = v
    return out
