"""Experiment configuration and the pipeline from config to closed-loop run.

A configuration is a nested mapping (YAML on disk). Parsing fills in
defaults and validates every field, so ``parse(emit(cfg)) == cfg``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import ddmpc, model, presets, statefb, trajectory
from .sim import NoiseModel, RunResult, run_output_feedback, run_state_feedback
from .trigger_output import (RhoBounds, TriggerParams, estimate_rho_bounds,
                             extended_state_rows, precompute_trigger_params)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


MODES = ("output-feedback", "state-feedback")

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "mode": "output-feedback",
    "T": 200,
    "x0": None,
    "out": "out",
    "plant": {"preset": None, "dt": None, "A": None, "B": None, "C": None, "D": None},
    "data": {"N": 800, "order": None, "seed": 1, "x0": None, "prestabilize": False},
    "noise": {"bound": 0.0015, "distribution": "uniform-ball", "seed": 0},
    "output_feedback": {
        "L": 11, "eta": None, "Q": None, "R": None,
        "lambda_g_nbar": 1e-6, "lambda_h_over_nbar": 500.0,
        "u_min": None, "u_max": None, "u_e": None, "y_e": None,
        "sigma": 0.88, "terminal": "oracle", "terminal_margin": 1e-3,
        "sqrt_radius": False, "error_index": "window",
    },
    "state_feedback": {
        "L": 20, "sigma": 0.27, "kappa": 0.1, "mu": 200.0, "K": None,
        "lqr_Q": None, "lqr_R": None, "use_norm_condition": True,
    },
}

TERMINAL_KEYS = ("P", "K", "eps", "P_r", "K_r", "r")


def _merge(defaults: dict, given: dict, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{sorted(unknown)[0]}: unknown field")
    out = {}
    for key, dflt in defaults.items():
        val = given.get(key, copy.deepcopy(dflt))
        if isinstance(dflt, dict) and val is not None:
            val = _merge(dflt, val, f"{path}.{key}" if path else key)
        out[key] = val
    return out


def _num(val, field: str, positive=False, nonneg=False, integer=False):
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{field}: expected a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(f"{field}: expected an integer, got {val!r}")
    if positive and not val > 0:
        raise ConfigError(f"{field}: must be positive")
    if nonneg and not val >= 0:
        raise ConfigError(f"{field}: must be nonnegative")
    return int(val) if integer else float(val)


def _matrix(val, field: str, shape=None):
    try:
        M = np.atleast_2d(np.asarray(val, dtype=float))
    except (TypeError, ValueError):
        raise ConfigError(f"{field}: expected a numeric matrix") from None
    if M.ndim != 2 or not np.all(np.isfinite(M)):
        raise ConfigError(f"{field}: expected a finite 2-D matrix")
    if shape is not None and M.shape != shape:
        raise ConfigError(f"{field}: expected shape {shape}, got {M.shape}")
    return M


def _vector(val, field: str, n=None):
    try:
        v = np.asarray(val, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ConfigError(f"{field}: expected a numeric vector") from None
    if n is not None and v.size == 1 and n > 1:
        v = np.full(n, v[0])
    if n is not None and v.size != n:
        raise ConfigError(f"{field}: expected length {n}, got {v.size}")
    return v


def _plain(x):
    """Numpy values to plain YAML-friendly Python."""
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully resolved experiment configuration."""

    data: dict

    def __getitem__(self, key):
        return self.data[key]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.data == other.data

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       sigma: float | None = None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["noise"]["seed"] = int(seed)
        if out is not None:
            d["out"] = str(out)
        if sigma is not None:
            key = "output_feedback" if d["mode"] == "output-feedback" else "state_feedback"
            d[key]["sigma"] = float(sigma)
        return parse_config(d)

    def plant(self) -> model.LtiSystem:
        p = self.data["plant"]
        if p["preset"] is not None:
            return presets.preset(p["preset"], p["dt"])
        A, B = np.asarray(p["A"], float), np.asarray(p["B"], float)
        if p["C"] is None:
            return model.LtiSystem.state_feedback(A, B)
        return model.LtiSystem(A, B, np.asarray(p["C"], float), np.asarray(p["D"], float))

    def json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))


def parse_config(raw: dict) -> ExperimentConfig:
    """Fill defaults and validate; raises :class:`ConfigError` per field."""
    d = _merge(DEFAULTS, raw or {}, "")
    if d["mode"] not in MODES:
        raise ConfigError(f"mode: must be one of {MODES}")
    d["T"] = _num(d["T"], "T", nonneg=True, integer=True)
    d["name"] = str(d["name"])
    d["out"] = str(d["out"])

    p = d["plant"]
    if p["preset"] is not None:
        if p["preset"] not in presets.PRESETS:
            raise ConfigError(f"plant.preset: unknown preset {p['preset']!r}")
        if any(p[k] is not None for k in "ABCD"):
            raise ConfigError("plant: give either a preset or matrices, not both")
        if p["dt"] is not None:
            p["dt"] = _num(p["dt"], "plant.dt", positive=True)
    else:
        if p["A"] is None or p["B"] is None:
            raise ConfigError("plant.A: required when no preset is given")
        A = _matrix(p["A"], "plant.A")
        B = _matrix(p["B"], "plant.B")
        if (p["C"] is None) != (p["D"] is None):
            raise ConfigError("plant.C: give C and D together")
        try:
            if p["C"] is None:
                model.LtiSystem.state_feedback(A, B)
            else:
                model.LtiSystem(A, B, _matrix(p["C"], "plant.C"), _matrix(p["D"], "plant.D"))
        except ValueError as exc:
            raise ConfigError(f"plant: {exc}") from None
        for k in "ABCD":
            if p[k] is not None:
                p[k] = _matrix(p[k], f"plant.{k}").tolist()
    cfg = ExperimentConfig(d)
    try:
        sys = cfg.plant()
    except ValueError as exc:
        raise ConfigError(f"plant: {exc}") from None

    dd = d["data"]
    dd["N"] = _num(dd["N"], "data.N", positive=True, integer=True)
    dd["seed"] = _num(dd["seed"], "data.seed", nonneg=True, integer=True)
    dd["prestabilize"] = bool(dd["prestabilize"])
    if dd["x0"] is not None:
        dd["x0"] = _vector(dd["x0"], "data.x0", sys.n_x).tolist()
    if dd["order"] is not None:
        dd["order"] = _num(dd["order"], "data.order", positive=True, integer=True)

    nz = d["noise"]
    nz["bound"] = _num(nz["bound"], "noise.bound", nonneg=True)
    if nz["distribution"] not in ("uniform-ball", "zero"):
        raise ConfigError("noise.distribution: must be 'uniform-ball' or 'zero'")
    nz["seed"] = _num(nz["seed"], "noise.seed", nonneg=True, integer=True)
    if d["x0"] is not None:
        d["x0"] = _vector(d["x0"], "x0", sys.n_x).tolist()

    if d["mode"] == "output-feedback":
        _parse_output_feedback(d, sys)
        d["state_feedback"] = None
    else:
        if not sys.is_state_output:
            raise ConfigError("mode: state feedback needs a plant with C = I and D = 0")
        _parse_state_feedback(d, sys)
        d["output_feedback"] = None
    return ExperimentConfig(d)


def _parse_output_feedback(d: dict, sys: model.LtiSystem) -> None:
    o = d["output_feedback"]
    if o is None:
        raise ConfigError("output_feedback: section required for this mode")
    o["L"] = _num(o["L"], "output_feedback.L", positive=True, integer=True)
    if o["eta"] is None:
        try:
            o["eta"] = model.observability_index(sys)
        except model.UnobservableError:
            raise ConfigError("plant: (C, A) is unobservable") from None
    o["eta"] = _num(o["eta"], "output_feedback.eta", positive=True, integer=True)
    if o["L"] < o["eta"] + 1:
        raise ConfigError(f"output_feedback.L: must be >= eta + 1 = {o['eta'] + 1}")
    n_u, n_y = sys.n_u, sys.n_y
    o["Q"] = _matrix(np.eye(n_y) if o["Q"] is None else o["Q"], "output_feedback.Q",
                     (n_y, n_y)).tolist()
    o["R"] = _matrix(np.eye(n_u) if o["R"] is None else o["R"], "output_feedback.R",
                     (n_u, n_u)).tolist()
    for key in ("lambda_g_nbar", "lambda_h_over_nbar", "terminal_margin"):
        o[key] = _num(o[key], f"output_feedback.{key}", positive=True)
    for key, default, n in (("u_min", -np.inf, n_u), ("u_max", np.inf, n_u),
                            ("u_e", 0.0, n_u), ("y_e", 0.0, n_y)):
        val = default if o[key] is None else o[key]
        o[key] = _vector(val, f"output_feedback.{key}", n).tolist()
    o["sigma"] = _num(o["sigma"], "output_feedback.sigma")
    if not 0 < o["sigma"] < 1:
        raise ConfigError("output_feedback.sigma: must lie in (0, 1)")
    o["sqrt_radius"] = bool(o["sqrt_radius"])
    if o["error_index"] not in ("window", "shifted"):
        raise ConfigError("output_feedback.error_index: must be 'window' or 'shifted'")
    if d["noise"]["bound"] <= 0:
        raise ConfigError("noise.bound: the MPC weights need a positive noise bound")
    if o["terminal"] != "oracle":
        t = o["terminal"]
        if not isinstance(t, dict) or set(t) != set(TERMINAL_KEYS):
            raise ConfigError(f"output_feedback.terminal: 'oracle' or a mapping with {TERMINAL_KEYS}")
        o["terminal"] = {k: _plain(np.asarray(t[k], float)) for k in TERMINAL_KEYS}
    try:
        mpc_config(d, sys)
    except ValueError as exc:
        raise ConfigError(f"output_feedback: {exc}") from None
    order = o["L"] + sys.n_x + o["eta"]
    _check_data_length(d, sys, order)


def _parse_state_feedback(d: dict, sys: model.LtiSystem) -> None:
    s = d["state_feedback"]
    if s is None:
        raise ConfigError("state_feedback: section required for this mode")
    s["L"] = _num(s["L"], "state_feedback.L", integer=True)
    if s["L"] < 2:
        raise ConfigError("state_feedback.L: must be >= 2")
    s["sigma"] = _num(s["sigma"], "state_feedback.sigma")
    if not 0 < s["sigma"] < 1:
        raise ConfigError("state_feedback.sigma: must lie in (0, 1)")
    s["kappa"] = _num(s["kappa"], "state_feedback.kappa", positive=True)
    s["mu"] = _num(s["mu"], "state_feedback.mu", positive=True)
    s["use_norm_condition"] = bool(s["use_norm_condition"])
    if s["K"] is not None:
        s["K"] = _matrix(s["K"], "state_feedback.K", (sys.n_u, sys.n_x)).tolist()
    s["lqr_Q"] = _matrix(np.eye(sys.n_x) if s["lqr_Q"] is None else s["lqr_Q"],
                         "state_feedback.lqr_Q", (sys.n_x, sys.n_x)).tolist()
    s["lqr_R"] = _matrix(np.eye(sys.n_u) if s["lqr_R"] is None else s["lqr_R"],
                         "state_feedback.lqr_R", (sys.n_u, sys.n_u)).tolist()
    _check_data_length(d, sys, s["L"] + sys.n_x + 1)


def _check_data_length(d: dict, sys: model.LtiSystem, order: int) -> None:
    dd = d["data"]
    if dd["order"] is None:
        dd["order"] = order
    elif dd["order"] < order:
        raise ConfigError(f"data.order: must be >= {order} for this horizon")
    need = trajectory.min_length_for_pe(sys.n_u, dd["order"])
    if dd["N"] < need:
        raise ConfigError(f"data.N: {dd['N']} too short for PE of order {dd['order']}; "
                          f"need N >= {need}")


def mpc_config(d: dict | ExperimentConfig, sys: model.LtiSystem) -> ddmpc.MpcConfig:
    d = d.data if isinstance(d, ExperimentConfig) else d
    o = d["output_feedback"]
    return ddmpc.MpcConfig(
        L=o["L"], eta=o["eta"], Q=np.asarray(o["Q"]), R=np.asarray(o["R"]),
        lambda_g_nbar=o["lambda_g_nbar"], lambda_h_over_nbar=o["lambda_h_over_nbar"],
        noise_bound=d["noise"]["bound"], u_min=o["u_min"], u_max=o["u_max"],
        u_e=o["u_e"], y_e=o["y_e"])


def load_config(path_or_name: str) -> ExperimentConfig:
    """Read a YAML config file, or a shipped preset by name."""
    path = Path(path_or_name)
    if path.is_file():
        text = path.read_text()
    else:
        name = path_or_name if path_or_name.endswith(".yaml") else f"{path_or_name}.yaml"
        res = resources.files("ddstc") / "configs" / name
        if not res.is_file():
            raise ConfigError(f"config: no file or preset named {path_or_name!r}")
        text = res.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: malformed YAML: {exc}") from None
    return parse_config(raw)


def emit_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def shipped_presets() -> list[str]:
    root = resources.files("ddstc") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


# ---------------------------------------------------------------------------
# pipeline


def collect_data(cfg: ExperimentConfig) -> trajectory.TrajectoryData:
    """Generate the offline experiment described by ``cfg``."""
    sys = cfg.plant()
    dd = cfg["data"]
    u = trajectory.generate_pe_input(sys.n_u, dd["N"], dd["order"], dd["seed"])
    F = None
    if dd["prestabilize"]:
        F = state_gain(cfg, sys) if cfg["mode"] == "state-feedback" else \
            statefb.state_gain_oracle(sys)
    data = trajectory.collect_offline_data(sys, u, dd["x0"], feedback=F)
    if not trajectory.is_persistently_exciting(data.inputs, dd["order"]):
        raise trajectory.PersistencyError(
            f"recorded input is not persistently exciting of order {dd['order']}")
    return data


def state_gain(cfg: ExperimentConfig, sys: model.LtiSystem) -> np.ndarray:
    s = cfg["state_feedback"]
    if s["K"] is not None:
        return np.asarray(s["K"], dtype=float)
    return statefb.state_gain_oracle(sys, np.asarray(s["lqr_Q"]), np.asarray(s["lqr_R"]))


@dataclass
class OutputFeedbackSetup:
    sys: model.LtiSystem
    cfg: ddmpc.MpcConfig
    term: ddmpc.TerminalIngredients
    trig: TriggerParams
    rho: RhoBounds


def prepare_output_feedback(cfg: ExperimentConfig, data: trajectory.TrajectoryData,
                            rho: RhoBounds | None = None) -> OutputFeedbackSetup:
    """Terminal ingredients, gain bounds and trigger constants for a run.

    Raises:
        ConfigError: if user-supplied terminal ingredients fail validation.
    """
    sys = cfg.plant()
    mc = mpc_config(cfg, sys)
    o = cfg["output_feedback"]
    L, eta = mc.L, mc.eta
    Hu = trajectory.hankel(data.inputs, L + eta)
    Hy = trajectory.hankel(data.outputs, L + eta)
    ext = model.extended_system(sys, eta)
    if o["terminal"] == "oracle":
        term = ddmpc.terminal_ingredients_oracle(ext, mc.Q, mc.R, L, mc.u_min, mc.u_max,
                                                 mc.u_e, margin=o["terminal_margin"])
    else:
        t = o["terminal"]
        term = ddmpc.TerminalIngredients(np.asarray(t["P"]), np.asarray(t["K"]), t["eps"],
                                         np.asarray(t["P_r"]), np.asarray(t["K_r"]), t["r"])
        samples = ddmpc.sample_ellipsoid_boundary(term.P, term.eps, 1000)
        chk = ddmpc.check_terminal_assumption(term, ext, mc.Q, mc.R, samples,
                                              mc.u_min, mc.u_max, mc.u_e)
        if not chk.ok or not term.radii_compatible(mc.R, L):
            raise ConfigError("output_feedback.terminal: supplied ingredients fail "
                              f"validation (margin {chk.margin:.3e})")
    if rho is None:
        rho = estimate_rho_bounds(Hu, Hy, eta, L)
    Xi = extended_state_rows(data.inputs, data.outputs, L, eta)
    trig = precompute_trigger_params(Hu, Xi, mc.Q, mc.R, term, o["sigma"], eta,
                                     sqrt_radius=o["sqrt_radius"],
                                     error_index=o["error_index"])
    return OutputFeedbackSetup(sys, mc, term, trig, rho)


def state_feedback_config(cfg: ExperimentConfig, sys=None) -> statefb.StateFbConfig:
    sys = sys or cfg.plant()
    s = cfg["state_feedback"]
    return statefb.StateFbConfig(state_gain(cfg, sys), s["L"], s["sigma"],
                                 cfg["noise"]["bound"], s["kappa"], s["mu"],
                                 s["use_norm_condition"])


def run_experiment(cfg: ExperimentConfig, data: trajectory.TrajectoryData,
                   setup: OutputFeedbackSetup | None = None) -> RunResult:
    """Run the closed loop described by ``cfg`` on ``data``."""
    sys = cfg.plant()
    nz = cfg["noise"]
    noise = NoiseModel(nz["bound"], nz["distribution"], nz["seed"])
    x0 = np.zeros(sys.n_x) if cfg["x0"] is None else np.asarray(cfg["x0"])
    if cfg["mode"] == "output-feedback":
        setup = setup or prepare_output_feedback(cfg, data)
        res = run_output_feedback(sys, data, setup.cfg, setup.term, setup.trig, setup.rho,
                                  noise, x0, cfg["T"])
    else:
        res = run_state_feedback(sys, data, state_feedback_config(cfg, sys), noise, x0,
                                 cfg["T"])
    res.meta["config"] = cfg.json()
    return res
