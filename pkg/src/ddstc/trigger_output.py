"""Self-triggering for the output-feedback MPC.

Offline, linear programs on the Hankel data bound how an error in the
initial measurement window propagates to later outputs. Online, these
bounds and the MPC solution give the largest inter-triggering time for
which the terminal set stays reachable and the cost keeps decreasing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .ddmpc import MpcConfig, MpcSolution, TerminalIngredients
from .optim import ConvexProgram, Status, maximize_linear_many
from .trajectory import HankelMatrix

log = logging.getLogger(__name__)


SAFETY = 1e-8


class RhoEstimationError(RuntimeError):
    """A bound LP was unbounded or failed; the data rank is insufficient."""


@dataclass(frozen=True, eq=False)
class RhoBounds:
    """Data-based bounds on the window-to-output gains.

    ``row_bounds[d, k]`` is the largest ``|(y_d)_k|`` over zero-input
    trajectories whose first ``eta`` outputs have infinity norm at most one,
    for offsets ``d = 0 .. L + eta - 1`` from the window start. The gain
    bound for prediction step ``i`` sits at offset ``d = i + eta``.

    Attributes:
        row_bounds: per-coordinate maxima, shape ``(L + eta, n_y)``.
        eta: window length.
        L: prediction horizon.
    """

    row_bounds: np.ndarray
    eta: int
    L: int

    def J(self, i: int) -> float:
        """Spectral-norm bound for step ``i`` (``-eta <= i``), clamped at ``L - 1``.

        Every row of the gain matrix lies in the span of consistent windows,
        on which the unit Euclidean ball sits inside the unit cube; hence the
        root sum of squares of the coordinate maxima bounds the spectral norm.
        """
        if i < -self.eta:
            raise IndexError(f"step {i} precedes the measurement window")
        i = min(i, self.L - 1)
        return float(np.sqrt(np.sum(self.row_bounds[i + self.eta] ** 2)))

    def J_inf(self, i: int) -> float:
        """Induced infinity-norm bound for step ``i``, clamped at ``L - 1``."""
        if i < -self.eta:
            raise IndexError(f"step {i} precedes the measurement window")
        i = min(i, self.L - 1)
        return float(np.max(self.row_bounds[i + self.eta]))

    @property
    def values(self) -> np.ndarray:
        """``J(i)`` for ``i = 1 .. L-1``."""
        return np.array([self.J(i) for i in range(1, self.L)])


def estimate_rho_bounds(Hu: HankelMatrix, Hy: HankelMatrix, eta: int, L: int,
                        tol: float = 1e-9) -> RhoBounds:
    """Solve the bound LPs for every offset of the order ``L + eta`` Hankels.

    For offset ``d`` the program maximizes ``+-(y_d)_k`` over ``g`` subject
    to ``H_{d+1}(u) g = 0`` and ``||H_eta(y) g||_inf <= 1``. Each optimum is
    raised by ``SAFETY * (1 + |value|)`` so that solver inaccuracy cannot
    turn an upper bound into an underestimate.

    Raises:
        RhoEstimationError: if any LP is unbounded or fails.
    """
    if Hu.L != L + eta or Hy.L != L + eta:
        raise ValueError(f"Hankel matrices must have order L + eta = {L + eta}")
    n_g, n_y = Hu.cols, Hy.m
    n_w = eta * n_y
    n = n_g + n_w
    Yw = Hy.rows(0, eta)
    win = np.hstack([Yw, -np.eye(n_w)])
    lower = np.concatenate([np.full(n_g, -np.inf), -np.ones(n_w)])
    upper = np.concatenate([np.full(n_g, np.inf), np.ones(n_w)])
    bounds = np.zeros((L + eta, n_y))
    for d in range(L + eta):
        A_eq = np.vstack([np.hstack([Hu.rows(0, d + 1), np.zeros(((d + 1) * Hu.m, n_w))]),
                          win])
        prog = ConvexProgram(np.zeros(n), None, A_eq, np.zeros(A_eq.shape[0]),
                             lower, upper, sense="maximize-linear")
        obj = np.hstack([Hy.rows(d, 1), np.zeros((n_y, n_w))])
        results = maximize_linear_many(np.vstack([obj, -obj]), prog, tol=tol)
        for j, res in enumerate(results):
            if res.status is not Status.OPTIMAL:
                raise RhoEstimationError(
                    f"bound LP at offset {d} returned {res.status.value}; "
                    "the data may not be persistently exciting")
            k = j % n_y
            val = res.objective + SAFETY * (1.0 + abs(res.objective))
            bounds[d, k] = max(bounds[d, k], val, 0.0)
    bounds.setflags(write=False)
    return RhoBounds(bounds, eta, L)


def prediction_error_bound(sol: MpcSolution, tau: int, rho: RhoBounds, nbar: float,
                           eta: int, index: str = "window") -> float:
    """Bound on ``||xi_{t+tau} - xi_bar*_tau||`` for the realized trajectory.

    The gain terms cover the outputs inside the extended state at step
    ``tau``. With ``index="window"`` these are steps ``tau-eta .. tau-1``,
    which is where the window error actually propagates. ``index="shifted"``
    uses steps ``tau .. tau+eta-1`` instead.

    Args:
        sol: optimal MPC solution at the triggering time.
        tau: candidate inter-triggering time, ``1 <= tau <= L-1``.
        rho: data-based gain bounds.
        nbar: noise bound.
        eta: window length.
        index: ``"window"`` or ``"shifted"``.
    """
    L = rho.L
    if not 1 <= tau <= L - 1:
        raise ValueError(f"tau={tau} outside 1..{L - 1}")
    if index == "window":
        steps = range(tau - eta, tau)
    elif index == "shifted":
        steps = range(tau, tau + eta)
    else:
        raise ValueError(f"unknown index convention {index!r}")
    gain = np.sqrt(sum(rho.J(i) ** 2 for i in steps))
    h_past = np.linalg.norm(sol.h_window(-eta, -1))
    h_now = np.linalg.norm(sol.h_window(tau - eta, tau - 1))
    return float((np.sqrt(eta) * nbar + h_past) * gain + h_now)


@dataclass(frozen=True)
class TriggerParams:
    """Constants of the triggering thresholds.

    Attributes:
        sigma: decrease factor in ``(0, 1)``.
        r, eps: terminal radii.
        H_pinv_norm: ``||H_uxi^+||``.
        lam_Q, lam_Pr: largest eigenvalues of ``Q`` and ``P_r``.
        lam_R: smallest eigenvalue of ``R``.
        sqrt_radius: compare the error bound with ``r / sqrt(lam_Pr)``
            instead of ``r / lam_Pr``.
        error_index: index convention of :func:`prediction_error_bound`.
    """

    sigma: float
    r: float
    eps: float
    H_pinv_norm: float
    lam_Q: float
    lam_Pr: float
    lam_R: float
    sqrt_radius: bool = False
    error_index: str = "window"

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if self.error_index not in ("window", "shifted"):
            raise ValueError(f"unknown index convention {self.error_index!r}")

    @property
    def radius_threshold(self) -> float:
        return self.r / (np.sqrt(self.lam_Pr) if self.sqrt_radius else self.lam_Pr)


def extended_state_rows(inputs, outputs, L: int, eta: int) -> np.ndarray:
    """``H_1`` of the initial extended states aligned with the ``L + eta`` Hankel.

    Column ``j`` is ``[u_{j..j+eta-1}; y_{j..j+eta-1}]``.
    """
    U = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
    Y = np.asarray(outputs, dtype=float).reshape(len(outputs), -1)
    cols = U.shape[0] - L - eta + 1
    if cols < 1:
        raise ValueError("data too short for the requested horizon")
    return np.vstack([np.hstack([U[j:j + eta].reshape(-1, 1) for j in range(cols)]),
                      np.hstack([Y[j:j + eta].reshape(-1, 1) for j in range(cols)])])


def assemble_H_uxi(Hu: HankelMatrix, Xi: np.ndarray, eta: int) -> np.ndarray:
    """Stack the input Hankel with the extended-state row.

    The input window inside the extended state repeats the first ``eta``
    block rows of ``Hu``; those duplicate rows are dropped so that the
    stacked matrix can have full row rank.
    """
    if Xi.shape[1] != Hu.cols:
        raise ValueError("extended-state row and input Hankel differ in width")
    nu_w = eta * Hu.m
    if np.array_equal(Xi[:nu_w], Hu.rows(0, eta)):
        Xi = Xi[nu_w:]
    return np.vstack([Hu.entries, Xi])


def precompute_trigger_params(Hu: HankelMatrix, Xi: np.ndarray, Q, R,
                              term: TerminalIngredients, sigma: float, eta: int,
                              sqrt_radius: bool = False,
                              error_index: str = "window") -> TriggerParams:
    """Eigenvalue summaries and ``||H_uxi^+|| = 1 / sigma_min(H_uxi)``.

    Raises:
        ValueError: if ``H_uxi`` is row-rank deficient.
    """
    H = assemble_H_uxi(Hu, Xi, eta)
    s = np.linalg.svd(H, compute_uv=False)
    if s[-1] <= max(H.shape) * s[0] * 1e-12:
        raise ValueError(
            f"H_uxi ({H.shape[0]} rows) is row-rank deficient; right inverse does not exist")
    return TriggerParams(
        sigma=sigma, r=term.r, eps=term.eps, H_pinv_norm=float(1.0 / s[-1]),
        lam_Q=float(np.linalg.eigvalsh(np.atleast_2d(Q))[-1]),
        lam_Pr=float(np.linalg.eigvalsh(term.P_r)[-1]),
        lam_R=float(np.linalg.eigvalsh(np.atleast_2d(R))[0]),
        sqrt_radius=sqrt_radius, error_index=error_index)


@dataclass(frozen=True)
class TriggerDecision:
    """Chosen inter-triggering time and its ingredients.

    ``tau_hat``/``tau_check`` are ``0`` when their condition already fails
    at ``tau = 1``; ``threshold_violated`` then records the forced floor.
    """

    tau: int
    tau_hat: int
    tau_check: int
    threshold_violated: bool


def reachability_margins(sol: MpcSolution, params: TriggerParams, rho: RhoBounds,
                         cfg: MpcConfig) -> np.ndarray:
    """Right minus left side of the terminal-reachability test for ``tau = 1..L-1``."""
    xi_e = cfg.xi_e
    out = np.empty(cfg.L - 1)
    for tau in range(1, cfg.L):
        err = prediction_error_bound(sol, tau, rho, cfg.noise_bound, cfg.eta,
                                     params.error_index)
        dist = np.linalg.norm(sol.xi_bar[tau] - xi_e)
        out[tau - 1] = params.radius_threshold - dist - err
    return out


def decrease_margins(sol: MpcSolution, params: TriggerParams, rho: RhoBounds,
                     cfg: MpcConfig) -> np.ndarray:
    """Right minus left side of the cost-decrease test for ``tau = 1..L-1``.

    Norms of the predicted extended states are taken relative to the
    equilibrium.
    """
    eta, nbar = cfg.eta, cfg.noise_bound
    p = params
    reg = cfg.lambda_g_nbar * p.H_pinv_norm ** 2 * (1.0 + p.lam_Pr / p.lam_R)
    c1 = 2.0 * (p.lam_Q + 2.0 * p.lam_Pr + reg)
    c2 = 2.0 * (p.lam_Pr + reg)
    h_past2 = float(np.sum(sol.h_window(-eta, -1) ** 2))
    h_rows2 = np.sum(sol.h[eta:] ** 2, axis=1)
    dev2 = np.sum((sol.xi_bar - cfg.xi_e) ** 2, axis=1)
    const = cfg.lambda_h * eta * nbar ** 2 + p.eps ** 2
    out = np.empty(cfg.L - 1)
    for tau in range(1, cfg.L):
        rho_sum = sum(rho.J(i + eta) ** 2 for i in range(tau))
        left = (c1 * ((eta * nbar ** 2 + h_past2) * rho_sum + np.sum(h_rows2[:tau]))
                + const + c2 * dev2[tau])
        out[tau - 1] = p.sigma * np.sum(dev2[:tau]) - left
    return out


def next_trigger_time(sol: MpcSolution, params: TriggerParams, rho: RhoBounds,
                      cfg: MpcConfig) -> TriggerDecision:
    """Inter-triggering time from the two threshold tests.

    ``tau_hat`` is the longest prefix ``1..tau`` on which the reachability
    test holds, ``tau_check`` the largest ``tau`` satisfying the decrease
    test. The result is ``max(1, min(tau_hat, tau_check, L-1))``.
    """
    if not sol.ok:
        raise ValueError("trigger time needs an optimal MPC solution")
    reach = reachability_margins(sol, params, rho, cfg) >= 0
    tau_hat = int(np.argmin(reach)) if not reach.all() else cfg.L - 1
    dec = np.flatnonzero(decrease_margins(sol, params, rho, cfg) >= 0)
    tau_check = int(dec[-1]) + 1 if dec.size else 0
    tau = min(tau_hat, tau_check, cfg.L - 1)
    return TriggerDecision(max(1, tau), tau_hat, tau_check, tau < 1)
