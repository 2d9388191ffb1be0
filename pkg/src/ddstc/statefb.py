"""Self-triggered state feedback with data-based worst-case prediction.

Between triggers the plant runs under the held input ``u = K zeta``, where
``zeta`` is the last received (noisy) state. At a trigger the controller
bounds, from Hankel data alone, how far the state can drift from ``zeta``
over the next ``L - 1`` steps, and sleeps until that drift might exceed a
fraction ``sigma`` of ``||zeta||_inf``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .model import LtiSystem
from .optim import Ball, ConvexProgram, Status, maximize_linear_many
from .trajectory import HankelMatrix
from .trigger_output import RhoBounds, estimate_rho_bounds


class PredictionInfeasible(RuntimeError):
    """No data-consistent trajectory explains the received state."""


@dataclass(frozen=True, eq=False)
class StateFbConfig:
    """Tuning of the self-triggered state feedback.

    Attributes:
        K: feedback gain, ``u = K zeta``.
        L: prediction horizon (at least 2).
        sigma: trigger threshold in ``(0, 1)``.
        noise_bound: Euclidean bound on the measurement noise.
        kappa, mu: weights of the average-norm condition
            ``kappa * sum_{i<=tau} ||x_bar_i||_inf <= mu * tau * nbar``.
        use_norm_condition: enforce that condition when choosing ``tau``.
    """

    K: np.ndarray
    L: int
    sigma: float
    noise_bound: float
    kappa: float = 0.1
    mu: float = 200.0
    use_norm_condition: bool = True

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        K.setflags(write=False)
        object.__setattr__(self, "K", K)
        if self.L < 2:
            raise ValueError("L must be >= 2")
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if not self.noise_bound >= 0:
            raise ValueError("noise_bound must be nonnegative")
        if not (self.kappa > 0 and self.mu > 0):
            raise ValueError("kappa and mu must be positive")


def state_gain_oracle(sys: LtiSystem, Q_lqr=None, R_lqr=None) -> np.ndarray:
    """Discrete-time LQR gain with the sign convention ``u = K x``.

    Raises:
        RuntimeError: if the Riccati equation fails or ``A + B K`` is not
            Schur stable.
    """
    A, B = sys.A, sys.B
    Q = np.eye(sys.n_x) if Q_lqr is None else np.atleast_2d(np.asarray(Q_lqr, dtype=float))
    R = np.eye(sys.n_u) if R_lqr is None else np.atleast_2d(np.asarray(R_lqr, dtype=float))
    try:
        X = sla.solve_discrete_are(A, B, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RuntimeError(f"Riccati equation did not converge: {exc}") from None
    K = -np.linalg.solve(R + B.T @ X @ B, B.T @ X @ A)
    if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1:
        raise RuntimeError("LQR gain is not stabilizing")
    return K


@dataclass(frozen=True, eq=False)
class WorstCasePrediction:
    """Worst-case predicted trajectory statistics for ``tau = 1..L-1``.

    Attributes:
        envelope: ``e[tau-1]`` bounds ``||zeta - x_bar_tau||_inf``.
        coord_max: ``coord_max[tau-1]`` bounds ``||x_bar_tau||_inf``.
        h_bound: bound on ``||h||_inf`` (the noise bound).
    """

    envelope: np.ndarray
    coord_max: np.ndarray
    h_bound: float

    def sum_norm_bound(self, tau: int) -> float:
        """Bound on ``sum_{i=1..tau} ||x_bar_i||_inf``."""
        return float(np.sum(self.coord_max[:tau]))


def hankel_row_basis(Hu: HankelMatrix, Hx: HankelMatrix) -> np.ndarray:
    """Orthonormal basis of the row space of ``[Hu; Hx]``.

    The prediction only sees ``g`` through these products, so ``g = V c``
    describes the same set of trajectories.
    """
    M = np.vstack([Hu.entries, Hx.entries])
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    k = int(np.sum(s > max(M.shape) * s[0] * 1e-12))
    return Vt[:k].T


def worst_case_prediction(Hu: HankelMatrix, Hx: HankelMatrix, zeta, K, nbar: float,
                          basis: np.ndarray | None = None,
                          tol: float = 1e-9) -> WorstCasePrediction:
    """Per-step, per-coordinate extremes of the data-consistent predictions.

    The feasible set holds all ``(g, h)`` with ``Hu g`` the held input
    repeated ``L`` times, ``x_bar_0 + h = zeta`` and ``||h|| <= nbar``.
    Each extreme is a linear maximization over that set.

    Args:
        Hu, Hx: order-``L`` Hankel matrices of offline inputs and states.
        zeta: received state.
        K: feedback gain.
        nbar: noise bound.
        basis: optional row-space basis from :func:`hankel_row_basis`.

    Raises:
        PredictionInfeasible: if no data-consistent trajectory fits ``zeta``.
    """
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    L, n_x = Hx.L, Hx.m
    if Hu.L != L or Hu.cols != Hx.cols:
        raise ValueError("input and state Hankel matrices must match")
    if zeta.size != n_x:
        raise ValueError(f"zeta has length {zeta.size}, expected {n_x}")
    U, X = Hu.entries, Hx.entries
    if basis is not None:
        U, X = U @ basis, X @ basis
    n_g = U.shape[1]
    u_held = np.tile(np.asarray(K, dtype=float) @ zeta, L)
    A_eq = np.vstack([np.hstack([U, np.zeros((U.shape[0], n_x))]),
                      np.hstack([X[:n_x], np.eye(n_x)])])
    b_eq = np.concatenate([u_held, zeta])
    S = np.hstack([np.zeros((n_x, n_g)), np.eye(n_x)])
    prog = ConvexProgram(np.zeros(n_g + n_x), None, A_eq, b_eq,
                         ball=Ball(S, np.zeros(n_x), nbar), sense="maximize-linear")
    rows = np.hstack([X[n_x:], np.zeros(((L - 1) * n_x, n_x))])
    res = maximize_linear_many(np.vstack([rows, -rows]), prog, tol=tol)
    if any(r.status is Status.INFEASIBLE for r in res):
        raise PredictionInfeasible("received state is not explained by the data")
    if any(r.status is not Status.OPTIMAL for r in res):
        bad = next(r for r in res if r.status is not Status.OPTIMAL)
        raise PredictionInfeasible(f"prediction solve returned {bad.status.value}")
    vals = np.array([r.objective for r in res])
    up = vals[:rows.shape[0]].reshape(L - 1, n_x)
    dn = vals[rows.shape[0]:].reshape(L - 1, n_x)
    dev = np.maximum(zeta + dn, up - zeta)
    mag = np.maximum(up, dn)
    return WorstCasePrediction(np.max(dev, axis=1), np.max(mag, axis=1), float(nbar))


def trigger_function_phi(pred: WorstCasePrediction, rho_tau: float, nbar: float,
                         tau: int) -> float:
    """``e_tau + rho_tau * (nbar + ||h||_inf) + nbar`` with ``||h||_inf <= nbar``."""
    if not 1 <= tau <= pred.envelope.size:
        raise ValueError(f"tau={tau} outside 1..{pred.envelope.size}")
    return float(pred.envelope[tau - 1] + rho_tau * (nbar + pred.h_bound) + nbar)


def rho_bounds_state(Hu: HankelMatrix, Hx: HankelMatrix, L: int) -> RhoBounds:
    """Gain bounds with ``C = I`` and a one-sample window.

    Needs Hankel matrices of order ``L + 1``. ``J(i)`` bounds
    ``||A^(i+1)||`` and ``J_inf(i)`` equals the data-based value of
    ``||A^(i+1)||_inf``.
    """
    return estimate_rho_bounds(Hu, Hx, 1, L)


def drift_gain(rho: RhoBounds, tau: int) -> float:
    """Bound on ``||A^tau||_inf`` used by the trigger function."""
    return rho.J_inf(tau - 1)


@dataclass(frozen=True)
class StateTriggerDecision:
    tau: int
    tau_phi: int
    phi: np.ndarray
    norm_condition_met: bool


def next_trigger_time_sf(pred: WorstCasePrediction, rho: RhoBounds, zeta,
                         cfg: StateFbConfig) -> StateTriggerDecision:
    """First ``tau`` whose trigger function exceeds ``sigma * ||zeta||_inf``.

    Without such a ``tau`` the horizon cap ``L - 1`` applies. When the
    average-norm condition is enabled, ``tau`` then steps down until the
    condition holds, never below 1.
    """
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    nbar = cfg.noise_bound
    n_tau = pred.envelope.size
    phi = np.array([trigger_function_phi(pred, drift_gain(rho, t), nbar, t)
                    for t in range(1, n_tau + 1)])
    over = np.flatnonzero(phi > cfg.sigma * np.max(np.abs(zeta)))
    tau_phi = int(over[0]) + 1 if over.size else n_tau
    tau = tau_phi
    ok = True
    if cfg.use_norm_condition:
        while tau > 1 and cfg.kappa * pred.sum_norm_bound(tau) > cfg.mu * tau * nbar:
            tau -= 1
        ok = cfg.kappa * pred.sum_norm_bound(tau) <= cfg.mu * tau * nbar
    return StateTriggerDecision(tau, tau_phi, phi, ok)
