"""Ground-truth LTI plant and model-based oracles.

The plant matrices are used for offline data generation, closed-loop
simulation and test oracles only. Controllers in this package receive
Hankel data, never ``(A, B, C, D)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

RANK_RTOL = 1e-12


class UnobservableError(ValueError):
    """Raised when (C, A) is not observable."""


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def numerical_rank(M: np.ndarray) -> int:
    """Rank with threshold ``max(m, n) * sigma_max * 1e-12``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    tol = max(M.shape) * s[0] * RANK_RTOL
    return int(np.sum(s > tol))


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """Discrete-time plant ``x+ = A x + B u``, ``y = C x + D u``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        D = _as_matrix(self.D, "D")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(
                f"D must be {(C.shape[0], B.shape[1])}, got {D.shape}")
        for name, M in zip("ABCD", (A, B, C, D)):
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @classmethod
    def state_feedback(cls, A, B) -> "LtiSystem":
        """Plant with full state measurement (C = I, D = 0)."""
        A = _as_matrix(A, "A")
        B = _as_matrix(B, "B")
        n = A.shape[0]
        return cls(A, B, np.eye(n), np.zeros((n, B.shape[1])))

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def is_state_output(self) -> bool:
        return (self.n_y == self.n_x and np.array_equal(self.C, np.eye(self.n_x))
                and not np.any(self.D))


def simulate_step(sys: LtiSystem, x, u) -> tuple[np.ndarray, np.ndarray]:
    """One plant step.

    Returns:
        ``(A x + B u, C x + D u)``.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape[0] != sys.n_x:
        raise ValueError(f"state has length {x.shape[0]}, expected {sys.n_x}")
    if u.shape[0] != sys.n_u:
        raise ValueError(f"input has length {u.shape[0]}, expected {sys.n_u}")
    return sys.A @ x + sys.B @ u, sys.C @ x + sys.D @ u


def discretize_zoh(Ac, Bc, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization.

    Uses the block-matrix exponential ``expm([[Ac, Bc], [0, 0]] * dt)``,
    whose top blocks are ``exp(Ac dt)`` and ``int_0^dt exp(Ac s) ds Bc``.
    """
    Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
    Bc = np.asarray(Bc, dtype=float)
    if Bc.ndim == 1:
        Bc = Bc.reshape(-1, 1)
    n = Ac.shape[0]
    if Ac.shape != (n, n):
        raise ValueError(f"Ac must be square, got {Ac.shape}")
    if Bc.shape[0] != n:
        raise ValueError(f"Bc has {Bc.shape[0]} rows, expected {n}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    m = Bc.shape[1]
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = sla.expm(M * dt)
    return E[:n, :n], E[:n, n:]


def observability_matrix(sys: LtiSystem, k: int) -> np.ndarray:
    """Stack ``C, CA, ..., CA^(k-1)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    blocks = []
    M = sys.C
    for _ in range(k):
        blocks.append(M)
        M = M @ sys.A
    return np.vstack(blocks)


def controllability_matrix(sys: LtiSystem) -> np.ndarray:
    blocks = []
    M = sys.B
    for _ in range(sys.n_x):
        blocks.append(M)
        M = sys.A @ M
    return np.hstack(blocks)


def is_controllable(sys: LtiSystem) -> bool:
    return numerical_rank(controllability_matrix(sys)) == sys.n_x


def is_observable(sys: LtiSystem) -> bool:
    return numerical_rank(observability_matrix(sys, sys.n_x)) == sys.n_x


def observability_index(sys: LtiSystem) -> int:
    """Smallest ``eta`` with ``rank(Theta_eta) = n_x``.

    Raises:
        UnobservableError: if no ``eta <= n_x`` reaches full rank.
    """
    for eta in range(1, sys.n_x + 1):
        if numerical_rank(observability_matrix(sys, eta)) == sys.n_x:
            return eta
    raise UnobservableError("(C, A) is unobservable")


def io_toeplitz(sys: LtiSystem, k: int) -> np.ndarray:
    """Block lower-triangular map from ``u_[0,k-1]`` to ``y_[0,k-1]`` at x0 = 0."""
    n_u, n_y = sys.n_u, sys.n_y
    T = np.zeros((k * n_y, k * n_u))
    markov = [sys.D]
    M = sys.B
    for _ in range(1, k):
        markov.append(sys.C @ M)
        M = sys.A @ M
    for i in range(k):
        for j in range(i + 1):
            T[i * n_y:(i + 1) * n_y, j * n_u:(j + 1) * n_u] = markov[i - j]
    return T


@dataclass(frozen=True, eq=False)
class ExtendedState:
    """Stacked window ``[u_{t-eta..t-1}; y_{t-eta..t-1}]``, oldest first."""

    u_window: np.ndarray
    y_window: np.ndarray
    eta: int

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.u_window.reshape(-1),
                               self.y_window.reshape(-1)])

    @property
    def dim(self) -> int:
        return self.u_window.size + self.y_window.size


def extended_state(u_window, y_window, eta: int) -> ExtendedState:
    """Build the extended state from ``eta`` inputs and outputs.

    Each window is a sequence of ``eta`` vectors (an ``(eta, m)`` array); a
    1-D array is read as a scalar signal.
    """
    U = np.asarray(u_window, dtype=float)
    Y = np.asarray(y_window, dtype=float)
    if U.ndim == 1:
        U = U.reshape(-1, 1)
    if Y.ndim == 1:
        Y = Y.reshape(-1, 1)
    if U.shape[0] != eta or Y.shape[0] != eta:
        raise ValueError(
            f"windows must hold exactly eta={eta} samples, "
            f"got {U.shape[0]} inputs and {Y.shape[0]} outputs")
    U = U.copy()
    Y = Y.copy()
    U.setflags(write=False)
    Y.setflags(write=False)
    return ExtendedState(U, Y, eta)


def equilibrium_extended_state(u_e, y_e, eta: int) -> np.ndarray:
    """``xi^e``: the constant window built from ``(u^e, y^e)``."""
    u_e = np.asarray(u_e, dtype=float).reshape(-1)
    y_e = np.asarray(y_e, dtype=float).reshape(-1)
    return np.concatenate([np.tile(u_e, eta), np.tile(y_e, eta)])


@dataclass(frozen=True, eq=False)
class ExtendedSystem:
    """Input/output realization whose state is the extended window."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    eta: int
    n_u: int
    n_y: int

    @property
    def n_xi(self) -> int:
        return self.A.shape[0]

    def u_rows(self) -> np.ndarray:
        """Indices of ``xi`` holding windowed inputs."""
        return np.arange(self.eta * self.n_u)


def extended_system(sys: LtiSystem, eta: int | None = None) -> ExtendedSystem:
    """Model-based ``(A~, B~, C~, D~)`` with ``xi_{t+1} = A~ xi_t + B~ u_t``.

    The current state is reconstructed from the window through the left
    pseudo-inverse of the observability matrix, so the realization is exact
    on every window generated by the plant.
    """
    if eta is None:
        eta = observability_index(sys)
    Theta = observability_matrix(sys, eta)
    if numerical_rank(Theta) != sys.n_x:
        raise UnobservableError(f"Theta_{eta} does not have full column rank")
    n_u, n_y = sys.n_u, sys.n_y
    Tpinv = np.linalg.pinv(Theta)
    T = io_toeplitz(sys, eta)
    Aeta = np.linalg.matrix_power(sys.A, eta)
    Gamma = np.hstack([np.linalg.matrix_power(sys.A, eta - 1 - j) @ sys.B
                       for j in range(eta)])
    Mx_y = Aeta @ Tpinv
    Mx_u = Gamma - Aeta @ Tpinv @ T

    nu_w, ny_w = eta * n_u, eta * n_y
    n_xi = nu_w + ny_w
    Ct = np.hstack([sys.C @ Mx_u, sys.C @ Mx_y])
    Dt = sys.D.copy()

    At = np.zeros((n_xi, n_xi))
    Bt = np.zeros((n_xi, n_u))
    # input window shift, newest input enters through B~
    At[:nu_w - n_u, n_u:nu_w] = np.eye(nu_w - n_u)
    Bt[nu_w - n_u:nu_w, :] = np.eye(n_u)
    # output window shift, newest output is y_t = C~ xi + D~ u
    At[nu_w:nu_w + ny_w - n_y, nu_w + n_y:] = np.eye(ny_w - n_y)
    At[n_xi - n_y:, :] = Ct
    Bt[n_xi - n_y:, :] = Dt
    return ExtendedSystem(At, Bt, Ct, Dt, eta, n_u, n_y)


def rho_oracle(sys: LtiSystem, i: int, eta: int) -> float:
    """Exact ``||C A^(i+eta) Theta_eta^+||`` (spectral norm)."""
    if i < 0:
        raise ValueError("i must be >= 0")
    Theta = observability_matrix(sys, eta)
    if numerical_rank(Theta) != sys.n_x:
        raise UnobservableError(f"Theta_{eta} does not have full column rank")
    M = sys.C @ np.linalg.matrix_power(sys.A, i + eta) @ np.linalg.pinv(Theta)
    return float(np.linalg.norm(M, 2))
