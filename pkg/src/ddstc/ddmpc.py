"""Data-driven predictive control from Hankel data with slack on outputs.

At every triggering time the controller solves a convex QP whose decision
variables are the Hankel coefficients ``g``, the output slack ``h`` and the
predicted input/output trajectory ``(u_bar, y_bar)`` over ``L + eta`` steps.
The first ``eta`` steps are pinned to the most recent applied inputs and
received (noisy) outputs, the last ``eta`` steps form the terminal extended
state, which must land in an ellipsoid around the equilibrium.

Trajectory arrays are indexed from ``-eta``: row ``k`` holds time ``k - eta``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .model import ExtendedSystem, equilibrium_extended_state, numerical_rank
from .optim import Ball, ConvexProgram, SolveResult, Status, solve
from .trajectory import HankelMatrix, PersistencyError

log = logging.getLogger(__name__)


class TerminalDesignError(ValueError):
    """No terminal ingredients could be constructed."""


def _sym_pd(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M)[0] <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


@dataclass(frozen=True, eq=False)
class MpcConfig:
    """Tuning of the data-driven MPC.

    The regularization weights are stored as the products that enter the
    cost, ``lambda_g * nbar`` and ``lambda_h / nbar``.
    """

    L: int
    eta: int
    Q: np.ndarray
    R: np.ndarray
    lambda_g_nbar: float
    lambda_h_over_nbar: float
    noise_bound: float
    u_min: np.ndarray
    u_max: np.ndarray
    u_e: np.ndarray
    y_e: np.ndarray

    def __post_init__(self):
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        if self.L < self.eta + 1:
            raise ValueError(f"horizon L={self.L} must be >= eta + 1 = {self.eta + 1}")
        Q = _sym_pd(self.Q, "Q")
        R = _sym_pd(self.R, "R")
        for name in ("lambda_g_nbar", "lambda_h_over_nbar", "noise_bound"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        n_u, n_y = R.shape[0], Q.shape[0]
        u_e = np.asarray(self.u_e, dtype=float).reshape(-1)
        y_e = np.asarray(self.y_e, dtype=float).reshape(-1)
        if u_e.size != n_u or y_e.size != n_y:
            raise ValueError("equilibrium dimensions do not match R and Q")
        lo = np.broadcast_to(np.asarray(self.u_min, dtype=float), (n_u,)).copy()
        hi = np.broadcast_to(np.asarray(self.u_max, dtype=float), (n_u,)).copy()
        if np.any(lo >= hi):
            raise ValueError("input box must satisfy u_min < u_max")
        if np.any(u_e < lo) or np.any(u_e > hi):
            raise ValueError(f"equilibrium input {u_e} outside the input box")
        for name, v in (("Q", Q), ("R", R), ("u_min", lo), ("u_max", hi),
                        ("u_e", u_e), ("y_e", y_e)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def n_u(self) -> int:
        return self.R.shape[0]

    @property
    def n_y(self) -> int:
        return self.Q.shape[0]

    @property
    def lambda_g(self) -> float:
        return self.lambda_g_nbar / self.noise_bound

    @property
    def lambda_h(self) -> float:
        return self.lambda_h_over_nbar * self.noise_bound

    @property
    def xi_e(self) -> np.ndarray:
        return equilibrium_extended_state(self.u_e, self.y_e, self.eta)


@dataclass(frozen=True, eq=False)
class TerminalIngredients:
    """Terminal pair ``(P, K, eps)`` and enlarged pair ``(P_r, K_r, r)``."""

    P: np.ndarray
    K: np.ndarray
    eps: float
    P_r: np.ndarray
    K_r: np.ndarray
    r: float

    def __post_init__(self):
        for name in ("P", "P_r"):
            _sym_pd(getattr(self, name), name)
        if not (self.eps >= 0 and self.r >= 0):
            raise ValueError("radii must be nonnegative")

    def radius_condition(self, R, L: int) -> tuple[float, float, float]:
        """Lower bound, ``eps**2`` and ``r**2`` of the radius compatibility test."""
        lam_Pr = np.linalg.eigvalsh(self.P_r)[-1]
        lam_P = np.linalg.eigvalsh(self.P)[0]
        lam_KRK = np.linalg.eigvalsh(self.K_r.T @ np.asarray(R) @ self.K_r)[0]
        lam_KRK = max(lam_KRK, 0.0)
        lower = lam_Pr / lam_P * (1.0 - lam_KRK / lam_Pr) ** L * self.r ** 2
        return float(lower), self.eps ** 2, self.r ** 2

    def radii_compatible(self, R, L: int, rtol: float = 1e-9) -> bool:
        lower, e2, r2 = self.radius_condition(R, L)
        return lower <= e2 * (1 + rtol) and e2 <= r2 * (1 + rtol)


@dataclass
class MpcSolution:
    """Optimizer of the MPC problem.

    ``u_bar``/``y_bar``/``h`` have ``L + eta`` rows, row ``k`` holding time
    ``k - eta``; ``xi_bar`` has ``L + 1`` rows for times ``0..L``.
    """

    status: Status
    u_bar: np.ndarray | None = None
    y_bar: np.ndarray | None = None
    g: np.ndarray | None = None
    h: np.ndarray | None = None
    xi_bar: np.ndarray | None = None
    cost: float = np.nan
    solve: SolveResult | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL

    def h_window(self, first: int, last: int) -> np.ndarray:
        """Stacked slack over times ``first..last`` (may start at ``-eta``)."""
        eta = self.h.shape[0] - self.xi_bar.shape[0] + 1
        return self.h[first + eta:last + eta + 1].reshape(-1)


def _layout(cfg: MpcConfig, n_g: int) -> dict[str, slice]:
    T = cfg.L + cfg.eta
    sizes = [("g", n_g), ("h", T * cfg.n_y), ("u", T * cfg.n_u), ("y", T * cfg.n_y)]
    out, start = {}, 0
    for name, size in sizes:
        out[name] = slice(start, start + size)
        start += size
    out["n"] = start
    return out


def _check_inputs(cfg, Hu, Hy, u_past, zeta_past):
    T = cfg.L + cfg.eta
    if Hu.L != T or Hy.L != T:
        raise ValueError(f"Hankel matrices must have order L + eta = {T}")
    if Hu.m != cfg.n_u or Hy.m != cfg.n_y:
        raise ValueError("Hankel signal dimensions do not match the config")
    if Hu.cols != Hy.cols:
        raise ValueError("input and output Hankel matrices differ in width")
    u_past = np.asarray(u_past, dtype=float).reshape(cfg.eta, cfg.n_u)
    zeta_past = np.asarray(zeta_past, dtype=float).reshape(cfg.eta, cfg.n_y)
    return u_past, zeta_past


def check_data_rank(cfg: MpcConfig, Hu: HankelMatrix) -> None:
    """Raise unless the order ``L + eta`` input Hankel has full row rank.

    This is the part of the excitation requirement that can be checked
    without knowing the plant order.
    """
    need = cfg.n_u * (cfg.L + cfg.eta)
    if numerical_rank(Hu.entries) != need:
        raise PersistencyError(
            f"input Hankel of order {cfg.L + cfg.eta} has rank < {need}; "
            "data are not persistently exciting")


def hankel_row_basis(Hu: HankelMatrix, Hy: HankelMatrix) -> np.ndarray:
    """Orthonormal basis ``V`` of the row space of ``[Hu; Hy]``.

    The cost penalizes ``||g||^2`` and the constraints see ``g`` only
    through ``[Hu; Hy] g``, so the optimal ``g`` lies in ``range(V)``.
    Writing ``g = V c`` gives the same optimum with far fewer variables.
    """
    M = np.vstack([Hu.entries, Hy.entries])
    _, s, Vt = np.linalg.svd(M, full_matrices=False)
    k = int(np.sum(s > max(M.shape) * s[0] * 1e-12))
    return Vt[:k].T


def build_problem(cfg: MpcConfig, Hu: HankelMatrix, Hy: HankelMatrix, u_past, zeta_past,
                  term: TerminalIngredients, check_rank: bool = True,
                  basis: np.ndarray | None = None) -> ConvexProgram:
    """Assemble the MPC quadratic program.

    Args:
        cfg: controller tuning.
        Hu, Hy: order ``L + eta`` Hankel matrices of the offline data.
        u_past: the ``eta`` most recently applied inputs, oldest first.
        zeta_past: the ``eta`` most recently received outputs, oldest first.
        term: terminal ingredients.
        check_rank: verify persistency of excitation of ``Hu``.
        basis: optional row-space basis from :func:`hankel_row_basis`; the
            ``g`` block then holds coordinates ``c`` with ``g = basis @ c``.

    Returns:
        A :class:`ConvexProgram` over ``z = [g, h, u_bar, y_bar]``.
    """
    u_past, zeta_past = _check_inputs(cfg, Hu, Hy, u_past, zeta_past)
    if check_rank:
        check_data_rank(cfg, Hu)
    eta, L, n_u, n_y = cfg.eta, cfg.L, cfg.n_u, cfg.n_y
    T = L + eta
    Hu_m, Hy_m = Hu.entries, Hy.entries
    if basis is not None:
        Hu_m, Hy_m = Hu_m @ basis, Hy_m @ basis
    n_g = Hu_m.shape[1]
    lay = _layout(cfg, n_g)
    n = lay["n"]
    if term.P.shape != (eta * (n_u + n_y),) * 2:
        raise ValueError("terminal weight does not match the extended state size")

    # selection of the terminal extended state xi_bar_L out of z
    E = sp.lil_matrix((eta * (n_u + n_y), n))
    for j in range(eta):
        for k in range(n_u):
            E[j * n_u + k, lay["u"].start + (L + j) * n_u + k] = 1.0
        for k in range(n_y):
            E[eta * n_u + j * n_y + k, lay["y"].start + (L + j) * n_y + k] = 1.0
    E = E.tocsr()
    xi_e = cfg.xi_e

    Ru = sp.block_diag([sp.csr_matrix((eta * n_u, eta * n_u))]
                       + [sp.csr_matrix(cfg.R)] * L)
    Qy = sp.block_diag([sp.csr_matrix((eta * n_y, eta * n_y))]
                       + [sp.csr_matrix(cfg.Q)] * L)
    H = sp.block_diag([
        cfg.lambda_g_nbar * sp.identity(n_g),
        cfg.lambda_h_over_nbar * sp.identity(T * n_y),
        Ru, Qy], format="csr")
    H = 2.0 * (H + E.T @ sp.csr_matrix(term.P) @ E)
    f = np.zeros(n)
    u_ref = np.concatenate([np.zeros(eta * n_u), np.tile(cfg.u_e, L)])
    y_ref = np.concatenate([np.zeros(eta * n_y), np.tile(cfg.y_e, L)])
    f[lay["u"]] = -2.0 * (Ru @ u_ref)
    f[lay["y"]] = -2.0 * (Qy @ y_ref)
    f -= 2.0 * (E.T @ (term.P @ xi_e))

    # data consistency, then the pinned initial window
    Z = lambda r, c: sp.csr_matrix((r, c))
    I = sp.identity
    rows_u = sp.hstack([-sp.csr_matrix(Hu_m), Z(T * n_u, T * n_y),
                        I(T * n_u), Z(T * n_u, T * n_y)])
    rows_y = sp.hstack([-sp.csr_matrix(Hy_m), I(T * n_y),
                        Z(T * n_y, T * n_u), I(T * n_y)])
    pin_u = sp.hstack([Z(eta * n_u, n_g + T * n_y), I(eta * n_u),
                       Z(eta * n_u, (T - eta) * n_u + T * n_y)])
    pin_y = sp.hstack([Z(eta * n_y, n_g + T * n_y + T * n_u), I(eta * n_y),
                       Z(eta * n_y, (T - eta) * n_y)])
    A_eq = sp.vstack([rows_u, rows_y, pin_u, pin_y], format="csr")
    b_eq = np.concatenate([np.zeros(T * (n_u + n_y)), u_past.reshape(-1),
                           zeta_past.reshape(-1)])

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    u_free = slice(lay["u"].start + eta * n_u, lay["u"].stop)
    lower[u_free] = np.tile(cfg.u_min, L)
    upper[u_free] = np.tile(cfg.u_max, L)

    Ph = np.real(sla.sqrtm(term.P))
    ball = Ball(Ph @ E.toarray(), Ph @ xi_e, term.eps)
    return ConvexProgram(f, H, A_eq, b_eq, lower, upper, ball,
                         psd_by_construction=True)


def mpc_cost(cfg: MpcConfig, term: TerminalIngredients, u_bar, y_bar, g, h) -> float:
    """Evaluate the MPC objective on a candidate trajectory."""
    eta, L = cfg.eta, cfg.L
    du = u_bar[eta:] - cfg.u_e
    dy = y_bar[eta:] - cfg.y_e
    cost = float(np.einsum("ti,ij,tj->", du, cfg.R, du)
                 + np.einsum("ti,ij,tj->", dy, cfg.Q, dy))
    cost += cfg.lambda_h_over_nbar * float(np.sum(h ** 2))
    cost += cfg.lambda_g_nbar * float(g @ g)
    dxi = np.concatenate([u_bar[L:L + eta].reshape(-1), y_bar[L:L + eta].reshape(-1)]) - cfg.xi_e
    return cost + float(dxi @ term.P @ dxi)


def predicted_extended_states(u_bar: np.ndarray, y_bar: np.ndarray, eta: int) -> np.ndarray:
    """Rows ``i = 0..L``: ``[u_bar_{i-eta..i-1}; y_bar_{i-eta..i-1}]``."""
    L = u_bar.shape[0] - eta
    return np.array([np.concatenate([u_bar[i:i + eta].reshape(-1),
                                     y_bar[i:i + eta].reshape(-1)])
                     for i in range(L + 1)])


def solve_mpc(cfg: MpcConfig, Hu: HankelMatrix, Hy: HankelMatrix, u_past, zeta_past,
              term: TerminalIngredients, tol: float = 1e-8,
              check_rank: bool = True, basis: np.ndarray | None = None) -> MpcSolution:
    """Solve the MPC problem; failures come back as a status, never raised.

    Passing ``basis`` (see :func:`hankel_row_basis`) solves the reduced but
    equivalent problem; ``g`` is mapped back to data coordinates.
    """
    prog = build_problem(cfg, Hu, Hy, u_past, zeta_past, term, check_rank=check_rank,
                         basis=basis)
    res = solve(prog, tol=tol)
    if not res.ok:
        log.warning("MPC solve returned %s", res.status.value)
        return MpcSolution(res.status, solve=res)
    lay = _layout(cfg, Hu.cols if basis is None else basis.shape[1])
    z = res.x
    T = cfg.L + cfg.eta
    g = z[lay["g"]] if basis is None else basis @ z[lay["g"]]
    h = z[lay["h"]].reshape(T, cfg.n_y)
    u_bar = z[lay["u"]].reshape(T, cfg.n_u)
    y_bar = z[lay["y"]].reshape(T, cfg.n_y)
    # snap the pinned window to its exact value
    u_bar[:cfg.eta] = np.asarray(u_past, dtype=float).reshape(cfg.eta, cfg.n_u)
    y_bar[:cfg.eta] = np.asarray(zeta_past, dtype=float).reshape(cfg.eta, cfg.n_y)
    xi = predicted_extended_states(u_bar, y_bar, cfg.eta)
    return MpcSolution(Status.OPTIMAL, u_bar, y_bar, g, h, xi,
                       mpc_cost(cfg, term, u_bar, y_bar, g, h), res)


# ---------------------------------------------------------------------------
# terminal ingredients


def _constraint_rows(ext: ExtendedSystem, K: np.ndarray):
    """Linear maps of the deviation that must stay inside the input box.

    Returns ``(G, which)`` where row ``j`` of ``G`` maps the extended-state
    deviation to an input deviation component and ``which[j]`` is that
    component's index.
    """
    n_u = ext.n_u
    rows, which = [K], list(range(n_u))
    W = np.zeros((ext.eta * n_u, ext.n_xi))
    W[:, :ext.eta * n_u] = np.eye(ext.eta * n_u)
    rows.append(W)
    which += [k % n_u for k in range(ext.eta * n_u)]
    return np.vstack(rows), np.array(which)


def admissible_radius(P: np.ndarray, K: np.ndarray, ext: ExtendedSystem,
                      u_min, u_max, u_e) -> float:
    """Largest ``c`` with every input constraint satisfied on ``||d||_P <= c``.

    The support function of the ellipsoid in direction ``g`` is
    ``c * sqrt(g' P^-1 g)``, which gives the radius in closed form.
    """
    G, which = _constraint_rows(ext, K)
    u_min = np.broadcast_to(np.asarray(u_min, dtype=float), (ext.n_u,))
    u_max = np.broadcast_to(np.asarray(u_max, dtype=float), (ext.n_u,))
    u_e = np.asarray(u_e, dtype=float).reshape(-1)
    slack = np.minimum(u_max - u_e, u_e - u_min)[which]
    Pinv = np.linalg.inv(P)
    spread = np.sqrt(np.einsum("ij,jk,ik->i", G, Pinv, G))
    with np.errstate(divide="ignore"):
        radii = np.where(spread > 0, slack / np.where(spread > 0, spread, 1.0), np.inf)
    return float(np.min(radii))


def terminal_ingredients_oracle(ext: ExtendedSystem, Q, R, L: int, u_min, u_max, u_e,
                                margin: float = 1e-3) -> TerminalIngredients:
    """Model-based terminal ingredients for the extended system.

    ``K`` is the LQR gain for the stage cost ``||y||_Q^2 + ||u||_R^2`` with
    ``y = C~ xi + D~ u`` (plus ``margin * I`` on the state so the Riccati
    problem is well posed). ``P0`` solves the closed-loop Lyapunov equation
    with the same margin, so the decrease condition holds strictly.

    The enlarged pair uses ``(P0, K)`` with the largest radius ``r`` for
    which the input constraints hold. Because ``K' R K`` is singular when
    ``n_u < n_xi``, the radius compatibility test needs
    ``lambda_min(P) >= lambda_max(P0)``. The terminal weight is therefore
    ``P = P0 + c M`` with ``M`` the closed-loop Lyapunov solution for an
    identity right-hand side and ``c = lambda_max(P0) / lambda_min(M)``;
    the extra term only adds decrease, and ``eps = r``.

    Raises:
        TerminalDesignError: if the Riccati equation has no stabilizing
            solution or the equilibrium input touches the box.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    A, B, C, D = ext.A, ext.B, ext.C, ext.D
    n = ext.n_xi
    Qx = C.T @ Q @ C + margin * np.eye(n)
    S = C.T @ Q @ D
    Ru = R + D.T @ Q @ D
    try:
        X = sla.solve_discrete_are(A, B, Qx, Ru, s=S)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise TerminalDesignError(f"Riccati equation failed: {exc}") from None
    K = -np.linalg.solve(Ru + B.T @ X @ B, B.T @ X @ A + S.T)
    Acl = A + B @ K
    if np.max(np.abs(np.linalg.eigvals(Acl))) >= 1:
        raise TerminalDesignError("LQR gain does not stabilize the extended system")
    Ccl = C + D @ K
    stage = K.T @ R @ K + Ccl.T @ Q @ Ccl + margin * np.eye(n)
    P0 = sla.solve_discrete_lyapunov(Acl.T, stage)
    P0 = 0.5 * (P0 + P0.T)
    r = admissible_radius(P0, K, ext, u_min, u_max, u_e)
    if not (np.isfinite(r) and r > 0):
        raise TerminalDesignError("equilibrium input lies on the input-box boundary")
    M = sla.solve_discrete_lyapunov(Acl.T, np.eye(n))
    M = 0.5 * (M + M.T)
    c = np.linalg.eigvalsh(P0)[-1] / np.linalg.eigvalsh(M)[0] * (1 + 1e-9)
    return TerminalIngredients(P=P0 + c * M, K=K, eps=r, P_r=P0, K_r=K, r=r)


@dataclass
class TerminalCheck:
    ok: bool
    margin: float
    decrease_margin: float
    input_margin: float
    invariance_margin: float


def sample_ellipsoid_boundary(P: np.ndarray, radius: float, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points ``d`` with ``||d||_P = radius``, directions Gaussian."""
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n, P.shape[0]))
    Linv = np.linalg.inv(np.linalg.cholesky(P))  # P = L L', d = L^-T v
    D = V @ Linv
    D /= np.sqrt(np.einsum("ij,jk,ik->i", D, P, D))[:, None]
    return radius * D


def check_terminal_assumption(term: TerminalIngredients, ext: ExtendedSystem, Q, R, samples,
                              u_min=None, u_max=None, u_e=None,
                              enlarged: bool = False, tol: float = 1e-9) -> TerminalCheck:
    """Evaluate the terminal decrease and constraint conditions on samples.

    Samples are deviations ``xi - xi^e`` and should lie in the terminal set.
    The decrease condition
    ``||(A+BK)d||_P^2 <= ||d||_P^2 - ||Kd||_R^2 - ||(C+DK)d||_Q^2`` is
    checked on each, along with invariance of the set and (when bounds are
    given) the input box for both the applied input and the windowed
    inputs. Margins are normalized by ``max(1, ||d||_P^2)``.
    """
    P, K, radius = ((term.P_r, term.K_r, term.r) if enlarged
                    else (term.P, term.K, term.eps))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    D = np.atleast_2d(np.asarray(samples, dtype=float))
    if D.size == 0:
        D = np.zeros((1, ext.n_xi))
    Acl = ext.A + ext.B @ K
    Ccl = ext.C + ext.D @ K
    Dn = D @ Acl.T
    vP = np.einsum("ij,jk,ik->i", D, P, D)
    vN = np.einsum("ij,jk,ik->i", Dn, P, Dn)
    U = D @ K.T
    Y = D @ Ccl.T
    vR = np.einsum("ij,jk,ik->i", U, R, U)
    vQ = np.einsum("ij,jk,ik->i", Y, Q, Y)
    scale = np.maximum(1.0, vP)
    dec = float(np.min((vP - vR - vQ - vN) / scale))
    inv = float(np.min((radius ** 2 - vN) / max(1.0, radius ** 2)))
    inp = np.inf
    if u_min is not None and u_max is not None and u_e is not None:
        G, which = _constraint_rows(ext, K)
        u_e = np.asarray(u_e, dtype=float).reshape(-1)
        lo = np.broadcast_to(np.asarray(u_min, dtype=float), (ext.n_u,))[which]
        hi = np.broadcast_to(np.asarray(u_max, dtype=float), (ext.n_u,))[which]
        vals = D @ G.T + u_e[which]
        inp = float(np.min(np.minimum(vals - lo, hi - vals)))
    margin = min(dec, inv, inp)
    return TerminalCheck(margin >= -tol, margin, dec, inp, inv)
