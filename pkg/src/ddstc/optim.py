"""Convex program container and solver front end.

Programs are convex QPs/LPs with equality rows, per-variable bounds and at
most one Euclidean-ball constraint ``||S z - c|| <= radius``. General
programs go to Clarabel (primal-dual interior point with infeasibility
certificates). Linear objectives over an affine set intersected with the
ball, and no bounds, are solved exactly by eliminating the equalities.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

MAX_ITER = 200


class Status(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical-failure"


class Sense(str, enum.Enum):
    MINIMIZE = "minimize"
    MAXIMIZE_LINEAR = "maximize-linear"


@dataclass(frozen=True, eq=False)
class Ball:
    """``||S z - center|| <= radius``."""

    S: np.ndarray
    center: np.ndarray
    radius: float


@dataclass(eq=False)
class ConvexProgram:
    """``min 0.5 z'Hz + f'z`` (or ``max f'z``) over the constraint set.

    Attributes:
        f: linear cost, length n.
        H: PSD quadratic cost, ``None`` for a linear objective.
        A_eq, b_eq: equality rows ``A_eq z = b_eq``.
        lower, upper: per-variable bounds, ``-inf``/``inf`` when absent.
        ball: optional Euclidean-ball constraint.
        sense: ``minimize`` or ``maximize-linear`` (requires ``H`` zero).
        psd_by_construction: skip the eigenvalue check when ``H`` is
            assembled as a sum of Gram matrices.
    """

    f: np.ndarray
    H: Optional[np.ndarray] = None
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    ball: Optional[Ball] = None
    sense: Sense = Sense.MINIMIZE
    psd_by_construction: bool = False

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float).reshape(-1)
        n = self.f.size
        self.sense = Sense(self.sense)
        if self.H is not None:
            H = sp.csc_matrix(self.H, dtype=float)
            if H.shape != (n, n):
                raise ValueError(f"H must be {(n, n)}, got {H.shape}")
            scale = max(1.0, float(abs(H).max())) if H.nnz else 1.0
            if H.nnz and abs(H - H.T).max() > 1e-12 * scale:
                raise ValueError("H must be symmetric")
            H = (0.5 * (H + H.T)).tocsc()
            H.eliminate_zeros()
            if H.nnz:
                if self.sense is Sense.MAXIMIZE_LINEAR:
                    raise ValueError("maximize-linear programs must have H = 0")
                if not self.psd_by_construction:
                    Hd = H.toarray()
                    lam_min = np.linalg.eigvalsh(Hd)[0]
                    if lam_min < -1e-10 * np.linalg.norm(Hd, 2):
                        raise ValueError(f"H is not PSD (min eigenvalue {lam_min:.3e})")
            self.H = H
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        if not sp.issparse(self.A_eq):
            self.A_eq = np.atleast_2d(np.asarray(self.A_eq, dtype=float))
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.A_eq.shape != (self.b_eq.size, n):
            raise ValueError(
                f"A_eq must be {(self.b_eq.size, n)}, got {self.A_eq.shape}")
        self.lower = (np.full(n, -np.inf) if self.lower is None
                      else np.asarray(self.lower, dtype=float).reshape(-1))
        self.upper = (np.full(n, np.inf) if self.upper is None
                      else np.asarray(self.upper, dtype=float).reshape(-1))
        if self.lower.size != n or self.upper.size != n:
            raise ValueError("bounds must have one entry per variable")
        if self.ball is not None:
            S = np.atleast_2d(np.asarray(self.ball.S, dtype=float))
            c = np.asarray(self.ball.center, dtype=float).reshape(-1)
            if S.shape != (c.size, n):
                raise ValueError(f"ball S must be {(c.size, n)}, got {S.shape}")
            if not self.ball.radius >= 0:
                raise ValueError("ball radius must be >= 0")
            self.ball = Ball(S, c, float(self.ball.radius))

    @property
    def n(self) -> int:
        return self.f.size

    @property
    def has_bounds(self) -> bool:
        return bool(np.any(np.isfinite(self.lower)) or np.any(np.isfinite(self.upper)))

    @property
    def is_linear(self) -> bool:
        return self.H is None or self.H.nnz == 0


@dataclass
class SolveResult:
    status: Status
    x: Optional[np.ndarray]
    objective: float
    primal_residual: float = np.nan
    dual_residual: float = np.nan
    dual_objective: float = np.nan
    iterations: int = 0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


def primal_residual(prog: ConvexProgram, z: np.ndarray) -> float:
    """Largest violation of equality, bound and ball constraints at ``z``."""
    r = 0.0
    if prog.b_eq.size:
        r = max(r, float(np.max(np.abs(prog.A_eq @ z - prog.b_eq))))
    r = max(r, float(np.max(np.maximum(prog.lower - z, 0.0), initial=0.0)))
    r = max(r, float(np.max(np.maximum(z - prog.upper, 0.0), initial=0.0)))
    if prog.ball is not None:
        b = prog.ball
        r = max(r, float(np.linalg.norm(b.S @ z - b.center) - b.radius))
    return r


def _objective(prog: ConvexProgram, z: np.ndarray) -> float:
    val = float(prog.f @ z)
    if prog.H is not None:
        val += 0.5 * float(z @ prog.H @ z)
    return val


def solve(prog: ConvexProgram, tol: float = 1e-8) -> SolveResult:
    """Solve ``prog``; ``maximize-linear`` programs report the maximum."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if prog.sense is Sense.MAXIMIZE_LINEAR and not prog.has_bounds and prog.is_linear:
        return _max_linear_affine_ball(prog, [prog.f], tol)[0]
    return _solve_clarabel(prog, tol)


def maximize_linear(c, prog: ConvexProgram, tol: float = 1e-8) -> SolveResult:
    """Maximize ``c'z`` over the constraint set of ``prog``."""
    return maximize_linear_many(np.atleast_2d(c), prog, tol)[0]


def maximize_linear_many(C, prog: ConvexProgram, tol: float = 1e-8) -> list[SolveResult]:
    """Maximize each row of ``C`` over the constraint set of ``prog``.

    Rows share one factorization of the constraints when the exact route
    applies (no bounds).
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[1] != prog.n:
        raise ValueError(f"objective rows must have length {prog.n}")
    if not prog.has_bounds:
        return _max_linear_affine_ball(prog, list(C), tol)
    out = []
    for c in C:
        p = ConvexProgram(c, None, prog.A_eq, prog.b_eq, prog.lower, prog.upper,
                          prog.ball, Sense.MAXIMIZE_LINEAR)
        out.append(_solve_clarabel(p, tol))
    return out


def _solve_clarabel(prog: ConvexProgram, tol: float) -> SolveResult:
    n = prog.n
    maximize = prog.sense is Sense.MAXIMIZE_LINEAR
    q = -prog.f if maximize else prog.f.copy()
    P = sp.csc_matrix((n, n)) if prog.is_linear else sp.triu(prog.H, format="csc")

    blocks, rhs, cones = [], [], []
    if prog.b_eq.size:
        blocks.append(sp.csr_matrix(prog.A_eq))
        rhs.append(prog.b_eq)
        cones.append(clarabel.ZeroConeT(prog.b_eq.size))
    up = np.flatnonzero(np.isfinite(prog.upper))
    lo = np.flatnonzero(np.isfinite(prog.lower))
    if up.size or lo.size:
        I = sp.identity(n, format="csr")
        rows = []
        if up.size:
            rows.append(I[up])
        if lo.size:
            rows.append(-I[lo])
        blocks.append(sp.vstack(rows))
        rhs.append(np.concatenate([prog.upper[up], -prog.lower[lo]]))
        cones.append(clarabel.NonnegativeConeT(up.size + lo.size))
    if prog.ball is not None:
        b = prog.ball
        blocks.append(sp.vstack([sp.csr_matrix((1, n)), sp.csr_matrix(b.S)]))
        rhs.append(np.concatenate([[b.radius], b.center]))
        cones.append(clarabel.SecondOrderConeT(1 + b.center.size))
    if blocks:
        A = sp.vstack(blocks).tocsc()
        b_vec = np.concatenate(rhs)
    else:
        A = sp.csc_matrix((0, n))
        b_vec = np.zeros(0)

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = MAX_ITER
    settings.tol_feas = tol
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.max_threads = 1
    sol = clarabel.DefaultSolver(P, q, A, b_vec, cones, settings).solve()
    st = sol.status
    S = clarabel.SolverStatus

    if st in (S.PrimalInfeasible, S.AlmostPrimalInfeasible):
        return SolveResult(Status.INFEASIBLE, None, np.nan, iterations=sol.iterations,
                           info={"solver_status": str(st)})
    if st in (S.DualInfeasible, S.AlmostDualInfeasible):
        return SolveResult(Status.UNBOUNDED, None, np.inf if maximize else -np.inf,
                           iterations=sol.iterations, info={"solver_status": str(st)})
    x = np.asarray(sol.x, dtype=float)
    pres = primal_residual(prog, x)
    obj = _objective(prog, x) if not maximize else float(prog.f @ x)
    dual_obj = -float(sol.obj_val_dual) if maximize else float(sol.obj_val_dual)
    scale = 1.0 + float(np.max(np.abs(b_vec), initial=0.0))
    accept = st == S.Solved or (st == S.AlmostSolved and pres <= 1e3 * tol * scale)
    if not accept:
        log.warning("solver finished with %s (primal residual %.2e)", st, pres)
        return SolveResult(Status.NUMERICAL_FAILURE, x, obj, pres, float(sol.r_dual),
                           dual_obj, sol.iterations, {"solver_status": str(st)})
    return SolveResult(Status.OPTIMAL, x, obj, pres, float(sol.r_dual), dual_obj,
                       sol.iterations, {"solver_status": str(st)})


def _null_space(M: np.ndarray, rtol: float = 1e-11) -> tuple[np.ndarray, int]:
    """Orthonormal null-space basis and numerical rank of ``M``."""
    n = M.shape[1]
    if M.shape[0] == 0:
        return np.eye(n), 0
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(s > rtol * max(M.shape) * (s[0] if s.size else 0.0)))
    return Vt[rank:].T, rank


def _max_linear_affine_ball(prog: ConvexProgram, objectives: Sequence[np.ndarray],
                            tol: float) -> list[SolveResult]:
    """Exact ``max c'z`` s.t. ``A_eq z = b_eq`` and the optional ball.

    With ``z = z_p + N w`` the ball reads ``||d + M w|| <= r`` where
    ``M = S N`` and ``d = S z_p - center``. A linear objective ``a'w``
    (``a = N'c``) is bounded iff ``a`` lies in the row space of ``M``;
    the maximum then follows from Cauchy-Schwarz on ``range(M)``.
    """
    n = prog.n
    A = prog.A_eq.toarray() if sp.issparse(prog.A_eq) else prog.A_eq
    b = prog.b_eq
    if b.size:
        z_p, *_ = np.linalg.lstsq(A, b, rcond=None)
        eq_res = float(np.max(np.abs(A @ z_p - b)))
        if eq_res > tol * (1.0 + float(np.max(np.abs(b)))) * 1e2:
            return [SolveResult(Status.INFEASIBLE, None, np.nan, eq_res)
                    for _ in objectives]
    else:
        z_p = np.zeros(n)
    N, _ = _null_space(A)

    if prog.ball is None:
        M = np.zeros((0, N.shape[1]))
        d = np.zeros(0)
        r = 0.0
    else:
        M = prog.ball.S @ N
        d = prog.ball.S @ z_p - prog.ball.center
        r = prog.ball.radius

    # range(M) basis and pseudo-inverse pieces
    if M.size:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
        k = int(np.sum(s > 1e-11 * max(M.shape) * (s[0] if s.size else 0.0)))
        U, s, Vt = U[:, :k], s[:k], Vt[:k]
    else:
        U = np.zeros((M.shape[0], 0))
        s = np.zeros(0)
        Vt = np.zeros((0, N.shape[1]))
    d_R = U @ (U.T @ d) if U.size else np.zeros_like(d)
    gap = float(np.linalg.norm(d - d_R))
    if gap > r * (1.0 + 1e-9) + tol:
        return [SolveResult(Status.INFEASIBLE, None, np.nan, gap - r)
                for _ in objectives]
    slack = np.sqrt(max(r * r - gap * gap, 0.0))

    out = []
    for c in objectives:
        c = np.asarray(c, dtype=float).reshape(-1)
        a = N.T @ c
        # component of a outside the row space of M is unbounded
        a_row = Vt.T @ (Vt @ a) if Vt.size else np.zeros_like(a)
        a_perp = float(np.linalg.norm(a - a_row))
        if a_perp > 1e-7 * (1.0 + float(np.linalg.norm(c))):
            out.append(SolveResult(Status.UNBOUNDED, None, np.inf,
                                   info={"unbounded_component": a_perp}))
            continue
        # a_row = M' beta with beta in range(M)
        beta = U @ ((Vt @ a) / s) if s.size else np.zeros(M.shape[0])
        nb = float(np.linalg.norm(beta))
        v = -d_R + (slack * beta / nb if nb > 0 else 0.0)
        w = Vt.T @ ((U.T @ v) / s) if s.size else np.zeros(N.shape[1])
        z = z_p + N @ w
        val = float(c @ z)
        out.append(SolveResult(Status.OPTIMAL, z, val, primal_residual(prog, z),
                               0.0, val, 0, {"route": "affine-ball"}))
    return out
