import itertools

import numpy as np
import pytest

from ddstc import optim
from ddstc.optim import Ball, ConvexProgram, Status, maximize_linear, maximize_linear_many, solve


def polytope_vertex_max(c, a, b, lo, hi):
    """Brute-force max of c'z over {a'z = b} intersected with a box."""
    n = c.size
    best = -np.inf
    for free in range(n):
        others = [i for i in range(n) if i != free]
        if abs(a[free]) < 1e-12:
            continue
        for corner in itertools.product(*[(lo[i], hi[i]) for i in others]):
            z = np.empty(n)
            z[others] = corner
            z[free] = (b - a[others] @ np.array(corner)) / a[free]
            if lo[free] - 1e-12 <= z[free] <= hi[free] + 1e-12:
                best = max(best, c @ z)
    return best


class TestSolve:
    def test_projection_onto_hyperplane(self):
        prog = ConvexProgram(np.zeros(3), 2 * np.eye(3), [[1, 0, 0]], [1])
        res = solve(prog)
        assert res.ok
        np.testing.assert_allclose(res.x, [1, 0, 0], atol=1e-7)
        assert 0.5 * res.x @ (2 * np.eye(3)) @ res.x == pytest.approx(1, abs=1e-7)

    def test_box_clamp(self, rng):
        for _ in range(10):
            a = rng.standard_normal(5) * 2
            # min ||z - a||^2 = z'z - 2a'z + const
            res = solve(ConvexProgram(-2 * a, 2 * np.eye(5), lower=np.zeros(5),
                                      upper=np.ones(5)))
            assert res.ok
            np.testing.assert_allclose(res.x, np.clip(a, 0, 1), atol=1e-6)

    def test_inconsistent_equalities(self):
        prog = ConvexProgram(np.zeros(2), np.eye(2), [[0.0, 0.0]], [1.0])
        assert solve(prog).status is Status.INFEASIBLE

    def test_infeasible_bounds_and_equality(self):
        prog = ConvexProgram(np.zeros(2), np.eye(2), [[1.0, 1.0]], [5.0],
                             lower=[0, 0], upper=[1, 1])
        assert solve(prog).status is Status.INFEASIBLE

    def test_weak_duality(self, rng):
        for _ in range(10):
            n = 6
            M = rng.standard_normal((n, n))
            prog = ConvexProgram(rng.standard_normal(n), M @ M.T + 0.1 * np.eye(n),
                                 rng.standard_normal((2, n)), rng.standard_normal(2),
                                 lower=-np.ones(n) * 5, upper=np.ones(n) * 5)
            res = solve(prog)
            assert res.ok
            assert res.objective <= res.dual_objective + 1e-6 * (1 + abs(res.objective))
            assert res.primal_residual <= 1e-7

    def test_scaling_invariance(self, rng):
        n = 5
        M = rng.standard_normal((n, n))
        H, f = M @ M.T + np.eye(n), rng.standard_normal(n)
        A, b = rng.standard_normal((1, n)), [0.3]
        x1 = solve(ConvexProgram(f, H, A, b, upper=np.full(n, 0.2))).x
        x2 = solve(ConvexProgram(7.5 * f, 7.5 * H, A, b, upper=np.full(n, 0.2))).x
        np.testing.assert_allclose(x1, x2, atol=1e-6)

    def test_deterministic(self, rng):
        n = 4
        prog = ConvexProgram(rng.standard_normal(n), np.eye(n), lower=np.zeros(n),
                             ball=Ball(np.eye(n), np.zeros(n), 0.5))
        r1, r2 = solve(prog), solve(prog)
        assert r1.status is r2.status
        np.testing.assert_allclose(r1.x, r2.x, atol=1e-12, rtol=0)

    def test_iteration_cap_reports_failure(self, monkeypatch, rng):
        monkeypatch.setattr(optim, "MAX_ITER", 1)
        n = 8
        M = rng.standard_normal((n, n))
        prog = ConvexProgram(rng.standard_normal(n), M @ M.T, lower=-np.ones(n),
                             upper=np.ones(n))
        assert solve(prog).status is Status.NUMERICAL_FAILURE


class TestProgramValidation:
    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="PSD"):
            ConvexProgram(np.zeros(2), np.diag([1.0, -1.0]))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            ConvexProgram(np.zeros(2), [[1.0, 1.0], [0.0, 1.0]])

    def test_maximize_requires_linear(self):
        with pytest.raises(ValueError):
            ConvexProgram(np.zeros(2), np.eye(2), sense="maximize-linear")

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            ConvexProgram(np.zeros(2), A_eq=np.ones((1, 3)), b_eq=[1])
        with pytest.raises(ValueError):
            ConvexProgram(np.zeros(2), ball=Ball(np.eye(3), np.zeros(3), 1.0))


class TestMaximizeLinear:
    def test_unit_box(self):
        prog = ConvexProgram(np.zeros(3), lower=-np.ones(3), upper=np.ones(3))
        res = maximize_linear([1, 0, 0], prog)
        assert res.ok and res.objective == pytest.approx(1, abs=1e-7)

    def test_ball_cauchy_schwarz(self, rng):
        c = rng.standard_normal(4)
        prog = ConvexProgram(np.zeros(4), ball=Ball(np.eye(4), np.zeros(4), 0.7))
        res = maximize_linear(c, prog)
        assert res.objective == pytest.approx(0.7 * np.linalg.norm(c), rel=1e-12)
        assert np.linalg.norm(res.x) == pytest.approx(0.7, rel=1e-12)

    def test_polytope_vertex_oracle(self, rng):
        for _ in range(10):
            n = int(rng.integers(2, 5))
            a = rng.standard_normal(n)
            lo, hi = -rng.uniform(0.5, 2, n), rng.uniform(0.5, 2, n)
            b = float(a @ rng.uniform(lo, hi))
            c = rng.standard_normal(n)
            prog = ConvexProgram(np.zeros(n), A_eq=a[None], b_eq=[b], lower=lo, upper=hi)
            res = maximize_linear(c, prog)
            assert res.ok
            assert res.objective == pytest.approx(polytope_vertex_max(c, a, b, lo, hi),
                                                  abs=1e-7)

    def test_unbounded_direction(self):
        prog = ConvexProgram(np.zeros(2), A_eq=[[1.0, 0.0]], b_eq=[1.0])
        assert maximize_linear([0, 1], prog).status is Status.UNBOUNDED
        boxed = ConvexProgram(np.zeros(2), lower=[0, 0])
        assert maximize_linear([1, 1], boxed).status is Status.UNBOUNDED

    def test_affine_ball_matches_interior_point(self, rng):
        n = 6
        A, b = rng.standard_normal((2, n)), rng.standard_normal(2)
        S = rng.standard_normal((4, n))
        z0 = np.linalg.lstsq(A, b, rcond=None)[0]
        ball = Ball(S, S @ z0 + 0.1, 1.0)
        # the ball leaves two directions free; pin them with the objective choice
        prog = ConvexProgram(np.zeros(n), A_eq=A, b_eq=b, ball=ball)
        C = rng.standard_normal((3, 4)) @ S
        exact = maximize_linear_many(C, prog)
        for c, ex in zip(C, exact):
            ipm = optim._solve_clarabel(ConvexProgram(c, A_eq=A, b_eq=b, ball=ball,
                                                      sense="maximize-linear"), 1e-9)
            assert ex.ok and ipm.ok
            assert ex.objective == pytest.approx(ipm.objective, abs=1e-6)
            assert ex.primal_residual <= 1e-9

    def test_affine_ball_infeasible(self):
        prog = ConvexProgram(np.zeros(2), A_eq=[[1.0, 0.0]], b_eq=[3.0],
                             ball=Ball(np.eye(2), np.zeros(2), 1.0))
        assert maximize_linear([0, 1], prog).status is Status.INFEASIBLE
