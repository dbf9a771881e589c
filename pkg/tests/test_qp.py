import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elmpc import qp
from qpgen import random_feasible


class TestAssembleDual:
    def test_identity_case(self):
        p = qp.QpProblem(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3))
        L1, L2 = qp.assemble_dual(p)
        assert np.allclose(L1, -np.eye(3)) and np.allclose(L2, 0)

    def test_negative_semidefinite(self, rng):
        for _ in range(20):
            p = random_feasible(rng)
            L1, _ = qp.assemble_dual(p)
            assert np.max(np.linalg.eigvalsh(L1)) <= 1e-10

    def test_gradient_is_constraint_residual(self, rng):
        p = random_feasible(rng)
        L1, L2 = qp.assemble_dual(p)
        lam = rng.uniform(size=p.q)
        x = -np.linalg.solve(p.W1, p.W2 + p.E.T @ lam)
        assert np.allclose(L1 @ lam + L2, p.E @ x - p.F, atol=1e-10)

    def test_not_pd(self):
        with pytest.raises(ValueError):
            qp.assemble_dual(qp.QpProblem(np.diag([1.0, -1.0]), np.zeros(2), np.eye(2), np.zeros(2)))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            qp.QpProblem(np.array([[1.0, 0.1], [0.0, 1.0]]), np.zeros(2), np.zeros((0, 2)), np.zeros(0))


class TestStep:
    def test_unit_spectrum(self):
        assert qp.estimate_step(-np.eye(4)) == pytest.approx(1 / (1 + qp.STEP_GUARD), rel=1e-12)

    def test_diagonal(self):
        assert qp.estimate_step(-np.diag([4.0, 1.0])) == pytest.approx(0.25, rel=1e-9)

    def test_zero_matrix_capped(self):
        assert qp.estimate_step(np.zeros((3, 3))) == qp.STEP_CAP

    def test_power_iteration_vs_eigensolver(self, rng):
        for _ in range(50):
            n = int(rng.integers(2, 12))
            A = rng.normal(size=(n, n))
            M = A @ A.T
            sigma = np.linalg.eigvalsh(M).max()
            assert 1 / qp.estimate_step(-M) == pytest.approx(sigma, rel=1e-2)


class TestSolveFast:
    def test_unconstrained(self, rng):
        W1 = np.array([[3.0, 1.0], [1.0, 2.0]])
        W2 = np.array([1.0, -1.0])
        sol = qp.solve_fast(qp.QpProblem(W1, W2, np.zeros((0, 2)), np.zeros(0)))
        assert sol.converged and sol.iterations == 1
        assert np.allclose(W1 @ sol.x_star + W2, 0, atol=1e-12)

    @pytest.mark.parametrize("w,b", [(1.0, 0.5), (-2.0, 0.5), (-2.0, 3.0), (0.0, 0.0)])
    def test_scalar_clamp(self, w, b):
        sol = qp.solve_fast(qp.QpProblem([[1.0]], [w], [[1.0]], [b]))
        assert sol.converged
        assert sol.x_star[0] == pytest.approx(min(-w, b), abs=1e-8)

    def test_box(self):
        # min 1/2|x|^2 - [3, -3] x on the box [-1, 1]^2 -> (1, -1)
        E = np.vstack([np.eye(2), -np.eye(2)])
        sol = qp.solve_fast(qp.QpProblem(np.eye(2), [-3.0, 3.0], E, np.ones(4)))
        assert np.allclose(sol.x_star, [1.0, -1.0], atol=1e-8)
        assert np.allclose(sol.lambda_L, [2.0, 0.0, 0.0, 2.0], atol=1e-6)

    def test_kkt_certificate(self, rng):
        for _ in range(30):
            sol = qp.solve_fast(random_feasible(rng))
            assert sol.converged
            assert sol.kkt_residual <= 1e-6
            assert np.all(sol.lambda_L >= 0)

    def test_warm_start_same_solution(self, rng):
        for _ in range(20):
            p = random_feasible(rng)
            cold = qp.solve_fast(p)
            warm = qp.solve_fast(p, qp.QpOptions(warm_start=cold.lambda_L * 1.3 + 0.1))
            assert np.allclose(cold.x_star, warm.x_star, atol=1e-6)

    def test_iteration_cap_status(self):
        rng = np.random.default_rng(4)
        p = random_feasible(rng, tight_frac=0.0)
        sol = qp.solve_fast(p, qp.QpOptions(max_iter=1, polish=False, step=1e-6))
        assert sol.status in (qp.ITERATION_CAP, qp.CONVERGED)
        assert sol.iterations == 1

    def test_infeasible_detected(self):
        p = qp.QpProblem([[1.0]], [0.0], [[1.0], [-1.0]], [0.0, -1.0])
        assert qp.solve_fast(p).status == qp.INFEASIBLE

    def test_non_finite_step(self, rng):
        p = random_feasible(rng)
        with pytest.raises(ValueError):
            qp.QpOptions(step=-1.0)

    def test_options_validation(self):
        with pytest.raises(ValueError):
            qp.QpOptions(tol=0)
        with pytest.raises(ValueError):
            qp.QpOptions(max_iter=0)


class TestDualIterates:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_nonnegative_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        p = random_feasible(rng)
        L1, L2 = qp.assemble_dual(p)
        step = 1.0 / np.linalg.eigvalsh(-L1).max() if np.any(L1) else 1.0
        prev = qp.dual_objective(p, np.zeros(p.q), L1, L2)
        for lam in qp.dual_iterates(p, 200, step=step):
            assert np.all(lam >= 0)
            cur = qp.dual_objective(p, lam, L1, L2)
            assert cur >= prev - 1e-9 * (1 + abs(prev))
            prev = cur

    def test_weak_duality(self, rng):
        p = random_feasible(rng)
        sol = qp.solve_oracle(p)
        for lam in qp.dual_iterates(p, 50):
            assert qp.dual_objective(p, lam) <= sol.objective + 1e-9


class TestOracle:
    def test_unconstrained(self):
        W1 = np.diag([2.0, 4.0])
        sol = qp.solve_oracle(qp.QpProblem(W1, [2.0, -4.0], np.zeros((0, 2)), np.zeros(0)))
        assert np.allclose(sol.x_star, [-1.0, 1.0])

    def test_box_matches_fast(self):
        E = np.vstack([np.eye(2), -np.eye(2)])
        p = qp.QpProblem(np.array([[2.0, 0.5], [0.5, 1.0]]), [-4.0, 1.0], E, [1.0, 0.5, 1.0, 0.5])
        a, b = qp.solve_oracle(p), qp.solve_fast(p)
        assert abs(a.objective - b.objective) <= 1e-6
        assert np.max(np.abs(a.x_star - b.x_star)) <= 1e-4

    def test_contradictory(self):
        p = qp.QpProblem([[1.0]], [0.0], [[1.0], [-1.0]], [0.0, -1.0])
        assert qp.solve_oracle(p).status == qp.INFEASIBLE

    def test_size_limit(self):
        with pytest.raises(ValueError):
            qp.solve_oracle(qp.QpProblem(np.eye(7), np.zeros(7), np.zeros((0, 7)), np.zeros(0)))

    def test_duplicate_rows(self):
        E = np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        p = qp.QpProblem(np.eye(2), [-5.0, 0.0], E, [1.0, 1.0, 2.0])
        a, b = qp.solve_oracle(p), qp.solve_fast(p)
        assert np.allclose(a.x_star, [1.0, 0.0]) and np.allclose(b.x_star, [1.0, 0.0], atol=1e-8)


def test_dump_load_round_trip(rng, tmp_path):
    p = random_feasible(rng)
    qp.dump(p, tmp_path / "p.txt")
    back = qp.load(tmp_path / "p.txt")
    for f in ("W1", "W2", "E", "F"):
        assert np.array_equal(getattr(p, f), getattr(back, f))
