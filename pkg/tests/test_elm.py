import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from elmpc import elm
from conftest import random_model


class TestInit:
    def test_shapes_and_ranges(self):
        m = elm.init_elm(9, 6, 20, seed=3, x_bounds=(np.zeros(9), np.ones(9)),
                         z_bounds=(np.zeros(6), np.ones(6)))
        assert m.Wr.shape == (9, 20) and m.br.shape == (20,) and m.W.shape == (20, 6)
        assert np.all(np.abs(m.Wr) <= 1) and np.all(np.abs(m.br) <= 1)
        assert not m.trained and np.all(m.W == 0)

    def test_same_seed_same_weights(self):
        b = (np.zeros(2), np.ones(2))
        a = elm.init_elm(2, 1, 5, 7, b, (np.zeros(1), np.ones(1)))
        c = elm.init_elm(2, 1, 5, 7, b, (np.zeros(1), np.ones(1)))
        assert np.array_equal(a.Wr, c.Wr) and np.array_equal(a.br, c.br)

    def test_draw_order_wr_then_br(self):
        g = elm.make_rng(11)
        Wr = g.uniform(-1, 1, (3, 4))
        br = g.uniform(-1, 1, 4)
        m = elm.init_elm(3, 2, 4, 11, (np.zeros(3), np.ones(3)), (np.zeros(2), np.ones(2)))
        assert np.array_equal(m.Wr, Wr) and np.array_equal(m.br, br)

    def test_untrained_predict_raises(self):
        m = elm.init_elm(2, 1, 3, 0, (np.zeros(2), np.ones(2)), (np.zeros(1), np.ones(1)))
        with pytest.raises(elm.NotTrainedError):
            elm.predict(m, np.zeros(2))

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            elm.init_elm(2, 1, 3, 0, (np.ones(2), np.ones(2)), (np.zeros(1), np.ones(1)))

    def test_parameter_count(self):
        m = elm.init_elm(9, 6, 20, 0, (np.zeros(9), np.ones(9)), (np.zeros(6), np.ones(6)))
        assert m.n_params == 320


class TestNormalization:
    @given(hnp.arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3)))
    def test_round_trip(self, x):
        lo, hi = np.array([-5.0, 0.0, 10.0]), np.array([5.0, 2.0, 30.0])
        back = elm.denormalize(elm.normalize(x, lo, hi), lo, hi)
        assert np.allclose(back, x, rtol=1e-12, atol=1e-9)

    def test_maps_box_to_unit(self):
        lo, hi = np.array([1.0, -2.0]), np.array([3.0, 2.0])
        assert np.allclose(elm.normalize(lo, lo, hi), -1)
        assert np.allclose(elm.normalize(hi, lo, hi), 1)

    def test_out_of_bounds_count(self):
        lo, hi = np.zeros(2), np.ones(2)
        x = np.array([[0.5, 0.5], [1.5, 0.5], [-0.1, 2.0]])
        assert elm.out_of_bounds(x, lo, hi) == 3

    def test_sigmoid_extremes(self):
        s = elm.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 0.5 and s[2] == 1.0


class TestRidge:
    def test_normal_equations(self, rng):
        H = rng.uniform(size=(100, 15))
        Y = rng.normal(size=(100, 2))
        W = elm.train_ridge(H, Y, 0.1)
        assert np.allclose((H.T @ H + 0.1 * np.eye(15)) @ W, H.T @ Y, atol=1e-10)

    def test_unregularized_singular(self):
        H = np.ones((10, 3))
        with pytest.raises(elm.SingularSystemError):
            elm.train_ridge(H, np.ones((10, 1)), 0.0)

    def test_negative_lambda(self, rng):
        with pytest.raises(ValueError):
            elm.train_ridge(rng.uniform(size=(5, 2)), np.ones((5, 1)), -1.0)

    def test_objective_is_minimal(self, rng):
        H = rng.uniform(size=(40, 6))
        Y = rng.normal(size=(40, 2))
        W = elm.train_ridge(H, Y, 1e-2)
        J0 = elm.ridge_objective(H, Y, W, 1e-2)
        for _ in range(20):
            assert elm.ridge_objective(H, Y, W + 1e-4 * rng.normal(size=W.shape), 1e-2) > J0


class TestPredictAndJacobian:
    def test_predict_formula(self, rng):
        m = random_model(rng)
        x = rng.uniform(-2, 3, 4)
        xn = 2 * (x - m.x_min) / (m.x_max - m.x_min) - 1
        phi = 1 / (1 + np.exp(-(m.Wr.T @ xn + m.br)))
        z = m.z_min + (m.z_max - m.z_min) / 2 * (1 + m.W.T @ phi)
        assert np.allclose(elm.predict(m, x), z, rtol=1e-13)

    def test_batch_matches_single(self, rng):
        m = random_model(rng)
        X = rng.uniform(-2, 3, (7, 4))
        assert np.allclose(elm.predict(m, X), np.array([elm.predict(m, x) for x in X]))

    def test_jacobian_central_difference(self, rng):
        m = random_model(rng)
        x = rng.uniform(-2, 3, 4)
        h = 1e-6
        fd = np.column_stack([(elm.predict(m, x + h * e) - elm.predict(m, x - h * e)) / (2 * h)
                              for e in np.eye(4)])
        assert np.allclose(elm.jacobian(m, x), fd, atol=1e-7)

    def test_split_ab(self):
        J = np.arange(6 * 9, dtype=float).reshape(6, 9)
        A, B = elm.split_ab(J, 6, 3)
        assert np.array_equal(B, J[:, :3]) and np.array_equal(A, J[:, 3:])
        with pytest.raises(ValueError):
            elm.split_ab(J, 5, 3)


class TestFitAndPersistence:
    def test_fit_learns_smooth_map(self, rng):
        X = rng.uniform(-1, 1, (800, 2))
        Y = np.column_stack([np.sin(2 * X[:, 0]) + X[:, 1] ** 2])
        m = elm.fit(X, Y, 60, 1e-6, 0)
        assert np.sqrt(np.mean((elm.predict(m, X) - Y) ** 2)) < 0.02

    def test_save_load_exact(self, rng, tmp_path):
        m = random_model(rng)
        elm.save(m, tmp_path / "m.txt")
        back = elm.load(tmp_path / "m.txt")
        for f in ("Wr", "br", "W", "x_min", "x_max", "z_min", "z_max"):
            assert np.array_equal(getattr(m, f), getattr(back, f))
        assert back.lam == m.lam and back.seed == m.seed and back.trained

    def test_load_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("# something else\n")
        with pytest.raises(ValueError):
            elm.load(p)

    def test_arrays_read_only(self, rng):
        m = random_model(rng)
        with pytest.raises(ValueError):
            m.W[0, 0] = 1.0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 30))
    def test_param_count_formula(self, d_in, d_out, n_h):
        m = elm.init_elm(d_in, d_out, n_h, 0, (np.zeros(d_in), np.ones(d_in)),
                         (np.zeros(d_out), np.ones(d_out)))
        assert m.n_params == n_h * (d_in + d_out) + n_h == m.Wr.size + m.br.size + m.W.size
