import numpy as np
import pytest

from elmpc import elm, mpc, plant, scenarios, sysid


class TestSyntheticPlant:
    def test_bounded_over_long_run(self, synthetic):
        rng = np.random.default_rng(0)
        u = sysid.gen_aprbs(sysid.AprbsSpec(plant.U_LO, plant.U_HI, 1, 10, 100_000, 2))
        z = plant.simulate_open_loop(synthetic, u, plant.steady_state(synthetic))
        s = np.abs(synthetic.scale(z))
        assert np.all(np.isfinite(z)) and s.max() <= 1.0

    def test_out_of_box_start_contracts(self, synthetic):
        z0 = synthetic.center + 5 * synthetic.half
        z = plant.simulate_open_loop(synthetic, np.tile(plant.U_MID, (200, 1)), z0)
        s = np.abs(synthetic.scale(z)).max(axis=1)
        first = int(np.argmax(s < 1.0))
        assert s[first] < 1.0 and np.all(s[first:] < 1.0)

    def test_operating_ranges(self, splits):
        _, z = splits["train"]
        assert 2.1 <= z[:, 0].min() and z[:, 0].max() <= 3.55
        assert -14 <= z[:, 1].min() and z[:, 1].max() <= -2
        assert z[:, 3].max() > 3.5   # the R_max limit can become active

    def test_smooth_derivative(self, synthetic):
        z = synthetic.center.copy()
        u = plant.U_MID.copy()
        for h in (1e-3, 1e-4):
            d1 = (synthetic.step(z, u + h * np.eye(3)[0]) - synthetic.step(z, u - h * np.eye(3)[0])) / (2 * h)
            d2 = (synthetic.step(z, u + h / 2 * np.eye(3)[0]) - synthetic.step(z, u - h / 2 * np.eye(3)[0])) / h
            assert np.allclose(d1, d2, rtol=1e-5, atol=1e-9)

    def test_invalid_lag(self):
        with pytest.raises(ValueError):
            plant.SyntheticPlant(lag=np.ones(6))


class TestPlantStep:
    def test_noise_disabled_exact(self, synthetic):
        z = plant.steady_state(synthetic)
        nxt, meas = plant.plant_step(synthetic, z, plant.U_MID, plant.NoiseSpec(enabled=False), elm.make_rng(0))
        assert np.array_equal(nxt, meas)

    def test_elm_plant_delegates(self, hcci_model, hcci_plant):
        z = plant.steady_state(hcci_plant)
        nxt, _ = plant.plant_step(hcci_plant, z, plant.U_MID, plant.NoiseSpec(enabled=False), elm.make_rng(0))
        assert np.array_equal(nxt, elm.predict(hcci_model, np.concatenate([plant.U_MID, z])))

    def test_noise_statistics(self, synthetic):
        rng = elm.make_rng(3)
        spec = plant.NoiseSpec(seed=3)
        z = plant.steady_state(synthetic)
        e = np.array([plant.plant_step(synthetic, z, plant.U_MID, spec, rng)[1] - synthetic.step(z, plant.U_MID)
                      for _ in range(10_000)])
        var = e.var(axis=0, ddof=1)
        assert var[0] == pytest.approx(0.0012, rel=0.10)
        assert var[1] == pytest.approx(1.76, rel=0.10)
        assert np.all(e[:, 2:] == 0)
        se = np.sqrt(np.array([0.0012, 1.76]) / len(e))
        assert np.all(np.abs(e[:, :2].mean(axis=0)) <= 3 * se)

    def test_dimension_check(self, synthetic):
        with pytest.raises(ValueError):
            plant.plant_step(synthetic, np.zeros(5), plant.U_MID, plant.NoiseSpec(), elm.make_rng(0))

    def test_negative_variance(self):
        with pytest.raises(ValueError):
            plant.NoiseSpec(variances=(-1.0, 1.0))

    def test_divergence_raises(self):
        class Bad:
            n, m = 6, 3

            def step(self, z, u):
                return np.full(6, np.inf)

        with pytest.raises(plant.PlantDivergence):
            plant.plant_step(Bad(), np.zeros(6), plant.U_MID, plant.NoiseSpec(), elm.make_rng(0))


class TestReference:
    def test_single_level_constant(self):
        r = plant.make_reference("steps", 40, levels=[[3.0, -6.0]])
        assert np.all(r == [3.0, -6.0])

    def test_zero_amplitude_sinusoid(self):
        r = plant.make_reference("sinusoid", 30, amplitude=(0.0, 0.0), offset=(2.9, -7.0))
        assert np.all(r == [2.9, -7.0])

    def test_default_ranges(self):
        r = plant.make_reference("steps", 5000, seed=1, hold=10)
        assert r[:, 0].min() >= 2.6 and r[:, 0].max() <= 3.2
        assert r[:, 1].min() >= -10 and r[:, 1].max() <= -4
        assert r[:, 0].max() - r[:, 0].min() > 0.5

    def test_min_step(self):
        r = plant.make_reference("steps", 3000, seed=2, hold=10, min_step=(0.3, 2.0))
        jumps = np.abs(np.diff(r[::10], axis=0))
        assert jumps[:, 0].min() >= 0.3 and jumps[:, 1].min() >= 2.0

    def test_hold_structure(self):
        r = plant.make_reference("steps", 100, seed=0, hold=25)
        assert sysid.segment_lengths(r) == [25, 25, 25, 25]

    @pytest.mark.parametrize("kw", [
        dict(kind="steps", levels=[[4.0, -6.0]]),
        dict(kind="steps", ranges=((2.0, 3.0), (-10.0, -4.0))),
        dict(kind="sinusoid", amplitude=(1.0, 0.0)),
        dict(kind="steps", min_step=(0.4, 0.0)),
        dict(kind="triangle"),
    ])
    def test_rejects(self, kw):
        kind = kw.pop("kind")
        with pytest.raises(ValueError):
            plant.make_reference(kind, 50, **kw)

    def test_seeded(self):
        a = plant.make_reference("steps", 200, seed=5)
        assert np.array_equal(a, plant.make_reference("steps", 200, seed=5))
        assert not np.array_equal(a, plant.make_reference("steps", 200, seed=6))


class TestClosedLoop:
    def test_equilibrium_invariance(self, hcci_model, hcci_plant):
        u0 = plant.U_MID.copy()
        z0 = plant.steady_state(hcci_plant, u0)
        ref = np.tile(z0[:2], (40, 1))
        tr = plant.run_closed_loop(hcci_plant, mpc.MpcController(hcci_model, mpc.MpcConfig.hcci()), ref,
                                   noise=plant.NoiseSpec(enabled=False), z0=z0, u0=u0)
        assert np.max(np.abs(tr.u - u0)) <= 1e-6
        assert np.max(np.abs(tr.z_true[1:, :2] - ref[1:])) <= 1e-6

    def test_deterministic(self, hcci_model, hcci_plant, tmp_path):
        sc = scenarios.build_scenario("step", cycles=80, seed=4)
        paths = []
        for i in range(2):
            tr = scenarios.run_scenario(hcci_plant, hcci_model, sc)
            paths.append(tmp_path / f"t{i}.csv")
            tr.write_csv(paths[-1], ["x"])
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_trace_shape_and_limits(self, hcci_model, hcci_plant):
        sc = scenarios.build_scenario("step", cycles=120, seed=7)
        tr = scenarios.run_scenario(hcci_plant, hcci_model, sc)
        assert len(tr) == 120 and tr.ok
        assert tr.z_true.shape == (120, 6) and tr.u.shape == (120, 3) and len(tr.status) == 120
        assert plant.limits_ok(tr, sc.cfg)
        assert len(tr.columns()) == 1 + 2 + 6 + 6 + 3 + 4

    def test_fallback_budget_ends_run(self, hcci_model, hcci_plant):
        cfg = mpc.MpcConfig.hcci()
        cfg.y_min = np.array([3.54, -14.0])  # unattainable lower output bound
        ref = np.tile([2.9, -7.0], (60, 1))
        tr = plant.run_closed_loop(hcci_plant, mpc.MpcController(hcci_model, cfg), ref,
                                   noise=plant.NoiseSpec(enabled=False), fallback_budget=3)
        assert not tr.ok and len(tr) < 60 and "fallback" in tr.message
        assert plant.limits_ok(tr, cfg)

    def test_divergence_ends_run(self, hcci_model):
        class Exploding:
            n, m = 6, 3
            calls = 0

            def step(self, z, u):
                self.calls += 1
                return z * (np.inf if self.calls > 5 else 1.0)

        z0 = plant.steady_state(plant.ElmPlant(hcci_model))
        tr = plant.run_closed_loop(Exploding(), mpc.MpcController(hcci_model, mpc.MpcConfig.hcci()),
                                   np.tile([2.9, -7.0], (30, 1)), z0=z0)
        assert not tr.ok and "cycle 5" in tr.message and len(tr) <= 6

    def test_elm_plant_matches_model_rollout(self, hcci_model, hcci_plant):
        u = sysid.gen_aprbs(sysid.AprbsSpec(plant.U_LO, plant.U_HI, 3, 9, 300, 8))
        z0 = plant.steady_state(hcci_plant)
        z = plant.simulate_open_loop(hcci_plant, u, z0)
        pred = sysid.rollout_msap(hcci_model, u[:-1], z0[None], 299, sysid.NarxConfig(1, 1, 3, 6))
        assert np.array_equal(pred, z[1:])

    def test_dimension_mismatch(self, hcci_model, hcci_plant):
        cfg = mpc.MpcConfig.hcci()
        with pytest.raises(ValueError):
            plant.run_closed_loop(hcci_plant, mpc.MpcController(hcci_model, cfg), np.zeros((10, 3)))


class TestSettling:
    def test_first_order_response(self):
        r = np.r_[np.zeros(10), np.ones(40)]
        y = np.r_[np.zeros(10), 1 - 0.5 ** np.arange(1, 41)]
        st = plant.settling_times(y, r)
        # |y - 1| = 0.5**(j+1) <= 0.05 first at j = 4
        assert st[0]["settle"] == 4 and st[0]["size"] == 1.0

    def test_never_settles(self):
        r = np.r_[np.zeros(5), np.ones(20)]
        y = np.r_[np.zeros(5), np.zeros(20)]
        assert plant.settling_times(y, r)[0]["settle"] is None

    def test_guard_ignores_preview(self):
        r = np.r_[np.zeros(5), np.ones(20), 2 * np.ones(5)]
        y = r.copy()
        y[22:25] = 1.5
        assert plant.settling_times(y, r, guard=0)[0]["settle"] is None
        assert plant.settling_times(y, r, guard=3)[0]["settle"] == 0

    def test_summary_fields(self, hcci_model, hcci_plant):
        sc = scenarios.build_scenario("step_rmax_constrained", cycles=60, seed=2)
        tr = scenarios.run_scenario(hcci_plant, hcci_model, sc)
        s = plant.summarize(tr, sc.cfg)
        for key in ("rmse", "settling_imep", "input_limits_ok", "y_violations", "x_violations",
                    "qp_iterations_mean", "fallbacks"):
            assert key in s
