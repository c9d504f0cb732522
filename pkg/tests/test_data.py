import math

import numpy as np
import pytest
from scipy.linalg import solve_discrete_lyapunov

from dssmsh.data import (
    LinearSSMSpec,
    SeriesBatch,
    kalman_filter_loglik,
    load_csv_panel,
    make_windows,
    read_latents_csv,
    simulate_linear_ssm,
    simulate_seasonal_panel,
    windows_to_batch,
    write_csv_panel,
    write_latents_csv,
)
from dssmsh.errors import ConfigError, ShapeError


def write_text(path, lines):
    path.write_text("\n".join(lines) + "\n")
    return path


class TestLinearSimulator:
    def test_default_constants(self):
        F, G, B = LinearSSMSpec().matrices
        np.testing.assert_array_equal(F, [[1.0, 0.5]])
        np.testing.assert_array_equal(G, [[0.7, 0.8], [0.0, 0.9]])
        np.testing.assert_array_equal(B, [[-1.0], [0.9]])
        assert LinearSSMSpec().state_noise_var == 0.25 and LinearSSMSpec().obs_noise_var == 1.0
        assert np.all(np.abs(np.linalg.eigvals(G)) < 1)

    def test_shapes_and_ids(self):
        tr, te = simulate_linear_ssm(n_train=5, n_test=3, T=7)
        assert tr.y.shape == (5, 7, 1) and tr.u.shape == (5, 7, 1) and tr.latents.shape == (5, 7, 2)
        assert te.y.shape == (3, 7, 1)
        assert tr.ids[0] == "train00000" and te.ids[0] == "test00000"

    def test_zero_noise_fixed_point(self):
        spec = LinearSSMSpec(obs_noise_var=0.0, state_noise_var=0.0, covariate_low=0.0, covariate_high=0.0)
        tr, _ = simulate_linear_ssm(spec, n_train=3, n_test=1, T=20)
        np.testing.assert_array_equal(tr.y, 0.0)

    def test_deterministic_and_independent_streams(self):
        a_tr, a_te = simulate_linear_ssm(n_train=4, n_test=4, T=10, seed=1)
        b_tr, _ = simulate_linear_ssm(n_train=4, n_test=4, T=10, seed=1)
        np.testing.assert_array_equal(a_tr.y, b_tr.y)
        assert not np.allclose(a_tr.y, a_te.y)
        # the test stream does not depend on the size of the train stream
        _, c_te = simulate_linear_ssm(n_train=9, n_test=4, T=10, seed=1)
        np.testing.assert_array_equal(a_te.y, c_te.y)

    def test_stationary_variance_matches_lyapunov(self):
        spec = LinearSSMSpec()
        F, G, B = spec.matrices
        var_u = (spec.covariate_high - spec.covariate_low) ** 2 / 12.0
        P = solve_discrete_lyapunov(G, var_u * B @ B.T + spec.state_noise_var * np.eye(2))
        tr, _ = simulate_linear_ssm(n_train=20, n_test=1, T=10_000, seed=2)
        burn = 200
        beta = tr.latents[:, burn:].reshape(-1, 2)
        y = tr.y[:, burn:].reshape(-1)
        np.testing.assert_allclose(beta.var(axis=0), np.diag(P), rtol=0.05)
        assert y.var() == pytest.approx((F @ P @ F.T).item() + spec.obs_noise_var, rel=0.05)

    def test_invalid_length(self):
        with pytest.raises(ConfigError):
            simulate_linear_ssm(T=0)


class TestKalman:
    def test_single_step_hand_value(self):
        spec = LinearSSMSpec(F=((1.0, 0.0),), G=((0.0, 0.0), (0.0, 0.0)), B=((0.0,), (0.0,)))
        res = kalman_filter_loglik(spec, [[0.0]], [[0.0]])
        assert res.loglik == pytest.approx(-0.5 * math.log(2 * math.pi * 1.25), abs=1e-12)
        assert res.loglik == pytest.approx(-1.0305, abs=1e-4)

    def test_own_spec_beats_perturbed(self):
        spec = LinearSSMSpec()
        F, G, B = spec.matrices
        bad = LinearSSMSpec(G=tuple(map(tuple, 0.5 * G)))
        tr, _ = simulate_linear_ssm(spec, n_train=50, n_test=1, T=50, seed=3)
        own = np.mean([kalman_filter_loglik(spec, tr.y[i], tr.u[i]).loglik for i in range(50)])
        other = np.mean([kalman_filter_loglik(bad, tr.y[i], tr.u[i]).loglik for i in range(50)])
        assert own > other

    def test_noise_free_state_is_tracked(self):
        spec = LinearSSMSpec(state_noise_var=0.0)
        tr, _ = simulate_linear_ssm(spec, n_train=1, n_test=1, T=40, seed=4)
        res = kalman_filter_loglik(spec, tr.y[0], tr.u[0])
        np.testing.assert_allclose(res.means, tr.latents[0], atol=1e-8)

    def test_decomposition_and_order_invariance(self):
        tr, _ = simulate_linear_ssm(n_train=6, n_test=1, T=30, seed=5)
        spec = LinearSSMSpec()
        per = [kalman_filter_loglik(spec, tr.y[i], tr.u[i]) for i in range(6)]
        for r in per:
            assert abs(r.step_logliks.sum() - r.loglik) < 1e-9
        perm = np.random.default_rng(0).permutation(6)
        again = [kalman_filter_loglik(spec, tr.y[i], tr.u[i]).loglik for i in perm]
        assert sum(again) == pytest.approx(sum(r.loglik for r in per), abs=1e-9)
        assert [r.loglik for r in per] == [again[list(perm).index(i)] for i in range(6)]

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            kalman_filter_loglik(LinearSSMSpec(), np.zeros(3), np.zeros(2))


class TestSeasonal:
    def test_exact_periodicity_without_noise(self):
        b = simulate_seasonal_panel(n_series=4, T=100, period=24, noise_std=0.0, trend_scale=0.0)
        np.testing.assert_allclose(b.y[:, 24:], b.y[:, :-24], rtol=0, atol=1e-12)

    def test_scales_span_an_order_of_magnitude(self):
        b = simulate_seasonal_panel(n_series=100, T=50)
        means = b.y.mean(axis=(1, 2))
        assert means.max() / means.min() >= 10.0
        assert np.all(b.y > 0)

    def test_ar_lag_one(self):
        b = simulate_seasonal_panel(n_series=1, T=10_000, noise_std=0.1, trend_scale=0.0, scale_range=(1.0, 1.0))
        t = np.arange(10_000)
        ar = b.y[0, :, 0] - 1.0 - 0.5 * np.sin(2 * np.pi * (t % 24) / 24)
        r1 = np.corrcoef(ar[1:], ar[:-1])[0, 1]
        assert abs(r1 - 0.5) < 0.05

    def test_hour_covariates(self):
        b = simulate_seasonal_panel(n_series=2, T=30, period=24)
        assert b.u.shape == (2, 30, 24)
        assert b.u[0, 13, 13] == 1.0 and b.u[0, 13].sum() == 1.0

    def test_bad_period(self):
        with pytest.raises(ConfigError):
            simulate_seasonal_panel(period=1)


class TestCSV:
    def test_two_by_three(self, tmp_path):
        path = write_text(tmp_path / "p.csv", [
            "timestamp,series_id,value",
            "2014-01-01T00:00:00,a,1", "2014-01-01T01:00:00,a,2", "2014-01-01T02:00:00,a,3",
            "2014-01-01T00:00:00,b,4", "2014-01-01T01:00:00,b,5", "2014-01-01T02:00:00,b,6",
        ])
        b = load_csv_panel(path)
        assert b.y.shape == (2, 3, 1)
        np.testing.assert_array_equal(b.y[:, :, 0], [[1, 2, 3], [4, 5, 6]])
        assert b.u.shape == (2, 3, 32)

    def test_hour_one_hot(self, tmp_path):
        path = write_text(tmp_path / "p.csv", ["timestamp,series_id,value", "2014-01-01T13:00:00,a,1"])
        u = load_csv_panel(path).u[0, 0]
        assert u[13] == 1.0 and u[:24].sum() == 1.0
        assert u[24 + 2] == 1.0  # 2014-01-01 was a Wednesday

    def test_round_trip(self, tmp_path):
        tr, _ = simulate_linear_ssm(n_train=3, n_test=1, T=5, seed=6)
        write_csv_panel(tr, tmp_path / "x.csv", covariate_names=["u"])
        back = load_csv_panel(tmp_path / "x.csv",
                              covariate_spec={"calendar": False, "columns": ["u"], "gap_flag": False})
        np.testing.assert_array_equal(back.y, tr.y)
        np.testing.assert_array_equal(back.u, tr.u)
        assert back.ids == tr.ids

    def test_gap_forward_filled_and_flagged(self, tmp_path):
        path = write_text(tmp_path / "g.csv", [
            "timestamp,series_id,value",
            "2014-01-01T00:00:00,a,1", "2014-01-01T02:00:00,a,3",
            "2014-01-01T00:00:00,b,1", "2014-01-01T01:00:00,b,2", "2014-01-01T02:00:00,b,3",
        ])
        b = load_csv_panel(path, covariate_spec={"calendar": False})
        np.testing.assert_array_equal(b.y[0, :, 0], [1, 1, 3])
        np.testing.assert_array_equal(b.u[0, :, 0], [0, 1, 0])

    def test_duplicate_row(self, tmp_path):
        path = write_text(tmp_path / "d.csv", [
            "timestamp,series_id,value", "2014-01-01T00:00:00,a,1", "2014-01-01T00:00:00,a,2"])
        with pytest.raises(ValueError, match=r"d\.csv:3: duplicate"):
            load_csv_panel(path)

    def test_unparseable_timestamp(self, tmp_path):
        path = write_text(tmp_path / "t.csv", ["timestamp,series_id,value", "yesterday,a,1"])
        with pytest.raises(ValueError, match=r"t\.csv:2: cannot parse timestamp"):
            load_csv_panel(path)

    def test_missing_column(self, tmp_path):
        path = write_text(tmp_path / "m.csv", ["timestamp,series_id,val", "2014-01-01T00:00:00,a,1"])
        with pytest.raises(ValueError, match="missing column 'value'"):
            load_csv_panel(path)

    def test_latents_round_trip(self, tmp_path):
        tr, _ = simulate_linear_ssm(n_train=2, n_test=1, T=4, seed=7)
        write_latents_csv(tr, tmp_path / "l.csv")
        assert (tmp_path / "l.csv").read_text().splitlines()[0] == "t,series_id,beta1,beta2"
        np.testing.assert_array_equal(read_latents_csv(tmp_path / "l.csv", tr.ids, 4), tr.latents)


class TestWindows:
    def test_origins(self):
        b = SeriesBatch(np.zeros((1, 10, 1)), np.zeros((1, 10, 0)))
        assert [w.origin for w in make_windows(b, 6, 2, 2)] == [0, 2]

    def test_stride_equal_to_length(self):
        b = SeriesBatch(np.zeros((1, 10, 1)), np.zeros((1, 10, 0)))
        assert len(make_windows(b, 6, 2, 10)) == 1

    def test_count_formula_on_seasonal_panel(self):
        b = simulate_seasonal_panel(n_series=10, T=200)
        b.lengths = np.arange(40, 240, 20)
        L, p, stride = 48, 24, 7
        expected = sum(max(0, (int(n) - L - p) // stride + 1) for n in b.lengths)
        assert len(make_windows(b, L, p, stride)) == expected

    def test_windows_to_batch(self):
        tr, _ = simulate_linear_ssm(n_train=2, n_test=1, T=12, seed=8)
        wins = make_windows(tr, 4, 2, 3)
        out = windows_to_batch(tr, wins)
        assert out.y.shape == (len(wins), 6, 1)
        w = wins[3]
        np.testing.assert_array_equal(out.y[3], tr.y[w.series, w.origin:w.origin + 6])
        np.testing.assert_array_equal(out.latents[3], tr.latents[w.series, w.origin:w.origin + 6])

    def test_invalid(self):
        b = SeriesBatch(np.zeros((1, 10, 1)), np.zeros((1, 10, 0)))
        with pytest.raises(ConfigError):
            make_windows(b, 0, 2, 1)
