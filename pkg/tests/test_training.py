import numpy as np
import pytest

from dssmsh.data import SeriesBatch, simulate_linear_ssm
from dssmsh.errors import ConfigError
from dssmsh.model import ModelConfig, draw_sequence_noise, init_model_params, sequence_elbo
from dssmsh.neuralnet import AdamState, adam_step, load_checkpoint
from dssmsh.training import (
    LOG_FIELDS,
    TrainConfig,
    destandardize,
    sampling_weights,
    series_scale,
    split_validation,
    standardize,
    train,
    validate,
    weighted_sampler,
)

TINY = ModelConfig(obs_dim=1, covariate_dim=1, latent_dim=2, rnn_hidden_dim=4, head_hidden_dims=(4,))


def const_batch(values, T=4):
    y = np.stack([np.full((T, 1), v, dtype=float) for v in values])
    return SeriesBatch(y, np.zeros((len(values), T, 1)))


@pytest.fixture(scope="module")
def tiny_data():
    tr, _ = simulate_linear_ssm(n_train=24, n_test=1, T=12, seed=3)
    return standardize(tr)[0]


class TestStandardize:
    def test_zero_series(self):
        out, scale = standardize(const_batch([0.0]))
        assert scale[0] == 1.0
        np.testing.assert_array_equal(out.y, 0.0)

    def test_constant_three(self):
        out, scale = standardize(const_batch([3.0], T=3))
        assert scale[0] == 4.0
        np.testing.assert_array_equal(out.y, 0.75)
        np.testing.assert_array_equal(out.scale, [4.0])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        b = SeriesBatch(rng.standard_normal((3, 7, 2)) * 50, np.zeros((3, 7, 0)))
        out, scale = standardize(b)
        np.testing.assert_allclose(destandardize(out.y, scale), b.y, rtol=0, atol=1e-12)

    def test_upto_uses_prefix_only(self):
        b = const_batch([1.0], T=4)
        b.y[0, 2:] = 100.0
        assert series_scale(b.y, b.lengths, upto=2)[0] == 2.0

    def test_lengths_respected(self):
        b = const_batch([2.0], T=4)
        b.y[0, 3:] = 1e9
        b.lengths = np.array([3])
        assert series_scale(b.y, b.lengths)[0] == 3.0


class TestSampler:
    def test_weighted_ratio(self):
        b = const_batch([0.0, 3.0])
        idx = next(weighted_sampler(b, 10 ** 5, 0))
        frac = np.mean(idx == 1)
        assert abs(frac - 0.8) < 0.02 * 0.8

    def test_uniform(self):
        b = const_batch([2.0] * 5)
        counts = np.bincount(next(weighted_sampler(b, 10 ** 5, 1)), minlength=5) / 10 ** 5
        np.testing.assert_allclose(counts, 0.2, rtol=0.05)
        np.testing.assert_allclose(sampling_weights(b), 0.2)

    def test_single_window(self):
        assert np.all(next(weighted_sampler(const_batch([7.0]), 100, 2)) == 0)

    def test_weights_use_raw_magnitude(self):
        out, _ = standardize(const_batch([0.0, 3.0]))
        np.testing.assert_allclose(sampling_weights(out), [0.2, 0.8])


class TestConfig:
    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"learning_rate": 0.0}, {"num_steps": -1},
                                    {"validation_fraction": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestTrain:
    def test_zero_steps_returns_initial(self, tiny_data):
        params, tlog = train(TINY, TrainConfig(num_steps=0, seed=4), tiny_data)
        assert params.equals(init_model_params(TINY, 4))
        assert tlog.records == []

    def test_deterministic_losses(self, tiny_data):
        cfg = TrainConfig(num_steps=6, batch_size=4, seed=5, checkpoint_every=3)
        a = train(TINY, cfg, tiny_data)[1]
        b = train(TINY, cfg, tiny_data)[1]
        np.testing.assert_array_equal(a.losses, b.losses)
        assert a.validation == b.validation

    def test_log_steps_monotone_and_csv(self, tiny_data, tmp_path):
        _, tlog = train(TINY, TrainConfig(num_steps=5, batch_size=4, checkpoint_every=2), tiny_data,
                        out_dir=tmp_path)
        steps = [r.step for r in tlog.records]
        assert steps == sorted(steps) and len(set(steps)) == len(steps)
        tlog.append_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == ",".join(LOG_FIELDS) and len(lines) == 6
        assert (tmp_path / "checkpoint_latest.dssh").exists()

    def test_validate_repeatable(self, tiny_data):
        params = init_model_params(TINY, 0)
        assert validate(TINY, params, tiny_data, seed=7) == validate(TINY, params, tiny_data, seed=7)

    def test_validate_leaves_params(self, tiny_data):
        params = init_model_params(TINY, 0)
        before = params.copy()
        validate(TINY, params, tiny_data)
        assert params.equals(before)

    def test_checkpoint_round_trip_validates_bit_exact(self, tiny_data, tmp_path):
        from dssmsh.neuralnet import save_checkpoint

        params, _ = train(TINY, TrainConfig(num_steps=3, batch_size=4), tiny_data)
        save_checkpoint(tmp_path / "c.dssh", params)
        loaded, _ = load_checkpoint(tmp_path / "c.dssh")
        assert validate(TINY, loaded, tiny_data, seed=1) == validate(TINY, params, tiny_data, seed=1)

    def test_split_validation(self, tiny_data):
        tr, va = split_validation(tiny_data, 0.25, 0)
        assert len(tr) == 18 and len(va) == 6
        assert set(tr.ids).isdisjoint(va.ids)
        assert split_validation(tiny_data, 0.0, 0)[1] is None


def test_overfit_loss_eventually_decreases(tiny_data):
    batch = tiny_data.subset(np.arange(4))
    params = init_model_params(TINY, 8)
    noise = draw_sequence_noise(np.random.default_rng(8), 4, batch.length, TINY.latent_dim)
    opt = AdamState()
    losses = []
    for _ in range(200):
        loss = sequence_elbo(TINY, params, batch.y, batch.u, noise=noise)
        loss.backward()
        adam_step(params, opt, 1e-2)
        losses.append(loss.item())
    assert losses[-1] < losses[0]
    assert min(losses[-20:]) < min(losses[:20])


@pytest.mark.slow
def test_trained_validation_beats_untrained(desk_run):
    untrained = validate(desk_run.cfg, init_model_params(desk_run.cfg, 0), desk_run.val, seed=0)
    trained = validate(desk_run.cfg, desk_run.params, desk_run.val, seed=0)
    assert trained < untrained
    assert (untrained - trained) / abs(untrained) >= 0.30
