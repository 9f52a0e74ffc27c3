import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmts import tensor as T
from fmts.errors import ConfigError, ShapeError, TrainingDiverged
from fmts.model import ModelConfig, init_params
from fmts.optim import AdamConfig
from fmts.training import TrainConfig, flow_matching_loss, fm_loss, interpolate, sample_t, train

TINY = ModelConfig(series_length=1, channels=1, model_dim=16, num_heads=2, encoder_layers=1, decoder_layers=1,
                   feedforward_dim=32, register_count=2, time_embed_dim=8)


class TestSampleT:
    def test_logit_normal_median(self):
        t = sample_t("logit_normal", T.make_rng(0), 100_000)
        assert abs(np.median(t) - 0.5) < 0.01

    def test_logit_normal_mass_near_middle(self):
        t = sample_t("logit_normal", T.make_rng(1), 100_000)
        assert np.sum((t > 0.45) & (t < 0.55)) > np.sum(t < 0.1)

    def test_uniform_ks(self):
        t = np.sort(sample_t("uniform", T.make_rng(2), 10_000))
        n = len(t)
        ecdf_hi = np.arange(1, n + 1) / n
        ecdf_lo = np.arange(n) / n
        ks = max(np.max(ecdf_hi - t), np.max(t - ecdf_lo))
        assert ks < 1.63 / np.sqrt(n)  # asymptotic 1% critical value

    @pytest.mark.parametrize("mode", ["logit_normal", "uniform"])
    def test_open_interval(self, mode):
        t = sample_t(mode, T.make_rng(3), 50_000, std=20.0)
        assert np.all((t > 0) & (t < 1))

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            sample_t("beta", T.make_rng(0), 4)


class TestInterpolate:
    def test_endpoints(self):
        rng = np.random.default_rng(0)
        z0, z1 = rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 4, 2))
        assert np.array_equal(interpolate(z0, z1, np.zeros(3)), z0)
        assert np.array_equal(interpolate(z0, z1, np.ones(3)), z1)

    def test_midpoint(self):
        assert interpolate(np.zeros((1, 1, 1)), np.full((1, 1, 1), 4.0), [0.5]).item() == 2.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            interpolate(np.zeros((2, 3, 1)), np.zeros((2, 4, 1)), [0.1, 0.2])

    @settings(max_examples=200)
    @given(a=st.floats(-1e3, 1e3), b=st.floats(-1e3, 1e3), t=st.floats(0, 1))
    def test_matches_reference_to_one_ulp(self, a, b, t):
        got = interpolate(np.array([[[a]]]), np.array([[[b]]]), [t]).item()
        ref = float(np.longdouble(t) * np.longdouble(b) + (1 - np.longdouble(t)) * np.longdouble(a))
        # float64 combination of two rounded products
        assert abs(got - ref) <= np.spacing(abs(t * b)) + np.spacing(abs((1 - t) * a)) + np.spacing(abs(ref))


class TestLoss:
    def test_perfect_predictor_gives_zero(self):
        rng = np.random.default_rng(0)
        z0, z1 = rng.standard_normal((5, 3, 2)), rng.standard_normal((5, 3, 2))
        oracle = lambda p, z_t, t: T.Tensor(z1 - z0, dtype=np.float64)
        assert flow_matching_loss(None, z0, z1, rng.random(5), oracle).item() == 0.0

    def test_zero_predictor_expected_loss(self):
        rng = np.random.default_rng(1)
        z1 = np.tile(rng.standard_normal((1, 6, 2)), (20_000, 1, 1))
        z0 = rng.standard_normal(z1.shape)
        zero = lambda p, z_t, t: T.zeros(z_t.shape)
        with T.precision(np.float64):
            loss = flow_matching_loss(None, z0, z1, rng.random(len(z1)), zero).item()
        assert loss == pytest.approx(np.mean(z1[0] ** 2) + 1, rel=0.02)

    def test_permutation_invariant(self):
        p = init_params(ModelConfig(series_length=4, channels=2, model_dim=8, num_heads=2, feedforward_dim=8,
                                    register_count=1, time_embed_dim=4), T.make_rng(0))
        rng = np.random.default_rng(2)
        z0, z1, t = rng.standard_normal((6, 4, 2)), rng.standard_normal((6, 4, 2)), rng.random(6)
        perm = rng.permutation(6)
        with T.precision(np.float64):
            p = p.astype(np.float64)
            a = flow_matching_loss(p, z0, z1, t).item()
            b = flow_matching_loss(p, z0[perm], z1[perm], t[perm]).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_fm_loss_returns_all_gradients(self):
        p = init_params(TINY, T.make_rng(0))
        loss, grads = fm_loss(p, np.ones((4, 1, 1)), T.make_rng(1), TrainConfig())
        assert np.isfinite(loss)
        assert set(grads) == set(p.tensors)
        assert all(np.all(np.isfinite(g)) for g in grads.values())

    def test_non_finite_loss_diverges(self):
        p = init_params(TINY, T.make_rng(0))
        bad = lambda params, z_t, t: T.Tensor(np.full(z_t.shape, np.inf, dtype=np.float32))
        with pytest.raises(TrainingDiverged):
            fm_loss(p, np.ones((2, 1, 1)), T.make_rng(1), TrainConfig(), velocity_fn=bad)


class TestTrain:
    def gaussian_data(self, n=1024):
        return (2.0 + 0.5 * T.make_rng(7).standard_normal((n, 1, 1))).astype(np.float32)

    def test_zero_steps(self):
        p = init_params(TINY, T.make_rng(0))
        rep = train(p, self.gaussian_data(), TrainConfig(total_steps=0))
        assert rep.losses == [] and rep.steps == 0
        for k in p:
            assert np.array_equal(rep.params[k].data, p[k].data)

    def test_deterministic(self):
        cfg = TrainConfig(batch_size=16, total_steps=15, seed=4)
        a = train(init_params(TINY, T.make_rng(0)), self.gaussian_data(), cfg)
        b = train(init_params(TINY, T.make_rng(0)), self.gaussian_data(), cfg)
        assert a.losses == b.losses
        assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)

    def test_checkpoint_and_log_cadence(self):
        seen, logged = [], []
        train(init_params(TINY, T.make_rng(0)), self.gaussian_data(), TrainConfig(total_steps=7, checkpoint_every=3),
              checkpoint_fn=lambda step, params, opt: seen.append(step),
              log_fn=lambda step, loss, ms: logged.append(step))
        assert seen == [3, 6]
        assert logged == list(range(1, 8))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            train(init_params(TINY, T.make_rng(0)), np.zeros((4, 2, 1)), TrainConfig(total_steps=1))

    def test_divergence_reports_step(self):
        data = self.gaussian_data()
        data[:] = 1e30  # finite inputs whose squared error overflows float32
        with pytest.raises(TrainingDiverged, match="step 1"):
            train(init_params(TINY, T.make_rng(0)), data, TrainConfig(total_steps=3))

    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(t_sampling="beta"), dict(logit_normal_std=0.0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()

    @pytest.mark.slow
    def test_gaussian_loss_drops(self):
        cfg = TrainConfig(batch_size=128, total_steps=2000, seed=0, optimizer=AdamConfig(lr=3e-3))
        rep = train(init_params(TINY, T.make_rng(0)), self.gaussian_data(), cfg)
        assert np.mean(rep.losses[-100:]) < 0.25 * np.mean(rep.losses[:10])
