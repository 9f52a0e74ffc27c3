import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmts import tensor as T
from fmts.errors import ContractError, DomainError, SamplingDiverged, ShapeError
from fmts.model import ModelConfig, init_params
from fmts.sampling import (ConditionSpec, SampleSchedule, build_mask, power_schedule, sample_conditional,
                           sample_unconditional, shift_time, shifted_schedule, uniform_schedule)

MU, SIGMA = 2.0, 0.5


def gaussian_field(z, t):
    t = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (z.ndim - 1))
    slope = (t * SIGMA ** 2 - (1 - t)) / (t ** 2 * SIGMA ** 2 + (1 - t) ** 2)
    return (MU + slope * (z - t * MU)).astype(z.dtype)


def constant_field(c):
    return lambda z, t: np.full_like(z, c)


class TestSchedules:
    def test_alpha_one_is_uniform(self):
        assert shifted_schedule(4, 1.0).values.tolist() == [0, 0.25, 0.5, 0.75, 1]
        for N in (1, 7, 32, 1000):
            assert np.array_equal(shifted_schedule(N, 1.0).values, np.arange(N + 1) / N)

    def test_alpha_three_two_steps(self):
        assert shifted_schedule(2, 3.0).values.tolist() == [0, 0.25, 1]

    def test_matches_shift_formula(self):
        N, alpha = 32, 3.0
        literal = shift_time((N - np.arange(N + 1)) / N, alpha)
        assert np.allclose(shifted_schedule(N, alpha).values, literal, atol=1e-15)

    def test_power_value(self):
        assert power_schedule(2, 0.0625).values[1] == pytest.approx(0.95760, abs=1e-5)
        assert np.array_equal(power_schedule(5, 1.0).values, uniform_schedule(5).values)

    @pytest.mark.parametrize("call", [lambda: shifted_schedule(4, 0.5), lambda: shifted_schedule(0, 3.0),
                                      lambda: power_schedule(4, 0.0), lambda: power_schedule(4, -1.0),
                                      lambda: uniform_schedule(2.5)])
    def test_domain_errors(self, call):
        with pytest.raises(DomainError):
            call()

    def test_schedule_type_rejects_bad_grids(self):
        with pytest.raises(ContractError):
            SampleSchedule(np.array([0.0, 0.6, 0.5, 1.0]), "custom", 0.0)
        with pytest.raises(ContractError):
            SampleSchedule(np.array([0.1, 1.0]), "custom", 0.0)

    @settings(max_examples=300, deadline=None)
    @given(N=st.integers(1, 1024), alpha=st.floats(1, 10), k=st.floats(0, 1, exclude_min=True))
    def test_invariants(self, N, alpha, k):
        for sched in (shifted_schedule(N, alpha), power_schedule(N, k)):
            v = sched.values
            assert len(v) == N + 1 and v[0] == 0.0 and v[-1] == 1.0
            assert np.all(np.diff(v) > 0)

    def test_tiny_k_stays_strictly_increasing(self):
        # every (i/4) ** 1e-300 rounds to 1.0; the grid steps down by 2**-53 instead
        u = 2.0 ** -53
        assert power_schedule(4, 1e-300).values.tolist() == [0.0, 1 - 3 * u, 1 - 2 * u, 1 - u, 1.0]

    @settings(max_examples=200, deadline=None)
    @given(N=st.integers(1, 512), k=st.floats(1e-3, 1))
    def test_power_dominance(self, N, k):
        v = power_schedule(N, k).values
        grid = np.arange(N + 1) / N
        assert np.all(v >= grid)
        if k <= 1 - 1e-9 and N > 1:  # closer to 1, t**k rounds back to t in float64
            assert np.all(v[1:-1] > grid[1:-1])


class TestUnconditional:
    @pytest.mark.parametrize("schedule", [uniform_schedule(7), shifted_schedule(32, 3.0), power_schedule(5, 0.3)])
    def test_constant_field_telescopes(self, schedule):
        out = sample_unconditional(constant_field(0.75), 50, schedule, T.make_rng(1), series_shape=(3, 2))
        z0 = T.make_rng(1).standard_normal((50, 3, 2)).astype(np.float32)
        assert np.allclose(out, z0 + 0.75, atol=1e-5)

    def test_gaussian_oracle_mean(self):
        out = sample_unconditional(gaussian_field, 10_000, shifted_schedule(32, 3.0), T.make_rng(2), (1, 1))
        assert abs(out.mean() - MU) < 0.05

    def test_gaussian_oracle_std_converges_with_steps(self):
        # Euler bias shrinks with step count; 256 uniform steps is well within 5%
        out = sample_unconditional(gaussian_field, 10_000, uniform_schedule(256), T.make_rng(3), (1, 1))
        assert abs(out.std() / SIGMA - 1) < 0.05

    def test_deterministic(self):
        p = init_params(ModelConfig(series_length=4, channels=2, model_dim=8, num_heads=2, feedforward_dim=8,
                                    register_count=1, time_embed_dim=4), T.make_rng(0))
        a = sample_unconditional(p, 3, shifted_schedule(4), T.make_rng(5))
        b = sample_unconditional(p, 3, shifted_schedule(4), T.make_rng(5))
        assert a.tobytes() == b.tobytes() and a.shape == (3, 4, 2)

    def test_divergence_reports_step(self):
        def blowup(z, t):
            return np.full_like(z, np.inf) if t[0] > 0.3 else np.zeros_like(z)
        with pytest.raises(SamplingDiverged) as info:
            sample_unconditional(blowup, 2, uniform_schedule(4), T.make_rng(0), (1, 1))
        assert info.value.step == 2

    def test_shape_required_for_bare_fields(self):
        with pytest.raises(ContractError):
            sample_unconditional(constant_field(0.0), 2, uniform_schedule(2), T.make_rng(0))


class TestConditional:
    def cond(self, N=8, k=0.0625, **kw):
        rng = np.random.default_rng(0)
        y = rng.standard_normal((6, 2))
        mask = np.zeros((6, 2), dtype=bool)
        mask[:2] = True
        return ConditionSpec(y, mask, steps=N, k=k, **kw)

    def test_single_step_starts_from_pure_noise(self):
        seen = []
        cond = self.cond(N=1, k=0.4)
        out = sample_conditional(constant_field(0.5), cond, T.make_rng(9), overwrite_observed=False,
                                 callback=lambda i, t, z_t, v: seen.append((t, z_t.copy())))
        rng = T.make_rng(9)
        rng.standard_normal((1, 6, 2))  # initial estimate, unused at t = 0
        z0 = rng.standard_normal((1, 6, 2)).astype(np.float32)
        assert len(seen) == 1 and seen[0][0] == 0.0
        assert np.array_equal(seen[0][1], z0)
        assert np.allclose(out, z0[0] + 0.5)

    def test_last_step_algebra(self):
        N, c = 5, 0.3
        seen = []
        out = sample_conditional(constant_field(c), self.cond(N=N, k=1.0), T.make_rng(1), overwrite_observed=False,
                                 callback=lambda i, t, z_t, v: seen.append((t, z_t.copy())))
        t_last, z_last = seen[-1]
        assert t_last == pytest.approx((N - 1) / N)
        assert np.allclose(out, z_last[0] + (1 - t_last) * c, atol=1e-6)

    def test_observed_cells_restored(self):
        cond = self.cond()
        out = sample_conditional(gaussian_field, cond, T.make_rng(2))
        assert np.array_equal(out[cond.mask], cond.y[cond.mask].astype(np.float32))
        assert np.all(np.isfinite(out))

    def test_observed_replacement_inside_loop(self):
        cond = self.cond(N=4, k=1.0)
        seen = []
        sample_conditional(constant_field(0.0), cond, T.make_rng(3),
                           callback=lambda i, t, z_t, v: seen.append((t, z_t.copy())))
        rng = T.make_rng(3)
        rng.standard_normal((1, 6, 2))
        for t, z_t in seen:
            z0 = rng.standard_normal((1, 6, 2)).astype(np.float32)
            expected = (t * cond.y.astype(np.float32) + (1 - t) * z0[0])[cond.mask]
            assert np.allclose(z_t[0][cond.mask], expected, atol=1e-6)

    def test_batched_masks(self):
        y = np.zeros((3, 6, 2))
        mask = build_mask("random_missing", 6, 2, T.make_rng(0), ratio=0.5, n=3)
        mask[:, 0, 0] = True
        mask[:, 5, 1] = False
        out = sample_conditional(gaussian_field, ConditionSpec(y, mask, steps=4), T.make_rng(0))
        assert out.shape == (3, 6, 2)
        assert np.all(out[mask] == 0)

    def test_contract_errors(self):
        y = np.zeros((4, 1))
        with pytest.raises(ContractError):
            sample_conditional(gaussian_field, ConditionSpec(y, np.ones((4, 1), bool)))
        with pytest.raises(ContractError):
            sample_conditional(gaussian_field, ConditionSpec(y, np.zeros((4, 1), bool)))
        with pytest.raises(DomainError):
            sample_conditional(gaussian_field, ConditionSpec(y, np.eye(4, 1, dtype=bool), k=0.0))
        with pytest.raises(ShapeError):
            sample_conditional(gaussian_field, ConditionSpec(y, np.ones((3, 1), bool)))
        bad = y.copy()
        bad[0] = np.nan
        with pytest.raises(DomainError):
            sample_conditional(gaussian_field, ConditionSpec(bad, np.eye(4, 1, dtype=bool)))

    def test_unobserved_only_follows_variance_recursion(self):
        # with the exact field each completion is E[Z1 | z_t]; mean and variance
        # of the running estimate then follow a closed-form recursion
        N, n = 64, 20_000
        m, a = 0.0, 1.0
        for i in range(N):
            t = i / N
            D = t * t * SIGMA ** 2 + (1 - t) ** 2
            b = (t * SIGMA ** 2 - (1 - t)) / D
            m = t * m + (1 - t) * (MU + b * (t * m - t * MU))
            a = (t * SIGMA ** 2 / D) ** 2 * (t * t * a + (1 - t) ** 2)
        cond = ConditionSpec(np.zeros((n, 1, 1)), np.zeros((n, 1, 1), dtype=bool), steps=N, k=1.0)
        out = sample_conditional(gaussian_field, cond, T.make_rng(6), allow_unobserved=True)
        assert out.mean() == pytest.approx(m, abs=0.02)
        assert out.std() == pytest.approx(np.sqrt(a), rel=0.03)

    def test_unobserved_only_matches_unconditional(self):
        n = 4000
        y, mask = np.zeros((n, 1, 1)), np.zeros((n, 1, 1), dtype=bool)
        cond = ConditionSpec(y, mask, steps=256, k=1.0)
        re_noised = sample_conditional(gaussian_field, cond, T.make_rng(4), allow_unobserved=True)
        plain = sample_unconditional(gaussian_field, n, uniform_schedule(256), T.make_rng(5), (1, 1))
        assert abs(re_noised.mean() / plain.mean() - 1) < 0.1
        assert abs(re_noised.std() / plain.std() - 1) < 0.1


class TestMasks:
    def test_forecast_count(self):
        mask = build_mask("forecast", 192, 3, m=168)
        assert mask.sum() == 168 * 3 and mask[:168].all() and not mask[168:].any()

    def test_missing_fraction(self):
        mask = build_mask("random_missing", 100, 100, T.make_rng(0), ratio=0.7)
        assert abs(mask.mean() - 0.3) < 0.02

    @pytest.mark.parametrize("kw", [dict(kind="forecast", m=24), dict(kind="forecast", m=0),
                                    dict(kind="random_missing", ratio=1.0), dict(kind="random_missing", ratio=0.0),
                                    dict(kind="bogus")])
    def test_rejects_bad_arguments(self, kw):
        with pytest.raises(DomainError):
            build_mask(length=24, channels=2, rng=T.make_rng(0), **kw)
