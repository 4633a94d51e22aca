import numpy as np
import pytest

from coupled_diffusion.ddpm import (
    Sampler,
    ddim_step,
    dump_schedule,
    eps_to_x0,
    forward_sample,
    load_schedule_table,
    make_schedule,
    posterior_coefs,
    posterior_mean,
    posterior_step,
    reverse_step,
    timestep_sequence,
    x0_to_eps,
)
from coupled_diffusion.errors import ShapeError


def rejection_posterior(x0, x2, sched, n_keep, halfwidth, seed):
    """Draws of x_1 from the forward chain, kept when x_2 lands within ``halfwidth`` of ``x2``."""
    rng = np.random.default_rng(seed)
    a1, a2 = sched.alphas[1], sched.alphas[2]
    kept = []
    total = 0
    while total < n_keep:
        x1 = np.sqrt(a1) * x0 + np.sqrt(1 - a1) * rng.standard_normal(2_000_000)
        x2_draw = np.sqrt(a2) * x1 + np.sqrt(1 - a2) * rng.standard_normal(x1.size)
        hit = x1[np.abs(x2_draw - x2) < halfwidth]
        kept.append(hit)
        total += hit.size
    return np.concatenate(kept)[:n_keep]


class TestSchedules:
    @pytest.mark.parametrize("kind", ["cosine", "linear"])
    @pytest.mark.parametrize("T", [10, 150])
    def test_posterior_variance_identity(self, kind, T):
        """Stored posterior variance equals the Gaussian-product form 1 / (alpha/beta + 1/(1 - ab_prev))."""
        s = make_schedule(kind, T)
        t = np.arange(2, T + 1)
        precision = s.alphas[t] / s.betas[t] + 1.0 / (1.0 - s.alpha_bars[t - 1])
        assert np.allclose(s.posterior_vars[t], 1.0 / precision, rtol=0, atol=1e-12)
        direct = (1 - s.alpha_bars[t - 1]) / (1 - s.alpha_bars[t]) * s.betas[t]
        assert np.max(np.abs(s.posterior_vars[t] - direct)) <= 1e-12
        assert s.posterior_vars[1] == 0.0

    @pytest.mark.parametrize("kind", ["cosine", "linear"])
    def test_tables_are_consistent(self, kind):
        s = make_schedule(kind, 40)
        assert s.alpha_bars[0] == 1.0
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.allclose(s.alpha_bars, np.cumprod(s.alphas), atol=0)
        assert np.all((s.betas[1:] >= 1e-5) & (s.betas[1:] <= 0.999))
        assert np.array_equal(s.alphas, 1 - s.betas)

    def test_single_step_chain(self):
        s = make_schedule("linear", 1)
        assert s.T == 1 and s.posterior_vars[1] == 0.0

    def test_cosine_endpoint_values(self):
        # alpha_bar_T = cos(pi/2)^2 / cos(0.008/1.008 pi/2)^2 = 0 before clamping, so beta_T hits 0.999
        s = make_schedule("cosine", 150)
        assert s.betas[-1] == 0.999
        f0 = np.cos(0.008 / 1.008 * np.pi / 2) ** 2
        f1 = np.cos((1 / 150 + 0.008) / 1.008 * np.pi / 2) ** 2
        assert s.alpha_bars[1] == pytest.approx(f1 / f0, rel=1e-14)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            make_schedule("quadratic", 10)
        with pytest.raises(ValueError):
            make_schedule("cosine", 0)

    def test_tables_read_only(self):
        s = make_schedule("cosine", 5)
        with pytest.raises(ValueError):
            s.betas[1] = 0.5

    def test_dump_roundtrip(self):
        s = make_schedule("cosine", 12)
        table = load_schedule_table(dump_schedule(s))
        assert table.shape == (13, 4)
        assert np.array_equal(table[:, 1], s.betas)
        assert np.array_equal(table[:, 2], s.alpha_bars)
        assert np.array_equal(table[:, 3], s.posterior_vars)


class TestForwardAndConversion:
    def test_t0_is_identity(self):
        s = make_schedule("cosine", 10)
        x0 = np.linspace(-1, 1, 6).reshape(2, 3)
        assert np.array_equal(forward_sample(x0, 0, np.ones_like(x0), s), x0)

    def test_zero_noise_scales_signal(self):
        s = make_schedule("linear", 10)
        x0 = np.arange(4.0)
        assert np.allclose(forward_sample(x0, 7, np.zeros(4), s), np.sqrt(s.alpha_bars[7]) * x0)

    def test_per_row_timesteps(self):
        s = make_schedule("cosine", 10)
        x0, eps = np.ones((3, 2)), np.zeros((3, 2))
        out = forward_sample(x0, np.array([0, 5, 10]), eps, s)
        assert np.allclose(out[:, 0], np.sqrt(s.alpha_bars[[0, 5, 10]]))

    @pytest.mark.parametrize("seed", range(5))
    def test_eps_x0_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        s = make_schedule("cosine", 150)
        x_t = rng.normal(size=(8, 5))
        t = rng.integers(1, 150, size=8)
        eps = rng.normal(size=(8, 5))
        back = x0_to_eps(x_t, eps_to_x0(x_t, eps, t, s), t, s)
        assert np.max(np.abs(back - eps)) < 1e-10

    def test_true_noise_recovers_x0(self):
        rng = np.random.default_rng(1)
        s = make_schedule("linear", 50)
        x0, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        x_t = forward_sample(x0, 20, eps, s)
        assert np.allclose(eps_to_x0(x_t, eps, 20, s), x0, atol=1e-12)

    def test_shape_and_range_errors(self):
        s = make_schedule("cosine", 10)
        with pytest.raises(ShapeError):
            forward_sample(np.ones(3), 1, np.ones(4), s)
        with pytest.raises(ValueError):
            forward_sample(np.ones(3), 11, np.ones(3), s)
        with pytest.raises(ValueError):
            x0_to_eps(np.ones(3), np.ones(3), 0, s)
        with pytest.raises(ValueError):
            forward_sample(np.ones(3), 2.5, np.ones(3), s)


class TestPosterior:
    def test_t1_step_is_deterministic(self):
        s = make_schedule("cosine", 10)
        x0 = np.array([0.3, -0.2])
        out = posterior_step(np.array([1.0, 1.0]), x0, 1, s, np.full(2, 50.0))
        assert np.array_equal(out, posterior_mean(np.array([1.0, 1.0]), x0, 1, s))
        assert np.allclose(out, x0, atol=1e-12)  # c_x0 = 1, c_xt = 0 at t=1

    def test_mean_is_fixed_point_on_deterministic_path(self):
        # with eps = 0 both x_t and x_{t-1} lie on the same scaled line; the posterior
        # mean interpolates them: c_x0 + c_xt sqrt(ab_t) = sqrt(ab_{t-1})
        s = make_schedule("cosine", 30)
        for t in range(1, 31):
            c_x0, c_xt, _ = posterior_coefs(t, s)
            assert c_x0 + c_xt * np.sqrt(s.alpha_bars[t]) == pytest.approx(np.sqrt(s.alpha_bars[t - 1]), abs=1e-12)

    def test_monte_carlo_matches_rejection_oracle(self):
        s = make_schedule("linear", 2, beta_start=0.3, beta_end=0.5)
        x0, x2 = 0.7, 0.1
        n = 100_000
        rng = np.random.default_rng(0)
        draws = posterior_step(np.full(n, x2), np.full(n, x0), 2, s, rng.standard_normal(n))
        oracle = rejection_posterior(x0, x2, s, n, halfwidth=0.005, seed=1)
        se_mean = np.sqrt(draws.var() / n + oracle.var() / n)
        assert abs(draws.mean() - oracle.mean()) < 3 * se_mean
        # the variance of a normal sample has SE sigma^2 sqrt(2/(n-1))
        se_var = np.sqrt(2 / (n - 1)) * np.hypot(draws.var(), oracle.var())
        assert abs(draws.var() - oracle.var()) < 3 * se_var
        assert draws.var() == pytest.approx(s.posterior_vars[2], rel=0.02)


class TestDdim:
    def test_eta_zero_ignores_noise(self):
        s = make_schedule("cosine", 20)
        rng = np.random.default_rng(0)
        x_t, x0 = rng.normal(size=5), rng.normal(size=5)
        a = ddim_step(x_t, x0, 10, 5, 0.0, s, rng.normal(size=5))
        b = ddim_step(x_t, x0, 10, 5, 0.0, s, None)
        assert np.array_equal(a, b)

    def test_eta_zero_to_t0_returns_x0(self):
        s = make_schedule("cosine", 20)
        x0 = np.array([0.25, 0.5])
        assert np.allclose(ddim_step(np.ones(2), x0, 20, 0, 0.0, s), x0, atol=1e-12)

    def test_eta_one_adjacent_matches_posterior(self):
        s = make_schedule("linear", 25)
        rng = np.random.default_rng(3)
        x_t, x0, z = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
        for t in (2, 13, 25):
            a = ddim_step(x_t, x0, t, t - 1, 1.0, s, z)
            b = posterior_step(x_t, x0, t, s, z)
            assert np.allclose(a, b, atol=1e-12)

    def test_deterministic_path_is_preserved(self):
        s = make_schedule("cosine", 30)
        x0, eps = np.array([0.4, -0.3]), np.array([1.2, 0.1])
        x_t = forward_sample(x0, 30, eps, s)
        x_prev = ddim_step(x_t, x0, 30, 12, 0.0, s)
        assert np.allclose(x_prev, forward_sample(x0, 12, eps, s), atol=1e-12)

    def test_bad_arguments(self):
        s = make_schedule("cosine", 10)
        with pytest.raises(ValueError):
            ddim_step(np.ones(2), np.ones(2), 3, 3, 0.0, s)
        with pytest.raises(ValueError):
            ddim_step(np.ones(2), np.ones(2), 3, 1, 1.5, s)
        with pytest.raises(ValueError):
            ddim_step(np.ones(2), np.ones(2), 3, 1, 0.5, s, None)


class TestSamplerAndSequence:
    @pytest.mark.parametrize("text,want", [("ddpm", Sampler()), ("ddim", Sampler("ddim", 0.0)),
                                           ("DDIM(0.5)", Sampler("ddim", 0.5))])
    def test_parse(self, text, want):
        assert Sampler.parse(text) == want
        assert Sampler.parse(str(want)) == want

    def test_parse_rejects(self):
        with pytest.raises(ValueError):
            Sampler.parse("euler")
        with pytest.raises(ValueError):
            Sampler("ddim", 2.0)

    @pytest.mark.parametrize("steps", [1, 7, 50, 150])
    def test_timestep_sequence(self, steps):
        seq = timestep_sequence(make_schedule("cosine", 150), steps)
        assert seq[0] == 150 and seq[-1] == 0 and len(seq) == steps + 1
        assert all(a > b for a, b in zip(seq, seq[1:]))

    def test_timestep_sequence_bounds(self):
        with pytest.raises(ValueError):
            timestep_sequence(make_schedule("cosine", 10), 11)

    def test_reverse_step_dispatch(self):
        s = make_schedule("cosine", 20)
        rng = np.random.default_rng(0)
        x_t, x0, z = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
        assert np.array_equal(reverse_step(x_t, x0, 5, 4, s, Sampler(), z), posterior_step(x_t, x0, 5, s, z))
        assert np.array_equal(reverse_step(x_t, x0, 10, 5, s, Sampler(), z), ddim_step(x_t, x0, 10, 5, 1.0, s, z))
        assert np.array_equal(reverse_step(x_t, x0, 10, 5, s, Sampler("ddim", 0.0), z),
                              ddim_step(x_t, x0, 10, 5, 0.0, s))
