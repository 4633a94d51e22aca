import math

import numpy as np
import pytest

from coupled_diffusion.errors import NonFiniteError, ShapeError
from coupled_diffusion.ouve_sde import (
    LogitNorm,
    OuveParams,
    corrupt_signal,
    diffusion_coef,
    drift,
    dsm_target,
    gaussian_score,
    mean_traj,
    normalize_logits,
    pc_sample,
    perturb_sample,
    residual_logit_score,
    sigma_of_t,
    toy_signals,
    train_score_net,
    write_trajectory_csv,
)

P = OuveParams()


def zero_score(x, t, x_cor):
    return np.zeros_like(x)


class TestKernel:
    def test_mean_endpoints(self):
        x0, xc = np.array([0.3, -1.0]), np.array([2.0, 5.0])
        assert np.array_equal(mean_traj(x0, xc, 0.0, P), x0)
        far = OuveParams(gamma=50.0)
        assert np.allclose(mean_traj(x0, xc, 1.0, far), xc, rtol=1e-20, atol=0)

    def test_mean_half_life(self):
        p = OuveParams(gamma=1.0)
        assert mean_traj(np.array(0.0), np.array(1.0), math.log(2), p) == pytest.approx(0.5, abs=1e-15)

    def test_mean_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mean_traj(np.ones(2), np.ones(3), 0.5, P)

    def test_sigma_endpoints(self):
        assert sigma_of_t(0.0, P) == P.sigma_min
        assert sigma_of_t(1.0, P) == pytest.approx(P.sigma_max, rel=1e-15)
        with pytest.raises(ValueError):
            sigma_of_t(1.5, P)

    def test_diffusion_coefficient_matches_variance_ode(self):
        # d(sigma^2)/dt = -2 gamma sigma^2 + g^2, checked with a central difference
        for t in (0.1, 0.5, 0.9):
            h = 1e-6
            dvar = (sigma_of_t(t + h, P) ** 2 - sigma_of_t(t - h, P) ** 2) / (2 * h)
            rhs = -2 * P.gamma * sigma_of_t(t, P) ** 2 + diffusion_coef(t, P) ** 2
            assert dvar == pytest.approx(rhs, rel=1e-6)

    def test_zero_noise_gives_mean(self):
        x0, xc = np.array([0.1, 0.2]), np.array([1.0, -1.0])
        assert np.array_equal(perturb_sample(x0, xc, 0.4, np.zeros(2), P), mean_traj(x0, xc, 0.4, P))

    @pytest.mark.parametrize("t", [0.0, 0.3, 1.0])
    def test_empirical_std(self, t):
        rng = np.random.default_rng(7)
        n = 100_000
        x0, xc = np.full(n, 0.4), np.full(n, -0.6)
        draws = perturb_sample(x0, xc, t, rng.standard_normal(n), P)
        assert abs(draws.std() / sigma_of_t(t, P) - 1) < 0.01
        se = sigma_of_t(t, P) / math.sqrt(n)
        assert abs(draws.mean() - mean_traj(x0[:1], xc[:1], t, P)[0]) < 3 * se

    def test_drift_pulls_toward_observation(self):
        assert np.array_equal(drift(np.array([1.0]), np.array([3.0]), OuveParams(gamma=2.0)), [4.0])

    def test_params_validated(self):
        with pytest.raises(ValueError):
            OuveParams(gamma=0.0)
        with pytest.raises(ValueError):
            OuveParams(sigma_min=0.5, sigma_max=0.5)


class TestScores:
    def test_dsm_target(self):
        p = OuveParams(sigma_min=1.0, sigma_max=4.0)
        assert sigma_of_t(0.5, p) == pytest.approx(2.0)
        assert np.allclose(dsm_target(np.array([1.0, -1.0]), 0.5, p), [-0.5, 0.5])
        assert np.array_equal(dsm_target(np.zeros(3), 0.2, P), np.zeros(3))
        z = np.array([0.3, -0.7])
        assert np.allclose(dsm_target(2 * z, 0.2, P), 2 * dsm_target(z, 0.2, P))

    def test_residual_baseline(self):
        p = OuveParams(sigma_min=1.0, sigma_max=4.0)
        y = np.array([0.5, 1.5])
        assert np.array_equal(residual_logit_score(y, y, 0.3, np.zeros(2), P), np.zeros(2))
        assert np.allclose(residual_logit_score(np.array([3.0]), np.array([1.0]), 0.0, np.zeros(1), p), [-2.0])
        r = np.array([0.25, -4.0])
        diff = residual_logit_score(y, y - 1, 0.6, r, P) - residual_logit_score(y, y - 1, 0.6, np.zeros(2), P)
        assert np.allclose(diff, r, atol=1e-12)
        with pytest.raises(ShapeError):
            residual_logit_score(y, y, 0.3, np.zeros(3), P)

    def test_gaussian_score_matches_dsm_target(self):
        rng = np.random.default_rng(0)
        x0, xc, z = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
        x = perturb_sample(x0, xc, 0.35, z, P)
        assert np.allclose(gaussian_score(x0, P)(x, 0.35, xc), dsm_target(z, 0.35, P), atol=1e-10)


def _toy(n, seed):
    rng = np.random.default_rng(seed)
    x0 = toy_signals(n, rng=rng)
    return x0, corrupt_signal(x0, rng)


class TestPcSample:
    def test_degenerate_single_step(self):
        xc = np.array([0.2, -0.4, 1.0])
        out = pc_sample(zero_score, xc, 1, 0.0, P, np.random.default_rng(3))
        init_rng, pred_rng, _ = np.random.default_rng(3).spawn(3)
        x = xc + P.sigma_max * init_rng.standard_normal(3)
        want = x - drift(x, xc, P) + diffusion_coef(1.0, P) * pred_rng.standard_normal(3)
        assert np.array_equal(out, want)

    def test_snr_zero_is_predictor_only(self):
        x0, xc = _toy(4, 1)
        score = gaussian_score(x0, P)
        a = pc_sample(score, xc, 20, 0.0, P, np.random.default_rng(5))
        b = pc_sample(score, xc, 20, 0.0, P, np.random.default_rng(5), corrector_steps=0)
        assert np.array_equal(a, b)

    def test_corrector_changes_result(self):
        x0, xc = _toy(2, 2)
        score = gaussian_score(x0, P)
        a = pc_sample(score, xc, 10, 0.5, P, np.random.default_rng(5))
        b = pc_sample(score, xc, 10, 0.0, P, np.random.default_rng(5))
        assert not np.array_equal(a, b)

    def test_terminal_mean_near_x0(self):
        x0 = toy_signals(1, length=16, rng=0)[0]
        xc = corrupt_signal(x0, np.random.default_rng(1))
        runs = 1000
        out = pc_sample(gaussian_score(x0, P), np.tile(xc, (runs, 1)), 50, 0.5, P, np.random.default_rng(2))
        se = out.std(0) / math.sqrt(runs)
        assert np.all(np.abs(out.mean(0) - x0) < 3 * se + 1e-12)

    def test_reduces_error_on_toy_examples(self):
        x0, xc = _toy(100, 4)
        out = pc_sample(gaussian_score(x0, P), xc, 50, 0.5, P, np.random.default_rng(0))
        better = ((out - x0) ** 2).mean(1) < ((xc - x0) ** 2).mean(1)
        assert better.mean() >= 0.9

    def test_error_falls_with_steps(self):
        x0, xc = _toy(1, 6)
        x0b, xcb = np.tile(x0, (200, 1)), np.tile(xc, (200, 1))
        score = gaussian_score(x0b, P)
        mses = [((pc_sample(score, xcb, k, 0.5, P, np.random.default_rng(k)) - x0b) ** 2).mean()
                for k in (5, 10, 25, 50)]
        assert all(a > b for a, b in zip(mses, mses[1:])), mses

    def test_trace_and_csv(self, tmp_path):
        trace = []
        pc_sample(zero_score, np.zeros(3), 4, 0.0, P, np.random.default_rng(0), trace=trace)
        assert [t for t, _ in trace] == pytest.approx([1.0, 0.75, 0.5, 0.25, 0.0])
        path = tmp_path / "traj.csv"
        write_trajectory_csv(path, trace)
        lines = path.read_text().splitlines()
        assert lines[0] == "t,v0,v1,v2" and len(lines) == 6

    def test_non_finite_aborts(self):
        def bad(x, t, x_cor):
            return np.full_like(x, np.inf)

        with pytest.raises(NonFiniteError, match="step 0"):
            pc_sample(bad, np.zeros(2), 3, 0.0, P, np.random.default_rng(0))

    def test_argument_checks(self):
        with pytest.raises(ValueError):
            pc_sample(zero_score, np.zeros(2), 0, 0.0, P, np.random.default_rng(0))
        with pytest.raises(ValueError):
            pc_sample(zero_score, np.zeros(2), 3, -1.0, P, np.random.default_rng(0))


class TestLogitNorm:
    def test_hand_example(self):
        out, rec = normalize_logits(np.array([0.0, 2.0]), 0.0, 1.0)
        assert np.allclose(out, [-1.0, 1.0])
        assert isinstance(rec, LogitNorm)

    def test_identity_when_on_target(self):
        y = np.array([-1.0, 1.0])
        out, rec = normalize_logits(y, 0.0, 1.0)
        assert np.allclose(out, y, atol=1e-15) and rec.scale == pytest.approx(1.0)

    def test_roundtrip_and_argmax(self):
        rng = np.random.default_rng(0)
        y = rng.normal(3.0, 5.0, size=(20, 6))
        out, rec = normalize_logits(y, 0.2, 0.7)
        assert out.mean() == pytest.approx(0.2) and out.std() == pytest.approx(0.7)
        assert np.max(np.abs(rec.invert(out) - y)) < 1e-10
        assert np.array_equal(out.argmax(1), y.argmax(1))

    def test_constant_input_only_shifts(self):
        out, rec = normalize_logits(np.full(4, 3.0), 1.0, 2.0)
        assert np.array_equal(out, np.ones(4)) and rec.scale == 1.0


def test_score_net_learns():
    x0, xc = _toy(64, 9)
    net, losses = train_score_net(x0, xc, P, steps=150, hidden=(64,), seed=0)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    s = net(x0[:3], 0.5, xc[:3])
    assert s.shape == (3, 64) and np.all(np.isfinite(s))
