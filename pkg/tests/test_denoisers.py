import json

import numpy as np
import pytest

from coupled_diffusion import denoisers as dn
from coupled_diffusion.ddpm import eps_to_x0, forward_sample, make_schedule
from coupled_diffusion.errors import CheckpointError, ShapeError
from coupled_diffusion.tensor_nn import MlpSpec, init_mlp, time_embed
from coupled_diffusion.trainer import PairDataset, TrainConfig, eps_loss_and_grads, warm_start
from coupled_diffusion.world import classify

from conftest import fd_check


@pytest.fixture
def zero_bundle(tiny_world):
    split, fc = tiny_world
    return dn.make_bundle(fc, split.x0, make_schedule("cosine", 12), hidden=(16,), temb_width=8)


def _inputs(b, B=3, seed=0):
    rng = np.random.default_rng(seed)
    D, C = b.image_dim, b.n_classes
    return rng.uniform(0, 1, (B, D)), rng.normal(size=(B, C)), rng.uniform(0, 1, (B, D))


class TestZeroNets:
    def test_zero_signal_net(self, zero_bundle):
        b = zero_bundle
        x_t, y, xc = _inputs(b)
        assert np.array_equal(dn.predict_eps_x(b, x_t, 5, y, xc), np.zeros_like(x_t))
        x0_hat, _ = dn.estimate_x0(b, x_t, 5, y, xc)
        assert np.allclose(x0_hat, x_t / np.sqrt(b.sched.alpha_bars[5]), atol=1e-15)

    def test_zero_logit_net(self, zero_bundle):
        b = zero_bundle
        x_t, y, xc = _inputs(b)
        assert np.array_equal(dn.predict_eps_y(b, y, 4, x_t, xc), np.zeros_like(y))

    def test_small_t_estimate_is_near_input(self, tiny_world):
        split, fc = tiny_world
        b = dn.make_bundle(fc, split.x0, make_schedule("cosine", 150), hidden=(16,), temb_width=8)
        x_t, y, xc = _inputs(b)
        x0_hat, _ = dn.estimate_x0(b, x_t, 1, y, xc)
        assert 1 - b.sched.alpha_bars[1] < 1e-3
        assert np.allclose(x0_hat, x_t, atol=1e-3)


class TestConditioning:
    def test_layout_widths(self, live_bundle):
        b = live_bundle
        D, C = b.image_dim, b.n_classes
        assert b.signal_net.spec.cond_dim == D + 2 * C
        assert b.logit_net.spec.cond_dim == 2 * D + C
        assert dn.signal_cond(b, 2, np.ones((2, D))).shape == (2, D + 2 * C)

    def test_width_audit(self, live_bundle):
        b = live_bundle
        wrong = init_mlp(MlpSpec(b.image_dim, b.image_dim + b.n_classes, 8, (4,), b.image_dim), 0)
        with pytest.raises(ShapeError, match="conditioning layout"):
            b.replace_nets(wrong, b.logit_net)

    def test_y_conditioning_is_live(self, live_bundle):
        b = live_bundle
        x_t, y, xc = _inputs(b)
        a = dn.predict_eps_x(b, x_t, 3, y, xc)
        assert not np.array_equal(a, dn.predict_eps_x(b, x_t, 3, y + 1.0, xc))
        assert not np.array_equal(a, dn.predict_eps_x(b, x_t, 3, y, xc, y_t=y))

    def test_dead_slots_ignore_inputs(self, live_bundle):
        b = live_bundle.with_mode(signal_y_live=False, logit_xcor_live=False)
        x_t, y, xc = _inputs(b)
        assert np.array_equal(dn.predict_eps_x(b, x_t, 3, y, xc), dn.predict_eps_x(b, x_t, 3, None, xc))
        assert np.array_equal(dn.predict_eps_y(b, y, 3, x_t, xc), dn.predict_eps_y(b, y, 3, x_t, None))

    def test_x_conditioning_is_live(self, live_bundle):
        b = live_bundle
        x_t, y, xc = _inputs(b)
        assert not np.array_equal(dn.predict_eps_y(b, y, 3, x_t, xc), dn.predict_eps_y(b, y, 3, xc, xc))

    def test_feat_defaults_to_classifier(self, live_bundle):
        b = live_bundle
        x_t, y, xc = _inputs(b)
        nfe = dn.NfeReport()
        a = dn.predict_eps_y(b, y, 3, x_t, xc, nfe=nfe)
        assert nfe.as_tuple() == (0, 1, 1)
        feat = b.logit_norm.apply(classify(b.classifier, x_t))
        assert np.array_equal(a, dn.predict_eps_y(b, y, 3, x_t, xc, feat=feat))

    def test_extreme_inputs_finite(self, live_bundle):
        b = live_bundle
        _, y, xc = _inputs(b)
        for v in (-10.0, 10.0):
            x_t = np.full((3, b.image_dim), v)
            assert np.all(np.isfinite(dn.predict_eps_x(b, x_t, b.sched.T, y, xc)))
            assert np.all(np.isfinite(dn.predict_eps_y(b, np.full_like(y, v), 1, x_t, xc)))

    def test_shape_errors(self, live_bundle):
        b = live_bundle
        x_t, y, xc = _inputs(b)
        with pytest.raises(ShapeError):
            dn.predict_eps_x(b, x_t[:, :-1], 3, y, xc)
        with pytest.raises(ShapeError):
            dn.predict_eps_y(b, y[:, :-1], 3, x_t, xc)
        with pytest.raises(ShapeError):
            dn.predict_eps_x(b, x_t, 3, y[:, :-1], xc)

    def test_deterministic(self, live_bundle):
        b = live_bundle
        x_t, y, xc = _inputs(b)
        assert np.array_equal(dn.predict_eps_y(b, y, 7, x_t, xc), dn.predict_eps_y(b, y, 7, x_t, xc))


class TestEstimates:
    def test_composition_is_bit_equal(self, live_bundle):
        b = live_bundle
        x_t, y, xc = _inputs(b)
        x0_hat, eps = dn.estimate_x0(b, x_t, 6, y, xc)
        assert np.array_equal(eps, dn.predict_eps_x(b, x_t, 6, y, xc))
        assert np.array_equal(x0_hat, eps_to_x0(x_t, eps, 6, b.sched))
        y0_hat, eps_y = dn.estimate_y0(b, y, 6, x_t, xc)
        assert np.array_equal(y0_hat, eps_to_x0(y, eps_y, 6, b.sched))

    def test_oracle_noise_recovers_x0(self, live_bundle):
        b = live_bundle
        rng = np.random.default_rng(0)
        x0, eps = rng.uniform(0, 1, (2, b.image_dim)), rng.normal(size=(2, b.image_dim))
        x_t = forward_sample(x0, 8, eps, b.sched)
        assert np.allclose(eps_to_x0(x_t, eps, 8, b.sched), x0, atol=1e-12)

    def test_t0_rejected(self, live_bundle):
        b = live_bundle
        x_t, y, xc = _inputs(b)
        with pytest.raises(ValueError):
            dn.estimate_x0(b, x_t, 0, y, xc)
        with pytest.raises(ValueError):
            dn.estimate_y0(b, y, np.array([1, 0, 2]), x_t, xc)

    def test_clipping_helpers(self, live_bundle):
        b = live_bundle
        assert np.array_equal(dn.clip_x0(b, np.array([-0.5, 0.3, 2.0])), [0.0, 0.3, 1.0])
        assert dn.clip_y0(b, np.array([1e6]))[0] == b.y_clip


class TestPriorBaseline:
    def test_prior_eps_is_posterior_mean(self):
        # Monte-Carlo oracle: regress eps on x_t under x0 ~ N(x_cor, var)
        sched = make_schedule("cosine", 20)
        rng = np.random.default_rng(0)
        n, var, xc, t = 400_000, 0.2, 0.3, 10
        ab = sched.alpha_bars[t]
        x0 = xc + np.sqrt(var) * rng.standard_normal(n)
        eps = rng.standard_normal(n)
        x_t = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
        slope = np.cov(x_t, eps)[0, 1] / x_t.var()
        got = dn.prior_eps(np.array([[1.0]]), t, np.array([[xc]]), var, sched) - dn.prior_eps(
            np.array([[0.0]]), t, np.array([[xc]]), var, sched)
        assert got[0, 0] == pytest.approx(slope, rel=0.01)

    def test_zero_variance_gives_exact_noise(self):
        sched = make_schedule("linear", 10)
        x0, eps = np.array([[0.2, 0.8]]), np.array([[0.5, -1.5]])
        x_t = forward_sample(x0, 6, eps, sched)
        assert np.allclose(dn.prior_eps(x_t, 6, x0, 0.0, sched), eps, atol=1e-12)

    def test_bundle_adds_baseline(self, zero_bundle):
        b = zero_bundle.replace_nets(zero_bundle.signal_net, zero_bundle.logit_net)
        b.x_prior_var = 0.1
        x_t, y, xc = _inputs(b)
        assert np.allclose(dn.predict_eps_x(b, x_t, 4, y, xc), dn.prior_eps(x_t, 4, xc, 0.1, b.sched))
        assert dn.corruption_variance(np.zeros(4), np.full(4, 0.5)) == 0.25


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_training_loss_gradients(self, live_bundle, seed):
        b = live_bundle
        rng = np.random.default_rng(seed)
        for net in (b.signal_net, b.logit_net):
            for k in net.arrays:
                net.arrays[k] += rng.normal(0, 0.05, net.arrays[k].shape)
        B = 2
        x_t, y, xc = _inputs(b, B, seed)
        t = rng.integers(1, b.sched.T + 1, size=B)
        temb = time_embed(t, b.temb)
        cond_x = dn.signal_cond(b, B, xc, y, y * 0.5)
        cond_y = dn.logit_cond(b, B, x_t, y, xc)
        base = dn.prior_eps(x_t, t, xc, 0.05, b.sched)
        tx, ty = rng.normal(size=x_t.shape), rng.normal(size=y.shape)

        def lx():
            return eps_loss_and_grads(b.signal_net, x_t, cond_x, temb, tx, base)[0]

        def ly():
            return eps_loss_and_grads(b.logit_net, y, cond_y, temb, ty)[0]

        assert fd_check(lx, b.signal_net.arrays, eps_loss_and_grads(b.signal_net, x_t, cond_x, temb, tx, base)[1]) < 1e-4
        assert fd_check(ly, b.logit_net.arrays, eps_loss_and_grads(b.logit_net, y, cond_y, temb, ty)[1]) < 1e-4


class TestTraining:
    def test_trained_net_beats_zero_net(self, tiny_world):
        split, fc = tiny_world
        from coupled_diffusion.world import corrupt_split

        cor = corrupt_split(split, "pixel15", seed=0)
        b = dn.make_bundle(fc, split.x0, make_schedule("cosine", 20), hidden=(32,), temb_width=8)
        trained, _ = warm_start(b, PairDataset.from_split(cor), TrainConfig(warm_start_epochs=60, batch=16, lr=3e-3))
        rng = np.random.default_rng(0)
        x0 = split.x0.reshape(len(split), -1)
        t = 10
        x_t = forward_sample(x0, t, rng.normal(size=x0.shape), b.sched)
        xc = cor.x_cor.reshape(len(split), -1)
        err = [np.linalg.norm(dn.estimate_x0(bb, x_t, t, None, xc)[0] - x0, axis=1).mean() for bb in (b, trained)]
        assert err[1] < err[0]


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, live_bundle):
        b = live_bundle.with_mode(logit_xcor_live=False)
        b.x_prior_var = 0.03
        dn.save_bundle(tmp_path / "b", b)
        back = dn.load_bundle(tmp_path / "b")
        assert dn.bundle_digest(back) == dn.bundle_digest(b)
        assert back.mode == b.mode and back.logit_norm == b.logit_norm and back.x_prior_var == 0.03
        x_t, y, xc = _inputs(b)
        assert np.array_equal(dn.predict_eps_y(back, y, 2, x_t, xc), dn.predict_eps_y(b, y, 2, x_t, xc))
        assert np.array_equal(back.classifier(x_t), b.classifier(x_t))

    def test_missing_and_corrupt(self, tmp_path, live_bundle):
        with pytest.raises(CheckpointError):
            dn.load_bundle(tmp_path / "nothing")
        dn.save_bundle(tmp_path / "b", live_bundle)
        m = tmp_path / "b" / "manifest.json"
        data = json.loads(m.read_text())
        data["format_version"] = 99
        m.write_text(json.dumps(data))
        with pytest.raises(CheckpointError):
            dn.load_bundle(tmp_path / "b")
        m.write_text("{not json")
        with pytest.raises(CheckpointError):
            dn.load_bundle(tmp_path / "b")

    def test_schedule_digest_mismatch(self, tmp_path, live_bundle):
        dn.save_bundle(tmp_path / "b", live_bundle)
        m = tmp_path / "b" / "manifest.json"
        data = json.loads(m.read_text())
        data["schedule"]["kind"] = "linear"
        m.write_text(json.dumps(data))
        with pytest.raises(CheckpointError, match="schedule"):
            dn.load_bundle(tmp_path / "b")
