"""Training for the coupled denoisers: Parallel, Alternating, Nested, warm start, baselines.

Trainers only ever see a :class:`PairDataset` of ``(x0, x_cor)`` rows; labels
never reach this module.  Targets for the logit process are the frozen
classifier's (normalised) logits on ``x0``.

Cross-conditioning estimates are computed with the current networks and then
treated as constants: no gradient flows through them.

Each trainer copies the bundle's networks and returns ``(new_bundle, curve)``
with ``curve`` a list of ``(step, loss_x, loss_y)``.  Losses are per-example
sums of squared errors, averaged over the batch.
"""

from __future__ import annotations

import csv
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .coupling import RngStreams, sample_x_chain, sample_y_chain
from .ddpm import Sampler, eps_to_x0, forward_sample, timestep_sequence
from .denoisers import (
    DenoiserBundle,
    NfeReport,
    classify_norm,
    clip_x0,
    clip_y0,
    estimate_x0,
    estimate_y0,
    logit_cond,
    prior_eps,
    save_bundle,
    signal_cond,
)
from .errors import ConfigError, NonFiniteError, TrainingDivergedError, check_finite
from .tensor_nn import adam_init, adam_step, mlp_backward, mlp_forward, time_embed


@dataclass(frozen=True)
class TrainConfig:
    """``epochs`` count passes of optimizer steps over the data.

    For Alternating/Nested one outer step samples estimates for a batch and
    then takes ``K`` optimizer steps on it, so an epoch has about
    ``n / (batch * K)`` outer steps.  ``inner_steps`` is the sampling budget for
    those estimates (default: the schedule length).  ``coupled_fraction`` is the
    share of low timesteps that see cross conditioning, matching the inference
    warm-up; ``cond_dropout`` zero-fills cross slots on a random share of rows.
    """

    epochs: int = 30
    batch: int = 64
    lr: float = 1e-3
    warm_start_epochs: int = 10
    inner_steps: int | None = None
    K: int = 8
    seed: int = 0
    coupled_fraction: float = 0.5
    cond_dropout: float = 0.1
    card_conditioning: str = "clean"
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        for name in ("batch", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.epochs < 0 or self.warm_start_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.coupled_fraction <= 1.0:
            raise ConfigError("coupled_fraction must lie in [0, 1]")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigError("cond_dropout must lie in [0, 1)")
        if self.card_conditioning not in ("clean", "corrupted"):
            raise ConfigError("card_conditioning must be 'clean' or 'corrupted'")
        if self.inner_steps is not None and self.inner_steps < 1:
            raise ConfigError("inner_steps must be at least 1")


class PairDataset:
    """Flattened ``(x0, x_cor)`` pairs: the only view of the data trainers get."""

    def __init__(self, x0, x_cor):
        x0 = np.asarray(x0, dtype=np.float64)
        x_cor = np.asarray(x_cor, dtype=np.float64)
        if x0.shape != x_cor.shape:
            raise ConfigError(f"x0 {x0.shape} and x_cor {x_cor.shape} differ")
        check_finite("x0", x0)
        check_finite("x_cor", x_cor)
        n = x0.shape[0]
        self.x0 = x0.reshape(n, -1)
        self.x_cor = x_cor.reshape(n, -1)
        self.x0.setflags(write=False)
        self.x_cor.setflags(write=False)

    @classmethod
    def from_split(cls, split):
        if split.x_cor is None:
            raise ConfigError("split has no corrupted inputs")
        return cls(split.x0, split.x_cor)

    def __len__(self):
        return self.x0.shape[0]


# -- plumbing ----------------------------------------------------------------


def eps_loss_and_grads(net, z, cond, temb, target, baseline=None):
    """Noise-prediction loss ``mean_b |net(z) + baseline - target|^2`` and its parameter gradients."""
    out, tape = mlp_forward(net, z, cond, temb)
    if baseline is not None:
        out = out + baseline
    r = out - target
    grads, _ = mlp_backward(tape, 2.0 * r / len(z))
    return float((r**2).sum(1).mean()), grads


class _Fit:
    """Copies of both nets, their optimizers, the curve, and divergence handling."""

    def __init__(self, bundle: DenoiserBundle, data: PairDataset, cfg: TrainConfig, salt: int):
        self.src = bundle
        self.sig = bundle.signal_net.copy()
        self.log = bundle.logit_net.copy()
        self.bundle = bundle.replace_nets(self.sig, self.log)
        self.opt_x = adam_init(self.sig, lr=cfg.lr)
        self.opt_y = adam_init(self.log, lr=cfg.lr)
        self.data, self.cfg = data, cfg
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, salt]))
        self.curve = []
        self.good = (self.sig.copy(), self.log.copy())
        # the classifier is deterministic, so its views of the data are computed once
        self.y0 = classify_norm(bundle, data.x0)
        self.ycor = classify_norm(bundle, data.x_cor)

    @property
    def T(self):
        return self.bundle.sched.T

    def batches(self, epochs):
        n, B = len(self.data), self.cfg.batch
        for _ in range(epochs):
            order = self.rng.permutation(n)
            for s in range(0, n, B):
                yield order[s:s + B]

    def draw(self, n):
        t = self.rng.integers(1, self.T + 1, size=n)
        return t, self.rng.standard_normal((n, self.bundle.image_dim)), self.rng.standard_normal(
            (n, self.bundle.n_classes))

    def cross_mask(self, t):
        """1 for rows whose timestep is in the coupled range and survives dropout."""
        t_couple = math.ceil(round(self.cfg.coupled_fraction * self.T, 9))
        keep = (t <= t_couple).astype(np.float64)
        if self.cfg.cond_dropout > 0:
            keep *= self.rng.random(len(t)) >= self.cfg.cond_dropout
        return keep[:, None]

    def step(self, x_t, cond_x, eps_x, y_t, cond_y, eps_y, t, train_x=True, train_y=True):
        temb = time_embed(t, self.bundle.temb)
        lx = ly = 0.0
        if train_x:
            b = self.bundle
            base = None
            if b.x_prior_var is not None:
                # x_cor is the leading slot of the signal conditioning
                base = prior_eps(x_t, t, cond_x[:, :b.image_dim], b.x_prior_var, b.sched)
            lx, gx = eps_loss_and_grads(self.sig, x_t, cond_x, temb, eps_x, base)
        if train_y:
            ly, gy = eps_loss_and_grads(self.log, y_t, cond_y, temb, eps_y)
        if not (math.isfinite(lx) and math.isfinite(ly)):
            raise self._diverged(f"non-finite loss (x={lx}, y={ly})")
        if train_x:
            adam_step(self.sig, gx, self.opt_x)
        if train_y:
            adam_step(self.log, gy, self.opt_y)
        self.curve.append((len(self.curve), lx, ly))
        every = self.cfg.checkpoint_every
        if every and len(self.curve) % every == 0:
            self.good = (self.sig.copy(), self.log.copy())
            if self.cfg.checkpoint_dir:
                save_bundle(os.path.join(self.cfg.checkpoint_dir, f"step{len(self.curve):07d}"), self.bundle)
        return lx, ly

    def _diverged(self, what):
        return TrainingDivergedError(f"{what} at step {len(self.curve)}",
                                     last_good=self._bundle_from(*self.good))

    @contextmanager
    def guard(self):
        """Turn a non-finite forward pass anywhere in the loop into a divergence error."""
        try:
            yield
        except NonFiniteError as exc:
            raise self._diverged(str(exc)) from exc

    def _bundle_from(self, sig, log):
        return self.bundle.replace_nets(sig, log)

    def result(self):
        return self._bundle_from(self.sig, self.log), self.curve


def write_loss_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss_x", "loss_y"])
        for step, lx, ly in curve:
            w.writerow([step, repr(lx), repr(ly)])


# -- trainers ----------------------------------------------------------------


def warm_start(bundle, data: PairDataset, cfg: TrainConfig, epochs=None):
    """Each net on its own process, cross slots zero-filled."""
    epochs = cfg.warm_start_epochs if epochs is None else epochs
    fit = _Fit(bundle, data, cfg, salt=1)
    b = fit.bundle
    with fit.guard():
        for idx in fit.batches(epochs):
            t, ex, ey = fit.draw(len(idx))
            xc = data.x_cor[idx]
            x_t = forward_sample(data.x0[idx], t, ex, b.sched)
            y_t = forward_sample(fit.y0[idx], t, ey, b.sched)
            fit.step(x_t, signal_cond(b, len(idx), xc), ex,
                     y_t, logit_cond(b, len(idx), None, None, xc), ey, t)
    return fit.result()


def train_parallel(bundle, data: PairDataset, cfg: TrainConfig, epochs=None):
    """Per batch: noise both processes at a shared ``t``; estimate x0 given f(x_cor),
    then y0 given that estimate; fit both noise predictions with those estimates
    as cross conditioning.
    """
    epochs = cfg.epochs if epochs is None else epochs
    fit = _Fit(bundle, data, cfg, salt=2)
    b = fit.bundle
    with fit.guard():
        for idx in fit.batches(epochs):
            B = len(idx)
            t, ex, ey = fit.draw(B)
            xc = data.x_cor[idx]
            x_t = forward_sample(data.x0[idx], t, ex, b.sched)
            y_t = forward_sample(fit.y0[idx], t, ey, b.sched)
            m = fit.cross_mask(t)
            x_hat = clip_x0(b, estimate_x0(b, x_t, t, fit.ycor[idx] * m, xc, y_t * m)[0])
            feat = classify_norm(b, x_hat)
            y_hat = clip_y0(b, estimate_y0(b, y_t, t, x_hat * m, xc, feat * m)[0])
            fit.step(x_t, signal_cond(b, B, xc, y_t * m, y_hat * m), ex,
                     y_t, logit_cond(b, B, x_hat * m, feat * m, xc), ey, t)
    return fit.result()


def _outer_steps(n, cfg, epochs):
    return math.ceil(epochs * math.ceil(n / cfg.batch) / cfg.K)


def _estimate_seq(bundle, cfg):
    return timestep_sequence(bundle.sched, cfg.inner_steps or bundle.sched.T)


def train_alternating(bundle, data: PairDataset, cfg: TrainConfig, epochs=None, ledger=None):
    """Per outer step: sample x0_hat (given x_cor), then y0_hat (given x0_hat), by full
    chains; then ``K`` optimizer steps with those fixed estimates as conditioning.

    ``ledger`` (an :class:`NfeReport`) receives the sampling calls.
    """
    epochs = cfg.epochs if epochs is None else epochs
    fit = _Fit(bundle, data, cfg, salt=3)
    b = fit.bundle
    seq = _estimate_seq(b, cfg)
    ledger = ledger if ledger is not None else NfeReport()
    n = len(data)
    with fit.guard():
        for _ in range(_outer_steps(n, cfg, epochs)):
            idx = fit.rng.choice(n, size=min(cfg.batch, n), replace=False)
            B = len(idx)
            xc = data.x_cor[idx]
            streams = RngStreams(int(fit.rng.integers(2**31)))
            x_hat = sample_x_chain(b, xc, seq, Sampler(), streams, ledger)
            feat = classify_norm(b, x_hat)
            y_hat = sample_y_chain(b, xc, seq, Sampler(), streams, ledger, x_hat, feat)
            for _ in range(cfg.K):
                t, ex, ey = fit.draw(B)
                x_t = forward_sample(data.x0[idx], t, ex, b.sched)
                y_t = forward_sample(fit.y0[idx], t, ey, b.sched)
                fit.step(x_t, signal_cond(b, B, xc, None, y_hat), ex,
                         y_t, logit_cond(b, B, x_hat, feat, xc), ey, t)
    return fit.result()


def train_nested(bundle, data: PairDataset, cfg: TrainConfig, epochs=None, ledger=None):
    """Per outer step: sample x0_hat by a full chain given x_cor; then ``K`` steps that
    predict eps_y given x0_hat, turn it into y0_hat, and condition eps_x on that.
    """
    epochs = cfg.epochs if epochs is None else epochs
    fit = _Fit(bundle, data, cfg, salt=4)
    b = fit.bundle
    seq = _estimate_seq(b, cfg)
    ledger = ledger if ledger is not None else NfeReport()
    n = len(data)
    with fit.guard():
        for _ in range(_outer_steps(n, cfg, epochs)):
            idx = fit.rng.choice(n, size=min(cfg.batch, n), replace=False)
            B = len(idx)
            xc = data.x_cor[idx]
            x_hat = sample_x_chain(b, xc, seq, Sampler(), RngStreams(int(fit.rng.integers(2**31))), ledger)
            feat = classify_norm(b, x_hat)
            cond_y = logit_cond(b, B, x_hat, feat, xc)
            for _ in range(cfg.K):
                t, ex, ey = fit.draw(B)
                x_t = forward_sample(data.x0[idx], t, ex, b.sched)
                y_t = forward_sample(fit.y0[idx], t, ey, b.sched)
                eps_y, _ = mlp_forward(fit.log, y_t, cond_y, time_embed(t, b.temb))
                y_hat = clip_y0(b, eps_to_x0(y_t, eps_y, t, b.sched))  # detached: a plain array
                fit.step(x_t, signal_cond(b, B, xc, None, y_hat), ex, y_t, cond_y, ey, t)
    return fit.result()


def train_signal_only(bundle, data: PairDataset, cfg: TrainConfig, epochs=None):
    """Enhance-then-classify denoiser: signal net alone, logit slots zero-filled."""
    epochs = cfg.epochs + cfg.warm_start_epochs if epochs is None else epochs
    b0 = bundle.with_mode(signal_y_live=False)
    fit = _Fit(b0, data, cfg, salt=5)
    b = fit.bundle
    with fit.guard():
        for idx in fit.batches(epochs):
            t, ex, ey = fit.draw(len(idx))
            x_t = forward_sample(data.x0[idx], t, ex, b.sched)
            fit.step(x_t, signal_cond(b, len(idx), data.x_cor[idx]), ex, None, None, None, t, train_y=False)
    return fit.result()


def train_card(bundle, data: PairDataset, cfg: TrainConfig, epochs=None):
    """Logit net alone, image slot as the only conditioning (the x_cor slot is off).

    ``card_conditioning="clean"`` trains on ``(x0, f(x0))``; ``"corrupted"`` on
    ``(x_cor, f(x_cor))``.  Sampling always conditions on the corrupted input.
    """
    epochs = cfg.epochs + cfg.warm_start_epochs if epochs is None else epochs
    b0 = bundle.with_mode(logit_xcor_live=False)
    fit = _Fit(b0, data, cfg, salt=6)
    b = fit.bundle
    clean = cfg.card_conditioning == "clean"
    with fit.guard():
        for idx in fit.batches(epochs):
            t, ex, ey = fit.draw(len(idx))
            img = data.x0[idx] if clean else data.x_cor[idx]
            feat = fit.y0[idx] if clean else fit.ycor[idx]
            y_t = forward_sample(fit.y0[idx], t, ey, b.sched)
            fit.step(None, None, None, y_t, logit_cond(b, len(idx), img, feat, None), ey, t, train_x=False)
    return fit.result()


def train_staged(strategy, bundle, data: PairDataset, cfg: TrainConfig):
    """Warm start (if any epochs), then the strategy's coupled objective."""
    curve = []
    if cfg.warm_start_epochs:
        bundle, curve = warm_start(bundle, data, cfg)
    fn = {"parallel": train_parallel, "alternating": train_alternating, "nested": train_nested}[strategy]
    bundle, more = fn(bundle, data, cfg)
    off = len(curve)
    return bundle, curve + [(s + off, lx, ly) for s, lx, ly in more]


__all__ = [
    "PairDataset",
    "eps_loss_and_grads",
    "TrainConfig",
    "train_alternating",
    "train_card",
    "train_nested",
    "train_parallel",
    "train_signal_only",
    "train_staged",
    "warm_start",
    "write_loss_csv",
]
