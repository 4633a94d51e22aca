"""Continuous-time Ornstein-Uhlenbeck / variance-exploding SDE on 1-D toy signals.

Forward process, pulled toward the corrupted observation ``x_cor``::

    dx = gamma (x_cor - x) dt + g(t) dw

with perturbation kernel ``N(mu(t), sigma(t)^2 I)`` where

    mu(t)    = exp(-gamma t) x0 + (1 - exp(-gamma t)) x_cor
    sigma(t) = sigma_min (sigma_max / sigma_min) ** t

``g(t)`` is chosen so that this kernel is the exact marginal when the state
starts at ``N(x0, sigma_min^2)``: d(sigma^2)/dt = -2 gamma sigma^2 + g^2 gives
``g(t) = sigma(t) sqrt(2 (log(sigma_max / sigma_min) + gamma))``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import NonFiniteError, ShapeError
from .tensor_nn import (
    MlpSpec,
    TimeEmbedding,
    adam_init,
    adam_step,
    init_mlp,
    mlp_backward,
    mlp_forward,
    time_embed,
)


@dataclass(frozen=True)
class OuveParams:
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    t_max: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")

    @property
    def log_ratio(self):
        return math.log(self.sigma_max / self.sigma_min)


@dataclass
class SdeState:
    value: np.ndarray
    t: float


def _check_t(t, p):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > p.t_max):
        raise ValueError(f"time {t} outside [0, {p.t_max}]")
    return t_arr


def _col(v, x):
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (np.ndim(x) - v.ndim)) if v.ndim else float(v)


def mean_traj(x0, x_cor, t, p: OuveParams):
    if np.shape(x0) != np.shape(x_cor):
        raise ShapeError(f"x0 {np.shape(x0)} vs x_cor {np.shape(x_cor)}")
    decay = _col(np.exp(-p.gamma * np.asarray(t, dtype=np.float64)), x0)
    return decay * x0 + (1.0 - decay) * x_cor


def sigma_of_t(t, p: OuveParams):
    t_arr = _check_t(t, p)
    return p.sigma_min * (p.sigma_max / p.sigma_min) ** t_arr


def diffusion_coef(t, p: OuveParams):
    return sigma_of_t(t, p) * math.sqrt(2.0 * (p.log_ratio + p.gamma))


def drift(x, x_cor, p: OuveParams):
    return p.gamma * (x_cor - x)


def perturb_sample(x0, x_cor, t, z, p: OuveParams):
    if np.shape(z) != np.shape(x0):
        raise ShapeError("z must have the shape of x0")
    return mean_traj(x0, x_cor, t, p) + _col(sigma_of_t(t, p), x0) * z


def dsm_target(z, t, p: OuveParams):
    """Score of the perturbation kernel at ``mu + sigma z``: ``-z / sigma(t)``."""
    sig = sigma_of_t(t, p)
    if np.any(sig <= 0):
        raise ValueError("sigma(t) must be positive")
    return -np.asarray(z, dtype=np.float64) / _col(sig, z)


def residual_logit_score(y_t, y_cor, t, residual, p: OuveParams):
    """Analytic baseline ``-(y_t - y_cor) / sigma^2`` plus a learned residual."""
    if not (np.shape(y_t) == np.shape(y_cor) == np.shape(residual)):
        raise ShapeError("y_t, y_cor and residual must share a shape")
    sig = sigma_of_t(t, p)
    if np.any(sig <= 0):
        raise ValueError("sigma(t) must be positive")
    return -(np.asarray(y_t) - y_cor) / _col(sig, y_t) ** 2 + residual


def gaussian_score(x0, p: OuveParams):
    """Exact score of the kernel around a known clean signal, as a ``score_fn``."""

    def score(x, t, x_cor):
        mu = mean_traj(np.broadcast_to(x0, np.shape(x)), x_cor, t, p)
        return -(x - mu) / _col(sigma_of_t(t, p), x) ** 2

    return score


def pc_sample(score_fn, x_cor, steps, snr, p: OuveParams, rng, corrector_steps=1, trace=None):
    """Reverse-time predictor-corrector sampler from ``t = 1`` down to ``t = 0``.

    Each of the ``steps`` grid points gets one Euler-Maruyama reverse-SDE step
    followed by ``corrector_steps`` annealed Langevin steps at the new time,
    with step size ``2 (snr * sigma(t))^2``.  Predictor and corrector draw from
    separate child streams of ``rng``, so disabling the corrector (or ``snr=0``)
    leaves the predictor path bit-identical.

    ``trace``, if a list, receives ``(t, state copy)`` after every step.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    if snr < 0:
        raise ValueError("snr must be non-negative")
    x_cor = np.asarray(x_cor, dtype=np.float64)
    init_rng, pred_rng, corr_rng = rng.spawn(3)
    x = x_cor + float(sigma_of_t(p.t_max, p)) * init_rng.standard_normal(x_cor.shape)
    grid = np.linspace(p.t_max, 0.0, steps + 1)
    if trace is not None:
        trace.append((float(grid[0]), x.copy()))
    for k in range(steps):
        prev = x
        t, t_next = grid[k], grid[k + 1]
        dt = t - t_next
        g = float(diffusion_coef(t, p))
        score = score_fn(x, t, x_cor)
        rev_drift = drift(x, x_cor, p) - g * g * score
        x = x - rev_drift * dt + g * math.sqrt(dt) * pred_rng.standard_normal(x.shape)
        if snr > 0:
            std = float(sigma_of_t(t_next, p))
            step = 2.0 * (snr * std) ** 2
            for _ in range(corrector_steps):
                grad = score_fn(x, t_next, x_cor)
                x = x + step * grad + math.sqrt(2.0 * step) * corr_rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(
                f"pc_sample diverged at step {k} (t={t_next:.4f}); "
                f"previous state max |x| = {np.abs(prev).max():.3g}, "
                f"{int((~np.isfinite(x)).sum())} non-finite entries"
            )
        if trace is not None:
            trace.append((float(t_next), x.copy()))
    return x


@dataclass(frozen=True)
class LogitNorm:
    """Affine map ``y -> (y - shift) * scale + target_mean`` with its inverse."""

    shift: float
    scale: float
    target_mean: float

    def apply(self, y):
        return (np.asarray(y) - self.shift) * self.scale + self.target_mean

    def invert(self, y_norm):
        return (np.asarray(y_norm) - self.target_mean) / self.scale + self.shift


def normalize_logits(y, target_mean: float, target_std: float):
    """Match the array-wide mean/std of ``y`` to the targets.

    A constant ``y`` only gets shifted.  The scale is positive, so argmax is kept.
    """
    y = np.asarray(y, dtype=np.float64)
    mean, std = float(y.mean()), float(y.std())
    scale = target_std / std if std > 0 else 1.0
    rec = LogitNorm(mean, scale, target_mean)
    return rec.apply(y), rec


def write_trajectory_csv(path, trace):
    """Write ``(t, v_0, v_1, ...)`` rows; batched states are flattened row-major."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        width = np.size(trace[0][1]) if trace else 0
        w.writerow(["t"] + [f"v{i}" for i in range(width)])
        for t, state in trace:
            w.writerow([repr(float(t))] + [repr(float(v)) for v in np.ravel(state)])


# -- toy signal world --------------------------------------------------------


def toy_signals(n, length=64, rng=None):
    """Smooth random waveforms: a few sinusoids under a bump envelope, in [-1, 1]."""
    rng = np.random.default_rng(rng)
    u = np.linspace(0.0, 1.0, length)
    out = np.zeros((n, length))
    for i in range(n):
        k = rng.integers(2, 5)
        freqs = rng.uniform(1.0, 6.0, size=k)
        phases = rng.uniform(0, 2 * np.pi, size=k)
        amps = rng.uniform(0.2, 1.0, size=k)
        s = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * u + phases[:, None])).sum(0)
        out[i] = s / max(1.0, np.abs(s).max())
    return out


def corrupt_signal(x0, rng, smooth=2.0, noise_std=0.3):
    """Gaussian smoothing along the signal axis plus white noise."""
    blurred = gaussian_filter1d(np.asarray(x0, dtype=np.float64), smooth, axis=-1, mode="reflect")
    return blurred + noise_std * rng.standard_normal(np.shape(x0))


@dataclass
class ScoreNet:
    """MLP score model ``s(x, t, x_cor)``, trained on ``sigma(t) * s`` against ``-z``."""

    params: object
    p: OuveParams
    temb: TimeEmbedding

    def __call__(self, x, t, x_cor):
        x = np.atleast_2d(x)
        te = time_embed(np.full(x.shape[0], 1000.0 * float(t)), self.temb)
        out, _ = mlp_forward(self.params, x, np.broadcast_to(x_cor, x.shape), te)
        return out / float(sigma_of_t(t, self.p))


def train_score_net(x0, x_cor, p: OuveParams, steps=2000, batch=64, lr=2e-3, hidden=(128, 128), seed=0):
    """Denoising score matching on (clean, corrupted) signal pairs; returns ``(net, losses)``."""
    rng = np.random.default_rng(seed)
    n, d = x0.shape
    temb = TimeEmbedding(32)
    params = init_mlp(MlpSpec(d, d, temb.width, tuple(hidden), d), seed)
    params.arrays["Wout"][:] = 0.0
    opt = adam_init(params, lr=lr)
    losses = []
    for _ in range(steps):
        idx = rng.integers(0, n, size=batch)
        t = rng.uniform(0.0, p.t_max, size=batch)
        z = rng.standard_normal((batch, d))
        xt = perturb_sample(x0[idx], x_cor[idx], t, z, p)
        out, tape = mlp_forward(params, xt, x_cor[idx], time_embed(1000.0 * t, temb))
        resid = out + z
        losses.append(float((resid**2).sum(1).mean()))
        grads, _ = mlp_backward(tape, 2.0 * resid / batch)
        adam_step(params, grads, opt)
    return ScoreNet(params, p, temb), losses
