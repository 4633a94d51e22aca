"""Discrete-time Gaussian diffusion: schedules, forward noising, reverse steps.

The same functions drive both the signal chain and the logit chain.  Tables
are indexed directly by timestep, ``t = 0..T``, with ``alpha_bars[0] == 1``.
Timestep arguments may be a Python int or an integer array with one entry per
batch row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

BETA_MIN = 1e-5
BETA_MAX = 0.999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars, self.posterior_vars):
            arr.setflags(write=False)


def _from_betas(kind, betas):
    T = len(betas)
    b = np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)])
    a = 1.0 - b
    ab = np.cumprod(a)
    pv = np.zeros(T + 1)
    pv[1:] = (1.0 - ab[:-1]) / (1.0 - ab[1:]) * b[1:]
    return NoiseSchedule(kind, T, b, a, ab, pv)


def make_schedule(kind: str = "cosine", T: int = 150, beta_start=None, beta_end=None):
    """Build a schedule of length ``T``.

    ``linear`` defaults to the usual 1e-4..0.02 endpoints rescaled by 1000/T so
    short chains still reach noise.  ``cosine`` uses the squared-cosine
    alpha-bar curve with offset 0.008.  Betas are clamped to [1e-5, 0.999].
    """
    if int(T) != T or T < 1:
        raise ValueError(f"schedule length must be a positive integer, got {T}")
    T = int(T)
    if kind == "linear":
        lo = 1e-4 * 1000 / T if beta_start is None else beta_start
        hi = 0.02 * 1000 / T if beta_end is None else beta_end
        hi = min(hi, BETA_MAX)
        lo = min(lo, hi)
        betas = np.array([hi]) if T == 1 else np.linspace(lo, hi, T)
    elif kind == "cosine":
        steps = np.arange(T + 1) / T
        f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = 1.0 - ab[1:] / ab[:-1]
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return _from_betas(kind, np.clip(betas, BETA_MIN, BETA_MAX))


def _t_index(t, sched, lo=0):
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        if np.any(t_arr != np.round(t_arr)):
            raise ValueError(f"timestep must be integral, got {t}")
        t_arr = t_arr.astype(np.int64)
    if np.any(t_arr < lo) or np.any(t_arr > sched.T):
        raise ValueError(f"timestep {t} outside [{lo}, {sched.T}]")
    return t_arr


def _coef(table, t_arr, x):
    c = table[t_arr]
    if np.ndim(c) == 0:
        return float(c)
    return c.reshape(c.shape + (1,) * (np.ndim(x) - c.ndim))


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: {np.shape(a)} vs {np.shape(b)}")


def forward_sample(x0, t, eps, sched: NoiseSchedule):
    """``x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    _same_shape(x0, eps, "forward_sample x0/eps")
    ti = _t_index(t, sched)
    ab = _coef(sched.alpha_bars, ti, x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def eps_to_x0(x_t, eps_hat, t, sched: NoiseSchedule):
    _same_shape(x_t, eps_hat, "eps_to_x0")
    ti = _t_index(t, sched)
    ab = _coef(sched.alpha_bars, ti, x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def x0_to_eps(x_t, x0_hat, t, sched: NoiseSchedule):
    _same_shape(x_t, x0_hat, "x0_to_eps")
    ti = _t_index(t, sched, lo=1)
    ab = _coef(sched.alpha_bars, ti, x_t)
    return (x_t - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)


def posterior_coefs(t, sched: NoiseSchedule):
    """``(c_x0, c_xt, var)`` of q(x_{t-1} | x_t, x0) at integer step ``t >= 1``."""
    ti = _t_index(t, sched, lo=1)
    ab, ab_prev = sched.alpha_bars[ti], sched.alpha_bars[ti - 1]
    beta, alpha = sched.betas[ti], sched.alphas[ti]
    c_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    c_xt = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    return c_x0, c_xt, sched.posterior_vars[ti]


def posterior_mean(x_t, x0_hat, t, sched):
    _same_shape(x_t, x0_hat, "posterior_mean")
    c_x0, c_xt, _ = posterior_coefs(t, sched)
    shape = (-1,) + (1,) * (np.ndim(x_t) - 1) if np.ndim(c_x0) else ()
    return np.reshape(c_x0, shape) * x0_hat + np.reshape(c_xt, shape) * x_t


def posterior_step(x_t, x0_hat, t, sched: NoiseSchedule, noise):
    """Draw ``x_{t-1} ~ N(mu~(x_t, x0_hat), beta~_t I)`` using the supplied noise.

    Depends on nothing but its arguments; whatever conditioning produced
    ``x0_hat`` has no further influence here.  ``beta~_1 = 0`` so the final
    step is deterministic.
    """
    _same_shape(x_t, noise, "posterior_step x_t/noise")
    mean = posterior_mean(x_t, x0_hat, t, sched)
    var = _coef(sched.posterior_vars, _t_index(t, sched, lo=1), x_t)
    if np.all(np.asarray(var) == 0.0):
        return mean
    return mean + np.sqrt(var) * noise


def ddim_step(x_t, x0_hat, t, t_prev, eta, sched: NoiseSchedule, noise=None):
    """Generalised DDIM update from step ``t`` to ``t_prev < t``.

    ``eta = 0`` is deterministic and never reads ``noise``; ``eta = 1`` between
    adjacent steps has the same law as :func:`posterior_step`.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    ti = _t_index(t, sched, lo=1)
    tp = _t_index(t_prev, sched)
    if np.any(tp >= ti):
        raise ValueError(f"t_prev ({t_prev}) must be below t ({t})")
    _same_shape(x_t, x0_hat, "ddim_step")
    ab = _coef(sched.alpha_bars, ti, x_t)
    ab_prev = _coef(sched.alpha_bars, tp, x_t)
    eps_hat = x0_to_eps(x_t, x0_hat, ti, sched)
    if eta == 0.0:
        return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat
    var = eta**2 * (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)
    direction = np.sqrt(np.maximum(1.0 - ab_prev - var, 0.0))
    out = np.sqrt(ab_prev) * x0_hat + direction * eps_hat
    if noise is None:
        raise ValueError("eta > 0 requires a noise array")
    _same_shape(x_t, noise, "ddim_step x_t/noise")
    return out + np.sqrt(var) * noise


@dataclass(frozen=True)
class Sampler:
    """Reverse-step rule: ``ddpm`` (ancestral) or ``ddim`` with a given eta."""

    kind: str = "ddpm"
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler {self.kind!r}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")

    @classmethod
    def parse(cls, text):
        """``"ddpm"``, ``"ddim"`` or ``"ddim(0.5)"``."""
        text = str(text).strip().lower()
        if text.startswith("ddim"):
            inner = text[4:].strip("() ")
            return cls("ddim", float(inner) if inner else 0.0)
        if text == "ddpm":
            return cls("ddpm")
        raise ValueError(f"cannot parse sampler {text!r}")

    def __str__(self):
        return "ddpm" if self.kind == "ddpm" else f"ddim({self.eta:g})"


def timestep_sequence(sched: NoiseSchedule, steps: int):
    """Uniform-stride subsequence ``[T, ..., 0]`` with ``steps`` reverse moves."""
    if steps < 1 or steps > sched.T:
        raise ValueError(f"steps must lie in [1, {sched.T}], got {steps}")
    seq = np.round(np.linspace(sched.T, 0, steps + 1)).astype(int)
    assert np.all(np.diff(seq) < 0)
    return [int(s) for s in seq]


def reverse_step(x_t, x0_hat, t, t_prev, sched, sampler: Sampler, noise):
    """One reverse move under ``sampler``.

    Adjacent DDPM moves use the exact posterior; strided DDPM moves use the
    eta = 1 generalisation, which has the same marginals.
    """
    if sampler.kind == "ddpm":
        if t_prev == t - 1:
            return posterior_step(x_t, x0_hat, t, sched, noise)
        return ddim_step(x_t, x0_hat, t, t_prev, 1.0, sched, noise)
    return ddim_step(x_t, x0_hat, t, t_prev, sampler.eta, sched, noise)


def dump_schedule(sched: NoiseSchedule) -> str:
    lines = ["# t beta alpha_bar posterior_var"]
    for t in range(sched.T + 1):
        lines.append(
            f"{t} {sched.betas[t]:.17g} {sched.alpha_bars[t]:.17g} {sched.posterior_vars[t]:.17g}"
        )
    return "\n".join(lines) + "\n"


def load_schedule_table(text: str):
    """Parse :func:`dump_schedule` output into a ``(T+1, 4)`` float array."""
    rows = [line.split() for line in text.splitlines() if line and not line.startswith("#")]
    return np.array(rows, dtype=np.float64)
