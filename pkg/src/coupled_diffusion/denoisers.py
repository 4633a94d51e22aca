"""The two conditional noise predictors and their conditioning layouts.

Signal net (``D`` = flattened image size, ``C`` = classes)::

    input  x_t                       (D)
    cond   [x_cor | y_t | y_hat]     (D + C + C)

Logit net::

    input  y_t                       (C)
    cond   [x_cond | f(x_cond) | x_cor]   (D + C + D)

Both also take a sinusoidal embedding of the integer timestep.  Slot widths
never change; a slot that is switched off is zero-filled.  Logits live in a
normalised space (``LogitNorm`` fitted on clean training logits) inside the
bundle; public results are mapped back to raw classifier space by callers.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .ddpm import NoiseSchedule, eps_to_x0, make_schedule
from .errors import CheckpointError, ShapeError
from .ouve_sde import LogitNorm, normalize_logits
from .tensor_nn import (
    MlpParams,
    MlpSpec,
    TimeEmbedding,
    dumps_params,
    init_mlp,
    load_params,
    mlp_forward,
    save_params,
    time_embed,
)
from .world import FrozenClassifier, classify

BUNDLE_FORMAT_VERSION = 1


@dataclass
class NfeReport:
    """Per-sample evaluation counts; one batched call counts once."""

    denoiser_x_calls: int = 0
    denoiser_y_calls: int = 0
    classifier_calls: int = 0

    def as_tuple(self):
        return (self.denoiser_x_calls, self.denoiser_y_calls, self.classifier_calls)

    def snapshot(self):
        return asdict(self)

    def __add__(self, other):
        return NfeReport(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))


@dataclass(frozen=True)
class ConditioningMode:
    """Which cross slots carry data.  Dead slots are zero-filled at every call."""

    signal_y_live: bool = True
    logit_x_live: bool = True
    logit_xcor_live: bool = True


@dataclass
class DenoiserBundle:
    signal_net: MlpParams
    logit_net: MlpParams
    sched: NoiseSchedule
    classifier: FrozenClassifier
    logit_norm: LogitNorm
    temb: TimeEmbedding = TimeEmbedding()
    mode: ConditioningMode = field(default_factory=ConditioningMode)
    x_range: tuple = (0.0, 1.0)
    y_clip: float = 5.0
    x_prior_var: float | None = None

    def __post_init__(self):
        D, C, E = self.image_dim, self.n_classes, self.temb.width
        want = {
            "signal_net": (self.signal_net.spec, (D, D + 2 * C, E, D)),
            "logit_net": (self.logit_net.spec, (C, 2 * D + C, E, C)),
        }
        for name, (spec, (i, c, t, o)) in want.items():
            got = (spec.in_dim, spec.cond_dim, spec.t_dim, spec.out_dim)
            if got != (i, c, t, o):
                raise ShapeError(
                    f"{name} widths (in, cond, t, out) = {got}, conditioning layout needs {(i, c, t, o)}"
                )

    @property
    def image_dim(self):
        return int(np.prod(self.classifier.image_shape))

    @property
    def n_classes(self):
        return self.classifier.n_classes

    def with_mode(self, **flags):
        mode = ConditioningMode(**{**asdict(self.mode), **flags})
        return self.replace_nets(self.signal_net, self.logit_net, mode)

    def replace_nets(self, signal_net, logit_net, mode=None):
        return DenoiserBundle(signal_net, logit_net, self.sched, self.classifier, self.logit_norm,
                              self.temb, mode or self.mode, self.x_range, self.y_clip, self.x_prior_var)


def fit_logit_norm(classifier: FrozenClassifier, x_clean):
    """Array-wide affine map taking clean-data logits to zero mean, unit std."""
    _, rec = normalize_logits(classify(classifier, x_clean), 0.0, 1.0)
    return rec


def clip_x0(bundle, x0_hat):
    """Clamp a signal estimate to the data range (used by samplers, not by estimate_x0)."""
    return np.clip(x0_hat, *bundle.x_range)


def clip_y0(bundle, y0_hat):
    return np.clip(y0_hat, -bundle.y_clip, bundle.y_clip)


def make_bundle(classifier: FrozenClassifier, x_clean, sched=None, hidden=(128, 128),
                temb_width=32, seed=0, mode=None, x_prior_var=None):
    """Fresh bundle: He-initialised hidden layers, zero output layers.

    With ``x_prior_var=None`` a fresh signal net predicts eps_hat = 0; otherwise it
    predicts the analytic baseline of :func:`prior_eps`.
    """
    sched = sched if sched is not None else make_schedule("cosine", 150)
    D, C = int(np.prod(classifier.image_shape)), classifier.n_classes
    temb = TimeEmbedding(temb_width)
    ss = np.random.SeedSequence(seed).generate_state(2)
    nets = []
    for spec, s in ((MlpSpec(D, D + 2 * C, temb.width, tuple(hidden), D), ss[0]),
                    (MlpSpec(C, 2 * D + C, temb.width, tuple(hidden), C), ss[1])):
        p = init_mlp(spec, int(s))
        p.arrays["Wout"][:] = 0.0
        nets.append(p)
    norm = fit_logit_norm(classifier, x_clean)
    y_clip = 1.5 * float(np.abs(norm.apply(classify(classifier, x_clean))).max())
    return DenoiserBundle(nets[0], nets[1], sched, classifier, norm, temb,
                          mode or ConditioningMode(), (0.0, 1.0), y_clip, x_prior_var)


def corruption_variance(x0, x_cor):
    """Mean squared clean-vs-corrupted gap; the natural ``x_prior_var``."""
    return float(np.mean((np.asarray(x_cor, dtype=np.float64) - x0) ** 2))


def prior_eps(x_t, t, x_cor, var, sched):
    """``E[eps | x_t]`` when ``x0 ~ N(x_cor, var I)``.

    With ``x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`` this is
    ``sqrt(1 - ab) (x_t - sqrt(ab) x_cor) / (ab var + 1 - ab)``.  The signal
    net learns the residual on top, which spares a narrow MLP from carrying
    ``x_t`` and ``x_cor`` through with t-dependent weights.
    """
    ab = sched.alpha_bars[np.asarray(t)]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * x_cor) / (ab * var + 1.0 - ab)


def flat_images(bundle, x):
    """``(B, H, W)`` or ``(B, D)`` -> ``(B, D)``; a single image becomes one row."""
    x = np.asarray(x, dtype=np.float64)
    D = bundle.image_dim
    if x.shape[-2:] == tuple(bundle.classifier.image_shape):
        return x.reshape(-1, D)
    if x.shape[-1] == D:
        return x.reshape(-1, D)
    raise ShapeError(f"expected images of {bundle.classifier.image_shape} or width {D}, got {x.shape}")


def classify_norm(bundle, x, nfe=None):
    """Frozen classifier on ``x``, mapped into normalised logit space."""
    if nfe is not None:
        nfe.classifier_calls += 1
    return bundle.logit_norm.apply(classify(bundle.classifier, flat_images(bundle, x)))


def _slot(arr, width, B, live=True):
    if arr is None or not live:
        return np.zeros((B, width))
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != width:
        raise ShapeError(f"conditioning slot: expected width {width}, got {arr.shape[1]}")
    return np.broadcast_to(arr, (B, width)) if arr.shape[0] == 1 else arr


def _t_rows(t, B):
    t = np.asarray(t)
    return np.full(B, int(t)) if t.ndim == 0 else t


def signal_cond(bundle, B, x_cor, y_t=None, y_hat=None):
    C, D = bundle.n_classes, bundle.image_dim
    live = bundle.mode.signal_y_live
    return np.concatenate(
        [_slot(x_cor, D, B), _slot(y_t, C, B, live), _slot(y_hat, C, B, live)], axis=1
    )


def logit_cond(bundle, B, x_cond=None, feat=None, x_cor=None):
    C, D = bundle.n_classes, bundle.image_dim
    xl = bundle.mode.logit_x_live
    return np.concatenate(
        [_slot(x_cond, D, B, xl), _slot(feat, C, B, xl), _slot(x_cor, D, B, bundle.mode.logit_xcor_live)],
        axis=1,
    )


def predict_eps_x(bundle, x_t, t, y_cond, x_cor, y_t=None, nfe=None):
    """``eps_hat_x``; ``y_cond`` fills the estimate slot, ``y_t`` the noisy-logit slot.

    ``None`` zero-fills a slot.  Returns shape ``(B, D)``.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    B = x_t.shape[0]
    if x_t.shape[1] != bundle.image_dim:
        raise ShapeError(f"x_t width {x_t.shape[1]} != {bundle.image_dim}")
    xc = flat_images(bundle, x_cor)
    cond = signal_cond(bundle, B, xc, y_t, y_cond)
    out, _ = mlp_forward(bundle.signal_net, x_t, cond, time_embed(_t_rows(t, B), bundle.temb))
    if nfe is not None:
        nfe.denoiser_x_calls += 1
    if bundle.x_prior_var is not None:
        out = out + prior_eps(x_t, _t_rows(t, B), xc, bundle.x_prior_var, bundle.sched)
    return out


def predict_eps_y(bundle, y_t, t, x_cond, x_cor, feat=None, nfe=None):
    """``eps_hat_y`` conditioned on an image estimate and its classifier features.

    ``feat`` is ``classify_norm(bundle, x_cond)``; samplers pass it in so they
    control when the classifier runs.  If omitted it is computed (and counted) here.
    """
    y_t = np.atleast_2d(np.asarray(y_t, dtype=np.float64))
    B = y_t.shape[0]
    if y_t.shape[1] != bundle.n_classes:
        raise ShapeError(f"y_t width {y_t.shape[1]} != {bundle.n_classes}")
    if x_cond is not None:
        x_cond = flat_images(bundle, x_cond)
        if feat is None:
            feat = classify_norm(bundle, x_cond, nfe)
    x_cor = None if x_cor is None else flat_images(bundle, x_cor)
    cond = logit_cond(bundle, B, x_cond, feat, x_cor)
    out, _ = mlp_forward(bundle.logit_net, y_t, cond, time_embed(_t_rows(t, B), bundle.temb))
    if nfe is not None:
        nfe.denoiser_y_calls += 1
    return out


def estimate_x0(bundle, x_t, t, y_cond, x_cor, y_t=None, nfe=None):
    """``x0_hat = eps_to_x0(x_t, predict_eps_x(...), t)``; returns ``(x0_hat, eps_hat)``."""
    if np.any(np.asarray(t) < 1):
        raise ValueError("estimate_x0 needs t >= 1")
    eps = predict_eps_x(bundle, x_t, t, y_cond, x_cor, y_t, nfe)
    return eps_to_x0(np.atleast_2d(x_t), eps, t, bundle.sched), eps


def estimate_y0(bundle, y_t, t, x_cond, x_cor, feat=None, nfe=None):
    if np.any(np.asarray(t) < 1):
        raise ValueError("estimate_y0 needs t >= 1")
    eps = predict_eps_y(bundle, y_t, t, x_cond, x_cor, feat, nfe)
    return eps_to_x0(np.atleast_2d(y_t), eps, t, bundle.sched), eps


# -- checkpoints -------------------------------------------------------------


def save_bundle(directory, bundle: DenoiserBundle):
    """Three parameter blobs plus ``manifest.json`` (conditioning mode, norm, schedule)."""
    os.makedirs(directory, exist_ok=True)
    save_params(os.path.join(directory, "signal.ckpt"), bundle.signal_net)
    save_params(os.path.join(directory, "logit.ckpt"), bundle.logit_net)
    fc = bundle.classifier
    save_params(os.path.join(directory, "classifier.ckpt"), fc.params, {
        "n_classes": fc.n_classes,
        "image_shape": list(fc.image_shape),
        "train_accuracy": fc.train_accuracy,
    })
    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "mode": asdict(bundle.mode),
        "logit_norm": asdict(bundle.logit_norm),
        "temb": asdict(bundle.temb),
        "schedule": {"kind": bundle.sched.kind, "T": bundle.sched.T},
        "x_range": list(bundle.x_range),
        "y_clip": bundle.y_clip,
        "x_prior_var": bundle.x_prior_var,
        "schedule_alpha_bars_digest": _digest(bundle.sched.alpha_bars),
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _digest(a):
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()[:16]


def load_classifier(path):
    params, extra = load_params(path)
    try:
        return FrozenClassifier(params, int(extra["n_classes"]), tuple(extra["image_shape"]),
                                float(extra["train_accuracy"]))
    except KeyError as exc:
        raise CheckpointError(f"{path}: classifier metadata missing {exc}") from exc


def load_bundle(directory) -> DenoiserBundle:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"no bundle manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt bundle manifest {path}: {exc}") from exc
    if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise CheckpointError(f"unsupported bundle version {manifest.get('format_version')}")
    signal, _ = load_params(os.path.join(directory, "signal.ckpt"))
    logit, _ = load_params(os.path.join(directory, "logit.ckpt"))
    fc = load_classifier(os.path.join(directory, "classifier.ckpt"))
    sched = make_schedule(manifest["schedule"]["kind"], manifest["schedule"]["T"])
    if _digest(sched.alpha_bars) != manifest["schedule_alpha_bars_digest"]:
        raise CheckpointError("schedule rebuilt from manifest does not match the saved one")
    try:
        return DenoiserBundle(signal, logit, sched, fc, LogitNorm(**manifest["logit_norm"]),
                              TimeEmbedding(**manifest["temb"]), ConditioningMode(**manifest["mode"]),
                              tuple(manifest["x_range"]), float(manifest["y_clip"]),
                              manifest["x_prior_var"])
    except ShapeError as exc:
        raise CheckpointError(f"bundle nets do not fit the conditioning layout: {exc}") from exc


def bundle_digest(bundle):
    """Short hash of both denoisers' parameters, recorded alongside results."""
    h = hashlib.sha256()
    h.update(dumps_params(bundle.signal_net))
    h.update(dumps_params(bundle.logit_net))
    return h.hexdigest()[:16]


__all__ = [
    "ConditioningMode",
    "DenoiserBundle",
    "NfeReport",
    "bundle_digest",
    "classify_norm",
    "corruption_variance",
    "prior_eps",
    "clip_x0",
    "clip_y0",
    "estimate_x0",
    "estimate_y0",
    "fit_logit_norm",
    "flat_images",
    "load_bundle",
    "make_bundle",
    "predict_eps_x",
    "predict_eps_y",
    "save_bundle",
]
