"""Synthetic classification world: procedural glyph images, corruptions, frozen classifier.

Images are ``H x W`` grids (12 x 12 by default) with values strictly inside
(0, 1), so any pixel replaced by a clipped noise draw is guaranteed to change.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate

from .errors import ShapeError, TrainingDivergedError, check_finite
from .tensor_nn import MlpParams, MlpSpec, adam_init, adam_step, init_mlp, mlp_backward, mlp_forward

SIZE = 12
DATASET_FORMAT_VERSION = 1
_LO, _HI = 0.03, 0.97


def _stroke(d, width):
    """Soft stroke intensity from a distance field."""
    return np.clip(1.5 - np.abs(d) / width, 0.0, 1.0)


def _hbar(u, v, rng):
    return _stroke(v - rng.uniform(-1.5, 1.5), rng.uniform(0.9, 1.3)) * (np.abs(u) < rng.uniform(3.5, 5))


def _vbar(u, v, rng):
    return _hbar(v, u, rng)


def _cross(u, v, rng):
    c = rng.uniform(-1, 1, size=2)
    w = rng.uniform(0.9, 1.2)
    arm = rng.uniform(3, 4.5)
    a = _stroke(v - c[1], w) * (np.abs(u - c[0]) < arm)
    b = _stroke(u - c[0], w) * (np.abs(v - c[1]) < arm)
    return np.maximum(a, b)


def _ring(u, v, rng):
    c = rng.uniform(-1, 1, size=2)
    r = np.hypot(u - c[0], v - c[1])
    return _stroke(r - rng.uniform(3.2, 3.9), rng.uniform(0.8, 1.1))


def _diag(u, v, rng):
    off = rng.uniform(-1.5, 1.5)
    return _stroke((u - v) / np.sqrt(2) - off, rng.uniform(0.9, 1.2)) * (np.abs(u + v) < 9)


def _anti(u, v, rng):
    return _diag(-u, v, rng)


def _xcross(u, v, rng):
    return np.maximum(_diag(u, v, rng), _anti(u, v, rng))


def _box(u, v, rng):
    c = rng.uniform(-1, 1, size=2)
    half = rng.uniform(2.2, 2.9)
    d = np.maximum(np.abs(u - c[0]), np.abs(v - c[1])) - half
    return _stroke(d, rng.uniform(0.8, 1.1))


def _dot(u, v, rng):
    c = rng.uniform(-2, 2, size=2)
    return np.clip(1.8 - np.hypot(u - c[0], v - c[1]) / rng.uniform(1.2, 1.8), 0, 1)


def _two_bars(u, v, rng):
    gap = rng.uniform(2.2, 3.2)
    w = rng.uniform(0.8, 1.1)
    mask = np.abs(u) < rng.uniform(3.5, 5)
    return np.maximum(_stroke(v - gap, w), _stroke(v + gap, w)) * mask


# Order matters: the default 4-class world uses the first four.  Ring radii and
# box half-widths do not overlap, so clean classes are centroid-separable, yet
# replaced pixels still blur the ring/box and dot/cross distinctions.
GLYPHS = {
    "ring": _ring,
    "box": _box,
    "dot": _dot,
    "cross": _cross,
    "hbar": _hbar,
    "vbar": _vbar,
    "diag": _diag,
    "anti_diag": _anti,
    "xcross": _xcross,
    "two_bars": _two_bars,
}
GLYPH_NAMES = list(GLYPHS)


def render_glyph(name, rng, size=SIZE):
    ax = np.arange(size) - (size - 1) / 2.0
    v, u = np.meshgrid(ax, ax, indexing="ij")
    img = GLYPHS[name](u, v, rng)
    img = img * rng.uniform(0.55, 0.8)
    img = img + rng.uniform(0.0, 0.06, size=img.shape)
    return np.clip(img, 0.0, 1.0) * (_HI - _LO) + _LO


@dataclass
class LabeledExample:
    x0: np.ndarray
    label: int
    x_cor: np.ndarray | None = None


@dataclass
class WorldSplit:
    """Array-of-structs view over a dataset split."""

    x0: np.ndarray  # (N, H, W)
    labels: np.ndarray  # (N,)
    x_cor: np.ndarray | None = None
    n_classes: int = 4
    seed: int = 0
    corruption: str = "none"

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        xc = None if self.x_cor is None else self.x_cor[i]
        return LabeledExample(self.x0[i], int(self.labels[i]), xc)

    @property
    def shape(self):
        return self.x0.shape[1:]


def gen_dataset(C: int, n_per_class: int, seed: int, size: int = SIZE) -> WorldSplit:
    """``C`` glyph classes, ``n_per_class`` jittered renders each, class-interleaved order."""
    if C < 2:
        raise ValueError("need at least two classes")
    if C > len(GLYPHS):
        raise ValueError(f"only {len(GLYPHS)} glyph classes available, asked for {C}")
    ss = np.random.SeedSequence(seed)
    streams = [np.random.default_rng(s) for s in ss.spawn(C)]
    x0 = np.empty((C * n_per_class, size, size))
    labels = np.empty(C * n_per_class, dtype=np.int64)
    for i in range(n_per_class):
        for c in range(C):
            x0[i * C + c] = render_glyph(GLYPH_NAMES[c], streams[c], size)
            labels[i * C + c] = c
    return WorldSplit(x0, labels, None, C, seed)


def n_replaced(fraction, n_pixels):
    return int(np.floor(fraction * n_pixels + 0.5))


def corrupt_pixel_replace(x0, fraction, rng):
    """Replace exactly ``round(fraction * H * W)`` pixels with clipped N(0, 1) draws."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    out = np.array(x0, dtype=np.float64, copy=True)
    flat = out.reshape(-1)
    k = n_replaced(fraction, flat.size)
    if k:
        idx = rng.choice(flat.size, size=k, replace=False)
        flat[idx] = np.clip(rng.standard_normal(k), 0.0, 1.0)
    return out


def blur_kernel(size=5, sigma=2.0):
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    return k / k.sum()


def corrupt_gaussian_blur(x0, size=5, sigma=2.0):
    return correlate(np.asarray(x0, dtype=np.float64), blur_kernel(size, sigma), mode="reflect")


CORRUPTIONS = ("pixel15", "pixel30", "blur")


def apply_corruption(name, x0, rng):
    if name == "pixel15":
        return corrupt_pixel_replace(x0, 0.15, rng)
    if name == "pixel30":
        return corrupt_pixel_replace(x0, 0.30, rng)
    if name == "blur":
        return corrupt_gaussian_blur(x0)
    raise ValueError(f"unknown corruption {name!r}; choose from {CORRUPTIONS}")


def corrupt_split(split: WorldSplit, corruption: str, seed: int) -> WorldSplit:
    """Corrupt each example once with its own RNG stream; ``x0`` is left untouched."""
    streams = np.random.SeedSequence([seed, CORRUPTIONS.index(corruption)]).spawn(len(split))
    x_cor = np.stack(
        [apply_corruption(corruption, x, np.random.default_rng(s)) for x, s in zip(split.x0, streams)]
    )
    return WorldSplit(split.x0, split.labels, x_cor, split.n_classes, split.seed, corruption)


def array_digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


# -- frozen classifier ---------------------------------------------------------


@dataclass(frozen=True)
class FrozenClassifier:
    params: MlpParams
    n_classes: int
    image_shape: tuple
    train_accuracy: float
    loss_curve: tuple = field(default=(), repr=False)

    def __post_init__(self):
        for a in self.params.arrays.values():
            a.setflags(write=False)

    def __call__(self, x):
        return classify(self, x)


def _flatten_images(x, image_shape):
    x = np.asarray(x, dtype=np.float64)
    n_pix = int(np.prod(image_shape))
    if x.shape[-len(image_shape):] == tuple(image_shape):
        lead = x.shape[: x.ndim - len(image_shape)]
        return x.reshape(lead + (n_pix,)), lead
    if x.shape[-1] == n_pix:
        return x, x.shape[:-1]
    raise ShapeError(f"expected images of shape {image_shape}, got {x.shape}")


def classify(fc: FrozenClassifier, x):
    """Raw pre-softmax logits; ``(C,)`` for one image, ``(B, C)`` for a batch."""
    flat, lead = _flatten_images(x, fc.image_shape)
    out, _ = mlp_forward(fc.params, flat.reshape(-1, flat.shape[-1]))
    return out.reshape(lead + (fc.n_classes,))


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_and_grads(params, x, labels):
    """Summed cross-entropy of flattened images and its gradients for a batch mean."""
    logits, tape = mlp_forward(params, x)
    p = softmax(logits)
    n = len(labels)
    loss = -np.log(p[np.arange(n), labels] + 1e-300).sum()
    p[np.arange(n), labels] -= 1.0
    grads, _ = mlp_backward(tape, p / n)
    return float(loss), grads


def train_frozen_classifier(split: WorldSplit, epochs=40, seed=0, hidden=(64,), lr=3e-3, batch=64):
    """Cross-entropy MLP on clean images only, then sealed read-only."""
    if len(split) == 0:
        raise ValueError("empty training set")
    X, _ = _flatten_images(split.x0, split.shape)
    y = split.labels
    C = split.n_classes
    params = init_mlp(MlpSpec(X.shape[1], 0, 0, tuple(hidden), C), seed)
    opt = adam_init(params, lr=lr)
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch):
            idx = order[start:start + batch]
            loss, grads = cross_entropy_and_grads(params, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"classifier loss not finite at epoch {epoch}")
            total += loss
            adam_step(params, grads, opt)
        curve.append(total / len(X))
    logits, _ = mlp_forward(params, X)
    acc = float((logits.argmax(1) == y).mean())
    sealed = MlpParams(params.spec, {k: v.copy() for k, v in params.arrays.items()}, seed)
    return FrozenClassifier(sealed, C, tuple(split.shape), acc, tuple(curve))


def accuracy(logits, labels):
    return float((np.argmax(logits, axis=-1) == np.asarray(labels)).mean())


# -- persistence -------------------------------------------------------------


def save_split(path, split: WorldSplit):
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "H": split.shape[0],
        "W": split.shape[1],
        "C": split.n_classes,
        "count": len(split),
        "seed": split.seed,
        "corruption": split.corruption,
    }
    arrays = {"x0": split.x0, "labels": split.labels}
    if split.x_cor is not None:
        arrays["x_cor"] = split.x_cor
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_split(path) -> WorldSplit:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {header.get('format_version')}")
        x_cor = z["x_cor"] if "x_cor" in z.files else None
        split = WorldSplit(z["x0"], z["labels"], x_cor, header["C"], header["seed"], header["corruption"])
    if len(split) != header["count"] or split.shape != (header["H"], header["W"]):
        raise ValueError("dataset header does not match payload")
    return split


def write_logits_csv(path, logits, labels=None):
    logits = np.atleast_2d(logits)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index"] + [f"logit_{c}" for c in range(logits.shape[1])] + (["label"] if labels is not None else []))
        for i, row in enumerate(logits):
            tail = [int(labels[i])] if labels is not None else []
            w.writerow([i] + [repr(float(v)) for v in row] + tail)


def check_world_image(x, shape=(SIZE, SIZE)):
    check_finite("image", x)
    if np.shape(x)[-2:] != tuple(shape):
        raise ShapeError(f"image shape {np.shape(x)} does not end with {shape}")
