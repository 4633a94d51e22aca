"""Small dense networks with hand-written reverse-mode gradients.

Everything is plain numpy, float64, batch-first: an input of shape ``(B, D)``.
The single network topology supported is

    z0 = [input | cond | t_embed]
    a_l = h_{l-1} @ W_l + b_l
    a_l <- a_l * (1 + t_embed @ Wg_l + bg_l) + (t_embed @ Ws_l + bs_l)   (FiLM)
    h_l = silu(a_l)
    out = h_L @ W_out + b_out

which is all the denoisers and the frozen classifier need.  FiLM parameters
exist only when ``t_dim > 0``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import CheckpointError, ShapeError, StaleTapeError, check_finite

FORMAT_VERSION = 1
_MAGIC = b"CDMLP"


@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    cond_dim: int
    t_dim: int
    hidden: tuple[int, ...]
    out_dim: int

    def __post_init__(self):
        for name in ("in_dim", "cond_dim", "t_dim", "out_dim"):
            if getattr(self, name) < 0:
                raise ShapeError(f"{name} must be non-negative")
        if self.out_dim < 1 or self.in_dim + self.cond_dim + self.t_dim < 1:
            raise ShapeError("network needs at least one input and one output unit")
        if any(h < 1 for h in self.hidden):
            raise ShapeError(f"hidden widths must be positive, got {self.hidden}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def total_in(self):
        return self.in_dim + self.cond_dim + self.t_dim

    @property
    def film(self):
        return self.t_dim > 0

    def param_shapes(self):
        """Ordered ``name -> shape`` map; the declaration order used everywhere."""
        shapes = {}
        prev = self.total_in
        for i, h in enumerate(self.hidden):
            shapes[f"W{i}"] = (prev, h)
            shapes[f"b{i}"] = (h,)
            if self.film:
                shapes[f"Wg{i}"] = (self.t_dim, h)
                shapes[f"bg{i}"] = (h,)
                shapes[f"Ws{i}"] = (self.t_dim, h)
                shapes[f"bs{i}"] = (h,)
            prev = h
        shapes["Wout"] = (prev, self.out_dim)
        shapes["bout"] = (self.out_dim,)
        return shapes

    def n_params(self):
        return sum(math.prod(s) for s in self.param_shapes().values())

    def to_dict(self):
        return {
            "in_dim": self.in_dim,
            "cond_dim": self.cond_dim,
            "t_dim": self.t_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
        }


@dataclass
class MlpParams:
    spec: MlpSpec
    arrays: dict
    seed: int | None = None
    version: int = 0

    def copy(self):
        return MlpParams(
            self.spec, {k: v.copy() for k, v in self.arrays.items()}, self.seed, 0
        )

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def __getitem__(self, key):
        return self.arrays[key]


def init_mlp(spec: MlpSpec, seed: int, zero: bool = False) -> MlpParams:
    """He-normal weights, zero biases, FiLM initialised to the identity modulation."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.param_shapes().items():
        if zero or name.startswith("b") or len(shape) == 1:
            arrays[name] = np.zeros(shape)
        elif name.startswith(("Wg", "Ws")):
            # small so that modulation starts near (1 + 0, 0)
            arrays[name] = rng.normal(0.0, 0.1 / math.sqrt(shape[0]), size=shape)
        else:
            arrays[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), size=shape)
    return MlpParams(spec, arrays, seed)


def silu(x):
    return x * expit(x)


def _dsilu(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


@dataclass
class Tape:
    params: MlpParams
    version: int
    z0: np.ndarray
    t_embed: np.ndarray | None
    pre: list = field(default_factory=list)  # FiLM-modulated pre-activations
    raw: list = field(default_factory=list)  # pre-activations before FiLM
    gains: list = field(default_factory=list)  # 1 + gamma
    hiddens: list = field(default_factory=list)
    batch: int = 0


def _as_batch(x, width, name, batch=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{name}: expected (*, {width}), got {x.shape}")
    if batch is not None and x.shape[0] != batch:
        if x.shape[0] == 1:
            x = np.broadcast_to(x, (batch, width))
        else:
            raise ShapeError(f"{name}: batch {x.shape[0]} != {batch}")
    return x


def mlp_forward(params: MlpParams, input, cond=None, t_embed=None):
    """Run the network; returns ``(output, tape)``.

    ``cond`` / ``t_embed`` may be ``None`` when the spec gives them zero width.
    Rows broadcast: a single-row ``cond`` or ``t_embed`` is reused for the batch.
    """
    spec = params.spec
    x = _as_batch(input, spec.in_dim, "input")
    B = x.shape[0]
    parts = [x]
    if spec.cond_dim:
        if cond is None:
            raise ShapeError(f"cond of width {spec.cond_dim} required")
        parts.append(_as_batch(cond, spec.cond_dim, "cond", B))
    elif cond is not None and np.size(cond):
        raise ShapeError("network takes no cond input")
    temb = None
    if spec.t_dim:
        if t_embed is None:
            raise ShapeError(f"t_embed of width {spec.t_dim} required")
        temb = _as_batch(t_embed, spec.t_dim, "t_embed", B)
        parts.append(temb)
    z0 = np.concatenate(parts, axis=1) if len(parts) > 1 else x
    tape = Tape(params, params.version, z0, temb, batch=B)
    h = z0
    A = params.arrays
    for i in range(len(spec.hidden)):
        a = h @ A[f"W{i}"] + A[f"b{i}"]
        tape.raw.append(a)
        if spec.film:
            gain = 1.0 + temb @ A[f"Wg{i}"] + A[f"bg{i}"]
            a = a * gain + (temb @ A[f"Ws{i}"] + A[f"bs{i}"])
            tape.gains.append(gain)
        tape.pre.append(a)
        h = silu(a)
        tape.hiddens.append(h)
    out = h @ A["Wout"] + A["bout"]
    check_finite("mlp_forward output", out)
    return out, tape


def mlp_backward(tape: Tape, grad_output):
    """Exact gradients of ``sum(grad_output * output)``.

    Returns ``(grads, grad_z0)`` where ``grads`` mirrors ``params.arrays`` and
    ``grad_z0`` is the gradient w.r.t. the concatenated ``[input|cond|t_embed]``.
    """
    params = tape.params
    if tape.version != params.version:
        raise StaleTapeError("parameters changed since this tape was recorded")
    spec = params.spec
    g = np.asarray(grad_output, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (tape.batch, spec.out_dim):
        raise ShapeError(f"grad_output: expected {(tape.batch, spec.out_dim)}, got {g.shape}")
    A = params.arrays
    grads = {}
    L = len(spec.hidden)
    h_last = tape.hiddens[-1] if L else tape.z0
    grads["Wout"] = h_last.T @ g
    grads["bout"] = g.sum(axis=0)
    dh = g @ A["Wout"].T
    dtemb = np.zeros_like(tape.t_embed) if spec.film else None
    for i in reversed(range(L)):
        da = dh * _dsilu(tape.pre[i])
        if spec.film:
            dgain = da * tape.raw[i]
            grads[f"Wg{i}"] = tape.t_embed.T @ dgain
            grads[f"bg{i}"] = dgain.sum(axis=0)
            grads[f"Ws{i}"] = tape.t_embed.T @ da
            grads[f"bs{i}"] = da.sum(axis=0)
            dtemb += dgain @ A[f"Wg{i}"].T + da @ A[f"Ws{i}"].T
            da = da * tape.gains[i]
        h_prev = tape.hiddens[i - 1] if i > 0 else tape.z0
        grads[f"W{i}"] = h_prev.T @ da
        grads[f"b{i}"] = da.sum(axis=0)
        dh = da @ A[f"W{i}"].T
    if spec.film:
        dh = dh.copy()
        dh[:, spec.in_dim + spec.cond_dim:] += dtemb
    ordered = {k: grads[k] for k in A}
    return ordered, dh


def add_grads(a, b, scale=1.0):
    if a is None:
        return {k: scale * v for k, v in b.items()}
    for k in a:
        a[k] = a[k] + scale * b[k]
    return a


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: MlpParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``.

    The parameter ``version`` is bumped so tapes recorded earlier go stale.
    """
    if grads.keys() != params.arrays.keys():
        raise ShapeError("gradient keys do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for k, p in params.arrays.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ShapeError(f"grad {k}: {g.shape} vs param {p.shape}")
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.version += 1
    return params, state


@dataclass(frozen=True)
class TimeEmbedding:
    width: int = 32
    max_period: float = 10000.0

    def __post_init__(self):
        if self.width < 2 or self.width % 2:
            raise ShapeError(f"embedding width must be even and >= 2, got {self.width}")


def time_embed(t, spec: TimeEmbedding = TimeEmbedding()):
    """Sinusoidal embedding ``[sin(t w_k) | cos(t w_k)]``, ``w_k = P^(-k/half)``.

    Scalar ``t`` gives shape ``(width,)``; an array of ``B`` times gives ``(B, width)``.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0):
        raise ValueError("time must be non-negative")
    half = spec.width // 2
    freqs = np.exp(-math.log(spec.max_period) * np.arange(half) / half)
    args = t_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


# -- checkpoints -----------------------------------------------------------


def dumps_params(params: MlpParams, extra: dict | None = None) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "spec": params.spec.to_dict(),
        "seed": params.seed,
        "names": list(params.arrays),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    buf.write(_MAGIC + b"\n")
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(params.flat().astype("<f8").tobytes())
    return buf.getvalue()


def loads_params(blob: bytes):
    """Inverse of :func:`dumps_params`; returns ``(params, extra)``."""
    try:
        magic, header_line, payload = blob.split(b"\n", 2)
        if magic != _MAGIC:
            raise CheckpointError("not a parameter checkpoint")
        header = json.loads(header_line)
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')}")
    sd = header["spec"]
    spec = MlpSpec(sd["in_dim"], sd["cond_dim"], sd["t_dim"], tuple(sd["hidden"]), sd["out_dim"])
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != spec.n_params():
        raise CheckpointError(f"expected {spec.n_params()} values, found {values.size}")
    arrays, offset = {}, 0
    for name, shape in spec.param_shapes().items():
        n = math.prod(shape)
        arrays[name] = values[offset:offset + n].reshape(shape).astype(np.float64)
        offset += n
    if list(arrays) != header["names"]:
        raise CheckpointError("parameter order does not match spec")
    return MlpParams(spec, arrays, header.get("seed")), header.get("extra", {})


def save_params(path, params: MlpParams, extra=None):
    with open(path, "wb") as fh:
        fh.write(dumps_params(params, extra))


def load_params(path):
    try:
        with open(path, "rb") as fh:
            return loads_params(fh.read())
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
