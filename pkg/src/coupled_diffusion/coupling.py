"""Coupled signal/logit sampling: the generalized scheduler, its three strategies, baselines.

Every sampler works on a batch of corrupted inputs at once.  NFE counts are per
sample: one batched network call counts as one evaluation.

Randomness comes from four named streams (``RngStreams``): initial draws and
posterior noise for each process.  Two samplers that make the same sequence of
draws from the same streams therefore see bit-identical noise, which is what
the scheduler-equivalence checks rely on.

Logits are carried in the bundle's normalised space and mapped back to raw
classifier space on return.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .ddpm import Sampler, reverse_step, timestep_sequence
from .denoisers import NfeReport, classify_norm, clip_x0, clip_y0, estimate_x0, estimate_y0, flat_images
from .errors import ConfigError
from .world import classify

STRATEGIES = (
    "parallel",
    "alternating",
    "nested",
    "baseline_noisy",
    "baseline_enhanced",
    "baseline_card",
)
GUIDANCE_SOURCES = ("clean_estimate", "noisy_sample")


@dataclass(frozen=True)
class CouplingConfig:
    """Strategy selector plus its knobs.

    ``steps`` is the number of reverse moves (defaults to the schedule length).
    ``t_switch`` and ``refresh_every`` are in units of remaining sampling steps;
    left as ``None`` they scale the 150-step setting (switch after 50 steps,
    refresh every 20) to ``steps``.
    """

    strategy: str = "parallel"
    steps: int | None = None
    sampler: Sampler = Sampler()
    warmup_fraction: float = 0.5
    N: int = 5
    t_switch: int | None = None
    refresh_every: int | None = None
    guidance_source: str = "clean_estimate"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: unknown {self.strategy!r}, choose from {STRATEGIES}")
        if self.guidance_source not in GUIDANCE_SOURCES:
            raise ConfigError(f"guidance_source: unknown {self.guidance_source!r}")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if self.N < 1:
            raise ConfigError("N must be at least 1")
        if self.steps is not None and self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.refresh_every is not None and self.refresh_every < 1:
            raise ConfigError("refresh_every must be at least 1")
        if self.t_switch is not None and self.t_switch < 0:
            raise ConfigError("t_switch must be non-negative")
        if not isinstance(self.sampler, Sampler):
            object.__setattr__(self, "sampler", Sampler.parse(self.sampler))

    def resolve_steps(self, sched):
        S = sched.T if self.steps is None else int(self.steps)
        if S > sched.T:
            raise ConfigError(f"steps={S} exceeds the schedule length {sched.T}")
        return S

    def n_coupled(self, S):
        return math.ceil(round((1.0 - self.warmup_fraction) * S, 9))

    def nested_schedule(self, S):
        """``(t_switch, refresh_every)`` resolved for ``S`` sampling steps."""
        ts = S - round(S / 3) if self.t_switch is None else int(self.t_switch)
        r = max(1, round(S * 2 / 15)) if self.refresh_every is None else int(self.refresh_every)
        if ts > S:
            raise ConfigError(f"t_switch={ts} exceeds steps={S}")
        return ts, r


def nested_refresh_points(S, t_switch, refresh_every):
    """Remaining-step counts ``s`` (S..1) at which the inner signal chain re-runs."""
    return [s for s in range(S, 0, -1) if s <= t_switch and (t_switch - s) % refresh_every == 0]


def expected_nfe(cfg: CouplingConfig, S):
    """Closed-form per-sample evaluation counts for ``cfg`` at ``S`` steps."""
    s = cfg.strategy
    if s == "parallel":
        return NfeReport(S, S, 1 + cfg.n_coupled(S))
    if s == "alternating":
        return NfeReport(cfg.N * S, cfg.N * S, 1 + cfg.N)
    if s == "nested":
        R = len(nested_refresh_points(S, *cfg.nested_schedule(S)))
        return NfeReport((1 + R) * S, S, 1 + R)
    if s == "baseline_noisy":
        return NfeReport(0, 0, 1)
    if s == "baseline_enhanced":
        return NfeReport(S, 0, 1)
    return NfeReport(0, S, 1)


class RngStreams:
    """One generator per (process, purpose).

    Initial draws derive from ``seed``; posterior noise from ``noise_seed``
    (default: ``seed``), so noise can be varied while the starts stay fixed.
    """

    NAMES = ("x_init", "y_init", "x_post", "y_post")

    def __init__(self, seed, noise_seed=None):
        self.seed = int(seed)
        self.noise_seed = self.seed if noise_seed is None else int(noise_seed)
        for i, name in enumerate(self.NAMES):
            base = self.seed if name.endswith("init") else self.noise_seed
            setattr(self, name, np.random.default_rng(np.random.SeedSequence([base, i])))


def as_streams(rng):
    if isinstance(rng, RngStreams):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStreams(int(rng))
    raise TypeError("rng must be an RngStreams or an integer seed")


def predict_class(logits):
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(logits), axis=-1)


# -- trace -------------------------------------------------------------------


@dataclass
class Trace:
    """Per-action log.  ``keep_states`` also stores state copies in memory."""

    keep_states: bool = False
    records: list = field(default_factory=list)
    states: list = field(default_factory=list)

    def log(self, action, t, t_prev, refreshed, nfe, **state):
        self.records.append({
            "step": len(self.records),
            "action": action,
            "t": None if t is None else int(t),
            "t_prev": None if t_prev is None else int(t_prev),
            "refreshed": list(refreshed),
            "nfe": nfe.snapshot(),
        })
        if self.keep_states:
            self.states.append({k: np.array(v, copy=True) for k, v in state.items() if v is not None})

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    def digest(self):
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()[:16]


def read_trace(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _log(trace, *args, **state):
    if trace is not None:
        trace.log(*args, **state)


# -- shared moves ------------------------------------------------------------
# Estimates are clamped to the data range before the reverse step, as is
# usual for eps-prediction samplers; near t = T an unclamped x0_hat is the
# noise prediction error scaled by 1 / sqrt(alpha_bar_T).


def _x_move(bundle, x, t, t_prev, y_hat, y_state, x_cor, sampler, streams, nfe):
    x0_hat = clip_x0(bundle, estimate_x0(bundle, x, t, y_hat, x_cor, y_state, nfe)[0])
    noise = streams.x_post.standard_normal(x.shape)
    return x0_hat, reverse_step(x, x0_hat, t, t_prev, bundle.sched, sampler, noise)


def _y_move(bundle, y, t, t_prev, x_cond, feat, x_cor, sampler, streams, nfe):
    y0_hat = clip_y0(bundle, estimate_y0(bundle, y, t, x_cond, x_cor, feat, nfe)[0])
    noise = streams.y_post.standard_normal(y.shape)
    return y0_hat, reverse_step(y, y0_hat, t, t_prev, bundle.sched, sampler, noise)


def sample_x_chain(bundle, x_cor, seq, sampler, streams, nfe, y_hat=None, trace=None):
    """Full signal trajectory along ``seq`` with a fixed logit estimate (or none)."""
    x = streams.x_init.standard_normal(x_cor.shape)
    for t, tp in zip(seq[:-1], seq[1:]):
        _, x = _x_move(bundle, x, t, tp, y_hat, None, x_cor, sampler, streams, nfe)
        _log(trace, "UpdateX", t, tp, (), nfe, x=x)
    return x


def sample_y_chain(bundle, x_cor, seq, sampler, streams, nfe, x_cond=None, feat=None, trace=None):
    """Full logit trajectory along ``seq`` with fixed image conditioning (or none)."""
    y = streams.y_init.standard_normal((x_cor.shape[0], bundle.n_classes))
    for t, tp in zip(seq[:-1], seq[1:]):
        _, y = _y_move(bundle, y, t, tp, x_cond, feat, x_cor, sampler, streams, nfe)
        _log(trace, "UpdateY", t, tp, (), nfe, y=y)
    return y


def _setup(bundle, x_cor, cfg, rng):
    xc = flat_images(bundle, x_cor)
    S = cfg.resolve_steps(bundle.sched)
    return xc, S, timestep_sequence(bundle.sched, S), as_streams(rng), NfeReport()


# -- strategies --------------------------------------------------------------


def run_parallel(bundle, x_cor, cfg: CouplingConfig, rng, trace=None):
    """Interleaved per-step coupling.  Returns ``(y0_hat, x0_hat, nfe)``.

    At each step the signal estimate is conditioned on ``y_t`` and on the
    previous logit estimate (or on ``y_t`` again under ``noisy_sample``); the
    logit estimate is conditioned on the fresh signal estimate (or on
    ``x_{t-1}``) and the classifier's view of it.  The first
    ``warmup_fraction`` of steps zero-fill the cross slots.
    """
    xc, S, seq, streams, nfe = _setup(bundle, x_cor, cfg, rng)
    noisy = cfg.guidance_source == "noisy_sample"
    n_c = cfg.n_coupled(S)
    y_hat = classify_norm(bundle, xc, nfe)
    _log(trace, "init", None, None, ("x_cond", "y_cond"), nfe)
    B = xc.shape[0]
    x = streams.x_init.standard_normal((B, bundle.image_dim))
    y = streams.y_init.standard_normal((B, bundle.n_classes))
    for k in range(1, S + 1):
        t, tp = seq[k - 1], seq[k]
        if k > S - n_c:
            est = y if noisy else y_hat
            x0_hat, x_new = _x_move(bundle, x, t, tp, est, y, xc, cfg.sampler, streams, nfe)
            x_cond = x_new if noisy else x0_hat
            feat = classify_norm(bundle, x_cond, nfe)
            _log(trace, "UpdateX", t, tp, ("x_cond",), nfe, x=x_new, x_cond=x_cond)
            y_hat, y = _y_move(bundle, y, t, tp, x_cond, feat, xc, cfg.sampler, streams, nfe)
        else:
            _, x_new = _x_move(bundle, x, t, tp, None, None, xc, cfg.sampler, streams, nfe)
            _log(trace, "UpdateX", t, tp, (), nfe, x=x_new)
            y_hat, y = _y_move(bundle, y, t, tp, None, None, xc, cfg.sampler, streams, nfe)
        _log(trace, "UpdateY", t, tp, ("y_cond",), nfe, y=y)
        x = x_new
    return bundle.logit_norm.invert(y), x, nfe


def run_alternating(bundle, x_cor, cfg: CouplingConfig, rng, trace=None):
    """``N`` rounds of: full signal chain given ``y_hat``, then full logit chain given ``x_hat``.

    ``y_hat`` starts as the classifier's logits on ``x_cor``.  Returns
    ``(y0_hat, x0_hat, nfe)`` from the last round.
    """
    xc, S, seq, streams, nfe = _setup(bundle, x_cor, cfg, rng)
    y_hat = classify_norm(bundle, xc, nfe)
    _log(trace, "init", None, None, ("x_cond", "y_cond"), nfe)
    for _ in range(cfg.N):
        x_hat = sample_x_chain(bundle, xc, seq, cfg.sampler, streams, nfe, y_hat, trace)
        feat = classify_norm(bundle, x_hat, nfe)
        _log(trace, "refresh", None, None, ("x_cond",), nfe, x_cond=x_hat)
        y_hat = sample_y_chain(bundle, xc, seq, cfg.sampler, streams, nfe, x_hat, feat, trace)
        _log(trace, "refresh", None, None, ("y_cond",), nfe, y_cond=y_hat)
    return bundle.logit_norm.invert(y_hat), x_hat, nfe


def run_nested(bundle, x_cor, cfg: CouplingConfig, rng, trace=None):
    """Outer logit chain; inner full signal chains at start and at refresh points.

    The first inner chain sees only ``x_cor`` (no logit estimate exists yet),
    and classifying its result is the run's initial classifier call.  Later
    chains are conditioned on the current logit estimate.  Returns
    ``(y0_hat, x0_hat, nfe)`` with ``x0_hat`` the latest inner result.
    """
    xc, S, seq, streams, nfe = _setup(bundle, x_cor, cfg, rng)
    ts, every = cfg.nested_schedule(S)
    points = set(nested_refresh_points(S, ts, every))
    x_hat = sample_x_chain(bundle, xc, seq, cfg.sampler, streams, nfe, None, trace)
    feat = classify_norm(bundle, x_hat, nfe)
    _log(trace, "refresh", None, None, ("x_cond",), nfe, x_cond=x_hat)
    y = streams.y_init.standard_normal((xc.shape[0], bundle.n_classes))
    y_hat = feat
    for k in range(1, S + 1):
        t, tp = seq[k - 1], seq[k]
        if S - k + 1 in points:
            x_hat = sample_x_chain(bundle, xc, seq, cfg.sampler, streams, nfe, y_hat, trace)
            feat = classify_norm(bundle, x_hat, nfe)
            _log(trace, "refresh", None, None, ("x_cond",), nfe, x_cond=x_hat)
        y_hat, y = _y_move(bundle, y, t, tp, x_hat, feat, xc, cfg.sampler, streams, nfe)
        _log(trace, "UpdateY", t, tp, ("y_cond",), nfe, y=y)
    return bundle.logit_norm.invert(y), x_hat, nfe


def run_baseline(kind, bundle, x_cor, cfg: CouplingConfig, rng, trace=None):
    """``noisy``: f(x_cor).  ``enhanced``: signal chain without logits, then f(x0_hat).
    ``card``: logit chain conditioned on x_cor and f(x_cor).  Returns ``(logits, nfe)``.
    """
    xc, S, seq, streams, nfe = _setup(bundle, x_cor, cfg, rng)
    if kind == "noisy":
        nfe.classifier_calls += 1
        return classify(bundle.classifier, xc), nfe
    if kind == "enhanced":
        x_hat = sample_x_chain(bundle, xc, seq, cfg.sampler, streams, nfe, None, trace)
        nfe.classifier_calls += 1
        return classify(bundle.classifier, x_hat), nfe
    if kind == "card":
        feat = classify_norm(bundle, xc, nfe)
        y = sample_y_chain(bundle, xc, seq, cfg.sampler, streams, nfe, xc, feat, trace)
        return bundle.logit_norm.invert(y), nfe
    raise ConfigError(f"unknown baseline {kind!r}")


def run_strategy(bundle, x_cor, cfg: CouplingConfig, rng, trace=None):
    """Dispatch on ``cfg.strategy``; always returns ``(logits, nfe)``."""
    s = cfg.strategy
    if s.startswith("baseline_"):
        return run_baseline(s[len("baseline_"):], bundle, x_cor, cfg, rng, trace)
    fn = {"parallel": run_parallel, "alternating": run_alternating, "nested": run_nested}[s]
    y, _, nfe = fn(bundle, x_cor, cfg, rng, trace)
    return y, nfe


# -- generalized scheduler ---------------------------------------------------


@dataclass(frozen=True)
class SchedulerAction:
    """One move of one process.

    ``use_cond``: cross slots carry data (else zero-filled).
    ``feed_y_state``: an X move also sees the current ``y_t`` in its noisy-logit slot.
    ``read_y_state``: an X move puts the current ``y_t`` in its estimate slot
    instead of the cached logit estimate.
    ``live_state``: a refresh stores the process's new state, not its estimate.
    ``refresh_x_cond`` (X moves) / ``refresh_y_cond`` (Y moves): update the
    conditioning the other process reads.  An image refresh runs the classifier.
    A move at the top timestep with its process idle or finished starts a new
    trajectory from a fresh initial draw.
    """

    kind: str
    t: int
    t_prev: int
    use_cond: bool = True
    feed_y_state: bool = False
    read_y_state: bool = False
    live_state: bool = False
    refresh_x_cond: bool = False
    refresh_y_cond: bool = False

    def to_dict(self):
        return asdict(self)


def validate_actions(actions, top):
    clock = {"x": None, "y": None}
    for i, a in enumerate(actions):
        if a.kind not in clock:
            raise ConfigError(f"action {i}: kind must be 'x' or 'y', got {a.kind!r}")
        if not 0 <= a.t_prev < a.t <= top:
            raise ConfigError(f"action {i}: need 0 <= t_prev < t <= {top}, got t={a.t}, t_prev={a.t_prev}")
        if a.refresh_x_cond and a.kind != "x" or a.refresh_y_cond and a.kind != "y":
            raise ConfigError(f"action {i}: refresh flag does not match action kind")
        if (a.feed_y_state or a.read_y_state) and a.kind != "x":
            raise ConfigError(f"action {i}: y-state flags apply to X moves only")
        now = clock[a.kind]
        restart = a.t == top and now in (None, 0)
        if not restart and a.t != now:
            raise ConfigError(
                f"action {i}: {a.kind}-process is at t={now}, cannot move from t={a.t}"
            )
        clock[a.kind] = a.t_prev
    for k, now in clock.items():
        if now not in (None, 0):
            raise ConfigError(f"{k}-process trajectory left unfinished at t={now}")


def run_generalized(actions, bundle, x_cor, rng, sampler=Sampler(), init="x_cor", trace=None):
    """Execute an action stream.  Returns ``(y0_hat, x0_hat, nfe)``.

    ``init="x_cor"`` classifies ``x_cor`` once up front; that result is both the
    first logit conditioning and the classifier view of the first image
    conditioning (``x_cor`` itself).  ``init="deferred"`` skips it: the first
    image refresh's classification is counted as the initial call and also
    seeds the logit conditioning, and no move may read cross conditioning
    before that.

    Returned values are the final states of each process, or the initial
    conditioning if a process never moved.
    """
    sched = bundle.sched
    top = sched.T
    validate_actions(actions, top)
    if init not in ("x_cor", "deferred"):
        raise ConfigError(f"init must be 'x_cor' or 'deferred', got {init!r}")
    xc = flat_images(bundle, x_cor)
    B, streams, nfe = xc.shape[0], as_streams(rng), NfeReport()
    ready = init == "x_cor"
    y_cond = x_cond = feat = None
    if ready:
        y_cond = classify_norm(bundle, xc, nfe)
        x_cond, feat = xc, y_cond
        _log(trace, "init", None, None, ("x_cond", "y_cond"), nfe)
    x = y = None
    tx = ty = None

    def start_y():
        nonlocal y, ty
        y, ty = streams.y_init.standard_normal((B, bundle.n_classes)), top

    for i, a in enumerate(actions):
        if a.use_cond and not ready:
            raise ConfigError(f"action {i} reads cross conditioning before it exists")
        refreshed = ()
        if a.kind == "x":
            if a.t == top and tx in (None, 0):
                x, tx = streams.x_init.standard_normal((B, bundle.image_dim)), top
            if a.use_cond and (a.read_y_state or a.feed_y_state) and ty in (None, 0):
                start_y()
            y_hat = (y if a.read_y_state else y_cond) if a.use_cond else None
            y_state = y if a.use_cond and a.feed_y_state else None
            x0_hat, x = _x_move(bundle, x, a.t, a.t_prev, y_hat, y_state, xc, sampler, streams, nfe)
            tx = a.t_prev
            if a.refresh_x_cond:
                x_cond = x if a.live_state else x0_hat
                feat = classify_norm(bundle, x_cond, nfe)
                if not ready:
                    y_cond, ready = feat, True
                refreshed = ("x_cond",)
            _log(trace, "UpdateX", a.t, a.t_prev, refreshed, nfe, x=x, x_cond=x_cond if refreshed else None)
        else:
            if a.t == top and ty in (None, 0):
                start_y()
            xk, fk = (x_cond, feat) if a.use_cond else (None, None)
            y0_hat, y = _y_move(bundle, y, a.t, a.t_prev, xk, fk, xc, sampler, streams, nfe)
            ty = a.t_prev
            if a.refresh_y_cond:
                y_cond = y if a.live_state else y0_hat
                refreshed = ("y_cond",)
            _log(trace, "UpdateY", a.t, a.t_prev, refreshed, nfe, y=y)
    if y is None and y_cond is None:
        y_cond = classify_norm(bundle, xc, nfe)
    y_out = y if y is not None else y_cond
    x_out = x if x is not None else xc
    return bundle.logit_norm.invert(y_out), x_out, nfe


# -- action-stream builders --------------------------------------------------


def parallel_actions(cfg: CouplingConfig, sched):
    """The interleaved stream that :func:`run_parallel` executes."""
    S = cfg.resolve_steps(sched)
    seq = timestep_sequence(sched, S)
    noisy = cfg.guidance_source == "noisy_sample"
    n_c = cfg.n_coupled(S)
    out = []
    for k in range(1, S + 1):
        t, tp = seq[k - 1], seq[k]
        c = k > S - n_c
        out.append(SchedulerAction("x", t, tp, use_cond=c, feed_y_state=c, read_y_state=c and noisy,
                                   live_state=c and noisy,
                                   refresh_x_cond=c))
        out.append(SchedulerAction("y", t, tp, use_cond=c, refresh_y_cond=True))
    return out


def alternating_actions(cfg: CouplingConfig, sched, rounds=None):
    """Block stream: all X moves, refresh, all Y moves, refresh; ``rounds`` times (default N)."""
    S = cfg.resolve_steps(sched)
    seq = timestep_sequence(sched, S)
    pairs = list(zip(seq[:-1], seq[1:]))
    out = []
    for _ in range(cfg.N if rounds is None else rounds):
        for j, (t, tp) in enumerate(pairs):
            last = j == len(pairs) - 1
            out.append(SchedulerAction("x", t, tp, live_state=last, refresh_x_cond=last))
        for j, (t, tp) in enumerate(pairs):
            last = j == len(pairs) - 1
            out.append(SchedulerAction("y", t, tp, live_state=last, refresh_y_cond=last))
    return out


def nested_actions(cfg: CouplingConfig, sched):
    """Stream equivalent of :func:`run_nested`; run it with ``init="deferred"``."""
    S = cfg.resolve_steps(sched)
    seq = timestep_sequence(sched, S)
    points = set(nested_refresh_points(S, *cfg.nested_schedule(S)))
    pairs = list(zip(seq[:-1], seq[1:]))

    def inner(use_cond):
        return [
            SchedulerAction("x", t, tp, use_cond=use_cond, live_state=j == len(pairs) - 1,
                            refresh_x_cond=j == len(pairs) - 1)
            for j, (t, tp) in enumerate(pairs)
        ]

    out = inner(False)
    for k, (t, tp) in enumerate(pairs, start=1):
        if S - k + 1 in points:
            out += inner(True)
        out.append(SchedulerAction("y", t, tp, refresh_y_cond=True))
    return out
