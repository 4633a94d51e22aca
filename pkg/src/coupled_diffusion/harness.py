"""Experiment orchestration: configs, seeds, bundle lifecycle, comparisons, ablations.

A run is described by one YAML file (see ``ExperimentConfig``).  Every seed is
derived from the top-level ``seed``:

    world train split      seed          classifier, bundle init, training  seed
    world test split       seed + 1000   train / test corruption           seed + 1 / seed + 2
    sampling, replicate r  seed + r

Result files never contain wall times or output paths, so reruns of one config
are byte-identical; timings go to a ``timings.json`` sidecar.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .coupling import CouplingConfig, RngStreams, Trace, expected_nfe, read_trace, run_strategy
from .ddpm import Sampler, make_schedule
from .denoisers import NfeReport, bundle_digest, corruption_variance, load_bundle, make_bundle, save_bundle
from .errors import CheckpointError, ConfigError
from .ouve_sde import OuveParams, corrupt_signal, gaussian_score, pc_sample, toy_signals, train_score_net
from .ouve_sde import write_trajectory_csv
from .trainer import (
    PairDataset,
    TrainConfig,
    train_alternating,
    train_card,
    train_nested,
    train_parallel,
    train_signal_only,
    warm_start,
    write_loss_csv,
)
from .world import CORRUPTIONS, accuracy, array_digest, corrupt_split, gen_dataset, train_frozen_classifier

TEST_SEED_OFFSET = 1000
COUPLED = ("parallel", "alternating", "nested")

# strategy -> trained bundle it samples from
BUNDLE_KEY = {
    "baseline_noisy": "base",
    "baseline_enhanced": "signal_only",
    "baseline_card": "card",
    "parallel": "parallel",
    "alternating": "alternating",
    "nested": "nested",
}


# -- config ------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    classes: int = 4
    size: int = 12
    n_train_per_class: int = 400
    n_test_per_class: int = 100

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("classes must be at least 2")
        if self.size < 4:
            raise ConfigError("size must be at least 4")
        if self.n_train_per_class < 1 or self.n_test_per_class < 1:
            raise ConfigError("split sizes must be positive")


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 40
    hidden: tuple = (64,)
    lr: float = 3e-3


@dataclass(frozen=True)
class ModelConfig:
    schedule: str = "cosine"
    T: int = 150
    hidden: tuple = (128, 128)
    temb_width: int = 32
    prior_baseline: bool = True

    def __post_init__(self):
        if self.schedule not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.T < 1:
            raise ConfigError("T must be at least 1")


@dataclass(frozen=True)
class AblationConfig:
    steps: tuple = (10, 25, 50, 150)
    methods: tuple | None = None
    guidance_method: str | None = None
    sampler_method: str | None = None

    def __post_init__(self):
        if not self.steps:
            raise ConfigError("steps must be nonempty")
        if any(s < 1 for s in self.steps) or list(self.steps) != sorted(set(self.steps)):
            raise ConfigError("steps must be positive and strictly ascending")


@dataclass(frozen=True)
class SdeConfig:
    mode: str = "analytic"
    n: int = 100
    length: int = 64
    steps: int = 50
    snr: float = 0.5
    corrector_steps: int = 1
    gamma: float = 1.5
    sigma_min: float = 0.05
    sigma_max: float = 0.5
    n_train: int = 512
    train_steps: int = 2000
    n_trajectories: int = 3

    def __post_init__(self):
        if self.mode not in ("analytic", "trained"):
            raise ConfigError("mode must be 'analytic' or 'trained'")
        if self.steps < 1:
            raise ConfigError("steps must be at least 1")
        if self.snr < 0:
            raise ConfigError("snr must be non-negative")
        if self.n < 1 or self.length < 2:
            raise ConfigError("need n >= 1 and length >= 2")
        try:
            OuveParams(self.gamma, self.sigma_min, self.sigma_max)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def params(self):
        return OuveParams(self.gamma, self.sigma_min, self.sigma_max)


# keys the harness owns; setting them in the file would desynchronise seeds or paths
_RESERVED_TRAIN_KEYS = ("seed", "checkpoint_dir")
_TOP_KEYS = ("seed", "replicates", "world", "classifier", "corruptions", "model", "train",
             "methods", "checkpoints", "ablation", "sde", "traces")


def _section(cls, data, path, reserved=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)} - set(reserved)
    for key in data:
        if key in reserved:
            raise ConfigError(f"{path}.{key}: set by the harness, not the config")
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key (allowed: {', '.join(sorted(names))})")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be at least {minimum}, got {value}")
    return int(value)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    methods: dict
    replicates: int = 1
    world: WorldConfig = WorldConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    corruptions: tuple = ("pixel30",)
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    checkpoints: str | None = None
    ablation: AblationConfig = AblationConfig()
    sde: SdeConfig = SdeConfig()
    traces: bool = True
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, data, base_dir=None, seed_override=None):
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a mapping")
        for key in data:
            if key not in _TOP_KEYS:
                raise ConfigError(f"{key}: unknown key (allowed: {', '.join(_TOP_KEYS)})")
        data = dict(data)
        if seed_override is not None:
            data["seed"] = int(seed_override)
        if "seed" not in data:
            raise ConfigError("seed: required (all seeds must be explicit)")
        seed = _int(data["seed"], "seed", 0)
        replicates = _int(data.get("replicates", 1), "replicates", 1)
        corruptions = data.get("corruptions", ["pixel30"])
        if isinstance(corruptions, str):
            corruptions = [corruptions]
        if not corruptions:
            raise ConfigError("corruptions: need at least one")
        for i, c in enumerate(corruptions):
            if c not in CORRUPTIONS:
                raise ConfigError(f"corruptions[{i}]: unknown {c!r}, choose from {CORRUPTIONS}")
        model = _section(ModelConfig, data.get("model"), "model")
        train = _section(TrainConfig, data.get("train"), "train", _RESERVED_TRAIN_KEYS)
        train = dataclasses.replace(train, seed=seed)
        methods = data.get("methods")
        if not isinstance(methods, dict) or not methods:
            raise ConfigError("methods: need a nonempty mapping of name -> coupling settings")
        parsed = {}
        for name, spec in methods.items():
            spec = dict(spec or {})
            if "sampler" in spec:
                try:
                    spec["sampler"] = Sampler.parse(spec["sampler"])
                except ValueError as exc:
                    raise ConfigError(f"methods.{name}.sampler: {exc}") from exc
            cfg = _section(CouplingConfig, spec, f"methods.{name}")
            if cfg.steps is not None and cfg.steps > model.T:
                raise ConfigError(f"methods.{name}.steps: {cfg.steps} exceeds model.T={model.T}")
            parsed[name] = cfg
        ablation = _section(AblationConfig, data.get("ablation"), "ablation")
        for i, m in enumerate(ablation.methods or ()):
            if m not in parsed:
                raise ConfigError(f"ablation.methods[{i}]: {m!r} is not a configured method")
        for key in ("guidance_method", "sampler_method"):
            m = getattr(ablation, key)
            if m is not None and m not in parsed:
                raise ConfigError(f"ablation.{key}: {m!r} is not a configured method")
        ckpt = data.get("checkpoints")
        if ckpt is not None:
            ckpt = str(ckpt)
            if base_dir is not None and not os.path.isabs(ckpt):
                ckpt = os.path.normpath(os.path.join(base_dir, ckpt))
        traces = data.get("traces", True)
        if not isinstance(traces, bool):
            raise ConfigError("traces: expected true or false")
        resolved = dict(data, seed=seed)
        return cls(
            seed=seed,
            methods=parsed,
            replicates=replicates,
            world=_section(WorldConfig, data.get("world"), "world"),
            classifier=_section(ClassifierConfig, data.get("classifier"), "classifier"),
            corruptions=tuple(corruptions),
            model=model,
            train=train,
            checkpoints=ckpt,
            ablation=ablation,
            sde=_section(SdeConfig, data.get("sde"), "sde"),
            traces=traces,
            raw=resolved,
        )

    @property
    def config_hash(self):
        """Hash of the canonical config (after seed override, before path resolution)."""
        raw = {k: v for k, v in self.raw.items() if k != "checkpoints"}
        blob = json.dumps(raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def seeds(self):
        s = self.seed
        return {
            "seed": s,
            "world_train": s,
            "world_test": s + TEST_SEED_OFFSET,
            "corrupt_train": s + 1,
            "corrupt_test": s + 2,
            "classifier": s,
            "bundle_init": s,
            "train": s,
            "sampling": [s + r for r in range(self.replicates)],
        }

    def bundle_keys(self, methods=None):
        names = self.methods if methods is None else methods
        keys = {BUNDLE_KEY[self.methods[m].strategy] for m in names}
        return [k for k in ("base", "signal_only", "card", *COUPLED) if k in keys]


def load_config(path, seed_override=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    return ExperimentConfig.from_dict(data, os.path.dirname(os.path.abspath(path)), seed_override)


# -- world and bundles -------------------------------------------------------


@dataclass
class World:
    corruption: str
    train: object
    test: object
    classifier: object

    @property
    def x_cor_digest(self):
        return array_digest(self.test.x_cor)


def build_classifier(cfg: ExperimentConfig):
    train = gen_dataset(cfg.world.classes, cfg.world.n_train_per_class, cfg.seed, cfg.world.size)
    fc = train_frozen_classifier(train, epochs=cfg.classifier.epochs, seed=cfg.seed,
                                 hidden=tuple(cfg.classifier.hidden), lr=cfg.classifier.lr)
    return train, fc


def build_world(cfg: ExperimentConfig, corruption, train=None, classifier=None) -> World:
    if train is None or classifier is None:
        train, classifier = build_classifier(cfg)
    test = gen_dataset(cfg.world.classes, cfg.world.n_test_per_class, cfg.seed + TEST_SEED_OFFSET,
                       cfg.world.size)
    trc = corrupt_split(train, corruption, cfg.seed + 1)
    tec = corrupt_split(test, corruption, cfg.seed + 2)
    tec.x_cor.setflags(write=False)
    return World(corruption, trc, tec, classifier)


def build_worlds(cfg: ExperimentConfig):
    train, fc = build_classifier(cfg)
    return [build_world(cfg, c, train, fc) for c in cfg.corruptions]


def base_bundle(cfg: ExperimentConfig, world: World):
    m = cfg.model
    var = corruption_variance(world.train.x0, world.train.x_cor) if m.prior_baseline else None
    return make_bundle(world.classifier, world.train.x0, make_schedule(m.schedule, m.T),
                       hidden=tuple(m.hidden), temb_width=m.temb_width, seed=cfg.seed, x_prior_var=var)


def _map(fn, items, threads):
    items = list(items)
    if threads and threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def train_bundles(cfg: ExperimentConfig, world: World, keys, out_dir=None, threads=1):
    """Train every requested bundle key; coupled strategies share one warm start.

    Returns ``(bundles, curves)``; with ``out_dir`` each bundle is saved under
    ``out_dir/<key>`` and its loss curve to ``out_dir/<key>/loss.csv``.
    """
    data = PairDataset.from_split(world.train)
    base = base_bundle(cfg, world)
    bundles, curves = {"base": base}, {}

    def tcfg(key):
        if cfg.train.checkpoint_every and out_dir is not None:
            return dataclasses.replace(cfg.train, checkpoint_dir=os.path.join(out_dir, key, "periodic"))
        return cfg.train

    if any(k in COUPLED for k in keys):
        bundles["warm"], curves["warm"] = warm_start(base, data, tcfg("warm"))
    fns = {
        "signal_only": lambda: train_signal_only(base, data, tcfg("signal_only")),
        "card": lambda: train_card(base, data, tcfg("card")),
        "parallel": lambda: train_parallel(bundles["warm"], data, tcfg("parallel")),
        "alternating": lambda: train_alternating(bundles["warm"], data, tcfg("alternating")),
        "nested": lambda: train_nested(bundles["warm"], data, tcfg("nested")),
    }
    todo = [k for k in keys if k in fns]
    for key, (bundle, curve) in zip(todo, _map(lambda k: fns[k](), todo, threads)):
        bundles[key], curves[key] = bundle, curve
    if out_dir is not None:
        for key, bundle in bundles.items():
            save_bundle(os.path.join(out_dir, key), bundle)
            if key in curves:
                write_loss_csv(os.path.join(out_dir, key, "loss.csv"), curves[key])
    return bundles, curves


def load_bundles(directory, keys):
    out = {}
    for key in keys:
        path = os.path.join(directory, key)
        if not os.path.isdir(path):
            raise CheckpointError(f"missing checkpoint for {key!r}: {path}")
        out[key] = load_bundle(path)
    return out


def obtain_bundles(cfg: ExperimentConfig, world: World, keys, out=None, threads=1):
    """Load from ``cfg.checkpoints/<corruption>`` if configured, otherwise train."""
    if cfg.checkpoints is not None:
        bundles = load_bundles(os.path.join(cfg.checkpoints, world.corruption), keys)
        want = array_digest(*world.classifier.params.arrays.values())
        for key, b in bundles.items():
            if array_digest(*b.classifier.params.arrays.values()) != want:
                raise CheckpointError(f"{key}: checkpoint classifier differs from the one this config "
                                      "trains (different world, classifier or seed settings)")
        return bundles
    save_to = None if out is None else os.path.join(out, "checkpoints", world.corruption)
    bundles, _ = train_bundles(cfg, world, keys, save_to, threads)
    return bundles


# -- evaluation and results ------------------------------------------------------


@dataclass(frozen=True)
class EvalJob:
    corruption: str
    method: str
    replicate: int
    cfg: CouplingConfig
    streams_seed: int
    noise_seed: int
    variant: str = ""


def evaluate(job: EvalJob, bundle, world: World, trace_dir=None):
    trace = Trace() if trace_dir is not None else None
    logits, nfe = run_strategy(bundle, world.test.x_cor, job.cfg,
                               RngStreams(job.streams_seed, job.noise_seed), trace)
    acc = accuracy(logits, world.test.labels)
    digest = None
    if trace is not None:
        os.makedirs(trace_dir, exist_ok=True)
        tag = job.variant or job.method
        trace.write_jsonl(os.path.join(trace_dir, f"{tag}_r{job.replicate}.jsonl"))
        digest = trace.digest()
    return {"accuracy": acc, "nfe": nfe, "trace_digest": digest,
            "logits_digest": array_digest(logits)}


def mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


class ResultTable:
    """Rows keyed by ``(corruption, method)`` plus a header identifying config, seed and version."""

    COLUMNS = ("corruption", "method", "strategy", "sampler", "steps", "n_replicates", "accuracy",
               "se", "nfe_x", "nfe_y", "nfe_classifier", "total_nfe_x", "total_nfe_y",
               "total_nfe_classifier", "x_cor_digest", "config_hash", "seed", "version")

    def __init__(self, rows, meta):
        for r in rows:
            for a in r["accuracies"]:
                if not 0.0 <= a <= 1.0:
                    raise ValueError(f"accuracy {a} outside [0, 1]")
        self.rows = rows
        self.meta = meta

    def row(self, corruption, method):
        for r in self.rows:
            if (r["corruption"], r["method"]) == (corruption, method):
                return r
        raise KeyError((corruption, method))

    def to_json(self):
        return json.dumps({"meta": self.meta, "rows": self.rows}, indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        lines = [",".join(self.COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[c]) for c in self.COLUMNS))
        return "\n".join(lines) + "\n"

    def write(self, out, stem="results"):
        os.makedirs(out, exist_ok=True)
        Path(out, f"{stem}.json").write_text(self.to_json())
        Path(out, f"{stem}.csv").write_text(self.to_csv())

    @classmethod
    def read_json(cls, path):
        blob = json.loads(Path(path).read_text())
        return cls(blob["rows"], blob["meta"])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def _row(cfg: ExperimentConfig, world: World, method, ccfg, results, n_test, extra=None):
    accs = [r["accuracy"] for r in results]
    mean, se = mean_se(accs)
    nfe = results[0]["nfe"]
    if any(r["nfe"].as_tuple() != nfe.as_tuple() for r in results):
        raise RuntimeError(f"{method}: NFE differs across replicates")
    row = {
        "corruption": world.corruption,
        "method": method,
        "strategy": ccfg.strategy,
        "sampler": str(ccfg.sampler),
        "steps": ccfg.steps if ccfg.steps is not None else cfg.model.T,
        "n_replicates": len(accs),
        "accuracy": mean,
        "se": se,
        "accuracies": accs,
        "nfe_x": nfe.denoiser_x_calls,
        "nfe_y": nfe.denoiser_y_calls,
        "nfe_classifier": nfe.classifier_calls,
        "total_nfe_x": nfe.denoiser_x_calls * n_test,
        "total_nfe_y": nfe.denoiser_y_calls * n_test,
        "total_nfe_classifier": nfe.classifier_calls * n_test,
        "x_cor_digest": world.x_cor_digest,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "version": __version__,
        "trace_digests": [r["trace_digest"] for r in results],
        "logits_digests": [r["logits_digest"] for r in results],
    }
    row.update(extra or {})
    return row


def _meta(cfg: ExperimentConfig, command, worlds, bundles=None):
    meta = {
        "command": command,
        "config_hash": cfg.config_hash,
        "version": __version__,
        "seeds": cfg.seeds,
        "replicates": cfg.replicates,
        "x_cor_digests": {w.corruption: w.x_cor_digest for w in worlds},
        "classifier_train_accuracy": {w.corruption: float(w.classifier.train_accuracy) for w in worlds},
    }
    if bundles is not None:
        meta["bundle_digests"] = {c: {k: bundle_digest(b) for k, b in bs.items()} for c, bs in bundles.items()}
    return meta


def _run_jobs(jobs, bundles_by_cor, worlds_by_cor, trace_root, threads):
    def one(job):
        bundle = bundles_by_cor[job.corruption][BUNDLE_KEY[job.cfg.strategy]]
        tdir = None if trace_root is None else os.path.join(trace_root, job.corruption)
        return evaluate(job, bundle, worlds_by_cor[job.corruption], tdir)

    results = _map(one, jobs, threads)
    for w in worlds_by_cor.values():
        if array_digest(w.test.x_cor) != w.x_cor_digest:
            raise RuntimeError(f"{w.corruption}: corrupted test inputs changed during evaluation")
    return results


def _group(jobs, results, key):
    groups = {}
    for job, res in zip(jobs, results):
        groups.setdefault(key(job), []).append(res)
    return groups


class _Timer:
    """Seconds spent in each phase since the previous mark."""

    def __init__(self):
        self.t0 = time.perf_counter()
        self.marks = {}

    def mark(self, name):
        now = time.perf_counter()
        self.marks[name] = round(now - self.t0, 3)
        self.t0 = now

    def write(self, out):
        Path(out, "timings.json").write_text(json.dumps(self.marks, indent=2) + "\n")


def _prepare(cfg, methods, out, threads):
    worlds = build_worlds(cfg)
    bundles = {w.corruption: obtain_bundles(cfg, w, cfg.bundle_keys(methods), out, threads) for w in worlds}
    return worlds, bundles


def cmd_run(cfg: ExperimentConfig, out, threads=1) -> ResultTable:
    """Evaluate every configured method on every corruption; writes results.{csv,json}."""
    timer = _Timer()
    worlds, bundles = _prepare(cfg, cfg.methods, out, threads)
    timer.mark("prepare")
    by_cor = {w.corruption: w for w in worlds}
    jobs = [EvalJob(w.corruption, m, r, c, cfg.seed + r, cfg.seed + r)
            for w in worlds for m, c in cfg.methods.items() for r in range(cfg.replicates)]
    trace_root = os.path.join(out, "traces") if cfg.traces else None
    results = _run_jobs(jobs, bundles, by_cor, trace_root, threads)
    timer.mark("evaluate")
    groups = _group(jobs, results, lambda j: (j.corruption, j.method))
    rows = [_row(cfg, w, m, c, groups[(w.corruption, m)], len(w.test.labels))
            for w in worlds for m, c in cfg.methods.items()]
    table = ResultTable(rows, _meta(cfg, "run", worlds, bundles))
    assert len(table.rows) == len(cfg.corruptions) * len(cfg.methods)
    table.write(out)
    timer.write(out)
    return table


def cmd_train(cfg: ExperimentConfig, out, threads=1):
    """Train and save every bundle the configured methods need; returns saved paths."""
    timer = _Timer()
    paths = {}
    for w in build_worlds(cfg):
        d = os.path.join(out, "checkpoints", w.corruption)
        bundles, _ = train_bundles(cfg, w, cfg.bundle_keys(), d, threads)
        paths[w.corruption] = {k: os.path.join(d, k) for k in bundles}
        timer.mark(f"train_{w.corruption}")
    meta = {"command": "train", "config_hash": cfg.config_hash, "version": __version__, "seeds": cfg.seeds}
    Path(out, "train_manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    timer.write(out)
    return paths


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def cmd_ablate_steps(cfg: ExperimentConfig, out, threads=1, steps=None):
    """Accuracy and NFE against the number of sampling steps, per method."""
    steps = tuple(cfg.ablation.steps if steps is None else steps)
    AblationConfig(steps=steps)
    if steps[-1] > cfg.model.T:
        raise ConfigError(f"ablation.steps: {steps[-1]} exceeds model.T={cfg.model.T}")
    methods = list(cfg.ablation.methods or [m for m, c in cfg.methods.items() if c.strategy in COUPLED])
    if not methods:
        raise ConfigError("ablation.methods: no coupled method configured")
    timer = _Timer()
    worlds, bundles = _prepare(cfg, methods, out, threads)
    by_cor = {w.corruption: w for w in worlds}
    jobs = [EvalJob(w.corruption, m, r, dataclasses.replace(cfg.methods[m], steps=S),
                    cfg.seed + r, cfg.seed + r, f"{m}_S{S}")
            for w in worlds for m in methods for S in steps for r in range(cfg.replicates)]
    trace_root = os.path.join(out, "traces") if cfg.traces else None
    results = _run_jobs(jobs, bundles, by_cor, trace_root, threads)
    timer.mark("evaluate")
    groups = _group(jobs, results, lambda j: (j.corruption, j.method, j.cfg.steps))
    header = ["corruption", "strategy", "T", "accuracy", "se", "nfe_x", "nfe_y", "nfe_classifier",
              "total_nfe", "config_hash"]
    rows = []
    for w in worlds:
        for m in methods:
            for S in steps:
                res = groups[(w.corruption, m, S)]
                mean, se = mean_se([r["accuracy"] for r in res])
                n = res[0]["nfe"]
                rows.append([w.corruption, m, S, mean, se, n.denoiser_x_calls, n.denoiser_y_calls, n.classifier_calls,
                             sum(n.as_tuple()) * len(w.test.labels), cfg.config_hash])
    os.makedirs(out, exist_ok=True)
    _write_csv(os.path.join(out, "ablate_steps.csv"), header, rows)
    timer.write(out)
    return header, rows


def _variant_table(cfg, out, method, variants, stem, threads):
    """Shared two-variant layout: ``variants`` is ``[(name, coupling_cfg, noise_seed_fn)]``."""
    timer = _Timer()
    worlds, bundles = _prepare(cfg, [method], out, threads)
    by_cor = {w.corruption: w for w in worlds}
    jobs = [EvalJob(w.corruption, method, r, c, cfg.seed, noise(r), f"{stem}_{name}")
            for w in worlds for name, c, noise in variants for r in range(cfg.replicates)]
    trace_root = os.path.join(out, "traces") if cfg.traces else None
    results = _run_jobs(jobs, bundles, by_cor, trace_root, threads)
    timer.mark("evaluate")
    groups = _group(jobs, results, lambda j: (j.corruption, j.variant))
    rows = []
    for w in worlds:
        for name, c, _ in variants:
            rows.append(_row(cfg, w, method, c, groups[(w.corruption, f"{stem}_{name}")],
                             len(w.test.labels), {"variant": name}))
    table = ResultTable(rows, _meta(cfg, stem, worlds, bundles))
    table.COLUMNS = ("corruption", "variant") + tuple(c for c in ResultTable.COLUMNS if c != "corruption")
    table.write(out, stem)
    diff = [[w.corruption] + [r["accuracy"] for r in rows if r["corruption"] == w.corruption] for w in worlds]
    diff = [d + [d[1] - d[2]] for d in diff]
    names = [v[0] for v in variants]
    _write_csv(os.path.join(out, f"{stem}_diff.csv"),
               ["corruption", names[0], names[1], f"{names[0]}_minus_{names[1]}"], diff)
    timer.write(out)
    return table, diff


def _pick_method(cfg, configured, label):
    if configured is not None:
        m = configured
    else:
        m = next((n for n, c in cfg.methods.items() if c.strategy == "parallel"), None)
        if m is None:
            raise ConfigError(f"ablation.{label}: no parallel method configured")
    if cfg.methods[m].strategy != "parallel":
        raise ConfigError(f"ablation.{label}: {m!r} must use the parallel strategy")
    return m


def cmd_ablate_guidance(cfg: ExperimentConfig, out, threads=1):
    """Parallel strategy with clean-estimate vs noisy-sample guidance, same seeds."""
    m = _pick_method(cfg, cfg.ablation.guidance_method, "guidance_method")
    base = cfg.methods[m]
    variants = [(g, dataclasses.replace(base, guidance_source=g), lambda r: cfg.seed + r)
                for g in ("clean_estimate", "noisy_sample")]
    return _variant_table(cfg, out, m, variants, "ablate_guidance", threads)


def cmd_ablate_sampler(cfg: ExperimentConfig, out, threads=1):
    """Parallel strategy under ddpm vs ddim(0); replicates vary only the posterior noise seed."""
    m = _pick_method(cfg, cfg.ablation.sampler_method, "sampler_method")
    base = cfg.methods[m]
    variants = [("ddpm", dataclasses.replace(base, sampler=Sampler("ddpm")), lambda r: cfg.seed + r),
                ("ddim", dataclasses.replace(base, sampler=Sampler("ddim", 0.0)), lambda r: cfg.seed + r)]
    return _variant_table(cfg, out, m, variants, "ablate_sampler", threads)


def cmd_sde_demo(cfg: ExperimentConfig, out, threads=1):
    """Predictor-corrector enhancement of toy 1-D signals; reports MSE before and after."""
    s = cfg.sde
    p = s.params
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    x0 = toy_signals(s.n, s.length, rng)
    xc = corrupt_signal(x0, rng)
    if s.mode == "analytic":
        score = gaussian_score(x0, p)
    else:
        xt = toy_signals(s.n_train, s.length, rng)
        score, losses = train_score_net(xt, corrupt_signal(xt, rng), p, steps=s.train_steps, seed=cfg.seed)
        os.makedirs(out, exist_ok=True)
        _write_csv(os.path.join(out, "sde_score_loss.csv"), ["step", "loss"], enumerate(losses))
    trace = []
    x_hat = pc_sample(score, xc, s.steps, s.snr, p, np.random.default_rng(np.random.SeedSequence([cfg.seed, 8])),
                      corrector_steps=s.corrector_steps, trace=trace)
    before = ((xc - x0) ** 2).mean(1)
    after = ((x_hat - x0) ** 2).mean(1)
    report = {
        "command": "sde_demo",
        "config_hash": cfg.config_hash,
        "version": __version__,
        "seed": cfg.seed,
        "mode": s.mode,
        "n": s.n,
        "steps": s.steps,
        "snr": s.snr,
        "mse_before": float(before.mean()),
        "mse_after": float(after.mean()),
        "fraction_improved": float((after < before).mean()),
        "enhanced_digest": array_digest(x_hat),
    }
    os.makedirs(out, exist_ok=True)
    _write_csv(os.path.join(out, "sde_mse.csv"), ["index", "mse_before", "mse_after"],
               zip(range(s.n), before.tolist(), after.tolist()))
    tdir = os.path.join(out, "trajectories")
    os.makedirs(tdir, exist_ok=True)
    for i in range(min(s.n_trajectories, s.n)):
        write_trajectory_csv(os.path.join(tdir, f"example_{i}.csv"), [(t, x[i]) for t, x in trace])
    Path(out, "sde_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def inspect_trace(path):
    """Summary of a per-run trace: action counts, refreshes, final NFE."""
    records = read_trace(path)
    if not records:
        return {"records": 0, "actions": {}, "refreshes": 0, "final_nfe": None}
    actions = Counter(r["action"] for r in records)
    refreshed = Counter(name for r in records for name in r["refreshed"])
    return {
        "records": len(records),
        "actions": dict(sorted(actions.items())),
        "refreshed": dict(sorted(refreshed.items())),
        "refreshes": actions.get("refresh", 0),
        "final_nfe": records[-1]["nfe"],
    }


def check_nfe(table: ResultTable, cfg: ExperimentConfig):
    """Rows whose measured per-sample NFE differs from the closed form (should be empty)."""
    bad = []
    for r in table.rows:
        c = cfg.methods[r["method"]]
        want = expected_nfe(c, r["steps"]).as_tuple()
        got = (r["nfe_x"], r["nfe_y"], r["nfe_classifier"])
        if got != want:
            bad.append((r["corruption"], r["method"], got, want))
    return bad


__all__ = [
    "AblationConfig",
    "ClassifierConfig",
    "ExperimentConfig",
    "ModelConfig",
    "NfeReport",
    "ResultTable",
    "SdeConfig",
    "WorldConfig",
    "base_bundle",
    "build_world",
    "build_worlds",
    "check_nfe",
    "cmd_ablate_guidance",
    "cmd_ablate_sampler",
    "cmd_ablate_steps",
    "cmd_run",
    "cmd_sde_demo",
    "cmd_train",
    "inspect_trace",
    "load_config",
    "mean_se",
    "train_bundles",
]
