"""Benchmark machinery for few-shot class-incremental learning.

Builds session schedules with disjoint class spaces over a synthetic
feature world, runs the full method loop (train prompt, train VAE,
estimate distributions, advance) plus the baselines, enforces the
data-access rule structurally, and computes the metrics: per-session
accuracy, the all-session average, the performance drop, and the
base/incremental decomposition with harmonic mean.

Method tags:

* ``lp_dif``           prompt tuning + distribution store replay (VAE-
                       augmented estimates in incremental sessions)
* ``lp_only``          prompt tuning with no replay memory
* ``exemplar_random``  keep N_e random real features per old class
* ``exemplar_herding`` keep the N_e features nearest the class mean
* ``joint_lp``         fresh prompt on all data seen so far (upper bound)
* ``fixed_prompt``     frozen random prompt, never trained
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .distributions import (
    DistributionStore,
    estimate_distribution,
    storage_bytes,
)
from .encoders import (
    FEATURE_VERSION,
    ClassEmbeddingTable,
    FeatureRecord,
    SyntheticWorld,
    TextEncoder,
    load_feature_file,
    read_class_names,
    synthetic_sample,
    write_class_names,
    write_feature_file,
)
from .errors import ConfigError, DataFormatError, NumericalError, ProtocolViolationError
from .numerics import Rng
from .prompt import (
    ClassifierHead,
    SessionHyperparams,
    TrainLog,
    evaluate,
    init_prompt,
    train_session,
)
from .vae import VaeTrainConfig, synthesize_features, train_vae

METHODS = (
    "lp_dif",
    "lp_only",
    "exemplar_random",
    "exemplar_herding",
    "joint_lp",
    "fixed_prompt",
)

RESULTS_FIELDS = (
    "method",
    "seed",
    "K",
    "session",
    "accuracy",
    "base_acc",
    "inc_acc",
    "hm",
    "replay_bytes",
    "seconds",
)


# ---------------------------------------------------------------------------
# Benchmark specification
# ---------------------------------------------------------------------------


@dataclass
class SessionSpec:
    index: int
    class_ids: list[int]
    train: list[FeatureRecord]
    test: list[FeatureRecord]  # test records for this session's new classes


@dataclass
class BenchmarkSpec:
    name: str
    dim: int
    shots: int
    class_names: list[str]
    sessions: list[SessionSpec]
    first_is_base: bool
    # the frozen towers belong to the benchmark, not to a training run:
    # every method and seed sees the same embedding table and text encoder
    model_seed: int = 0
    prompt_len: int = 16
    ctx_dim: int = 16
    cls_dim: int = 16

    def validate(self) -> None:
        seen: dict[int, int] = {}
        for sess in self.sessions:
            if not sess.class_ids:
                raise ConfigError(f"session {sess.index} has no classes")
            for cid in sess.class_ids:
                if cid in seen:
                    raise ConfigError(
                        f"class {cid} appears in sessions {seen[cid]} and {sess.index}; "
                        "session class spaces must be disjoint"
                    )
                seen[cid] = sess.index
            if not sess.train:
                raise ConfigError(f"session {sess.index} has no training data")
            train_classes = {r.class_id for r in sess.train}
            test_classes = {r.class_id for r in sess.test}
            if train_classes != set(sess.class_ids):
                raise ConfigError(
                    f"session {sess.index} train classes {sorted(train_classes)} do not "
                    f"match declared classes {sorted(sess.class_ids)}"
                )
            if test_classes != set(sess.class_ids):
                raise ConfigError(
                    f"session {sess.index} test classes {sorted(test_classes)} do not "
                    f"match declared classes {sorted(sess.class_ids)}"
                )
            for r in sess.train + sess.test:
                if r.feature.shape != (self.dim,):
                    raise ConfigError(
                        f"session {sess.index} record of class {r.class_id} has "
                        f"dimension {r.feature.shape[0]}, benchmark is {self.dim}"
                    )

    @property
    def n_sessions(self) -> int:
        return len(self.sessions)

    def cumulative_classes(self, t: int) -> list[int]:
        out: list[int] = []
        for sess in self.sessions[: t + 1]:
            out.extend(sess.class_ids)
        return out

    def cumulative_test(self, t: int) -> list[FeatureRecord]:
        out: list[FeatureRecord] = []
        for sess in self.sessions[: t + 1]:
            out.extend(sess.test)
        return out

    def base_class_ids(self) -> list[int]:
        return list(self.sessions[0].class_ids) if self.first_is_base else []


@dataclass
class SyntheticLayout:
    """Desk-scale session layout over a generated feature world.

    Class mean directions are mutually orthogonal whenever the class
    count fits the feature dimension (well-separated classes, the regime
    pretrained feature spaces provide), falling back to separation-
    checked random directions otherwise. An untrained prompt classifies
    such a world at chance.
    """

    classes: int = 20
    dim: int = 32
    base_classes: int = 8
    base_train: int = 100
    inc_sessions: int = 4
    inc_classes: int = 3
    shots: int = 5
    test_per_class: int = 20
    var_low: float = 0.01
    var_high: float = 0.06
    prompt_len: int = 16
    ctx_dim: int = 16
    cls_dim: int = 16
    session_class_ids: list[list[int]] | None = None

    def resolved_sessions(self) -> list[list[int]]:
        if self.session_class_ids is not None:
            flat: dict[int, int] = {}
            for s, ids in enumerate(self.session_class_ids):
                for cid in ids:
                    if cid in flat:
                        raise ConfigError(
                            f"layout assigns class {cid} to sessions {flat[cid]} and {s}"
                        )
                    flat[cid] = s
            if len(flat) != self.classes:
                raise ConfigError(
                    f"layout lists {len(flat)} classes, expected {self.classes}"
                )
            return [list(ids) for ids in self.session_class_ids]
        if self.base_classes + self.inc_sessions * self.inc_classes != self.classes:
            raise ConfigError(
                f"{self.base_classes} base + {self.inc_sessions} x {self.inc_classes} "
                f"incremental classes != {self.classes} total"
            )
        out = []
        cursor = 0
        if self.base_classes > 0:
            out.append(list(range(self.base_classes)))
            cursor = self.base_classes
        for _ in range(self.inc_sessions):
            out.append(list(range(cursor, cursor + self.inc_classes)))
            cursor += self.inc_classes
        return out

    def validate(self) -> None:
        if self.classes < 1 or self.dim < 1:
            raise ConfigError("class count and dimension must be positive")
        if self.shots < 1 or self.test_per_class < 1:
            raise ConfigError("shots and test_per_class must be >= 1")
        if self.base_classes > 0 and self.base_train < 1:
            raise ConfigError("base_train must be >= 1 when a base session exists")
        if not 0 < self.var_low <= self.var_high:
            raise ConfigError("world variance range must satisfy 0 < low <= high")
        self.resolved_sessions()


def build_synthetic_benchmark(
    layout: SyntheticLayout, seed: int
) -> tuple[BenchmarkSpec, SyntheticWorld]:
    """Deterministic world and splits from a layout and a seed. Per-class
    substreams key every draw, so regenerating any one class's data does
    not disturb another's. The frozen towers are derived from the same
    seed and recorded in the spec; runs reconstruct them from there."""
    layout.validate()
    session_ids = layout.resolved_sessions()
    class_names = [f"class_{c:03d}" for c in range(layout.classes)]
    root = Rng(seed)
    model_seed = root.substream("model-tower").seed

    scale = math.sqrt(layout.dim)
    if layout.classes <= layout.dim:
        raw = root.substream("directions").standard_normal(layout.dim * layout.dim)
        basis, _ = np.linalg.qr(raw.reshape(layout.dim, layout.dim))
        directions = basis[: layout.classes]
    else:
        # more classes than dimensions: best-separated random directions
        for attempt in range(64):
            raw = root.substream("directions", attempt).standard_normal(
                layout.classes * layout.dim
            ).reshape(layout.classes, layout.dim)
            directions = raw / np.linalg.norm(raw, axis=1)[:, None]
            gram = directions @ directions.T
            np.fill_diagonal(gram, -1.0)
            if gram.max() < 0.95:
                break
        else:  # pragma: no cover - needs astronomically unlucky draws
            raise NumericalError("could not draw separable class directions")

    means: dict[int, np.ndarray] = {}
    variances: dict[int, np.ndarray] = {}
    for c in range(layout.classes):
        means[c] = scale * directions[c]
        u = root.substream("var", c).uniforms(layout.dim)
        variances[c] = layout.var_low + (layout.var_high - layout.var_low) * u
    world = SyntheticWorld(layout.dim, means, variances, seed)

    first_is_base = layout.base_classes > 0
    sessions: list[SessionSpec] = []
    for s, ids in enumerate(session_ids):
        is_base = first_is_base and s == 0
        per_class = layout.base_train if is_base else layout.shots
        train: list[FeatureRecord] = []
        test: list[FeatureRecord] = []
        for c in ids:
            train.extend(synthetic_sample(world, c, per_class, root.substream("train", c)))
            test.extend(
                synthetic_sample(world, c, layout.test_per_class, root.substream("test", c))
            )
        sessions.append(SessionSpec(s, list(ids), train, test))

    spec = BenchmarkSpec(
        name="synthetic",
        dim=layout.dim,
        shots=layout.shots,
        class_names=class_names,
        sessions=sessions,
        first_is_base=first_is_base,
        model_seed=model_seed,
        prompt_len=layout.prompt_len,
        ctx_dim=layout.ctx_dim,
        cls_dim=layout.cls_dim,
    )
    spec.validate()
    return spec, world


# ---------------------------------------------------------------------------
# Data-access guard
# ---------------------------------------------------------------------------


class TrainDataGuard:
    """The only door to training data during a run.

    Incremental methods may read the current session's training set
    only; the joint upper bound is explicitly allowed to read history.
    Every fetch is logged as (current session, requested session) so a
    run can prove its own protocol legality.
    """

    def __init__(self, spec: BenchmarkSpec, allow_history: bool = False):
        self._spec = spec
        self._allow_history = allow_history
        self.current: int | None = None
        self.access_log: list[tuple[int, int]] = []

    def enter_session(self, t: int) -> None:
        self.current = t

    def train_records(self, t: int) -> list[FeatureRecord]:
        if self.current is None:
            raise ProtocolViolationError("train data requested outside any session")
        self.access_log.append((self.current, t))
        legal = t == self.current or (self._allow_history and t <= self.current)
        if not legal:
            raise ProtocolViolationError(
                f"session {self.current} tried to read training data of session {t}"
            )
        return list(self._spec.sessions[t].train)


# ---------------------------------------------------------------------------
# Method configuration and results
# ---------------------------------------------------------------------------


@dataclass
class MethodConfig:
    method: str = "lp_dif"
    synth_features: int = 10  # synthesized features per class for the estimate
    replay_classes: int = 8  # old classes drawn per real example
    replay_weight: float = 2.0
    recon_weight: float = 1.0
    temperature: float = 0.01
    prompt_len: int = 16
    ctx_dim: int = 16
    cls_dim: int = 16
    latent_dim: int = 8
    lr: float = 0.002
    momentum: float = 0.9
    base_epochs: int = 200
    inc_epochs: int = 100
    base_batch: int = 64
    inc_batch: int = 25
    exemplars_per_class: int = 1
    vae_epochs: int = 4000
    vae_lr: float = 0.05
    vae_momentum: float = 0.9
    first_session: str = "base"  # schedule for session 0 of no-base benchmarks

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method.startswith("exemplar") and self.exemplars_per_class < 1:
            raise ConfigError("exemplar methods need exemplars_per_class >= 1")
        if self.method == "lp_dif":
            if self.synth_features < 0:
                raise ConfigError("synth_features must be >= 0")
            if self.replay_classes < 1:
                raise ConfigError("replay_classes must be >= 1")
        if self.temperature <= 0 or self.lr <= 0:
            raise ConfigError("temperature and learning rate must be positive")
        if self.first_session not in ("base", "incremental"):
            raise ConfigError("first_session must be 'base' or 'incremental'")


@dataclass
class SessionResult:
    session: int
    accuracy: float  # percent on the cumulative test set
    per_class: dict[int, tuple[int, int]]  # class id -> (correct, total)
    replay_bytes: int
    seconds: float


@dataclass
class RunOutcome:
    method: str
    seed: int
    shots: int
    results: list[SessionResult]
    prompts: list[np.ndarray] = field(default_factory=list)  # per-session snapshots
    stores: list[DistributionStore | None] = field(default_factory=list)
    access_log: list[tuple[int, int]] = field(default_factory=list)
    train_logs: list[TrainLog | None] = field(default_factory=list)
    vae_logs: list[list[dict] | None] = field(default_factory=list)
    exemplar_counts: list[dict[int, int]] = field(default_factory=list)


def _select_exemplars(
    records: list[FeatureRecord], keep: int, mode: str, rng: Rng
) -> list[FeatureRecord]:
    """Pick replay exemplars for one class: uniformly at random, or the
    ones nearest the class mean feature (Euclidean on the already
    normalized features)."""
    if keep >= len(records):
        return list(records)
    if mode == "exemplar_random":
        idx = sorted(rng.choice_without_replacement(len(records), keep))
    else:
        feats = np.vstack([r.feature for r in records])
        center = feats.mean(axis=0)
        dist = np.linalg.norm(feats - center, axis=1)
        idx = sorted(np.argsort(dist, kind="stable")[:keep].tolist())
    return [records[i] for i in idx]


def _group_by_class(records: list[FeatureRecord]) -> dict[int, list[np.ndarray]]:
    out: dict[int, list[np.ndarray]] = {}
    for r in records:
        out.setdefault(r.class_id, []).append(r.feature)
    return out


def run_benchmark(spec: BenchmarkSpec, config: MethodConfig, seed: int) -> RunOutcome:
    """Execute one (method, seed) job over every session of a benchmark.

    The frozen towers come from the benchmark itself, so every method and
    seed classifies against the same embedding table and text encoder;
    ``seed`` drives only the method's own randomness (prompt init, batch
    order, replay draws, VAE training).
    """
    spec.validate()
    config.validate()
    if (config.prompt_len, config.ctx_dim, config.cls_dim) != (
        spec.prompt_len,
        spec.ctx_dim,
        spec.cls_dim,
    ):
        raise ConfigError(
            f"method dims (prompt_len={config.prompt_len}, ctx_dim={config.ctx_dim}, "
            f"cls_dim={config.cls_dim}) do not match the benchmark's frozen towers "
            f"({spec.prompt_len}, {spec.ctx_dim}, {spec.cls_dim})"
        )
    root = Rng(seed)
    table = ClassEmbeddingTable(spec.cls_dim, ClassEmbeddingTable.seed_for(spec.model_seed))
    enc = TextEncoder(
        feat_dim=spec.dim,
        prompt_len=spec.prompt_len,
        ctx_dim=spec.ctx_dim,
        cls_dim=spec.cls_dim,
        seed=TextEncoder.seed_for(spec.model_seed),
    )
    head = ClassifierHead(table, spec.class_names, config.temperature)
    context = init_prompt(config.prompt_len, config.ctx_dim, root.substream("prompt-init"))
    method_rng = root.substream("method", config.method, spec.shots)

    guard = TrainDataGuard(spec, allow_history=config.method == "joint_lp")
    store = DistributionStore(spec.dim) if config.method == "lp_dif" else None
    exemplar_memory: list[FeatureRecord] = []
    outcome = RunOutcome(config.method, seed, spec.shots, [])

    for t, sess in enumerate(spec.sessions):
        started = time.perf_counter()
        guard.enter_session(t)
        head.extend(sess.class_ids)

        if t == 0:
            schedule_base = spec.first_is_base or config.first_session == "base"
        else:
            schedule_base = False
        hyper = SessionHyperparams(
            epochs=config.base_epochs if schedule_base else config.inc_epochs,
            batch_size=config.base_batch if schedule_base else config.inc_batch,
            lr=config.lr,
            momentum=config.momentum,
            replay_classes=config.replay_classes,
            replay_weight=config.replay_weight,
        )

        train_log: TrainLog | None = None
        vae_log = None
        replay_bytes = 0

        if config.method == "fixed_prompt":
            pass  # the frozen random prompt is evaluated as-is

        elif config.method == "joint_lp":
            pooled: list[FeatureRecord] = []
            for s in range(t + 1):
                pooled.extend(guard.train_records(s))
            # the oracle pools heavily imbalanced sessions (base vs K-shot);
            # inverse-frequency weighting keeps it an actual upper bound
            joint_hyper = replace(
                hyper,
                epochs=config.base_epochs,
                batch_size=config.base_batch,
                class_balanced=True,
            )
            context, train_log = train_session(
                init_prompt(config.prompt_len, config.ctx_dim, method_rng.substream("joint-init", t)),
                head,
                enc,
                pooled,
                None,
                joint_hyper,
                0,  # joint training has no old/new split
                method_rng.substream("train", t),
            )

        elif config.method == "lp_dif":
            data = guard.train_records(t)
            replay_store = store if t > 0 and len(store) > 0 else None
            context, train_log = train_session(
                context, head, enc, data, replay_store, hyper, t, method_rng.substream("train", t)
            )
            by_class = _group_by_class(data)
            synth: dict[int, list[np.ndarray]] = {}
            if t > 0 and config.synth_features > 0:
                vae_cfg = VaeTrainConfig(
                    epochs=config.vae_epochs,
                    lr=config.vae_lr,
                    momentum=config.vae_momentum,
                    recon_weight=config.recon_weight,
                )
                embeddings = {c: head.embedding_for(c) for c in sess.class_ids}
                vae, vae_log = train_vae(
                    data, embeddings, enc, vae_cfg, config.latent_dim,
                    method_rng.substream("vae", t),
                )
                for c in sess.class_ids:
                    synth[c] = synthesize_features(
                        vae, head.embedding_for(c), config.synth_features, enc,
                        method_rng.substream("synth", t, c),
                    )
            for c in sess.class_ids:
                store.add(estimate_distribution(c, by_class[c], synth.get(c, ())))
            replay_bytes = storage_bytes(store)

        elif config.method in ("exemplar_random", "exemplar_herding"):
            session_data = guard.train_records(t)
            data = session_data + list(exemplar_memory)
            context, train_log = train_session(
                context, head, enc, data, None, hyper, t, method_rng.substream("train", t)
            )
            for c in sess.class_ids:
                class_records = [r for r in session_data if r.class_id == c]
                exemplar_memory.extend(
                    _select_exemplars(
                        class_records,
                        config.exemplars_per_class,
                        config.method,
                        method_rng.substream("exemplar", t, c),
                    )
                )
            replay_bytes = len(exemplar_memory) * spec.dim * 4

        else:  # lp_only
            data = guard.train_records(t)
            context, train_log = train_session(
                context, head, enc, data, None, hyper, t, method_rng.substream("train", t)
            )

        accuracy, per_class = evaluate(head, enc, context, spec.cumulative_test(t))
        outcome.results.append(
            SessionResult(t, accuracy, per_class, replay_bytes, time.perf_counter() - started)
        )
        outcome.prompts.append(context.vectors.copy())
        outcome.stores.append(store.copy() if store is not None else None)
        outcome.train_logs.append(train_log)
        outcome.vae_logs.append(vae_log)
        counts: dict[int, int] = {}
        for r in exemplar_memory:
            counts[r.class_id] = counts.get(r.class_id, 0) + 1
        outcome.exemplar_counts.append(counts)

    outcome.access_log = list(guard.access_log)
    return outcome


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _accuracies(results) -> list[float]:
    return [r.accuracy if isinstance(r, SessionResult) else float(r) for r in results]


def metric_avg(results) -> float:
    """Arithmetic mean of per-session accuracies."""
    accs = _accuracies(results)
    if not accs:
        raise ValueError("metric_avg of zero sessions")
    return sum(accs) / len(accs)


def metric_pd(results) -> float:
    """Performance drop: first-session accuracy minus last-session accuracy."""
    accs = _accuracies(results)
    if not accs:
        raise ValueError("metric_pd of zero sessions")
    return accs[0] - accs[-1]


def metric_decomposition(
    result: SessionResult, base_ids, inc_ids
) -> tuple[float, float, float]:
    """Sample-weighted accuracy of the base-class and incremental-class
    groups, plus their harmonic mean (0 when both groups score 0). The
    two sets must partition the evaluated classes; an empty group scores
    0 by convention."""
    base = set(base_ids)
    inc = set(inc_ids)
    overlap = base & inc
    if overlap:
        raise ValueError(f"base and incremental sets overlap: {sorted(overlap)}")
    evaluated = set(result.per_class)
    if base | inc != evaluated:
        raise ValueError(
            f"sets cover {sorted(base | inc)} but evaluation covers {sorted(evaluated)}"
        )

    def group_acc(ids) -> float:
        correct = sum(result.per_class[c][0] for c in ids)
        total = sum(result.per_class[c][1] for c in ids)
        return 100.0 * correct / total if total else 0.0

    a = group_acc(base)
    b = group_acc(inc)
    hm = 2.0 * a * b / (a + b) if (a + b) > 0 else 0.0
    return a, b, hm


def shot_sweep(
    layout: SyntheticLayout,
    shot_list,
    config: MethodConfig,
    seed: int,
) -> dict[int, RunOutcome]:
    """Independent full runs of one method over several shot counts, with
    per-shot derived world and run seeds."""
    outcomes: dict[int, RunOutcome] = {}
    for k in shot_list:
        if k < 1:
            raise ConfigError(f"shot count must be >= 1, got {k}")
        layout_k = replace(layout, shots=int(k))
        world_seed = Rng(seed).substream("world", int(k)).seed
        run_seed = Rng(seed).substream("run", int(k)).seed
        bench, _ = build_synthetic_benchmark(layout_k, world_seed)
        outcomes[int(k)] = run_benchmark(bench, config, run_seed)
    return outcomes


# ---------------------------------------------------------------------------
# Results file
# ---------------------------------------------------------------------------


def outcome_rows(
    outcome: RunOutcome, spec: BenchmarkSpec, timing: str = "zero"
) -> list[dict]:
    """Flatten one run into results-file rows. ``timing`` is ``zero``
    (deterministic output, wall clock goes to run metadata only) or
    ``wall`` (measured seconds)."""
    base_ids = set(spec.base_class_ids())
    rows = []
    for r in outcome.results:
        evaluated = set(r.per_class)
        a, b, hm = metric_decomposition(r, base_ids & evaluated, evaluated - base_ids)
        rows.append(
            {
                "method": outcome.method,
                "seed": outcome.seed,
                "K": outcome.shots,
                "session": r.session,
                "accuracy": r.accuracy,
                "base_acc": a,
                "inc_acc": b,
                "hm": hm,
                "replay_bytes": r.replay_bytes,
                "seconds": 0.0 if timing == "zero" else r.seconds,
            }
        )
    return rows


def write_results_csv(path, rows: list[dict]) -> None:
    ordered = sorted(rows, key=lambda r: (r["method"], r["K"], r["seed"], r["session"]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_FIELDS)
        for r in ordered:
            writer.writerow(
                [
                    r["method"],
                    r["seed"],
                    r["K"],
                    r["session"],
                    f"{r['accuracy']:.6f}",
                    f"{r['base_acc']:.6f}",
                    f"{r['inc_acc']:.6f}",
                    f"{r['hm']:.6f}",
                    r["replay_bytes"],
                    f"{r['seconds']:.3f}",
                ]
            )


def read_results_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty results file") from None
        if tuple(header) != RESULTS_FIELDS:
            missing = set(RESULTS_FIELDS) - set(header)
            extra = set(header) - set(RESULTS_FIELDS)
            detail = []
            if missing:
                detail.append(f"missing fields {sorted(missing)}")
            if extra:
                detail.append(f"unknown fields {sorted(extra)}")
            raise DataFormatError(f"{path}: bad header ({'; '.join(detail) or 'wrong order'})")
        rows = []
        for ln, rec in enumerate(reader, start=2):
            if len(rec) != len(RESULTS_FIELDS):
                raise DataFormatError(f"{path}: line {ln} has {len(rec)} fields")
            try:
                rows.append(
                    {
                        "method": rec[0],
                        "seed": int(rec[1]),
                        "K": int(rec[2]),
                        "session": int(rec[3]),
                        "accuracy": float(rec[4]),
                        "base_acc": float(rec[5]),
                        "inc_acc": float(rec[6]),
                        "hm": float(rec[7]),
                        "replay_bytes": int(rec[8]),
                        "seconds": float(rec[9]),
                    }
                )
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {ln}: {exc}") from None
    return rows


MANIFEST_VERSION = 1


def write_benchmark_files(spec: BenchmarkSpec, out_dir, seed: int) -> str:
    """Write one train and one test feature file per session, the class
    name list, and a manifest that ties them together. Returns the
    manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    names_file = "class_names.txt"
    write_class_names(os.path.join(out_dir, names_file), spec.class_names)
    sessions_meta = []
    for sess in spec.sessions:
        train_file = f"session_{sess.index}_train.fscf"
        test_file = f"session_{sess.index}_test.fscf"
        write_feature_file(os.path.join(out_dir, train_file), spec.dim, sess.train)
        write_feature_file(os.path.join(out_dir, test_file), spec.dim, sess.test)
        sessions_meta.append(
            {
                "index": sess.index,
                "class_ids": list(sess.class_ids),
                "train_file": train_file,
                "test_file": test_file,
            }
        )
    manifest = {
        "format_version": MANIFEST_VERSION,
        "feature_format_version": FEATURE_VERSION,
        "benchmark": {
            "name": spec.name,
            "dim": spec.dim,
            "shots": spec.shots,
            "first_is_base": spec.first_is_base,
            "seed": seed,
        },
        "model": {
            "seed": spec.model_seed,
            "prompt_len": spec.prompt_len,
            "ctx_dim": spec.ctx_dim,
            "cls_dim": spec.cls_dim,
        },
        "class_names_file": names_file,
        "sessions": sessions_meta,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_benchmark_files(manifest_path) -> BenchmarkSpec:
    """Rebuild a benchmark from a manifest and its feature files."""
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{manifest_path}: not valid JSON ({exc})") from None
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataFormatError(
            f"{manifest_path}: unsupported manifest version {manifest.get('format_version')}"
        )
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    meta = manifest["benchmark"]
    names = read_class_names(os.path.join(base_dir, manifest["class_names_file"]))
    sessions = []
    for entry in manifest["sessions"]:
        train_dim, train = load_feature_file(os.path.join(base_dir, entry["train_file"]))
        test_dim, test = load_feature_file(os.path.join(base_dir, entry["test_file"]))
        if train_dim != meta["dim"] or test_dim != meta["dim"]:
            raise DataFormatError(
                f"{manifest_path}: session {entry['index']} feature files have dimension "
                f"{train_dim}/{test_dim}, manifest says {meta['dim']}"
            )
        sessions.append(SessionSpec(entry["index"], list(entry["class_ids"]), train, test))
    model = manifest.get("model", {})
    spec = BenchmarkSpec(
        name=meta.get("name", "files"),
        dim=meta["dim"],
        shots=meta["shots"],
        class_names=names,
        sessions=sessions,
        first_is_base=meta["first_is_base"],
        model_seed=model.get("seed", Rng(meta.get("seed", 0)).substream("model-tower").seed),
        prompt_len=model.get("prompt_len", 16),
        ctx_dim=model.get("ctx_dim", 16),
        cls_dim=model.get("cls_dim", 16),
    )
    spec.validate()
    return spec


def build_summary(spec: BenchmarkSpec, outcomes: list[RunOutcome]) -> dict:
    """Nested key-value summary: Avg/PD and per-session accuracies per
    (method, K, seed), plus the benchmark shape for compatibility checks."""
    runs: dict = {}
    for o in outcomes:
        per_method = runs.setdefault(o.method, {})
        per_k = per_method.setdefault(str(o.shots), {})
        per_k[str(o.seed)] = {
            "avg": metric_avg(o.results),
            "pd": metric_pd(o.results),
            "sessions": [r.accuracy for r in o.results],
            "replay_bytes": [r.replay_bytes for r in o.results],
        }
    return {
        "format_version": 1,
        "benchmark": {
            "name": spec.name,
            "dim": spec.dim,
            "sessions": spec.n_sessions,
            "classes": len(spec.class_names),
            "shots": spec.shots,
            "first_is_base": spec.first_is_base,
        },
        "runs": runs,
    }
