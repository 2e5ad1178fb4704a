"""The classification prompt and its optimization.

One shared learnable context feeds the frozen text encoder once per
class to produce the class text features; prediction is a softmax over
temperature-scaled cosine similarities. New-class training minimizes
cross-entropy on the session's real features; replay training adds, for
every real example, the summed cross-entropy of pseudo-features sampled
from the old-class distribution store. SGD with momentum updates the
context; the trained context chains into the next session.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .distributions import DistributionStore, sample_pseudo_feature
from .encoders import ClassEmbeddingTable, FeatureRecord, TextEncoder
from .errors import (
    DataFormatError,
    DimensionMismatchError,
    NumericalError,
    ZeroVectorError,
)
from .numerics import Rng, momentum_update

PROMPT_MAGIC = b"FSPC"
PROMPT_VERSION = 1

PROMPT_INIT_SCALE = 0.02


@dataclass
class PromptContext:
    """The shared learnable context vectors, with init provenance."""

    vectors: np.ndarray  # (prompt_len, ctx_dim)
    provenance: str = "random"

    @property
    def prompt_len(self) -> int:
        return self.vectors.shape[0]

    @property
    def ctx_dim(self) -> int:
        return self.vectors.shape[1]


def init_prompt(prompt_len: int, ctx_dim: int, rng: Rng) -> PromptContext:
    vecs = PROMPT_INIT_SCALE * rng.standard_normal(prompt_len * ctx_dim)
    return PromptContext(vecs.reshape(prompt_len, ctx_dim), provenance="random")


class ClassifierHead:
    """Cosine classifier over every class encountered so far.

    The class list only grows and never reorders; text features are
    cached per exact context value and recomputed whenever the context
    changes, so prediction semantics match recomputing per example.
    """

    def __init__(self, table: ClassEmbeddingTable, class_names: list[str], temperature: float):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self._table = table
        self._names = class_names
        self.temperature = temperature
        self.class_ids: list[int] = []
        self._emb_rows: list[np.ndarray] = []
        self._cache_key: bytes | None = None
        self._cache_features: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.class_ids)

    def extend(self, new_class_ids) -> None:
        for cid in new_class_ids:
            if cid in self.class_ids:
                raise ValueError(f"class {cid} already in head")
            if not 0 <= cid < len(self._names):
                raise IndexError(f"class {cid} has no name (only {len(self._names)} names)")
            self.class_ids.append(cid)
            self._emb_rows.append(self._table.embedding(self._names[cid]))
        self._cache_key = None

    def index_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id} not in head") from None

    def embedding_matrix(self) -> np.ndarray:
        return np.vstack(self._emb_rows)

    def embedding_for(self, class_id: int) -> np.ndarray:
        return self._emb_rows[self.index_of(class_id)]

    def text_features(self, enc: TextEncoder, context: PromptContext) -> np.ndarray:
        """Unit-norm text feature per class (cached per context value)."""
        if not self.class_ids:
            raise ValueError("head holds no classes")
        key = context.vectors.tobytes()
        if key != self._cache_key:
            feats, _ = enc.encode_many(context.vectors, self.embedding_matrix())
            self._cache_key = key
            self._cache_features = feats
        return self._cache_features

    def text_features_with_tape(self, enc: TextEncoder, context: PromptContext):
        if not self.class_ids:
            raise ValueError("head holds no classes")
        return enc.encode_many(context.vectors, self.embedding_matrix())


def _normalized_rows(feats: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(feats, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError(f"{what} contains a zero-norm vector")
    return feats / norms[:, None]


def _scores(feats_hat: np.ndarray, class_feats: np.ndarray, temperature: float) -> np.ndarray:
    # rows and class features are unit norm, so the dot product is the cosine
    return feats_hat @ class_feats.T / temperature


def predict(
    head: ClassifierHead, enc: TextEncoder, context: PromptContext, feature
) -> tuple[np.ndarray, int]:
    """Class probabilities and the predicted class id for one feature.
    Ties break toward the lowest class id."""
    probs, pred = predict_batch(head, enc, context, np.asarray(feature, dtype=np.float64)[None, :])
    return probs[0], int(pred[0])


def predict_batch(
    head: ClassifierHead, enc: TextEncoder, context: PromptContext, feats: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    class_feats = head.text_features(enc, context)
    if feats.shape[1] != class_feats.shape[1]:
        raise DimensionMismatchError("feature", class_feats.shape[1], feats.shape[1])
    logits = _scores(_normalized_rows(feats, "features"), class_feats, head.temperature)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    ids = np.asarray(head.class_ids)
    preds = np.empty(feats.shape[0], dtype=np.int64)
    for i in range(feats.shape[0]):
        best = np.flatnonzero(logits[i] == logits[i].max())
        preds[i] = ids[best[ids[best].argmin()]]
    return probs, preds


def _cross_entropy_grads(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row -log softmax at the target plus d/dlogits, unscaled."""
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - lse
    rows = np.arange(logits.shape[0])
    losses = -log_p[rows, targets]
    grads = np.exp(log_p)
    grads[rows, targets] -= 1.0
    return losses, grads


def _feature_space_ce(
    class_feats: np.ndarray,
    feats: np.ndarray,
    target_rows: np.ndarray,
    temperature: float,
    row_weights,
) -> tuple[float, np.ndarray]:
    """Weighted cross-entropy of cosine scores, with the gradient mapped
    back onto the class text features. ``row_weights`` is a scalar or a
    per-row array. Returns (loss, d class_feats)."""
    feats_hat = _normalized_rows(feats, "features")
    sims = feats_hat @ class_feats.T
    logits = sims / temperature
    losses, dlogits = _cross_entropy_grads(logits, target_rows)
    weights = np.broadcast_to(np.asarray(row_weights, dtype=np.float64), losses.shape)
    loss = float(losses @ weights)
    dsims = dlogits * (weights / temperature)[:, None]
    # d cos(f, g)/d g = f_hat - cos * g for unit-norm g
    dclass = dsims.T @ feats_hat - ((dsims * sims).sum(axis=0))[:, None] * class_feats
    return loss, dclass


def loss_new(
    head: ClassifierHead,
    enc: TextEncoder,
    context: PromptContext,
    feats: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the session batch under the full softmax
    over all classes seen so far; gradient w.r.t. the shared context."""
    class_feats, tape = head.text_features_with_tape(enc, context)
    targets = np.asarray([head.index_of(int(y)) for y in labels])
    loss, dclass = _feature_space_ce(
        class_feats, feats, targets, head.temperature, 1.0 / feats.shape[0]
    )
    ctx_grad = enc.encode_many_grad(tape, dclass).sum(axis=0)
    return loss, ctx_grad


def draw_replay_batch(
    store: DistributionStore, n_real: int, replay_classes: int, rng: Rng
) -> tuple[np.ndarray, np.ndarray]:
    """For each of ``n_real`` real examples, draw ``replay_classes`` old
    classes (without replacement when possible, else with) and one
    pseudo-feature per drawn class. Returns stacked features and their
    class ids, in draw order."""
    if len(store) == 0:
        raise ValueError("replay draw from an empty store")
    if replay_classes < 1:
        raise ValueError("need at least one replay class per example")
    old_ids = store.class_ids
    feats = []
    labels = []
    for _ in range(n_real):
        if replay_classes <= len(old_ids):
            picks = rng.choice_without_replacement(len(old_ids), replay_classes)
        else:
            picks = rng.choice_with_replacement(len(old_ids), replay_classes)
        for k in picks:
            cid = old_ids[k]
            feats.append(sample_pseudo_feature(store.get(cid), rng))
            labels.append(cid)
    return np.vstack(feats), np.asarray(labels)


def loss_old(
    head: ClassifierHead,
    enc: TextEncoder,
    context: PromptContext,
    store: DistributionStore,
    replay_classes: int,
    n_real: int,
    rng: Rng,
) -> tuple[float, np.ndarray]:
    """Replay loss: summed cross-entropy of the drawn pseudo-features
    (softmax over all classes seen so far), averaged over the real
    examples of the batch; gradient w.r.t. the shared context."""
    pseudo, labels = draw_replay_batch(store, n_real, replay_classes, rng)
    class_feats, tape = head.text_features_with_tape(enc, context)
    targets = np.asarray([head.index_of(int(y)) for y in labels])
    loss, dclass = _feature_space_ce(
        class_feats, pseudo, targets, head.temperature, 1.0 / n_real
    )
    ctx_grad = enc.encode_many_grad(tape, dclass).sum(axis=0)
    return loss, ctx_grad


def loss_total(
    new_loss: float, old_loss: float, replay_weight: float, session_index: int
) -> float:
    """Combined objective: the new-class loss alone in the first session,
    plus the weighted replay loss afterwards."""
    if replay_weight < 0:
        raise ValueError("replay weight must be >= 0")
    if session_index == 0:
        return new_loss
    return new_loss + replay_weight * old_loss


@dataclass
class OptimizerState:
    lr: float
    momentum: float
    velocity: np.ndarray

    @classmethod
    def fresh(cls, lr: float, momentum: float, shape) -> "OptimizerState":
        return cls(lr, momentum, np.zeros(shape))


def sgd_momentum_step(
    state: OptimizerState, params: np.ndarray, grads: np.ndarray
) -> np.ndarray:
    """v <- momentum*v + g; p <- p - lr*v. Constant learning rate; the
    velocity lives in ``state`` (single-owner)."""
    new_params, state.velocity = momentum_update(
        params, grads, state.velocity, state.lr, state.momentum
    )
    return new_params


@dataclass
class SessionHyperparams:
    epochs: int
    batch_size: int
    lr: float = 0.002
    momentum: float = 0.9
    replay_classes: int = 8
    replay_weight: float = 2.0
    class_balanced: bool = False  # weight examples by inverse class frequency

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")


@dataclass
class TrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_new: list[float] = field(default_factory=list)
    epoch_old: list[float] = field(default_factory=list)


def train_session(
    context: PromptContext,
    head: ClassifierHead,
    enc: TextEncoder,
    records: list[FeatureRecord],
    store: DistributionStore | None,
    hyper: SessionHyperparams,
    session_index: int,
    rng: Rng,
) -> tuple[PromptContext, TrainLog]:
    """Optimize the prompt on one session.

    Each step recomputes the class text features once, evaluates the
    new-class loss on the real batch and, when a nonempty store is
    supplied, the replay loss on freshly drawn pseudo-features; both
    gradients flow through the same features into the shared context.
    Sessions with fewer examples than the batch size train full-batch.
    """
    if not records:
        raise ValueError("cannot train on an empty session")
    feats = np.vstack([r.feature for r in records])
    labels = np.asarray([r.class_id for r in records])
    n = feats.shape[0]
    batch = n if n <= hyper.batch_size else hyper.batch_size
    replay = store is not None and len(store) > 0 and hyper.replay_weight > 0

    params = context.vectors.copy()
    opt = OptimizerState.fresh(hyper.lr, hyper.momentum, params.shape)
    order_rng = rng.substream("batch-order")
    replay_rng = rng.substream("replay")
    targets_all = np.asarray([head.index_of(int(y)) for y in labels])
    if hyper.class_balanced:
        counts = {cid: int((labels == cid).sum()) for cid in set(int(y) for y in labels)}
        weights_all = np.asarray([1.0 / counts[int(y)] for y in labels])
    else:
        weights_all = np.ones(n)

    log = TrainLog()
    for epoch in range(hyper.epochs):
        order = np.arange(n) if batch == n else order_rng.permutation(n)
        tot = tot_new = tot_old = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            current = PromptContext(params, context.provenance)
            class_feats, tape = head.text_features_with_tape(enc, current)
            new_part, dclass = _feature_space_ce(
                class_feats,
                feats[idx],
                targets_all[idx],
                head.temperature,
                weights_all[idx] / weights_all[idx].sum(),
            )
            old_part = 0.0
            if replay:
                pseudo, plabels = draw_replay_batch(
                    store, len(idx), hyper.replay_classes, replay_rng
                )
                ptargets = np.asarray([head.index_of(int(y)) for y in plabels])
                old_part, dclass_old = _feature_space_ce(
                    class_feats, pseudo, ptargets, head.temperature, 1.0 / len(idx)
                )
                dclass = dclass + hyper.replay_weight * dclass_old
            step_loss = loss_total(new_part, old_part, hyper.replay_weight, session_index)
            if not math.isfinite(step_loss):
                raise NumericalError(
                    f"non-finite loss in session {session_index}, epoch {epoch}"
                )
            ctx_grad = enc.encode_many_grad(tape, dclass).sum(axis=0)
            params = sgd_momentum_step(opt, params, ctx_grad)
            w = len(idx) / n
            tot += step_loss * w
            tot_new += new_part * w
            tot_old += old_part * w
        log.epoch_loss.append(tot)
        log.epoch_new.append(tot_new)
        log.epoch_old.append(tot_old)
    return PromptContext(params, provenance=f"carried:session{session_index}"), log


def evaluate(
    head: ClassifierHead,
    enc: TextEncoder,
    context: PromptContext,
    records: list[FeatureRecord],
) -> tuple[float, dict[int, tuple[int, int]]]:
    """Accuracy in percent over a record set, plus per-class
    (correct, total) counts keyed by class id."""
    if not records:
        raise ValueError("cannot evaluate on an empty record set")
    feats = np.vstack([r.feature for r in records])
    labels = np.asarray([r.class_id for r in records])
    _, preds = predict_batch(head, enc, context, feats)
    per_class: dict[int, tuple[int, int]] = {}
    for cid in sorted(set(int(y) for y in labels)):
        mask = labels == cid
        per_class[cid] = (int((preds[mask] == cid).sum()), int(mask.sum()))
    correct = sum(c for c, _ in per_class.values())
    total = sum(t for _, t in per_class.values())
    return 100.0 * correct / total, per_class


# ---------------------------------------------------------------------------
# Prompt checkpoint format
# ---------------------------------------------------------------------------

_PROMPT_HEADER = struct.Struct("<4sHHH")


def save_prompt(context: PromptContext, path) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _PROMPT_HEADER.pack(
                PROMPT_MAGIC, PROMPT_VERSION, context.prompt_len, context.ctx_dim
            )
        )
        fh.write(context.vectors.astype("<f4").tobytes())


def load_prompt(path) -> PromptContext:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PROMPT_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, prompt_len, ctx_dim = _PROMPT_HEADER.unpack_from(blob, 0)
    if magic != PROMPT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != PROMPT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    expected = _PROMPT_HEADER.size + 4 * prompt_len * ctx_dim
    if len(blob) != expected:
        raise DataFormatError(f"{path}: payload is {len(blob)} bytes, expected {expected}")
    vecs = np.frombuffer(blob, dtype="<f4", offset=_PROMPT_HEADER.size).astype(np.float64)
    return PromptContext(vecs.reshape(prompt_len, ctx_dim), provenance=f"loaded:{path}")
