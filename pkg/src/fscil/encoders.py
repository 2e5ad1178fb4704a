"""Frozen stand-ins for the pretrained towers.

Three pieces: a synthetic feature world that plays the role of an image
encoder over a labeled dataset, a deterministic class-embedding table
that plays the role of a tokenized class name, and a frozen randomly
initialized text encoder that maps (prompt context, class embedding) to
a unit-norm feature and is differentiable with respect to the context.

Also home to the binary feature-file format (magic ``FSCF``) and the
class-name list format.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, DimensionMismatchError, NumericalError, TapeError
from .numerics import Layer, MlpParams, Rng, ensure_finite, mlp_backward, mlp_forward

FEATURE_MAGIC = b"FSCF"
FEATURE_VERSION = 1

# loads whose norm deviates from 1 by more than this are rejected;
# deviations above the unit-norm invariant but below this are renormalized
NORM_LOAD_TOLERANCE = 1e-3
# deviations at or below this are kept as stored, preserving the 32-bit
# payload bit-exactly across round trips
NORM_KEEP_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FeatureRecord:
    """One labeled, L2-normalized feature vector."""

    class_id: int
    feature: np.ndarray


@dataclass
class SyntheticWorld:
    """Ground-truth per-class diagonal Gaussians in feature space.

    Acts as the data source at desk scale: drawing from a class and
    normalizing stands in for encoding one of its images.
    """

    dim: int
    means: dict[int, np.ndarray]
    variances: dict[int, np.ndarray]
    seed: int

    def __post_init__(self):
        for c, m in self.means.items():
            if m.shape != (self.dim,):
                raise DimensionMismatchError(f"world mean of class {c}", (self.dim,), m.shape)
            v = self.variances[c]
            if v.shape != (self.dim,):
                raise DimensionMismatchError(f"world variance of class {c}", (self.dim,), v.shape)
            if not np.all(v > 0.0):
                raise NumericalError(f"world variance of class {c} has non-positive entries")

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.means)


def synthetic_sample(
    world: SyntheticWorld, class_id: int, count: int, rng: Rng
) -> list[FeatureRecord]:
    """Draw ``count`` features from a class's ground-truth Gaussian and
    L2-normalize them. Consumes exactly one standard_normal(count*dim)
    block so the raw draws can be replayed from an equal substream."""
    if class_id not in world.means:
        raise KeyError(f"unknown class {class_id} in synthetic world")
    if count <= 0:
        raise ValueError(f"need count > 0, got {count}")
    eps = rng.standard_normal(count * world.dim).reshape(count, world.dim)
    raw = world.means[class_id] + np.sqrt(world.variances[class_id]) * eps
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms < 1e-12):
        raise NumericalError(f"degenerate zero-norm draw for class {class_id}")
    feats = raw / norms[:, None]
    return [FeatureRecord(class_id, f) for f in feats]


class ClassEmbeddingTable:
    """Frozen per-class embeddings derived deterministically from the
    class-name string, so a name maps to the same embedding in every
    session and every run with the same seed."""

    @staticmethod
    def seed_for(model_seed: int) -> int:
        """Table seed for a benchmark's frozen-tower seed."""
        return Rng(model_seed).substream("embedding-table").seed

    def __init__(self, dim: int, seed: int):
        if dim <= 0:
            raise ValueError(f"embedding dim must be positive, got {dim}")
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def embedding(self, name: str) -> np.ndarray:
        cached = self._cache.get(name)
        if cached is not None:
            return cached
        rng = Rng(self.seed).substream("class-embedding", name)
        vec = rng.standard_normal(self.dim) / math.sqrt(self.dim)
        vec.setflags(write=False)
        self._cache[name] = vec
        return vec


@dataclass
class EncodeTape:
    """Single-use record of one text-encoder evaluation."""

    encoder: "TextEncoder"
    mlp_tape: object
    raw: np.ndarray  # pre-normalization body output
    norm: np.ndarray  # its L2 norm(s)
    n_rows: int  # 0 for a single (unbatched) call


class TextEncoder:
    """Frozen, differentiable text-encoder stand-in.

    A randomly initialized one-hidden-layer tanh MLP maps the flattened
    prompt context concatenated with a class embedding to ``feat_dim``
    values, which are L2-normalized. The weights are drawn once from the
    seed, verified to separate distinct class embeddings (re-seeded on
    the astronomically unlikely collision), and never change; gradients
    flow only to the prompt context.
    """

    # class embeddings are ~unit norm; this scale puts distinct classes at
    # distinct (mildly nonlinear) tanh operating points, which is what gives
    # the shared context independent leverage on each class feature
    CLASS_BLOCK_SCALE = 0.5

    @staticmethod
    def seed_for(model_seed: int) -> int:
        """Body seed for a benchmark's frozen-tower seed."""
        return Rng(model_seed).substream("text-encoder").seed

    def __init__(
        self,
        feat_dim: int,
        prompt_len: int,
        ctx_dim: int,
        cls_dim: int,
        seed: int,
        hidden_dim: int | None = None,
    ):
        self.feat_dim = feat_dim
        self.prompt_len = prompt_len
        self.ctx_dim = ctx_dim
        self.cls_dim = cls_dim
        self.seed = seed
        # width buys curvature diversity; narrower bodies cannot place all
        # class features accurately at once from one shared context
        self.hidden_dim = 16 * feat_dim if hidden_dim is None else hidden_dim
        in_dim = prompt_len * ctx_dim + cls_dim

        root = Rng(seed)
        probe_a = root.substream("probe", 0).standard_normal(cls_dim) / math.sqrt(cls_dim)
        probe_b = root.substream("probe", 1).standard_normal(cls_dim) / math.sqrt(cls_dim)
        zero_ctx = np.zeros((prompt_len, ctx_dim))
        ctx_len = prompt_len * ctx_dim
        for attempt in range(64):
            body_rng = root.substream("encoder-body", attempt)
            w1 = body_rng.standard_normal(self.hidden_dim * in_dim).reshape(
                self.hidden_dim, in_dim
            )
            w1[:, :ctx_len] /= math.sqrt(ctx_len)
            w1[:, ctx_len:] *= self.CLASS_BLOCK_SCALE
            w2 = body_rng.standard_normal(feat_dim * self.hidden_dim).reshape(
                feat_dim, self.hidden_dim
            ) / math.sqrt(self.hidden_dim)
            self.body = MlpParams(
                [
                    Layer(w1, np.zeros(self.hidden_dim), "tanh"),
                    Layer(w2, np.zeros(feat_dim), "identity"),
                ]
            )
            g_a, _ = self.encode(zero_ctx, probe_a)
            g_b, _ = self.encode(zero_ctx, probe_b)
            if np.max(np.abs(g_a - g_b)) > 1e-9:
                break
        else:  # pragma: no cover - 64 collisions in a row cannot happen
            raise NumericalError("text encoder failed to separate probe embeddings")
        self.body.freeze()

    @property
    def in_dim(self) -> int:
        return self.prompt_len * self.ctx_dim + self.cls_dim

    def weight_bytes(self) -> bytes:
        """Serialized frozen weights, for byte-identity checks."""
        return b"".join(
            part.tobytes() for l in self.body.layers for part in (l.weight, l.bias)
        )

    def _check_context(self, context: np.ndarray) -> None:
        if context.shape[-2:] != (self.prompt_len, self.ctx_dim):
            raise DimensionMismatchError(
                "prompt context", (self.prompt_len, self.ctx_dim), context.shape
            )

    def encode(
        self, context: np.ndarray, class_embedding: np.ndarray
    ) -> tuple[np.ndarray, EncodeTape]:
        """Encode one (context, class embedding) pair to a unit-norm
        feature. The tape supports gradients w.r.t. the context only."""
        context = np.asarray(context, dtype=np.float64)
        emb = np.asarray(class_embedding, dtype=np.float64)
        self._check_context(context)
        if emb.shape != (self.cls_dim,):
            raise DimensionMismatchError("class embedding", (self.cls_dim,), emb.shape)
        x = np.concatenate([context.ravel(), emb])
        raw, mlp_tape = mlp_forward(self.body, x)
        norm = np.linalg.norm(raw)
        if norm < 1e-12:
            raise NumericalError("text encoder produced a zero-norm feature")
        g = raw / norm
        return g, EncodeTape(self, mlp_tape, raw, np.float64(norm), 0)

    def encode_grad(self, tape: EncodeTape, feature_grad: np.ndarray) -> np.ndarray:
        """Gradient of a scalar through one encode() call, w.r.t. the
        context. Includes the L2-normalization Jacobian (I - g g^T)/|y|."""
        if tape.encoder is not self or tape.n_rows != 0:
            raise TapeError("tape does not belong to this encoder call form")
        dy = np.asarray(feature_grad, dtype=np.float64)
        if dy.shape != (self.feat_dim,):
            raise DimensionMismatchError("feature grad", (self.feat_dim,), dy.shape)
        g = tape.raw / tape.norm
        draw = (dy - (dy @ g) * g) / tape.norm
        _, dx = mlp_backward(self.body, tape.mlp_tape, draw)
        return dx[: self.prompt_len * self.ctx_dim].reshape(self.prompt_len, self.ctx_dim)

    def encode_many(
        self, contexts: np.ndarray, embeddings: np.ndarray
    ) -> tuple[np.ndarray, EncodeTape]:
        """Batched encode. ``contexts`` is (L, ctx_dim), shared by all
        rows, or (n, L, ctx_dim) row-for-row; ``embeddings`` is (n, cls_dim).
        Returns (n, feat_dim) unit-norm rows plus one tape."""
        contexts = np.asarray(contexts, dtype=np.float64)
        embeddings = np.asarray(embeddings, dtype=np.float64)
        self._check_context(contexts)
        n = embeddings.shape[0]
        if embeddings.shape != (n, self.cls_dim):
            raise DimensionMismatchError("class embeddings", (n, self.cls_dim), embeddings.shape)
        flat_len = self.prompt_len * self.ctx_dim
        if contexts.ndim == 2:
            ctx_rows = np.broadcast_to(contexts.reshape(1, flat_len), (n, flat_len))
        else:
            if contexts.shape[0] != n:
                raise DimensionMismatchError("per-row contexts", n, contexts.shape[0])
            ctx_rows = contexts.reshape(n, flat_len)
        x = np.concatenate([ctx_rows, embeddings], axis=1)
        raw, mlp_tape = mlp_forward(self.body, x)
        norms = np.linalg.norm(raw, axis=1)
        if np.any(norms < 1e-12):
            raise NumericalError("text encoder produced a zero-norm feature")
        g = raw / norms[:, None]
        return g, EncodeTape(self, mlp_tape, raw, norms, n)

    def encode_many_grad(self, tape: EncodeTape, feature_grads: np.ndarray) -> np.ndarray:
        """Per-row context gradients (n, L, ctx_dim) for encode_many."""
        if tape.encoder is not self or tape.n_rows == 0:
            raise TapeError("tape does not belong to this encoder call form")
        dy = np.asarray(feature_grads, dtype=np.float64)
        if dy.shape != (tape.n_rows, self.feat_dim):
            raise DimensionMismatchError(
                "feature grads", (tape.n_rows, self.feat_dim), dy.shape
            )
        g = tape.raw / tape.norm[:, None]
        draw = (dy - (dy * g).sum(axis=1, keepdims=True) * g) / tape.norm[:, None]
        _, dx = mlp_backward(self.body, tape.mlp_tape, draw)
        return dx[:, : self.prompt_len * self.ctx_dim].reshape(
            tape.n_rows, self.prompt_len, self.ctx_dim
        )


def encode_text(
    enc: TextEncoder, context: np.ndarray, class_embedding: np.ndarray
) -> tuple[np.ndarray, EncodeTape]:
    return enc.encode(context, class_embedding)


def encode_text_grad(enc: TextEncoder, tape: EncodeTape, feature_grad: np.ndarray) -> np.ndarray:
    if tape.encoder is not enc:
        raise TapeError("tape was produced by a different encoder")
    return enc.encode_grad(tape, feature_grad)


# ---------------------------------------------------------------------------
# Feature file format
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHHQ")
_REC_HEAD = struct.Struct("<I")


def write_feature_file(path, dim: int, records: list[FeatureRecord]) -> None:
    """Write records as the little-endian ``FSCF`` binary format with a
    32-bit float payload."""
    for i, rec in enumerate(records):
        if rec.feature.shape != (dim,):
            raise DimensionMismatchError(f"record {i} feature", (dim,), rec.feature.shape)
        ensure_finite(rec.feature, f"record {i} feature")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dim, len(records)))
        for rec in records:
            fh.write(_REC_HEAD.pack(rec.class_id))
            fh.write(rec.feature.astype("<f4").tobytes())


def load_feature_file(path) -> tuple[int, list[FeatureRecord]]:
    """Load an ``FSCF`` file.

    Features whose norm is within NORM_KEEP_TOLERANCE of 1 are kept as
    stored (round trips stay bit-exact at 32-bit precision); norms off
    by up to NORM_LOAD_TOLERANCE are renormalized; anything worse is
    rejected as corrupt.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, dim, count = _HEADER.unpack_from(blob, 0)
    if magic != FEATURE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FEATURE_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    if dim == 0:
        raise DataFormatError(f"{path}: zero feature dimension")
    rec_size = _REC_HEAD.size + 4 * dim
    expected = _HEADER.size + count * rec_size
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(blob)} bytes, expected {expected} for {count} records"
        )
    records: list[FeatureRecord] = []
    offset = _HEADER.size
    for i in range(count):
        (class_id,) = _REC_HEAD.unpack_from(blob, offset)
        offset += _REC_HEAD.size
        feat = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += 4 * dim
        if not np.all(np.isfinite(feat)):
            raise DataFormatError(f"{path}: record {i} has non-finite values")
        norm = float(np.linalg.norm(feat))
        dev = abs(norm - 1.0)
        if dev > NORM_LOAD_TOLERANCE:
            raise DataFormatError(
                f"{path}: record {i} norm {norm:.6f} deviates from unit by more than "
                f"{NORM_LOAD_TOLERANCE}"
            )
        if dev > NORM_KEEP_TOLERANCE:
            feat = feat / norm
        records.append(FeatureRecord(class_id, feat))
    return dim, records


def write_class_names(path, names: list[str]) -> None:
    """One UTF-8 name per line; the line index is the class id."""
    with open(path, "w", encoding="utf-8") as fh:
        for name in names:
            fh.write(name + "\n")


def read_class_names(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]
