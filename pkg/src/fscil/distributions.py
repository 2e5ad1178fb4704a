"""Per-class diagonal Gaussians over feature space: estimation from
pooled real and synthesized features, pseudo-feature sampling, the
replay store with its binary format (magic ``FSDS``), storage
accounting, and per-dimension histogram analysis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, DimensionMismatchError
from .numerics import Rng, ensure_finite

# K-shot sessions can hand us a single feature (or duplicates); without a
# floor the variance would collapse and sampling would degenerate
VARIANCE_FLOOR = 1e-6

STORE_MAGIC = b"FSDS"
STORE_VERSION = 1


@dataclass(frozen=True)
class GaussianClassDistribution:
    """Mean and per-dimension variance of one class, with the counts of
    real and synthesized features that produced the estimate."""

    class_id: int
    mean: np.ndarray
    var: np.ndarray
    n_real: int
    n_synth: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def estimate_distribution(
    class_id: int,
    real_feats,
    synth_feats=(),
) -> GaussianClassDistribution:
    """Pooled mean over all features and Bessel-corrected pooled variance
    with denominator (n_real + n_synth) - 1. Fewer than two features
    total gives the floor variance in every dimension; every variance
    entry is clamped up to the floor.
    """
    real = [np.asarray(f, dtype=np.float64) for f in real_feats]
    synth = [np.asarray(f, dtype=np.float64) for f in synth_feats]
    if not real:
        raise ValueError(f"class {class_id}: need at least one real feature")
    dim = real[0].shape[0]
    for i, f in enumerate(real + synth):
        if f.shape != (dim,):
            raise DimensionMismatchError(f"class {class_id} feature {i}", (dim,), f.shape)
    pooled = np.vstack(real + synth)
    ensure_finite(pooled, f"class {class_id} features")
    total = pooled.shape[0]
    mean = pooled.sum(axis=0) / total
    if total < 2:
        var = np.full(dim, VARIANCE_FLOOR)
    else:
        var = ((pooled - mean) ** 2).sum(axis=0) / (total - 1)
        var = np.maximum(var, VARIANCE_FLOOR)
    return GaussianClassDistribution(class_id, mean, var, len(real), len(synth))


def sample_pseudo_feature(dist: GaussianClassDistribution, rng: Rng) -> np.ndarray:
    """One draw mean + sigma * eps with eps ~ N(0, I). Not renormalized:
    the replay loss scores pseudo-features with cosine similarity, which
    normalizes implicitly."""
    eps = rng.standard_normal(dist.dim)
    return dist.mean + np.sqrt(dist.var) * eps


class DistributionStore:
    """Replay memory: one diagonal Gaussian per class seen so far.

    Iteration order is insertion order (session order), which the replay
    loss relies on for deterministic class draws.
    """

    def __init__(self, dim: int, metadata: dict | None = None):
        if dim <= 0:
            raise ValueError(f"store dimension must be positive, got {dim}")
        self.dim = dim
        self.metadata = dict(metadata or {})
        self._dists: dict[int, GaussianClassDistribution] = {}

    def add(self, dist: GaussianClassDistribution) -> None:
        if dist.dim != self.dim:
            raise DimensionMismatchError(f"class {dist.class_id} distribution", self.dim, dist.dim)
        if dist.class_id in self._dists:
            raise ValueError(f"class {dist.class_id} already in store")
        self._dists[dist.class_id] = dist

    def get(self, class_id: int) -> GaussianClassDistribution:
        try:
            return self._dists[class_id]
        except KeyError:
            raise KeyError(f"class {class_id} not in store") from None

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._dists

    def __len__(self) -> int:
        return len(self._dists)

    @property
    def class_ids(self) -> list[int]:
        return list(self._dists)

    def distributions(self) -> list[GaussianClassDistribution]:
        return list(self._dists.values())

    def copy(self) -> "DistributionStore":
        out = DistributionStore(self.dim, self.metadata)
        out._dists = dict(self._dists)
        return out


def storage_bytes(store: DistributionStore) -> int:
    """Replay payload size: |classes| * (mean + variance) * 4-byte floats.
    Excludes the fixed file header."""
    return len(store) * 2 * store.dim * 4


def payload_megabytes(n_bytes: int) -> float:
    return n_bytes / 2**20


_STORE_HEADER = struct.Struct("<4sHHI")
_STORE_REC = struct.Struct("<III")


def save_store(store: DistributionStore, path) -> None:
    """Write the ``FSDS`` binary format with a 32-bit float payload."""
    with open(path, "wb") as fh:
        fh.write(_STORE_HEADER.pack(STORE_MAGIC, STORE_VERSION, store.dim, len(store)))
        for dist in store.distributions():
            fh.write(_STORE_REC.pack(dist.class_id, dist.n_real, dist.n_synth))
            fh.write(dist.mean.astype("<f4").tobytes())
            fh.write(dist.var.astype("<f4").tobytes())


def load_store(path) -> DistributionStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _STORE_HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, dim, count = _STORE_HEADER.unpack_from(blob, 0)
    if magic != STORE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != STORE_VERSION:
        raise DataFormatError(f"{path}: unsupported store version {version}")
    rec_size = _STORE_REC.size + 2 * 4 * dim
    expected = _STORE_HEADER.size + count * rec_size
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(blob)} bytes, expected {expected} for {count} classes"
        )
    store = DistributionStore(dim)
    offset = _STORE_HEADER.size
    for i in range(count):
        class_id, n_real, n_synth = _STORE_REC.unpack_from(blob, offset)
        offset += _STORE_REC.size
        mean = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += 4 * dim
        var = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).astype(np.float64)
        offset += 4 * dim
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise DataFormatError(f"{path}: class record {i} has non-finite values")
        if np.any(var <= 0.0):
            raise DataFormatError(f"{path}: class record {i} has non-positive variance")
        store.add(GaussianClassDistribution(class_id, mean, var, n_real, n_synth))
    return store


def dimension_histogram(
    feats, dim: int, bins: int
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Histogram of one feature dimension across a feature set.

    Returns (bin edges, counts, sample mean, sample variance); counts sum
    to the number of features and the edges span [min, max] of the
    dimension (a half-unit pad on each side when the dimension is
    constant, matching numpy's convention).
    """
    mat = np.asarray([np.asarray(f, dtype=np.float64) for f in feats])
    if mat.size == 0:
        raise ValueError("need at least one feature")
    if not 0 <= dim < mat.shape[1]:
        raise IndexError(f"dimension {dim} out of range for {mat.shape[1]}-dim features")
    if bins < 1:
        raise ValueError(f"need bins >= 1, got {bins}")
    values = mat[:, dim]
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(values, bins=edges)
    n = values.shape[0]
    mean = float(values.mean())
    var = float(values.var(ddof=1)) if n > 1 else 0.0
    return edges, counts, mean, var
