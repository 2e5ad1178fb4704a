"""Feature-synthesis VAE.

The encoder MLP maps a real feature to a latent Gaussian; the decoder
MLP maps a latent draw to a single bias vector that is added to every
row of a VAE-private prompt context; the frozen text encoder turns that
biased context plus the class embedding back into a unit-norm feature.
Training minimizes KL-to-standard-normal plus a weighted Euclidean
reconstruction loss, by full-batch gradient descent with momentum.

A trained VAE synthesizes extra features per class from fresh standard
normal latents, which feed the class-distribution estimate.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .encoders import FeatureRecord, TextEncoder
from .errors import DataFormatError, DimensionMismatchError, NumericalError
from .numerics import (
    Layer,
    MlpParams,
    Rng,
    as_vector,
    mlp_backward,
    mlp_forward,
    momentum_update,
)

VAE_MAGIC = b"FSVA"
VAE_VERSION = 1

_PROMPT_INIT_SCALE = 0.02
_RECON_CUSP = 1e-12  # below this the unsquared norm is treated as exactly 0


@dataclass
class VaeParams:
    encoder: MlpParams  # feat_dim -> 2*latent_dim (mean block, log-variance block)
    decoder: MlpParams  # latent_dim -> ctx_dim (the shared prompt bias)
    vae_prompt: np.ndarray  # (prompt_len, ctx_dim) learnable private context
    latent_dim: int

    def __post_init__(self):
        if self.encoder.out_dim != 2 * self.latent_dim:
            raise DimensionMismatchError(
                "vae encoder output", 2 * self.latent_dim, self.encoder.out_dim
            )
        if self.decoder.in_dim != self.latent_dim:
            raise DimensionMismatchError("vae decoder input", self.latent_dim, self.decoder.in_dim)
        if self.decoder.out_dim != self.vae_prompt.shape[1]:
            raise DimensionMismatchError(
                "vae decoder output", self.vae_prompt.shape[1], self.decoder.out_dim
            )

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for mlp in (self.encoder, self.decoder):
            for layer in mlp.layers:
                out.extend((layer.weight, layer.bias))
        out.append(self.vae_prompt)
        return out

    def replace_parameters(self, arrays: list[np.ndarray]) -> "VaeParams":
        it = iter(arrays)
        enc = MlpParams(
            [Layer(next(it), next(it), l.activation) for l in self.encoder.layers]
        )
        dec = MlpParams(
            [Layer(next(it), next(it), l.activation) for l in self.decoder.layers]
        )
        return VaeParams(enc, dec, next(it), self.latent_dim)


@dataclass
class VaeTrainConfig:
    epochs: int = 4000
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int | None = None  # None = full batch
    recon_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.recon_weight < 0:
            raise ValueError("reconstruction weight must be >= 0")


def init_vae(
    feat_dim: int,
    latent_dim: int,
    prompt_len: int,
    ctx_dim: int,
    rng: Rng,
    enc_hidden: int | None = None,
    dec_hidden: int | None = None,
    prompt_init: np.ndarray | None = None,
) -> VaeParams:
    """Fresh VAE: one tanh hidden layer per MLP (widths 2*feat_dim and
    2*ctx_dim unless overridden), 1/sqrt(fan_in) weights, zero biases.
    The private prompt starts from ``prompt_init`` when given (typically
    the session's trained classification prompt, which already places
    every class embedding near its feature cluster), else N(0, 0.02^2).
    """
    enc_hidden = 2 * feat_dim if enc_hidden is None else enc_hidden
    dec_hidden = 2 * ctx_dim if dec_hidden is None else dec_hidden

    def dense(rng_part, out_dim, in_dim):
        w = rng_part.standard_normal(out_dim * in_dim).reshape(out_dim, in_dim)
        return w / math.sqrt(in_dim)

    enc_rng = rng.substream("vae-encoder")
    # the log-variance head starts low so early latents are informative;
    # otherwise the prior term flattens the posterior before the decode
    # path learns to use it
    head_bias = np.concatenate([np.zeros(latent_dim), np.full(latent_dim, -4.0)])
    encoder = MlpParams(
        [
            Layer(dense(enc_rng, enc_hidden, feat_dim), np.zeros(enc_hidden), "tanh"),
            Layer(dense(enc_rng, 2 * latent_dim, enc_hidden), head_bias),
        ]
    )
    dec_rng = rng.substream("vae-decoder")
    decoder = MlpParams(
        [
            Layer(dense(dec_rng, dec_hidden, latent_dim), np.zeros(dec_hidden), "tanh"),
            Layer(dense(dec_rng, ctx_dim, dec_hidden), np.zeros(ctx_dim)),
        ]
    )
    if prompt_init is not None:
        if prompt_init.shape != (prompt_len, ctx_dim):
            raise DimensionMismatchError(
                "vae prompt init", (prompt_len, ctx_dim), prompt_init.shape
            )
        prompt = prompt_init.copy()
    else:
        prompt = _PROMPT_INIT_SCALE * rng.substream("vae-prompt").standard_normal(
            prompt_len * ctx_dim
        ).reshape(prompt_len, ctx_dim)
    return VaeParams(encoder, decoder, prompt, latent_dim)


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------


def vae_encode(params: VaeParams, feature) -> tuple[np.ndarray, np.ndarray, object]:
    """Latent mean and variance for one feature; variance comes from an
    exponentiated log-variance head so it is strictly positive."""
    f = as_vector(feature, "vae input feature")
    if f.shape[0] != params.encoder.in_dim:
        raise DimensionMismatchError("vae input feature", params.encoder.in_dim, f.shape[0])
    out, tape = mlp_forward(params.encoder, f)
    mean = out[: params.latent_dim]
    var = np.exp(out[params.latent_dim :])
    return mean, var, tape


def reparameterize(mean, var, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """z = mean + sqrt(var) * eps with eps ~ N(0, I). Returns (z, eps);
    the noise is needed to replay gradients through the draw."""
    m = np.asarray(mean, dtype=np.float64)
    v = np.asarray(var, dtype=np.float64)
    if m.shape != v.shape:
        raise DimensionMismatchError("reparameterize variance", m.shape, v.shape)
    eps = rng.standard_normal(m.size).reshape(m.shape)
    return m + np.sqrt(np.maximum(v, 0.0)) * eps, eps


def _kl_terms(mean: np.ndarray, var: np.ndarray):
    """KL(N(mean, diag var) || N(0, I)) over the last axis, with gradients."""
    if np.any(var <= 0.0):
        raise NumericalError("KL divergence needs strictly positive variance")
    loss = 0.5 * (mean**2 + var - np.log(var) - 1.0).sum(axis=-1)
    return loss, mean.copy(), 0.5 * (1.0 - 1.0 / var)


def kl_to_standard_normal(mean, var) -> tuple[float, np.ndarray, np.ndarray]:
    """Closed-form KL to the standard normal prior:
    0.5 * sum(mean^2 + var - ln var - 1). Returns (loss, dmean, dvar)."""
    m = as_vector(mean, "kl mean")
    v = as_vector(var, "kl variance")
    if m.shape != v.shape:
        raise DimensionMismatchError("kl variance", m.shape, v.shape)
    loss, dmean, dvar = _kl_terms(m, v)
    return float(loss), dmean, dvar


@dataclass
class DecodeTape:
    params: VaeParams
    dec_tape: object
    txt_tape: object
    n_rows: int


def vae_decode(
    params: VaeParams, z, class_embedding, text_encoder: TextEncoder
) -> tuple[np.ndarray, DecodeTape]:
    """Decode one latent: the decoder's bias vector is added to every row
    of the VAE prompt, and the frozen text encoder maps the biased
    context plus the class embedding to a unit-norm feature."""
    zv = as_vector(z, "latent")
    if zv.shape[0] != params.latent_dim:
        raise DimensionMismatchError("latent", params.latent_dim, zv.shape[0])
    bias, dec_tape = mlp_forward(params.decoder, zv)
    context = params.vae_prompt + bias  # one shared bias, broadcast over rows
    rec, txt_tape = text_encoder.encode(context, class_embedding)
    return rec, DecodeTape(params, dec_tape, txt_tape, 0)


def vae_decode_grad(
    params: VaeParams, tape: DecodeTape, feature_grad, text_encoder: TextEncoder
):
    """Gradients of a scalar through vae_decode: returns
    (decoder layer grads, vae_prompt grad, latent grad)."""
    if tape.params is not params or tape.n_rows != 0:
        raise NumericalError("decode tape does not match parameters")
    dctx = text_encoder.encode_grad(tape.txt_tape, feature_grad)
    dprompt = dctx
    dbias = dctx.sum(axis=0)
    dec_grads, dz = mlp_backward(params.decoder, tape.dec_tape, dbias)
    return dec_grads, dprompt, dz


def reconstruction_loss(feature, reconstructed) -> tuple[float, np.ndarray]:
    """Euclidean (not squared) distance with gradient w.r.t. the
    reconstruction; both are exactly zero inside the cusp radius."""
    f = as_vector(feature, "feature")
    r = as_vector(reconstructed, "reconstruction")
    if f.shape != r.shape:
        raise DimensionMismatchError("reconstruction", f.shape, r.shape)
    diff = r - f
    dist = float(np.linalg.norm(diff))
    if dist < _RECON_CUSP:
        return 0.0, np.zeros_like(diff)
    return dist, diff / dist


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class VaeGrads:
    encoder: list[tuple[np.ndarray, np.ndarray]]
    decoder: list[tuple[np.ndarray, np.ndarray]]
    vae_prompt: np.ndarray

    def flat(self) -> list[np.ndarray]:
        out = []
        for group in (self.encoder, self.decoder):
            for dw, db in group:
                out.extend((dw, db))
        out.append(self.vae_prompt)
        return out


def vae_loss_and_grads(
    params: VaeParams,
    feats: np.ndarray,
    embeddings: np.ndarray,
    eps: np.ndarray,
    text_encoder: TextEncoder,
    recon_weight: float,
) -> tuple[float, float, float, VaeGrads]:
    """Mean loss over a feature batch with a fixed noise matrix, plus
    exact gradients for every learnable group. Separating the noise from
    the draw keeps the map differentiable, so finite differences can
    check the gradients directly.

    Returns (total, mean KL part, mean reconstruction part, grads).
    """
    n = feats.shape[0]
    dz = params.latent_dim

    enc_out, enc_tape = mlp_forward(params.encoder, feats)
    mean, logvar = enc_out[:, :dz], enc_out[:, dz:]
    var = np.exp(logvar)
    sigma = np.sqrt(var)
    z = mean + sigma * eps

    bias, dec_tape = mlp_forward(params.decoder, z)
    contexts = params.vae_prompt[None, :, :] + bias[:, None, :]
    rec, txt_tape = text_encoder.encode_many(contexts, embeddings)

    kl_rows, kl_dmean, kl_dvar = _kl_terms(mean, var)
    diff = rec - feats
    dist = np.linalg.norm(diff, axis=1)
    safe = dist >= _RECON_CUSP
    rec_rows = np.where(safe, dist, 0.0)
    total = float((kl_rows + recon_weight * rec_rows).mean())

    # reconstruction branch
    drec = np.zeros_like(diff)
    drec[safe] = diff[safe] / dist[safe, None]
    drec *= recon_weight / n
    dctx_rows = text_encoder.encode_many_grad(txt_tape, drec)
    dprompt = dctx_rows.sum(axis=0)
    dbias = dctx_rows.sum(axis=1)
    dec_grads, dz_grad = mlp_backward(params.decoder, dec_tape, dbias)

    # through the reparameterized draw, then add the KL branch
    dmean = dz_grad + kl_dmean / n
    dvar = dz_grad * eps / (2.0 * sigma) + kl_dvar / n
    dlogvar = dvar * var
    enc_grads, _ = mlp_backward(
        params.encoder, enc_tape, np.concatenate([dmean, dlogvar], axis=1)
    )
    return total, float(kl_rows.mean()), float(rec_rows.mean()), VaeGrads(
        enc_grads, dec_grads, dprompt
    )


def train_vae(
    records: list[FeatureRecord],
    class_embeddings,
    text_encoder: TextEncoder,
    config: VaeTrainConfig,
    latent_dim: int = 8,
    rng: Rng | None = None,
    prompt_init: np.ndarray | None = None,
) -> tuple[VaeParams, list[dict]]:
    """Train a fresh VAE on one session's features.

    ``class_embeddings`` maps class_id to its frozen embedding. Noise is
    resampled per feature per epoch. Returns the trained parameters and
    a per-epoch log of mean total/KL/reconstruction losses. The text
    encoder is frozen throughout.
    """
    if not records:
        raise ValueError("cannot train a VAE on zero features")
    if rng is None:
        rng = Rng(config.seed)
    feats = np.vstack([r.feature for r in records])
    embs = np.vstack([class_embeddings[r.class_id] for r in records])
    n = feats.shape[0]

    params = init_vae(
        text_encoder.feat_dim,
        latent_dim,
        text_encoder.prompt_len,
        text_encoder.ctx_dim,
        rng.substream("init"),
        prompt_init=prompt_init,
    )
    velocity = [np.zeros_like(a) for a in params.parameter_arrays()]
    noise_rng = rng.substream("noise")
    order_rng = rng.substream("order")
    batch = n if config.batch_size is None or config.batch_size >= n else config.batch_size

    log: list[dict] = []
    for epoch in range(config.epochs):
        eps_all = noise_rng.standard_normal(n * latent_dim).reshape(n, latent_dim)
        order = np.arange(n) if batch == n else order_rng.permutation(n)
        epoch_total = epoch_kl = epoch_rec = 0.0
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            total, kl_part, rec_part, grads = vae_loss_and_grads(
                params, feats[idx], embs[idx], eps_all[idx], text_encoder,
                config.recon_weight,
            )
            if not math.isfinite(total):
                raise NumericalError(
                    f"non-finite VAE loss at epoch {epoch} (batch start {start})"
                )
            arrays = params.parameter_arrays()
            flat_grads = grads.flat()
            updated = []
            for i, (arr, g) in enumerate(zip(arrays, flat_grads)):
                new_arr, velocity[i] = momentum_update(
                    arr, g, velocity[i], config.lr, config.momentum
                )
                updated.append(new_arr)
            params = params.replace_parameters(updated)
            w = len(idx) / n
            epoch_total += total * w
            epoch_kl += kl_part * w
            epoch_rec += rec_part * w
        log.append({"epoch": epoch, "loss": epoch_total, "kl": epoch_kl, "recon": epoch_rec})
    return params, log


def synthesize_features(
    params: VaeParams,
    class_embedding,
    count: int,
    text_encoder: TextEncoder,
    rng: Rng,
) -> list[np.ndarray]:
    """Decode ``count`` standard-normal latents for one class. Returns
    unit-norm features (the text encoder normalizes its output)."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    if count == 0:
        return []
    emb = as_vector(class_embedding, "class embedding")
    latents = rng.standard_normal(count * params.latent_dim).reshape(count, params.latent_dim)
    bias, _ = mlp_forward(params.decoder, latents)
    contexts = params.vae_prompt[None, :, :] + bias[:, None, :]
    feats, _ = text_encoder.encode_many(contexts, np.tile(emb, (count, 1)))
    return [feats[i] for i in range(count)]


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

_VAE_HEADER = struct.Struct("<4sHHHH")
_LAYER_HEAD = struct.Struct("<HHB")
_ACT_CODES = {"identity": 0, "tanh": 1, "relu": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def save_vae(params: VaeParams, path) -> None:
    prompt_len, ctx_dim = params.vae_prompt.shape
    with open(path, "wb") as fh:
        fh.write(
            _VAE_HEADER.pack(VAE_MAGIC, VAE_VERSION, params.latent_dim, prompt_len, ctx_dim)
        )
        for mlp in (params.encoder, params.decoder):
            fh.write(struct.pack("<B", len(mlp.layers)))
            for layer in mlp.layers:
                fh.write(
                    _LAYER_HEAD.pack(layer.out_dim, layer.in_dim, _ACT_CODES[layer.activation])
                )
        for arr in params.parameter_arrays():
            fh.write(arr.astype("<f4").tobytes())


def load_vae(path) -> VaeParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _VAE_HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, latent_dim, prompt_len, ctx_dim = _VAE_HEADER.unpack_from(blob, 0)
    if magic != VAE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VAE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    offset = _VAE_HEADER.size

    def read_shapes():
        nonlocal offset
        (count,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shapes = []
        for _ in range(count):
            out_dim, in_dim, act = _LAYER_HEAD.unpack_from(blob, offset)
            offset += _LAYER_HEAD.size
            if act not in _ACT_NAMES:
                raise DataFormatError(f"{path}: unknown activation code {act}")
            shapes.append((out_dim, in_dim, _ACT_NAMES[act]))
        return shapes

    enc_shapes = read_shapes()
    dec_shapes = read_shapes()

    def read_array(shape):
        nonlocal offset
        n = int(np.prod(shape))
        if offset + 4 * n > len(blob):
            raise DataFormatError(f"{path}: truncated parameter payload")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).astype(np.float64)
        offset += 4 * n
        return arr.reshape(shape)

    def read_mlp(shapes):
        layers = []
        for out_dim, in_dim, act in shapes:
            w = read_array((out_dim, in_dim))
            b = read_array((out_dim,))
            layers.append(Layer(w, b, act))
        return MlpParams(layers)

    encoder = read_mlp(enc_shapes)
    decoder = read_mlp(dec_shapes)
    prompt = read_array((prompt_len, ctx_dim))
    if offset != len(blob):
        raise DataFormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return VaeParams(encoder, decoder, prompt, latent_dim)
