import numpy as np
import pytest

from fscil.encoders import TextEncoder
from fscil.numerics import Layer, MlpParams, Rng


@pytest.fixture
def rng():
    return Rng(12345)


@pytest.fixture
def small_encoder():
    """Tiny text encoder for gradient checks: D=8, L=2, ctx 3, cls 3."""
    return TextEncoder(feat_dim=8, prompt_len=2, ctx_dim=3, cls_dim=3, seed=77)


def random_mlp(rng: Rng, dims, activations) -> MlpParams:
    layers = []
    for (d_in, d_out), act in zip(zip(dims, dims[1:]), activations):
        w = rng.standard_normal(d_out * d_in).reshape(d_out, d_in) / np.sqrt(d_in)
        b = 0.1 * rng.standard_normal(d_out)
        layers.append(Layer(w, b, act))
    return MlpParams(layers)


def rel_err(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function over a flat copy of x."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad
