"""Small shared neural building blocks used by the encoder and decoder."""

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


def normal_param(rng: np.random.Generator, shape, std: float | None = None) -> Tensor:
    """Gaussian parameter; std defaults to fan-in scaling (1/sqrt(rows))."""
    if std is None:
        std = float(shape[-2] if len(shape) >= 2 else shape[-1]) ** -0.5
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


def init_attention(params: dict, prefix: str, dim: int, rng, out_scale: float = 1.0) -> None:
    for name in ("wq", "wk", "wv"):
        params[f"{prefix}.{name}"] = normal_param(rng, (dim, dim))
    params[f"{prefix}.wo"] = normal_param(rng, (dim, dim), std=out_scale * dim**-0.5)
    # no key bias: a shared shift of every key is invisible to the softmax
    for name in ("bq", "bv", "bo"):
        params[f"{prefix}.{name}"] = zeros_param((dim,))


def init_layer_norm(params: dict, prefix: str, dim: int) -> None:
    params[f"{prefix}.g"] = ones_param((dim,))
    params[f"{prefix}.b"] = zeros_param((dim,))


def apply_layer_norm(params: dict, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape((b, t, heads, d // heads)).permute((0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return x.permute((0, 2, 1, 3)).reshape((b, t, h * dh))


def attention(
    params: dict,
    prefix: str,
    query: Tensor,
    context: Tensor,
    heads: int,
    additive_mask: np.ndarray | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention of ``query`` over ``context``.

    Both inputs are (B, L, dim); ``additive_mask`` is an (Lq, Lk) float
    array added to the pre-softmax scores (use -inf to forbid a position).
    """
    dim = query.shape[-1]
    if dim % heads:
        raise DimensionError(f"dim {dim} not divisible by {heads} heads")
    q = _split_heads(linear(query, params[f"{prefix}.wq"], params[f"{prefix}.bq"]), heads)
    k = _split_heads(T.matmul(context, params[f"{prefix}.wk"]), heads)
    v = _split_heads(linear(context, params[f"{prefix}.wv"], params[f"{prefix}.bv"]), heads)
    scores = T.matmul(q, k.permute((0, 1, 3, 2))) * (1.0 / np.sqrt(dim // heads))
    if additive_mask is not None:
        scores = scores + Tensor(additive_mask)
    attn = T.softmax(scores, axis=-1)
    mixed = _merge_heads(T.matmul(attn, v))
    return linear(mixed, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def init_mlp(params: dict, prefix: str, dim: int, hidden: int, rng, out_scale: float = 1.0) -> None:
    params[f"{prefix}.w1"] = normal_param(rng, (dim, hidden))
    params[f"{prefix}.b1"] = zeros_param((hidden,))
    params[f"{prefix}.w2"] = normal_param(rng, (hidden, dim), std=out_scale * hidden**-0.5)
    params[f"{prefix}.b2"] = zeros_param((dim,))


def apply_mlp(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = T.gelu(linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
