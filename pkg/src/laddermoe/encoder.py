"""Patch-embedding transformer encoder with ladder-side MoE adapters.

The backbone is a conventional pre-norm vision transformer. At a configured
subset of layers, a side adapter reads the layer output: a router scores a
pool of experts from the class token and the mean-pooled patch token, the
top-k experts run on every token, and their weighted sum is added back into
the stream through a learnable sigmoid gate. Expert up-projections start at
exactly zero, so a freshly initialized model reproduces the bare backbone
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import DimensionError, InternalError, ParameterError
from .tensor import Tensor


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 12
    heads: int = 4
    adapter_layers: tuple[int, ...] = (0, 4, 8, 11)
    num_experts: int = 36
    top_k: int = 5
    expert_bottleneck: int = 16
    mlp_ratio: float = 2.0

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ParameterError(
                f"image_size {self.image_size} must be a positive multiple of "
                f"patch_size {self.patch_size}"
            )
        if self.embed_dim <= 0 or self.heads <= 0 or self.embed_dim % self.heads:
            raise ParameterError(
                f"embed_dim {self.embed_dim} must be a positive multiple of heads {self.heads}"
            )
        if self.depth < 1:
            raise ParameterError(f"depth must be >= 1, got {self.depth}")
        if any(not 0 <= i < self.depth for i in self.adapter_layers):
            raise ParameterError(
                f"adapter_layers {self.adapter_layers} outside [0, {self.depth})"
            )
        if len(set(self.adapter_layers)) != len(self.adapter_layers):
            raise ParameterError(f"adapter_layers {self.adapter_layers} must be distinct")
        if self.num_experts < 0:
            raise ParameterError(f"num_experts must be >= 0, got {self.num_experts}")
        # num_experts == 0 disables the adapters entirely (ablation case)
        if self.num_experts > 0 and not 1 <= self.top_k <= self.num_experts:
            raise ParameterError(
                f"top_k {self.top_k} outside [1, {self.num_experts}]"
            )
        if self.num_experts > 0 and self.expert_bottleneck < 1:
            raise ParameterError(f"expert_bottleneck must be >= 1, got {self.expert_bottleneck}")
        if self.mlp_ratio <= 0:
            raise ParameterError(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return 1 + self.num_patches

    @property
    def adapters_active(self) -> bool:
        return bool(self.adapter_layers) and self.num_experts > 0


@dataclass
class RouterState:
    """Per-adapter scoring projection: concat[cls; mean] -> expert scores."""

    w: Tensor  # (2*embed_dim, num_experts)
    b: Tensor  # (num_experts,)


@dataclass
class ExpertPool:
    """All experts of one adapter, stored stacked for batched dispatch.

    Row e of each array holds expert e's bottleneck MLP
    (down-project, GELU, up-project). Up-projections are zero-initialized
    so an untouched expert contributes exactly nothing.
    """

    down_w: Tensor  # (N, embed_dim, bottleneck)
    down_b: Tensor  # (N, bottleneck)
    up_w: Tensor  # (N, bottleneck, embed_dim)
    up_b: Tensor  # (N, embed_dim)

    @property
    def num_experts(self) -> int:
        return self.down_w.shape[0]


@dataclass
class RoutingRecord:
    """Which experts one sample activated at one adapter, and at what weight."""

    adapter_index: int
    selected: tuple[int, ...]
    weights: np.ndarray  # (k,), positive, sums to 1
    weight_tensor: Tensor | None = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# parameter construction


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Build all encoder parameters (backbone + adapters) keyed by path."""
    cfg.validate()
    p: dict[str, Tensor] = {}
    d = cfg.embed_dim
    p["backbone.patch.w"] = nn.normal_param(rng, (cfg.patch_size**2, d))
    p["backbone.patch.b"] = nn.zeros_param((d,))
    p["backbone.cls"] = nn.normal_param(rng, (1, 1, d), std=d**-0.5)
    p["backbone.pos"] = nn.normal_param(rng, (cfg.num_tokens, d), std=d**-0.5)
    hidden = int(round(d * cfg.mlp_ratio))
    resid = (2.0 * cfg.depth) ** -0.5  # keep the residual stream near unit scale
    for i in range(cfg.depth):
        nn.init_layer_norm(p, f"backbone.blocks.{i}.ln1", d)
        nn.init_attention(p, f"backbone.blocks.{i}.attn", d, rng, out_scale=resid)
        nn.init_layer_norm(p, f"backbone.blocks.{i}.ln2", d)
        nn.init_mlp(p, f"backbone.blocks.{i}.mlp", d, hidden, rng, out_scale=resid)
    nn.init_layer_norm(p, "backbone.ln_f", d)
    if cfg.adapters_active:
        for j, _ in enumerate(cfg.adapter_layers):
            n, bn = cfg.num_experts, cfg.expert_bottleneck
            p[f"adapters.{j}.router.w"] = nn.normal_param(rng, (2 * d, n))
            p[f"adapters.{j}.router.b"] = nn.zeros_param((n,))
            p[f"adapters.{j}.experts.down_w"] = nn.normal_param(rng, (n, d, bn))
            p[f"adapters.{j}.experts.down_b"] = nn.zeros_param((n, bn))
            p[f"adapters.{j}.experts.up_w"] = nn.zeros_param((n, bn, d))
            p[f"adapters.{j}.experts.up_b"] = nn.zeros_param((n, d))
            p[f"adapters.{j}.gate"] = nn.zeros_param((1,))
    return p


def router_state(params: dict[str, Tensor], adapter: int) -> RouterState:
    return RouterState(params[f"adapters.{adapter}.router.w"], params[f"adapters.{adapter}.router.b"])


def expert_pool(params: dict[str, Tensor], adapter: int) -> ExpertPool:
    pre = f"adapters.{adapter}.experts"
    return ExpertPool(
        params[f"{pre}.down_w"], params[f"{pre}.down_b"],
        params[f"{pre}.up_w"], params[f"{pre}.up_b"],
    )


# ---------------------------------------------------------------------------
# forward pieces


def patch_embed(image, cfg: EncoderConfig, params: dict[str, Tensor]) -> Tensor:
    """Embed a grayscale image (H, W) or batch (B, H, W) into tokens.

    Returns (1+T, d) for a single image, (B, 1+T, d) for a batch; the class
    token is prepended and the learned positional table added to every token.
    """
    arr = image.array if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = arr.ndim == 2
    if single:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] != cfg.image_size or arr.shape[2] != cfg.image_size:
        raise DimensionError(
            f"expected image(s) of size {cfg.image_size}x{cfg.image_size}, got {arr.shape}"
        )
    b = arr.shape[0]
    s, ps = cfg.image_size // cfg.patch_size, cfg.patch_size
    centered = (arr - 0.5) * 2.0  # [0, 1] pixels to [-1, 1]
    patches = (
        centered.reshape(b, s, ps, s, ps)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, s * s, ps * ps)
    )
    tokens = nn.linear(Tensor(patches), params["backbone.patch.w"], params["backbone.patch.b"])
    cls = T.broadcast_to(params["backbone.cls"], (b, 1, cfg.embed_dim))
    tokens = T.concat([cls, tokens], axis=1) + params["backbone.pos"]
    if single:
        tokens = tokens.reshape((cfg.num_tokens, cfg.embed_dim))
    return tokens


def _block(params: dict[str, Tensor], i: int, x: Tensor, heads: int) -> Tensor:
    pre = f"backbone.blocks.{i}"
    normed = nn.apply_layer_norm(params, f"{pre}.ln1", x)
    h = x + nn.attention(params, f"{pre}.attn", normed, normed, heads)
    return h + nn.apply_mlp(params, f"{pre}.mlp", nn.apply_layer_norm(params, f"{pre}.ln2", h))


def select_top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, ties broken by lower index."""
    if scores.ndim == 1:
        scores = scores[None]
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[:, :k]


def route_batch(
    cls_tok: Tensor, mean_tok: Tensor, router: RouterState, k: int
) -> tuple[np.ndarray, Tensor, Tensor]:
    """Route a batch: returns (selected indices (B,k), weights (B,k), scores (B,N))."""
    n = router.b.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"top_k {k} outside [1, {n}]")
    signal = T.concat([cls_tok, mean_tok], axis=-1)
    scores = nn.linear(signal, router.w, router.b)
    selected = select_top_k(scores.array, k)
    picked = T.take_along_last(scores, selected)
    weights = T.softmax(picked, axis=-1)
    return selected, weights, scores


def route(cls_token, mean_token, router: RouterState, k: int, adapter_index: int = 0) -> RoutingRecord:
    """Route a single sample and return its record.

    The routing signal is the concatenation [class token; mean patch token];
    weights are a softmax over the k highest raw scores only.
    """
    cls_t = cls_token if isinstance(cls_token, Tensor) else Tensor(cls_token)
    mean_t = mean_token if isinstance(mean_token, Tensor) else Tensor(mean_token)
    sel, weights, _ = route_batch(
        cls_t.reshape((1, cls_t.shape[-1])), mean_t.reshape((1, mean_t.shape[-1])), router, k
    )
    return RoutingRecord(
        adapter_index=adapter_index,
        selected=tuple(int(i) for i in sel[0]),
        weights=weights.array[0].copy(),
        weight_tensor=weights.reshape((k,)),
    )


def adapter_apply_batch(
    tokens: Tensor, pool: ExpertPool, selected: np.ndarray, weights: Tensor
) -> Tensor:
    """Weighted sum of the selected experts' outputs, applied token-wise.

    tokens: (B, T, d); selected: (B, k) int; weights: (B, k) Tensor.
    Only the selected experts' rows are gathered, so unselected experts do
    no work and receive no gradient.
    """
    b, t, d = tokens.shape
    k = selected.shape[1]
    if selected.max(initial=-1) >= pool.num_experts:
        raise InternalError(
            f"expert index {int(selected.max())} out of range for pool of {pool.num_experts}"
        )
    flat = selected.reshape(-1)
    dw = T.gather_rows(pool.down_w, flat).reshape((b, k, d, pool.down_b.shape[1]))
    db = T.gather_rows(pool.down_b, flat).reshape((b, k, 1, pool.down_b.shape[1]))
    uw = T.gather_rows(pool.up_w, flat).reshape((b, k, pool.down_b.shape[1], d))
    ub = T.gather_rows(pool.up_b, flat).reshape((b, k, 1, d))
    x = tokens.reshape((b, 1, t, d))
    h = T.gelu(T.matmul(x, dw) + db)
    out = T.matmul(h, uw) + ub  # (B, k, T, d)
    w = weights.reshape((b, k, 1, 1))
    return (out * w).sum(axis=1)


def adapter_forward(tokens: Tensor, pool: ExpertPool, rec: RoutingRecord) -> Tensor:
    """Single-sample adapter application from a routing record."""
    t, d = tokens.shape
    k = len(rec.selected)
    sel = np.asarray(rec.selected, dtype=np.intp).reshape(1, k)
    w = rec.weight_tensor if rec.weight_tensor is not None else Tensor(rec.weights)
    out = adapter_apply_batch(tokens.reshape((1, t, d)), pool, sel, w.reshape((1, k)))
    return out.reshape((t, d))


def gate_fuse(backbone: Tensor, side: Tensor, gate: Tensor) -> Tensor:
    """Fuse a side-stream correction into the backbone: out = backbone + sigmoid(g) * side."""
    if backbone.shape != side.shape:
        raise DimensionError(f"gate_fuse shapes differ: {backbone.shape} vs {side.shape}")
    return backbone + T.sigmoid(gate) * side


def encode(
    image,
    cfg: EncoderConfig,
    params: dict[str, Tensor],
    record_routing: bool = False,
    adapters_enabled: bool = True,
):
    """Run the full encoder.

    Returns (features, routing). For a single (H, W) image, features is
    (1+T, d) and routing a list with one RoutingRecord per adapter layer;
    for a (B, H, W) batch, features is (B, 1+T, d) and routing a list (one
    entry per adapter layer) of per-sample record lists. Routing is empty
    unless ``record_routing`` is set.
    """
    arr = image.array if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    single = arr.ndim == 2
    x = patch_embed(arr if not single else arr[None], cfg, params)
    b = x.shape[0]
    use_adapters = adapters_enabled and cfg.adapters_active
    adapter_at = {layer: j for j, layer in enumerate(cfg.adapter_layers)} if use_adapters else {}
    routing: list[list[RoutingRecord]] = []
    for i in range(cfg.depth):
        x = _block(params, i, x, cfg.heads)
        j = adapter_at.get(i)
        if j is None:
            continue
        cls_tok = x.narrow(1, 0, 1).reshape((b, cfg.embed_dim))
        mean_tok = x.narrow(1, 1, cfg.num_patches).mean(axis=1)
        sel, weights, _ = route_batch(cls_tok, mean_tok, router_state(params, j), cfg.top_k)
        side = adapter_apply_batch(x, expert_pool(params, j), sel, weights)
        x = gate_fuse(x, side, params[f"adapters.{j}.gate"])
        if record_routing:
            routing.append(
                [
                    RoutingRecord(
                        adapter_index=j,
                        selected=tuple(int(e) for e in sel[s]),
                        weights=weights.array[s].copy(),
                    )
                    for s in range(b)
                ]
            )
    x = nn.apply_layer_norm(params, "backbone.ln_f", x)
    if single:
        x = x.reshape((cfg.num_tokens, cfg.embed_dim))
        return x, [recs[0] for recs in routing]
    return x, routing
