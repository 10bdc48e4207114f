"""Single-layer attention decoder with permutation-masked training.

Training drives the decoder with visibility masks derived from permutations
of the target positions: position i may attend only to the ground-truth
tokens of positions that precede i in the permutation. A fixed left-to-right
(sequential) mask is used for the final fine-tuning phase and for greedy
inference. A begin-of-sequence embedding is always visible, so even the
first position in permutation order has a context to attend to.

Token layout: category ids occupy [0, C); then EOS = vocab_size - 3,
BOS = vocab_size - 2, PAD = vocab_size - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ParameterError
from .tensor import Tensor


@dataclass
class DecoderConfig:
    num_permutations: int = 12
    max_label_len: int = 8
    vocab_size: int = 0  # categories + 3 specials

    def validate(self) -> None:
        if self.num_permutations < 1:
            raise ParameterError(f"num_permutations must be >= 1, got {self.num_permutations}")
        if self.vocab_size < 4:
            raise ParameterError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.max_label_len < 1:
            raise ParameterError(f"max_label_len must be >= 1, got {self.max_label_len}")

    @property
    def num_categories(self) -> int:
        return self.vocab_size - 3

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 3

    @property
    def bos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def pad_id(self) -> int:
        return self.vocab_size - 1


@dataclass(frozen=True)
class VisibilityMask:
    """Square boolean matrix of side L+1 (targets plus end marker).

    allowed[i, j] is True iff position i may attend to position j's
    ground-truth token. Row L is the end marker (it sees every target);
    column L is never admitted (nothing follows the end marker).
    """

    allowed: np.ndarray
    order: tuple[int, ...]

    @property
    def length(self) -> int:
        return self.allowed.shape[0] - 1


def _mask_from_order(order: tuple[int, ...]) -> np.ndarray:
    length = len(order)
    allowed = np.zeros((length + 1, length + 1), dtype=bool)
    for rank, pos in enumerate(order):
        allowed[pos, list(order[:rank])] = True
    allowed[length, :length] = True
    return allowed


def make_sequential_mask(length: int) -> VisibilityMask:
    """Fixed left-to-right mask (the canonical permutation's mask)."""
    if length < 1:
        raise ParameterError(f"mask length must be >= 1, got {length}")
    order = tuple(range(length))
    return VisibilityMask(_mask_from_order(order), order)


def make_permutation_masks(length: int, k: int, seed: int) -> list[VisibilityMask]:
    """K visibility masks: canonical order first, its reverse second, the
    rest drawn uniformly without replacement from the remaining permutations
    (with replacement from all permutations once the factorial pool is
    exhausted)."""
    if length < 1:
        raise ParameterError(f"mask length must be >= 1, got {length}")
    if k < 1:
        raise ParameterError(f"need at least one permutation, got {k}")
    canonical = tuple(range(length))
    orders = [canonical]
    if k >= 2:
        orders.append(tuple(reversed(canonical)))
    remaining = k - len(orders)
    if remaining > 0:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        pool_size = math.factorial(length)
        if length <= 7:
            from itertools import permutations as iter_perms

            pool = [p for p in iter_perms(range(length)) if p not in set(orders)]
            if len(pool) >= remaining:
                picks = rng.choice(len(pool), size=remaining, replace=False)
                orders.extend(pool[int(i)] for i in picks)
            else:
                orders.extend(
                    tuple(int(v) for v in rng.permutation(length)) for _ in range(remaining)
                )
        else:
            seen = set(orders)
            while remaining > 0:
                cand = tuple(int(v) for v in rng.permutation(length))
                if len(seen) < pool_size and cand in seen:
                    continue
                orders.append(cand)
                seen.add(cand)
                remaining -= 1
            remaining = 0
    return [VisibilityMask(_mask_from_order(o), o) for o in orders[:k]]


# ---------------------------------------------------------------------------
# parameters and forward passes


def init_decoder_params(
    embed_dim: int, heads: int, mlp_hidden: int, dec_cfg: DecoderConfig, rng: np.random.Generator
) -> dict[str, Tensor]:
    dec_cfg.validate()
    p: dict[str, Tensor] = {}
    slots = dec_cfg.max_label_len + 1
    emb_std = embed_dim**-0.5
    p["decoder.tok_emb"] = nn.normal_param(rng, (dec_cfg.vocab_size, embed_dim), std=emb_std)
    p["decoder.ctx_pos"] = nn.normal_param(rng, (slots, embed_dim), std=emb_std)
    p["decoder.pos_query"] = nn.normal_param(rng, (slots, embed_dim), std=emb_std)
    nn.init_layer_norm(p, "decoder.ln_q", embed_dim)
    nn.init_layer_norm(p, "decoder.ln_ctx", embed_dim)
    nn.init_attention(p, "decoder.content_attn", embed_dim, rng)
    nn.init_layer_norm(p, "decoder.ln_cross", embed_dim)
    nn.init_attention(p, "decoder.cross_attn", embed_dim, rng)
    nn.init_layer_norm(p, "decoder.ln_mlp", embed_dim)
    nn.init_mlp(p, "decoder.mlp", embed_dim, mlp_hidden, rng)
    nn.init_layer_norm(p, "decoder.ln_out", embed_dim)
    p["decoder.proj.w"] = nn.normal_param(rng, (embed_dim, dec_cfg.vocab_size))
    p["decoder.proj.b"] = nn.zeros_param((dec_cfg.vocab_size,))
    return p


def _context_mask(mask: VisibilityMask) -> np.ndarray:
    """Additive attention mask over [BOS, y_0 .. y_{L-1}] context columns."""
    length = mask.length
    add = np.full((length + 1, length + 1), -np.inf)
    add[:, 0] = 0.0  # BOS always visible
    add[:, 1:][mask.allowed[:, :length]] = 0.0
    return add


def decode_train(
    features: Tensor,
    targets,
    mask: VisibilityMask,
    params: dict[str, Tensor],
    dec_cfg: DecoderConfig,
    heads: int,
) -> Tensor:
    """Teacher-forced decoder pass.

    features: (S, d) or (B, S, d) encoder output; targets: (L,) or (B, L)
    integer token ids (PAD allowed). Returns logits of shape (L+1, vocab)
    or (B, L+1, vocab); row i sees only mask-admitted tokens, BOS, and the
    visual features.
    """
    single = isinstance(features, Tensor) and features.array.ndim == 2
    feats = features.reshape((1,) + features.shape) if single else features
    tgt = np.asarray(targets, dtype=np.intp)
    if tgt.ndim == 1:
        tgt = tgt[None]
    b, length = tgt.shape
    if length > dec_cfg.max_label_len:
        raise ParameterError(
            f"target length {length} exceeds max_label_len {dec_cfg.max_label_len}"
        )
    if mask.length != length:
        raise ParameterError(f"mask side {mask.length + 1} does not fit targets of length {length}")
    d = feats.shape[-1]

    ctx_ids = np.concatenate([np.full((b, 1), dec_cfg.bos_id, dtype=np.intp), tgt], axis=1)
    ctx = T.gather_rows(params["decoder.tok_emb"], ctx_ids) + params["decoder.ctx_pos"].narrow(
        0, 0, length + 1
    )
    q = T.broadcast_to(
        params["decoder.pos_query"].narrow(0, 0, length + 1).reshape((1, length + 1, d)),
        (b, length + 1, d),
    )
    h = q + nn.attention(
        params,
        "decoder.content_attn",
        nn.apply_layer_norm(params, "decoder.ln_q", q),
        nn.apply_layer_norm(params, "decoder.ln_ctx", ctx),
        heads,
        additive_mask=_context_mask(mask),
    )
    h = h + nn.attention(
        params,
        "decoder.cross_attn",
        nn.apply_layer_norm(params, "decoder.ln_cross", h),
        feats,
        heads,
    )
    h = h + nn.apply_mlp(params, "decoder.mlp", nn.apply_layer_norm(params, "decoder.ln_mlp", h))
    logits = nn.linear(
        nn.apply_layer_norm(params, "decoder.ln_out", h),
        params["decoder.proj.w"],
        params["decoder.proj.b"],
    )
    if single:
        logits = logits.reshape((length + 1, dec_cfg.vocab_size))
    return logits


def sequence_loss(
    logits: Tensor, targets, lengths, dec_cfg: DecoderConfig
) -> Tensor:
    """Mean cross-entropy per sample over its supervised positions.

    Position i < len is supervised with token i; position len with EOS;
    positions beyond that (padding slack) are excluded. Returns the batch
    mean as a scalar tensor.
    """
    tgt = np.asarray(targets, dtype=np.intp)
    if tgt.ndim == 1:
        tgt = tgt[None]
        logits = logits.reshape((1,) + logits.shape)
    lens = np.asarray(lengths, dtype=np.intp).reshape(-1)
    b, slots = tgt.shape[0], tgt.shape[1] + 1
    ext = np.concatenate([tgt, np.full((b, 1), dec_cfg.pad_id, dtype=np.intp)], axis=1)
    ext[np.arange(b), lens] = dec_cfg.eos_id
    valid = np.arange(slots)[None, :] <= lens[:, None]
    ext = np.where(valid, ext, dec_cfg.pad_id)
    nll = -T.take_along_last(T.log_softmax(logits, axis=-1), ext[..., None]).reshape((b, slots))
    per_sample = (nll * valid.astype(np.float64)).sum(axis=1) * Tensor(1.0 / (lens + 1.0))
    return per_sample.mean()


def decode_infer(
    features: Tensor,
    params: dict[str, Tensor],
    dec_cfg: DecoderConfig,
    heads: int,
    max_len: int,
):
    """Greedy autoregressive decoding under the sequential mask.

    Returns a list of category ids (single sample) or a list of such lists
    (batch). Specials are never emitted: decoding stops at the end marker
    or after max_len tokens, and BOS/PAD logits are suppressed.
    """
    if max_len < 1:
        raise ParameterError(f"max_len must be >= 1, got {max_len}")
    max_len = min(max_len, dec_cfg.max_label_len)
    single = isinstance(features, Tensor) and features.array.ndim == 2
    feats = features.reshape((1,) + features.shape) if single else features
    b = feats.shape[0]
    seqs: list[list[int]] = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    prefix = np.zeros((b, 0), dtype=np.intp)
    for step in range(max_len + 1):
        mask = make_sequential_mask(step) if step else VisibilityMask(
            np.zeros((1, 1), dtype=bool), ()
        )
        logits = decode_train(feats, prefix, mask, params, dec_cfg, heads)
        row = logits.array[:, step, :].copy()
        row[:, dec_cfg.bos_id] = -np.inf
        row[:, dec_cfg.pad_id] = -np.inf
        if step == max_len:
            row[:, : dec_cfg.eos_id] = -np.inf  # force stop at the length cap
        nxt = row.argmax(axis=-1)
        for s in range(b):
            if done[s]:
                continue
            if nxt[s] == dec_cfg.eos_id:
                done[s] = True
            else:
                seqs[s].append(int(nxt[s]))
        if done.all():
            break
        step_tok = np.where(done, dec_cfg.pad_id, nxt).astype(np.intp)
        prefix = np.concatenate([prefix, step_tok[:, None]], axis=1)
    return seqs[0] if single else seqs
