"""Recognizer assembly: frozen-backbone encoder + adapters + decoder."""

from __future__ import annotations

import numpy as np

from . import decoder as dec
from . import encoder as enc
from .rng import rng_for
from .tensor import Tensor


class Recognizer:
    """One trainable character recognizer: encoder, adapters, decoder.

    Parameters live in a flat dict keyed by path ("backbone.*",
    "adapters.*", "decoder.*"), which is also the checkpoint layout.
    """

    def __init__(self, enc_cfg: enc.EncoderConfig, dec_cfg: dec.DecoderConfig, params: dict[str, Tensor]):
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.params = params

    @classmethod
    def init(cls, enc_cfg: enc.EncoderConfig, dec_cfg: dec.DecoderConfig, seed: int) -> "Recognizer":
        enc_cfg.validate()
        dec_cfg.validate()
        rng = rng_for(seed, "model-init")
        params = enc.init_encoder_params(enc_cfg, rng)
        hidden = int(round(enc_cfg.embed_dim * enc_cfg.mlp_ratio))
        params.update(dec.init_decoder_params(enc_cfg.embed_dim, enc_cfg.heads, hidden, dec_cfg, rng))
        return cls(enc_cfg, dec_cfg, params)

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy raw arrays into matching parameters (checkpoint restore)."""
        for name, value in arrays.items():
            if prefix and not name.startswith(prefix):
                continue
            if name in self.params:
                self.params[name].array = np.asarray(value, dtype=np.float64).copy()

    def encode(self, images, record_routing: bool = False, adapters_enabled: bool = True):
        return enc.encode(
            images, self.enc_cfg, self.params,
            record_routing=record_routing, adapters_enabled=adapters_enabled,
        )

    def decode_train(self, features, targets, mask: dec.VisibilityMask) -> Tensor:
        return dec.decode_train(features, targets, mask, self.params, self.dec_cfg, self.enc_cfg.heads)

    def decode_infer(self, features, max_len: int | None = None):
        if max_len is None:
            max_len = self.dec_cfg.max_label_len
        return dec.decode_infer(features, self.params, self.dec_cfg, self.enc_cfg.heads, max_len)

    def read_crops(self, images, batch_size: int = 64, max_len: int | None = None) -> list[list[int]]:
        """Greedy-decode a stack/list of crop images into token sequences."""
        imgs = np.asarray(images, dtype=np.float64)
        if imgs.ndim == 2:
            imgs = imgs[None]
        out: list[list[int]] = []
        for start in range(0, imgs.shape[0], batch_size):
            feats, _ = self.encode(imgs[start : start + batch_size])
            out.extend(self.decode_infer(feats, max_len=max_len))
        return out

    def predict_categories(self, images, batch_size: int = 64) -> np.ndarray:
        """Single-character prediction: first decoded token, or -1 if empty."""
        seqs = self.read_crops(images, batch_size=batch_size, max_len=1)
        return np.array([s[0] if s else -1 for s in seqs], dtype=np.int64)
