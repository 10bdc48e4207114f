"""Two-phase optimization: permutation-masked training, then ordered fine-tuning.

The backbone is pretrained once as a plain classifier, then frozen; only
gates, routers, experts, and the decoder stay trainable. Everything is
deterministic given (seed, config, data): data order, mask sampling, and
parameter updates all draw from explicitly seeded streams, and checkpoints
carry the RNG and optimizer state needed to resume a schedule exactly.
"""

from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .decoder import make_permutation_masks, make_sequential_mask, sequence_loss
from .errors import DataError, NumericError, ParameterError
from .model import Recognizer
from .rng import rng_for, rng_from_state, rng_state
from .tensor import Graph, Tensor, backward

log = logging.getLogger(__name__)

PLM = "plm"
OSF = "osf"


@dataclass
class TrainConfig:
    batch_size: int = 32
    plm_epochs: int = 8  # paper-scale runs use 35
    osf_epochs: int = 2  # paper-scale runs use 5
    pretrain_epochs: int = 8
    learning_rate: float = 1e-3
    pretrain_lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("plm_epochs", "osf_epochs", "pretrain_epochs"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("learning_rate", "pretrain_lr", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class LabeledCrops:
    """A stack of crop images with variable-length label sequences."""

    images: np.ndarray  # (N, H, W) float in [0, 1]
    labels: np.ndarray  # (N, Lmax) int, padded arbitrarily past each length
    lengths: np.ndarray  # (N,) int

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx) -> "LabeledCrops":
        idx = np.asarray(idx)
        return LabeledCrops(self.images[idx], self.labels[idx], self.lengths[idx])

    @classmethod
    def from_single_labels(cls, images, categories) -> "LabeledCrops":
        cats = np.asarray(categories, dtype=np.intp).reshape(-1, 1)
        return cls(np.asarray(images, dtype=np.float64), cats, np.ones(len(cats), dtype=np.intp))


@dataclass
class EpochStats:
    phase: str
    epoch: int
    mean_loss: float
    samples: int
    val_loss: float | None = None


class Adam:
    """Adaptive-moment optimizer with bias correction, fixed learning rate."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.names = sorted(params)
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n].array) for n in self.names}
        self.v = {n: np.zeros_like(params[n].array) for n in self.names}

    def zero_grad(self) -> None:
        for n in self.names:
            self.params[n].grad = None

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for n in self.names:
            p = self.params[n]
            g = p.grad if p.grad is not None else np.zeros_like(p.array)
            if self.weight_decay:
                g = g + self.weight_decay * p.array
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            p.array = p.array - self.lr * (self.m[n] / b1c) / (np.sqrt(self.v[n] / b2c) + self.eps)

    def state(self) -> tuple[int, dict, dict]:
        return self.step_count, dict(self.m), dict(self.v)

    def load_state(self, step_count: int, m: dict, v: dict) -> None:
        self.step_count = step_count
        for n in self.names:
            if n in m:
                self.m[n] = np.asarray(m[n], dtype=np.float64).copy()
            if n in v:
                self.v[n] = np.asarray(v[n], dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# parameter partitioning


def freeze_partition(model: Recognizer) -> tuple[set[str], set[str]]:
    """Split parameters into (frozen backbone, trainable rest) and set flags."""
    frozen = {n for n in model.params if n.startswith("backbone.")}
    trainable = set(model.params) - frozen
    for n in frozen:
        model.params[n].requires_grad = False
    for n in trainable:
        model.params[n].requires_grad = True
    return frozen, trainable


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


# ---------------------------------------------------------------------------
# backbone pretraining


def _head_logits(model: Recognizer, images: np.ndarray, head_w, head_b, batch_size: int = 128) -> np.ndarray:
    rows = []
    for start in range(0, images.shape[0], batch_size):
        feats, _ = model.encode(images[start : start + batch_size], adapters_enabled=False)
        rows.append(feats.array[:, 0, :] @ head_w + head_b)
    return np.concatenate(rows, axis=0)


def pretrain_backbone(
    data: LabeledCrops,
    model: Recognizer,
    cfg: TrainConfig,
    num_classes: int,
    epochs: int | None = None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Train backbone + a throwaway linear head on single-character crops.

    Adapters are disabled throughout and the decoder is untouched. Returns a
    phase="pretrain" checkpoint whose params hold the backbone (to be frozen
    downstream) plus the head under "pretrain_head.*", and per-epoch stats.
    With zero epochs the initialization is returned unchanged.
    """
    cfg.validate()
    if len(data) == 0:
        raise DataError("pretraining dataset is empty")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    rng = rng_for(cfg.seed, "pretrain")
    d = model.enc_cfg.embed_dim
    head_w = nn.normal_param(rng_for(cfg.seed, "pretrain-head"), (d, num_classes))
    head_b = nn.zeros_param((num_classes,))
    for n, p in model.params.items():
        p.requires_grad = n.startswith("backbone.")
    opt_params = {n: p for n, p in model.params.items() if p.requires_grad}
    opt_params["pretrain_head.w"], opt_params["pretrain_head.b"] = head_w, head_b
    opt = Adam(opt_params, cfg.pretrain_lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    classes = data.labels[:, 0]
    stats = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total, seen = 0.0, 0
        for batch in _batches(len(data), cfg.batch_size, order):
            ys = classes[batch]
            opt.zero_grad()
            with Graph() as g:
                feats, _ = model.encode(data.images[batch], adapters_enabled=False)
                cls_tok = feats.narrow(1, 0, 1).reshape((len(batch), d))
                logits = nn.linear(cls_tok, head_w, head_b)
                loss = (-T.take_along_last(T.log_softmax(logits, axis=-1), ys[:, None])).mean()
            if not np.isfinite(loss.array).all():
                raise NumericError(f"pretraining loss non-finite at epoch {epoch}")
            backward(g, np.ones_like(loss.array), output=loss)
            opt.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        stats.append(EpochStats("pretrain", epoch, total / seen, seen))
        log.info("pretrain epoch %d: loss %.4f", epoch, total / seen)

    preds = _head_logits(model, data.images, head_w.array, head_b.array).argmax(axis=1)
    train_acc = float((preds == classes).mean())
    params = {n: p.array.copy() for n, p in model.params.items()}
    params["pretrain_head.w"] = head_w.array.copy()
    params["pretrain_head.b"] = head_b.array.copy()
    step, m, v = opt.state()
    ckpt = Checkpoint(
        phase="pretrain",
        epoch=epochs,
        enc_cfg=model.enc_cfg,
        dec_cfg=model.dec_cfg,
        train_cfg=cfg,
        params=params,
        rng_state=rng_state(rng),
        optim_step=step,
        optim_m=m,
        optim_v=v,
        extra={"train_accuracy": train_acc, "num_classes": num_classes},
    )
    return ckpt, stats


# ---------------------------------------------------------------------------
# adapter + decoder training


def _batch_loss(model: Recognizer, imgs, labels, lengths, masks_with_weights) -> Tensor:
    feats, _ = model.encode(imgs)
    loss = None
    for mask, weight in masks_with_weights:
        logits = model.decode_train(feats, labels, mask)
        term = sequence_loss(logits, labels, lengths, model.dec_cfg) * weight
        loss = term if loss is None else loss + term
    return loss


def train_epoch(
    model: Recognizer,
    data: LabeledCrops,
    phase: str,
    cfg: TrainConfig,
    opt: Adam,
    rng: np.random.Generator,
    epoch: int = 0,
    last_checkpoint: str | None = None,
) -> EpochStats:
    """One optimization epoch over shuffled data.

    The permutation phase samples fresh masks per batch and averages the
    per-permutation losses (identical permutations are grouped and
    weighted); the ordered phase uses the fixed sequential mask. Frozen
    tensors carry no gradient and are not registered with the optimizer,
    so they are bitwise unchanged afterwards.
    """
    if phase not in (PLM, OSF):
        raise ParameterError(f"phase must be '{PLM}' or '{OSF}', got {phase!r}")
    if len(data) == 0:
        raise DataError("training dataset is empty")
    k = model.dec_cfg.num_permutations
    order = rng.permutation(len(data))
    total, seen = 0.0, 0
    for batch in _batches(len(data), cfg.batch_size, order):
        lens = data.lengths[batch]
        lmax = int(lens.max())
        labels = data.labels[batch, :lmax]
        if phase == PLM:
            mask_seed = int(rng.integers(0, 2**63 - 1))
            masks = make_permutation_masks(lmax, k, mask_seed)
            grouped = Counter(m.order for m in masks)
            by_order = {m.order: m for m in masks}
            masks_with_weights = [(by_order[o], c / k) for o, c in sorted(grouped.items())]
        else:
            masks_with_weights = [(make_sequential_mask(lmax), 1.0)]
        opt.zero_grad()
        with Graph() as g:
            loss = _batch_loss(model, data.images[batch], labels, lens, masks_with_weights)
        if not np.isfinite(loss.array).all():
            raise NumericError(
                f"{phase} loss non-finite at epoch {epoch}"
                + (f"; last good checkpoint: {last_checkpoint}" if last_checkpoint else "")
            )
        backward(g, np.ones_like(loss.array), output=loss)
        opt.step()
        total += loss.item() * len(batch)
        seen += len(batch)
    return EpochStats(phase, epoch, total / seen, seen)


def ordered_validation_loss(model: Recognizer, data: LabeledCrops, batch_size: int = 64) -> float:
    """Mean sequential-mask loss over a dataset (no gradients, no RNG use)."""
    if len(data) == 0:
        raise DataError("validation dataset is empty")
    total, seen = 0.0, 0
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        lens = data.lengths[sl]
        lmax = int(lens.max())
        labels = data.labels[sl, :lmax]
        feats, _ = model.encode(data.images[sl])
        logits = model.decode_train(feats, labels, make_sequential_mask(lmax))
        loss = sequence_loss(logits, labels, lens, model.dec_cfg)
        total += loss.item() * len(lens)
        seen += len(lens)
    return total / seen


def _make_checkpoint(model, cfg, phase, epoch, rng, opt, extra=None) -> Checkpoint:
    step, m, v = opt.state()
    return Checkpoint(
        phase=phase,
        epoch=epoch,
        enc_cfg=model.enc_cfg,
        dec_cfg=model.dec_cfg,
        train_cfg=cfg,
        params={n: p.array.copy() for n, p in model.params.items()},
        rng_state=rng_state(rng),
        optim_step=step,
        optim_m=m,
        optim_v=v,
        extra=extra or {},
    )


def run_schedule(
    model: Recognizer,
    train_data: LabeledCrops,
    cfg: TrainConfig,
    val_data: LabeledCrops | None = None,
    ckpt_dir=None,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Run plm_epochs of permutation training, then osf_epochs ordered.

    Requires a pretrained backbone already loaded into the model (it is
    frozen here). Writes "ckpt_plm.bin" at the phase boundary and
    "ckpt_final.bin" at the end when ``ckpt_dir`` is given. Passing one of
    those checkpoints as ``resume`` continues the schedule exactly as if it
    had never stopped (same parameters, optimizer moments, and RNG stream).
    """
    cfg.validate()
    freeze_partition(model)
    trainables = {n: p for n, p in model.params.items() if p.requires_grad}
    opt = Adam(trainables, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    rng = rng_for(cfg.seed, "schedule")
    done_plm = done_osf = 0
    if resume is not None:
        if resume.phase not in (PLM, OSF):
            raise ParameterError(
                f"can only resume from a schedule checkpoint, got phase {resume.phase!r}"
            )
        model.load_arrays(resume.params)
        opt.load_state(resume.optim_step, resume.optim_m, resume.optim_v)
        rng = rng_from_state(resume.rng_state)
        done_plm = cfg.plm_epochs
        if resume.phase == OSF:
            done_osf = min(resume.epoch, cfg.osf_epochs)

    stats: list[EpochStats] = []
    last_path = None

    def _val() -> float | None:
        if val_data is None or len(val_data) == 0:
            return None
        return ordered_validation_loss(model, val_data)

    for epoch in range(done_plm, cfg.plm_epochs):
        st = train_epoch(model, train_data, PLM, cfg, opt, rng, epoch, last_path)
        st.val_loss = _val()
        stats.append(st)
        log.info("plm epoch %d: loss %.4f val %s", epoch, st.mean_loss, st.val_loss)
    val_before_osf = _val()
    if ckpt_dir is not None:
        last_path = os.path.join(str(ckpt_dir), "ckpt_plm.bin")
        save_checkpoint(
            _make_checkpoint(model, cfg, PLM, cfg.plm_epochs, rng, opt,
                             {"ordered_val_loss": val_before_osf}),
            last_path,
        )
    for epoch in range(done_osf, cfg.osf_epochs):
        st = train_epoch(model, train_data, OSF, cfg, opt, rng, epoch, last_path)
        st.val_loss = _val()
        stats.append(st)
        log.info("osf epoch %d: loss %.4f val %s", epoch, st.mean_loss, st.val_loss)
    val_after_osf = _val()
    final = _make_checkpoint(
        model, cfg, OSF, cfg.osf_epochs, rng, opt,
        {"ordered_val_loss_before_osf": val_before_osf, "ordered_val_loss_after_osf": val_after_osf},
    )
    if ckpt_dir is not None:
        save_checkpoint(final, os.path.join(str(ckpt_dir), "ckpt_final.bin"))
    return final, stats
