"""Masked-modelling training loop: AdamW with decoupled decay, linear
warmup into cosine annealing, global-norm gradient clipping, and a
binary checkpoint container that round-trips bitwise.

Randomness is derived per (seed, epoch) so a resumed run replays the
exact stream an uninterrupted run would have used.
"""

from __future__ import annotations

import json
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NumericError, TrainingError
from .imxp import read_imxp, read_manifest
from .markers import MarkerSet, MarkerVocabulary
from .masking import (MaskConfig, apply_mask, build_mask_plan,
                      panel_grouped_batches, sample_target_size)
from .network import Model, NetworkConfig
from .objective import ClampSpec, hetero_nll
from .preprocess import augment_crop, extract_subimages

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CKPT_MAGIC = b"IMVC"
CKPT_VERSION = 1


def rng_for(seed, *key):
    """Independent generator for a (seed, key...) coordinate."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    peak_lr: float = 5e-4
    final_lr: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    seed: int = 0
    subimage: int = 256
    masked_loss_only: bool = False
    mask: MaskConfig = field(default_factory=MaskConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig.tiny)

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup cannot exceed the total epoch count")
        if min(self.peak_lr, self.final_lr) <= 0 or self.clip_norm <= 0:
            raise ValueError("rates and clip norm must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("epochs and batch size must be positive")

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "epochs", "batch_size", "peak_lr", "final_lr", "warmup_epochs",
            "weight_decay", "clip_norm", "seed", "subimage", "masked_loss_only")}
        d["mask"] = self.mask.to_dict()
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mask"] = MaskConfig.from_dict(d.get("mask", {}))
        net = d.get("net", "tiny")
        if isinstance(net, str):
            d["net"] = NetworkConfig.tiny() if net == "tiny" else NetworkConfig.base()
        else:
            d["net"] = NetworkConfig.from_dict(net)
        return cls(**d)


def lr_at(step, steps_per_epoch, cfg):
    """Learning rate for a global step: linear 0 -> peak over the warmup
    steps, then cosine decay hitting final_lr exactly on the last step."""
    if step < 0:
        raise ValueError("step must be non-negative")
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.peak_lr * step / warm
    denom = max(1, total - 1 - warm)
    t = min(1.0, (step - warm) / denom)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamMoments:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def clip_gradients(grads, max_norm):
    """Scale all gradients in place so the global L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = 0.0
    for g in grads.values():
        total += float(np.square(g, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads


def adamw_step(params, grads, moments, lr, cfg):
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied directly to the weights (not through the gradients);
    moments are bias-corrected.  Non-finite gradients refuse the step.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}: step refused")
    moments.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** moments.t
    bc2 = 1.0 - ADAM_BETA2 ** moments.t
    for name, p in params.items():
        g = grads[name]
        m = moments.m[name]
        v = moments.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * update.astype(p.data.dtype, copy=False)
    return params, moments


# ---------------------------------------------------------------------
# dataset access
# ---------------------------------------------------------------------

@dataclass
class ImageRecord:
    name: str
    marker_names: list
    panel: MarkerSet
    data: np.ndarray  # [C,H,W] float32


class CohortData:
    """A directory of IMXP images plus their panel manifest."""

    def __init__(self, vocab, panels, images):
        self.vocab = vocab
        self.panels = panels
        self.images = images

    @classmethod
    def load(cls, root):
        vocab, panels = read_manifest(os.path.join(root, "manifest.txt"))
        img_dir = os.path.join(root, "images")
        if not os.path.isdir(img_dir):
            img_dir = root
        images = []
        for fn in sorted(os.listdir(img_dir)):
            if not fn.endswith(".imxp"):
                continue
            data, names = read_imxp(os.path.join(img_dir, fn))
            images.append(ImageRecord(
                name=fn[:-5], marker_names=names,
                panel=vocab.set_of(names), data=data))
        if not images:
            raise FormatError(f"no .imxp images under {root}")
        return cls(vocab, panels, images)


# ---------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    tensors: "OrderedDict[str, np.ndarray]"

    @property
    def epoch(self):
        return self.config["epoch"]


def save_checkpoint(ckpt, path):
    blob = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, arr in ckpt.tensors.items():
            raw = name.encode("utf-8")
            arr32 = np.asarray(arr, dtype="<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr32.ndim))
            fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
            fh.write(arr32.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated {what} at byte {off}")
        out = blob[off:off + n]
        off += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic at byte 0")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    clen = struct.unpack("<I", take(4, "config length"))[0]
    config = json.loads(take(clen, "config text").decode("utf-8"))
    tensors = OrderedDict()
    while off < len(blob):
        nlen = struct.unpack("<H", take(2, "record name length"))[0]
        name = take(nlen, "record name").decode("utf-8")
        rank = struct.unpack("<B", take(1, "record rank"))[0]
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "record dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return Checkpoint(config=config, tensors=tensors)


def checkpoint_from_state(model, moments, cfg, epoch):
    tensors = OrderedDict()
    for name, p in model.parameters().items():
        tensors[f"param.{name}"] = p.data
    for name in model.parameters():
        tensors[f"adam_m.{name}"] = moments.m[name]
    for name in model.parameters():
        tensors[f"adam_v.{name}"] = moments.v[name]
    config = {
        "train": cfg.to_dict(),
        "vocab": model.vocab.names,
        "epoch": epoch,
        "adam_t": moments.t,
        "format": "hyperstain-checkpoint",
    }
    return Checkpoint(config=config, tensors=tensors)


def restore_state(ckpt):
    """Rebuild (model, moments, cfg) from a checkpoint."""
    cfg = TrainConfig.from_dict(ckpt.config["train"])
    vocab = MarkerVocabulary(ckpt.config["vocab"])
    model = Model(vocab, cfg.net, rng=rng_for(cfg.seed, 0))
    moments = AdamMoments.zeros(model.parameters())
    moments.t = ckpt.config["adam_t"]
    for name, p in model.parameters().items():
        key = f"param.{name}"
        if key not in ckpt.tensors:
            raise FormatError(f"checkpoint missing tensor {key}")
        if ckpt.tensors[key].shape != p.data.shape:
            raise FormatError(f"checkpoint tensor {key} has wrong shape")
        p.data = ckpt.tensors[key].astype(p.data.dtype)
        moments.m[name] = ckpt.tensors[f"adam_m.{name}"].astype(p.data.dtype)
        moments.v[name] = ckpt.tensors[f"adam_v.{name}"].astype(p.data.dtype)
    return model, moments, cfg


# ---------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    moments: AdamMoments
    cfg: TrainConfig
    epoch: int
    history: list

    def to_checkpoint(self):
        return checkpoint_from_state(self.model, self.moments, self.cfg, self.epoch)


@dataclass
class _Sample:
    panel: MarkerSet
    tile: np.ndarray


def _build_samples(cfg, dataset):
    samples = []
    for rec in dataset.images:
        h, w = rec.data.shape[1:]
        size = min(cfg.subimage, h, w)
        size = max(size, cfg.net.crop_size)
        for tile in extract_subimages(rec.data, size):
            samples.append(_Sample(panel=rec.panel, tile=tile))
    if not samples:
        raise ValueError("dataset yields no training tiles")
    return samples


def _target_weight(plan, tgt_positions_of_in):
    """0/1 weight over target pixels: dropped channels count fully,
    input channels count only where spatially masked."""
    k, h, w = len(plan.tgt_set), plan.patch_mask.shape[1], plan.patch_mask.shape[2]
    weight = np.ones((k, h, w), dtype=np.float32)
    for i, pos in enumerate(tgt_positions_of_in):
        weight[pos] = plan.patch_mask[i]
    return weight


def train(cfg, dataset, resume_from=None, log=None):
    """Run the masked-modelling loop and return the trained state.

    ``resume_from``: a Checkpoint (or path) whose epoch counter marks
    where to continue; the result at epoch N is bitwise identical to an
    uninterrupted run reaching the same epoch with the same seed.
    """
    if isinstance(resume_from, str):
        resume_from = load_checkpoint(resume_from)
    if resume_from is not None:
        model, moments, saved_cfg = restore_state(resume_from)
        if saved_cfg.net != cfg.net or model.vocab != dataset.vocab:
            raise ValueError("checkpoint is incompatible with this run")
        start_epoch = resume_from.epoch
    else:
        model = Model(dataset.vocab, cfg.net, rng=rng_for(cfg.seed, 0))
        moments = AdamMoments.zeros(model.parameters())
        start_epoch = 0

    samples = _build_samples(cfg, dataset)
    group_sizes = {}
    for s in samples:
        group_sizes[s.panel] = group_sizes.get(s.panel, 0) + 1
    steps_per_epoch = sum(math.ceil(n / cfg.batch_size) for n in group_sizes.values())
    clamp = ClampSpec()
    history = []
    crop = cfg.net.crop_size

    for epoch in range(start_epoch, cfg.epochs):
        rng = rng_for(cfg.seed, 1, epoch)
        batches = panel_grouped_batches(samples, cfg.batch_size, rng,
                                        panel_key=lambda s: s.panel)
        step0 = epoch * steps_per_epoch
        nll_sum = mae_sum = mse_sum = 0.0
        pix = 0
        for bi, batch in enumerate(batches):
            panel = batch[0].panel
            k = sample_target_size(len(panel), cfg.mask.alpha, rng)
            items = []
            targets = []
            weights = []
            for s in batch:
                tile = augment_crop(s.tile, crop, rng)
                plan = build_mask_plan(panel, cfg.mask, crop, crop, rng, k=k)
                in_pos = plan.in_set.positions_in(panel)
                tgt_pos = plan.tgt_set.positions_in(panel)
                x_in = apply_mask(tile[in_pos], plan)
                items.append((x_in, plan.in_set, plan.tgt_set))
                targets.append(tile[tgt_pos])
                if cfg.masked_loss_only:
                    weights.append(_target_weight(
                        plan, plan.in_set.positions_in(plan.tgt_set)))
                else:
                    weights.append(None)
            try:
                preds = model.forward_masked_batch(items)
                loss = None
                for tgt, pred, wgt in zip(targets, preds, weights):
                    term = hetero_nll(tgt, pred, clamp, weight=wgt)
                    loss = term if loss is None else loss + term
                loss = loss * (1.0 / len(batch))
            except NumericError as exc:
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {bi}: {exc}") from exc
            loss.backward()
            grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                     for name, p in model.parameters().items()}
            clip_gradients(grads, cfg.clip_norm)
            lr = lr_at(step0 + bi, steps_per_epoch, cfg)
            adamw_step(model.parameters(), grads, moments, lr, cfg)
            model.zero_grads()

            nll_sum += float(loss.data[0]) * len(batch)
            for tgt, pred in zip(targets, preds):
                err = pred.mean.data - tgt
                mae_sum += float(np.abs(err).sum())
                mse_sum += float((err * err).sum())
                pix += err.size
        entry = {
            "epoch": epoch + 1,
            "nll": nll_sum / len(samples),
            "mae": mae_sum / pix,
            "mse": mse_sum / pix,
            "lr": lr_at(step0 + len(batches) - 1, steps_per_epoch, cfg),
        }
        history.append(entry)
        if log is not None:
            log(entry)

    return TrainResult(model=model, moments=moments, cfg=cfg,
                       epoch=cfg.epochs, history=history)
