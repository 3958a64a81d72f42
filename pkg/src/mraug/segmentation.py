"""Residual U-Net lesion segmentation with generalized Dice loss."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DivergenceError, EmptyAfterFilter, ModeError, ShapeError, UnlabeledRecord
from .imaging import (LESION, SLICE_SIZE, AugmentConfig, DatasetManifest, SliceRecord, Volume,
                      apply_augmentation, decode_label_image, extract_slices, restore_shape,
                      sample_augmentation)
from .nncore import (INIT_STD, AdamConfig, ParamSet, adam_step, conv2d, conv2d_transpose, conv_param, grads_for,
                     instance_norm, relu, resnet_block, resnet_block_params, save_checkpoint)
from .translation import TranslationResult, params_digest, tconv_param, translate_images, write_history

LESION_CHANNEL = 0  # channel 0 is lesion, channel 1 everything else
GDL_EPS = 1e-6


def unet_params(base: int = 16, depth: int = 5, seed: int = 0, dtype=torch.float32, init: str = "he") -> ParamSet:
    g = torch.Generator().manual_seed(seed)
    p = {}
    conv_param(p, "stem", base, 1, 3, g, dtype)
    ch = base
    for i in range(depth):
        resnet_block_params(p, f"enc{i}.", ch, g, dtype)
        conv_param(p, f"down{i}", ch * 2, ch, 3, g, dtype)
        ch *= 2
    resnet_block_params(p, "bottleneck.", ch, g, dtype)
    for i in reversed(range(depth)):
        tconv_param(p, f"up{i}", ch, ch // 2, 4, g, dtype)
        ch //= 2
        conv_param(p, f"fuse{i}", ch, ch * 2, 3, g, dtype)
    conv_param(p, "head", 2, ch, 1, g, dtype)
    if init == "he":
        for name, t in p.items():
            if name.endswith(".w"):
                fan_in = t.shape[1] * t.shape[2] * t.shape[3]
                if name.startswith("up"):
                    fan_in = t.shape[0] * t.shape[2] * t.shape[3] // 4
                p[name] = t * (math.sqrt(2.0 / fan_in) / INIT_STD)
    return ParamSet(p)


def unet_depth(p) -> int:
    return sum(1 for k in p if k.startswith("down") and k.endswith(".w"))


def unet_logits(p, x: torch.Tensor) -> torch.Tensor:
    p = p.params if isinstance(p, ParamSet) else p
    depth = unet_depth(p)
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"U-Net expects (n, 1, H, W), got {tuple(x.shape)}", dim="input")
    if x.shape[2] % 2 ** depth or x.shape[3] % 2 ** depth:
        raise ShapeError(f"spatial size {tuple(x.shape[2:])} is not divisible by {2 ** depth}", dim="spatial")
    h = relu(instance_norm(conv2d(x * 2.0 - 1.0, p["stem.w"], padding=1, bias=p["stem.b"])))
    skips = []
    for i in range(depth):
        h = resnet_block(h, p, f"enc{i}.")
        skips.append(h)
        h = relu(instance_norm(conv2d(h, p[f"down{i}.w"], stride=2, padding=1, bias=p[f"down{i}.b"])))
    h = resnet_block(h, p, "bottleneck.")
    for i in reversed(range(depth)):
        h = relu(instance_norm(conv2d_transpose(h, p[f"up{i}.w"], stride=2, padding=1, bias=p[f"up{i}.b"])))
        h = torch.cat([h, skips[i]], dim=1)
        h = relu(instance_norm(conv2d(h, p[f"fuse{i}.w"], padding=1, bias=p[f"fuse{i}.b"])))
    return conv2d(h, p["head.w"], bias=p["head.b"])


def unet_forward(p, x: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Per-pixel (lesion, non-lesion) probabilities for an (n, 1, 256, 256) batch."""
    if strict and tuple(x.shape[-2:]) != (SLICE_SIZE, SLICE_SIZE):
        raise ShapeError(f"U-Net expects {SLICE_SIZE}x{SLICE_SIZE} rasters, got {tuple(x.shape[-2:])}",
                         dim="spatial")
    return torch.softmax(unet_logits(p, x), dim=1)


def generalized_dice_loss(pred: torch.Tensor, target: torch.Tensor, eps: float = GDL_EPS) -> torch.Tensor:
    """Two-class generalized Dice loss with squared inverse-volume class weights.

    ``pred`` holds (n, 2, H, W) probabilities with the lesion in channel 0;
    ``target`` is the binary lesion raster (n, H, W). Sums run over the batch.
    """
    if pred.dim() != 4 or pred.shape[1] != 2:
        raise ShapeError(f"expected (n, 2, H, W) probabilities, got {tuple(pred.shape)}", dim="channels")
    if target.shape != pred.shape[:1] + pred.shape[2:]:
        raise ShapeError(f"target {tuple(target.shape)} does not match prediction {tuple(pred.shape)}",
                         dim="spatial")
    t = target.to(pred.dtype)
    r = torch.stack([t, 1.0 - t], dim=1)
    dims = (0, 2, 3)
    w = 1.0 / (r.sum(dim=dims) + eps) ** 2
    num = (w * (r * pred).sum(dim=dims)).sum()
    den = (w * (r + pred).sum(dim=dims)).sum()
    return 1.0 - 2.0 * num / den


@dataclass
class SegTrainConfig:
    epochs: int = 50
    batch: int = 8
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    base: int = 16
    depth: int = 5
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**{k: tuple(v) if isinstance(v, list) else v
                                            for k, v in self.augment.items()})
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")
        if SLICE_SIZE % 2 ** self.depth:
            raise ValueError(f"depth {self.depth} does not divide {SLICE_SIZE}")

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2)


@dataclass
class SegmentationResult:
    params: ParamSet
    history: list
    consumed: Counter
    meta: dict = field(default_factory=dict)

    @property
    def consumed_domains(self) -> set:
        return set(self.consumed)


def _records(data) -> list[SliceRecord]:
    return list(data.records() if isinstance(data, DatasetManifest) else data)


def train_segmentation(cfg: SegTrainConfig, train, out_dir=None, meta: dict | None = None,
                       log: Callable | None = None) -> SegmentationResult:
    """Supervised U-Net training on lesion labels; every consumed record is audited by domain."""
    records = _records(train)
    if not records:
        raise ValueError("training set is empty")
    labels = []
    for r in records:
        if not r.has_label:
            raise UnlabeledRecord(f"{r.domain}/{r.subject}/{r.slice_index} has no label")
        labels.append(r.training_label() == LESION)
    images = np.stack([r.image for r in records]).astype(np.float32)
    labels = np.stack(labels)

    rng = np.random.default_rng(cfg.seed)
    params = unet_params(cfg.base, cfg.depth, cfg.seed)
    adam = cfg.adam()
    consumed = Counter()
    history = []
    n_batches = math.ceil(len(records) / cfg.batch)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(records))
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            xs, ys = [], []
            for i in idx:
                img, lab = images[i], labels[i]
                if cfg.augment is not None:
                    img, lab = apply_augmentation(img, lab.astype(np.uint8),
                                                  *sample_augmentation(cfg.augment, rng))
                xs.append(img)
                ys.append(lab.astype(bool))
                consumed[records[i].domain] += 1
            x = torch.from_numpy(np.stack(xs))[:, None]
            y = torch.from_numpy(np.stack(ys))
            tp = params.trainable()
            loss = generalized_dice_loss(unet_forward(tp, x), y)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite segmentation loss at epoch {epoch}, batch {b}",
                                      diagnostics={"epoch": epoch, "batch": b, "loss": value})
            params = adam_step(tp, grads_for(loss, tp), adam)
            total += value * len(idx)
        history.append({"epoch": epoch, "loss": total / len(records)})
        if log:
            log(f"segment epoch {epoch}/{cfg.epochs} loss={history[-1]['loss']:.4f}")
    meta = {"kind": "unet", "config": asdict(cfg), "domains": sorted(consumed), **(meta or {})}
    result = SegmentationResult(params, history, consumed, meta)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "final.dsfg", {"unet": params}, meta)
        write_history(out_dir / "history.csv", history)
    return result


@torch.no_grad()
def predict_slices(p, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Binary lesion rasters (argmax over the two channels)."""
    images = np.asarray(images, dtype=np.float32)
    out = []
    for i in range(0, len(images), batch):
        probs = unet_forward(p, torch.from_numpy(images[i:i + batch])[:, None])
        out.append((probs[:, LESION_CHANNEL] > probs[:, 1 - LESION_CHANNEL]).numpy())
    return np.concatenate(out) if out else np.zeros((0, SLICE_SIZE, SLICE_SIZE), bool)


def predict_volume(p, v: Volume, fraction_threshold: float = 0.10) -> np.ndarray:
    """Lesion mask aligned with ``v``; slices dropped by the brain-coverage filter stay empty."""
    brain = v.brain_mask if v.brain_mask is not None else v.voxels > 0
    probe = Volume(v.voxels, v.spacing, brain, None, dict(v.meta))
    mask = np.zeros(v.shape, bool)
    try:
        slices = extract_slices(probe, fraction_threshold)
    except EmptyAfterFilter:
        return mask
    pred = predict_slices(p, np.stack([s.image for s in slices]))
    for s, m in zip(slices, pred):
        mask[:, :, s.slice_index] = restore_shape(s, m.astype(np.uint8)).astype(bool)
    return mask


def unsupervised_segment(model: TranslationResult, images) -> np.ndarray:
    """Quantize the image-to-label generator of a Label2Image pair into tri-level labels."""
    if model.meta.get("mode") != "label2image":
        raise ModeError(f"unsupervised segmentation needs a label2image model, got {model.meta.get('mode')!r}")
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 2
    out = translate_images(model.g_t2s, images[None] if single else images)
    labels = np.stack([decode_label_image(o) for o in out])
    return labels[0] if single else labels


def train_bounds(cfg: SegTrainConfig, source, target_train, target_eval, log=None):
    """Lower bound on source only and upper bound on target only; returns ``(lower, upper)``."""
    src, tgt, ev = _records(source), _records(target_train), _records(target_eval)
    held = {(r.domain, r.subject) for r in ev}
    overlap = held & {(r.domain, r.subject) for r in tgt}
    if overlap:
        raise ValueError(f"target training and evaluation subjects overlap: {sorted(overlap)[:3]}")
    lower = train_segmentation(cfg, src, meta={"bound": "lower"}, log=log)
    upper = train_segmentation(cfg, tgt, meta={"bound": "upper"}, log=log)
    assert lower.consumed_domains <= {r.domain for r in src}
    assert upper.consumed_domains <= {r.domain for r in tgt}
    return lower, upper


def model_id(result: SegmentationResult) -> str:
    return params_digest(result.params)
