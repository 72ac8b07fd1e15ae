"""Backbone stub -> RFAFPN -> CAA -> F3 -> anchor-free head, plus training.

The head predicts, for every cell of the finest (stride-4) grid, a vector
``[objectness, class_0 .. class_{C-1}, tx, ty, tw, th]``. The box centre
is ``(col + sigmoid(tx), row + sigmoid(ty)) * stride`` and the size is
``exp(tw|th) * stride``.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import acmix, caa, kernels, metrics, rfafpn
from .data import AnnotatedImage
from .metrics import Detection, GroundTruth
from .tensor import (
    RandomSource,
    ShapeError,
    Tensor,
    add,
    concat,
    conv2d,
    he_normal,
    index,
    no_grad,
    parameter,
    relu,
    scale,
    sigmoid,
    tlog,
    tmean,
)

logger = logging.getLogger(__name__)

TOGGLES = ("caa", "rfaconv", "bifpn", "acmix", "self_attention")


@dataclass
class ModelConfig:
    input_size: int = 64
    stem_channels: int = 8
    stage_channels: tuple = (16, 32, 32)
    width: int = 16
    levels: int = 3
    num_classes: int = 2
    learning_rate: float = 0.001
    min_learning_rate: float = 1e-5
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    caa: bool = True
    rfaconv: bool = True
    bifpn: bool = True
    acmix: bool = True
    self_attention: bool = True
    adv_weight: float = 0.1
    disc_learning_rate: float = 0.001
    obj_pos_weight: float = 1.0
    fusion_floor: float = 1.0
    acmix_multiplier: int = 2
    acmix_strength: float = 0.5
    acmix_beta: float = 1.0
    geometric_ops: tuple = ("hflip", "vflip")
    conf_threshold: float = 0.25
    nms_iou: float = 0.5
    eval_conf_threshold: float = 0.001
    max_detections: int = 100

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.geometric_ops = tuple(self.geometric_ops)
        if self.levels != len(self.stage_channels):
            raise ValueError("one stage per pyramid level")
        if self.input_size % (2 ** (self.levels + 1)):
            raise ValueError(f"input size must be divisible by {2 ** (self.levels + 1)}")
        if self.num_classes < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid class count, batch size or epoch count")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be nonnegative")

    @property
    def stride(self) -> int:
        return 4

    @property
    def grid(self) -> int:
        return self.input_size // self.stride

    @property
    def grid_sizes(self) -> tuple:
        return tuple(self.input_size // (4 * 2 ** i) for i in range(self.levels))

    @property
    def head_channels(self) -> int:
        return 5 + self.num_classes

    def toggles(self) -> dict:
        return {t: getattr(self, t) for t in TOGGLES}

    def with_toggles(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def full_scale(cls, **kw) -> "ModelConfig":
        """Optimiser settings reported for the full-scale runs."""
        return cls(batch_size=50, epochs=100, learning_rate=0.001, **kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# model


class Model:
    """All parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = RandomSource(cfg.seed)
        p: dict = {}
        p["stem"] = he_normal(rng, (cfg.stem_channels, 3, 3, 3), 27)
        c_in = cfg.stem_channels
        for i, c in enumerate(cfg.stage_channels):
            p[f"stage{i}"] = he_normal(rng, (c, c_in, 3, 3), c_in * 9)
            p[f"lateral{i}"] = he_normal(rng, (cfg.width, c, 1, 1), c)
            c_in = c
        self.rfa = [rfafpn.RFAConvParams.init(cfg.width, rng, prefix=f"rfa{i}") for i in range(cfg.levels)]
        for i, r in enumerate(self.rfa):
            for t in r.parameters():
                p[t.name] = t
        self.bifpn = rfafpn.BiFPNParams.init(cfg.width, cfg.levels, rng)
        for t in self.bifpn.parameters():
            p[t.name] = t
        self.caa = caa.CaaWeights.init(cfg.width, None, rng)
        for t in self.caa.parameters():
            p[t.name] = t
        p["head.conv"] = he_normal(rng, (cfg.width, cfg.width, 3, 3), cfg.width * 9)
        p["head.out"] = Tensor(rng.normal((cfg.head_channels, cfg.width, 1, 1), scale=0.01), requires_grad=True)
        bias = np.zeros(cfg.head_channels)
        bias[0] = math.log(0.01 / 0.99)
        p["head.bias"] = parameter(bias)
        self.disc = rfafpn.Discriminator.init(cfg.width, rng)
        for name, t in zip(("disc.conv1", "disc.conv2", "disc.fc_w", "disc.fc_b"), self.disc.parameters()):
            t.name = name
            p[name] = t
        for name, t in p.items():
            t.name = name
        self.params = p

    def generator_parameters(self) -> list:
        return [t for n, t in self.params.items() if not n.startswith("disc.") and self._active(n)]

    def discriminator_parameters(self) -> list:
        return self.disc.parameters()

    def _active(self, name: str) -> bool:
        c = self.cfg
        if name.startswith("rfa"):
            return c.rfaconv
        if name.startswith("bifpn"):
            return c.bifpn
        if name.startswith("caa"):
            return c.caa
        return True

    def state(self) -> dict:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state(self, state: dict) -> None:
        for n, arr in state.items():
            if n not in self.params:
                raise KeyError(f"unknown parameter {n!r}")
            if self.params[n].shape != arr.shape:
                raise ShapeError(f"{n}: checkpoint shape {arr.shape} vs model {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    # -- forward pieces ---------------------------------------------------
    def backbone(self, x: Tensor) -> rfafpn.FeaturePyramid:
        p = self.params
        h = relu(conv2d(x, p["stem"], 2, (1, 0, 1, 0)))
        levels = []
        for i in range(self.cfg.levels):
            h = relu(conv2d(h, p[f"stage{i}"], 2, (1, 0, 1, 0)))
            levels.append(rfafpn.FeatureMap(conv2d(h, p[f"lateral{i}"], 1, 0), "raw"))
        return rfafpn.FeaturePyramid(levels)

    def encode(self, lateral: rfafpn.FeaturePyramid) -> rfafpn.FeaturePyramid:
        if not self.cfg.rfaconv:
            return lateral.with_role("rfa")
        out = []
        for lv, params in zip(lateral.levels, self.rfa):
            r = rfafpn.rfaconv_forward(lv, params)
            out.append(rfafpn.FeatureMap(add(lv.data, relu(r.data)), "rfa"))
        return rfafpn.FeaturePyramid(out)

    def decode(self, enc: rfafpn.FeaturePyramid) -> rfafpn.FeaturePyramid:
        if not self.cfg.bifpn:
            return enc.with_role("f1_gan")
        return rfafpn.bifpn_fuse(enc, self.bifpn)

    def head(self, f3: Tensor) -> Tensor:
        p = self.params
        if f3.shape[-3] != self.cfg.width:
            raise ShapeError(f"head expects {self.cfg.width} channels, got {f3.shape[-3]}")
        h = relu(conv2d(f3, p["head.conv"], 1, 1))
        return conv2d(h, p["head.out"], 1, 0, bias=p["head.bias"])

    def forward(self, x: Tensor) -> dict:
        """Returns raw head output plus the intermediate maps used by the losses."""
        lateral = self.backbone(x)
        enc = self.encode(lateral)
        f1 = self.decode(enc)
        f1_fine = f1[0].data
        if self.cfg.caa:
            f2 = caa.caa_forward(f1_fine, self.caa, self.cfg.self_attention)
            f3 = rfafpn.fuse_f3(f1_fine, f2).data
        else:
            f3 = f1_fine
        return {"raw": self.head(f3), "f1": f1_fine, "real": lateral[0].data}


def backbone_forward(img, cfg: ModelConfig, model: Model | None = None) -> rfafpn.FeaturePyramid:
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.shape[-2:] != (cfg.input_size, cfg.input_size):
        raise ShapeError(f"expected {cfg.input_size}x{cfg.input_size} input, got {x.shape}")
    return (model or Model(cfg)).backbone(x)


def head_forward(f3, cfg: ModelConfig, model: Model | None = None) -> Tensor:
    f3 = f3.data if isinstance(f3, rfafpn.FeatureMap) else f3
    return (model or Model(cfg)).head(f3 if isinstance(f3, Tensor) else Tensor(f3))


def images_to_tensor(images: Sequence[AnnotatedImage]) -> Tensor:
    arr = np.stack([img.pixels for img in images]).astype(np.float64)
    arr = (arr / 255.0 - 0.5) / 0.25
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


# ---------------------------------------------------------------------------
# targets, decoding, NMS


def _logit(p: float) -> float:
    p = min(max(p, 1e-12), 1 - 1e-12)
    return math.log(p / (1 - p))


def encode_box(label, cfg: ModelConfig) -> tuple:
    """``(row, col, raw_box_vector)`` such that decoding reproduces ``label``."""
    G = cfg.grid
    gx, gy = label.cx * G, label.cy * G
    col, row = min(int(gx), G - 1), min(int(gy), G - 1)
    raw = np.array(
        [_logit(gx - col), _logit(gy - row), math.log(label.w * G), math.log(label.h * G)]
    )
    return row, col, raw


@dataclass
class Targets:
    obj: np.ndarray  # B x G x G
    cls: np.ndarray  # P x C one-hot for positive cells
    pos: tuple  # (b, row, col) index arrays
    cell_offsets: np.ndarray  # P x 4  (col, row, 0, 0)
    box_targets: np.ndarray  # P x 4  (cx, cy, log w, log h) in grid units


def build_targets(batch_labels: Sequence[list], cfg: ModelConfig) -> Targets:
    G = cfg.grid
    obj = np.zeros((len(batch_labels), G, G))
    cells: dict = {}
    for b, labels in enumerate(batch_labels):
        for r in labels:
            row, col, _ = encode_box(r, cfg)
            cells[(b, row, col)] = r  # later objects win a shared cell
    keys = sorted(cells)
    bs = np.array([k[0] for k in keys], dtype=np.int64)
    rows = np.array([k[1] for k in keys], dtype=np.int64)
    cols = np.array([k[2] for k in keys], dtype=np.int64)
    obj[bs, rows, cols] = 1.0
    cls = np.zeros((len(keys), cfg.num_classes))
    box_t = np.zeros((len(keys), 4))
    for n, k in enumerate(keys):
        r = cells[k]
        cls[n, r.class_id] = 1.0
        box_t[n] = (r.cx * G, r.cy * G, math.log(r.w * G), math.log(r.h * G))
    offsets = np.stack([cols, rows, np.zeros_like(cols), np.zeros_like(cols)], axis=1).astype(np.float64)
    return Targets(obj, cls, (bs, rows, cols), offsets, box_t)


def decode_predictions(raw, conf_threshold: float, cfg: ModelConfig, image_id=0) -> list:
    """Detections for one image's ``(5 + C) x G x G`` head output."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in [0, 1]")
    r = raw.data if isinstance(raw, Tensor) else np.asarray(raw, dtype=np.float64)
    C = cfg.num_classes
    G = r.shape[-1]
    stride = cfg.input_size / G
    sig = lambda v: 1.0 / (1.0 + np.exp(-np.clip(v, -60, 60)))
    obj = sig(r[0])
    cls_p = sig(r[1:1 + C])
    best = np.argmax(cls_p, axis=0)
    score = obj * np.max(cls_p, axis=0)
    rows, cols = np.nonzero(score >= conf_threshold)
    if rows.size == 0:
        return []
    tx, ty, tw, th = (r[1 + C + i][rows, cols] for i in range(4))
    cx = (cols + sig(tx)) * stride
    cy = (rows + sig(ty)) * stride
    w = np.exp(np.clip(tw, -10, 10)) * stride
    h = np.exp(np.clip(th, -10, 10)) * stride
    S = float(cfg.input_size)
    x1, y1 = np.clip(cx - w / 2, 0, S), np.clip(cy - h / 2, 0, S)
    x2, y2 = np.clip(cx + w / 2, 0, S), np.clip(cy + h / 2, 0, S)
    dets = []
    for i in range(rows.size):
        if x2[i] > x1[i] and y2[i] > y1[i]:
            dets.append(
                Detection(int(best[rows[i], cols[i]]), float(score[rows[i], cols[i]]), (float(x1[i]), float(y1[i]), float(x2[i]), float(y2[i])), image_id)
            )
    return dets


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list:
    """Greedy per-class suppression; ties resolved in favour of the earlier detection."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not dets:
        return []
    boxes = np.array([d.box for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets], dtype=np.int64)
    keep = kernels.nms(boxes, scores, classes, iou_threshold)
    return [dets[i] for i in keep]


def predict(model: Model, images: Sequence[AnnotatedImage], conf_threshold: float | None = None, batch_size: int = 25) -> list:
    """Post-NMS detections per image (list of lists)."""
    cfg = model.cfg
    thr = cfg.eval_conf_threshold if conf_threshold is None else conf_threshold
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            chunk = images[s:s + batch_size]
            raw = model.forward(images_to_tensor(chunk))["raw"].data
            for k, r in enumerate(raw):
                dets = decode_predictions(r, thr, cfg, s + k)
                dets.sort(key=lambda d: -d.score)
                dets = nms(dets[: 4 * cfg.max_detections], cfg.nms_iou)[: cfg.max_detections]
                out.append(dets)
    return out


def ground_truths(images: Sequence[AnnotatedImage]) -> list:
    gts = []
    for k, img in enumerate(images):
        for r in img.labels:
            gts.append(GroundTruth(r.class_id, r.to_pixels(img.width, img.height), k))
    return gts


def evaluate_model(model: Model, images: Sequence[AnnotatedImage]) -> metrics.EvalReport:
    dets = [d for per in predict(model, images) for d in per]
    rep = metrics.evaluate(dets, ground_truths(images), model.cfg.num_classes, 0.5, model.cfg.conf_threshold)
    rep.flops = count_flops(model.cfg).total
    return rep


# ---------------------------------------------------------------------------
# losses and training


def detection_losses(model: Model, out: dict, targets: Targets) -> dict:
    """Coordinate, confidence and sparsity terms for one batch.

    ``L_x`` and ``L_c`` are summed over cells and averaged over images.
    """
    cfg = model.cfg
    raw = out["raw"]
    B = raw.shape[0]
    C = cfg.num_classes
    obj_p = sigmoid(index(raw, (slice(None), 0)))
    weights = np.where(targets.obj > 0, cfg.obj_pos_weight, 1.0)
    # per-image sums, like the coordinate term
    l_obj = scale(rfafpn.bce(obj_p, targets.obj, weights), weights.sum() / B)
    bs, rows, cols = targets.pos
    P = bs.size
    if P:
        pos = index(raw, (bs, slice(None), rows, cols))  # P x (5 + C)
        cls_p = sigmoid(index(pos, (slice(None), slice(1, 1 + C))))
        l_cls = scale(rfafpn.bce(cls_p, targets.cls), P * C / B)
        off = sigmoid(index(pos, (slice(None), slice(1 + C, 3 + C))))
        size = index(pos, (slice(None), slice(3 + C, 5 + C)))
        K = concat([off, size], axis=1)
        assign = rfafpn.CellAssignment(np.eye(P), K, targets.cell_offsets, targets.box_targets)
        l_x = scale(rfafpn.coordinate_loss(assign), 1.0 / B)
    else:
        l_cls = Tensor(0.0)
        l_x = Tensor(0.0)
    l_c = add(l_obj, l_cls)
    if cfg.bifpn:
        l_l1 = rfafpn.sparsity_loss(rfafpn.BasisWeights(model.bifpn.raw_fusion_weights()))
    else:
        l_l1 = Tensor(0.0)
    return {"L_x": l_x, "L_c": l_c, "L_L1": l_l1}


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        if lr == 0.0:
            return
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - lr * v


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if lr_max == 0.0:
        return 0.0
    if total <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, batch: int, losses: dict):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {losses}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)
    seconds: float = 0.0


def epoch_samples(train_set: Sequence[AnnotatedImage], cfg: ModelConfig, epoch: int, table=None) -> list:
    """Training images for one epoch (ACmix + geometric augmentation applied)."""
    rng = RandomSource(cfg.seed).derive(1000 + epoch)
    samples = list(train_set)
    if cfg.acmix and table is not None:
        samples = acmix.build_augmented_set(
            samples,
            table,
            acmix.AcmixConfig(cfg.acmix_multiplier, cfg.acmix_strength, cfg.acmix_beta),
            rng.derive(1),
        )
    if cfg.geometric_ops:
        geo = rng.derive(2)
        samples = [acmix.geometric_augment(s, geo, cfg.geometric_ops) for s in samples]
    order = rng.derive(3).permutation(len(samples))
    return [samples[i] for i in order]


def train(
    train_set: Sequence[AnnotatedImage],
    cfg: ModelConfig,
    val_set: Sequence[AnnotatedImage] | None = None,
    eval_every: int = 0,
    steps: int | None = None,
    on_batch=None,
) -> TrainResult:
    """Mini-batch SGD with momentum and cosine decay; D and G alternate per batch.

    ``steps`` caps the total number of optimiser steps (used by the
    overfitting check); ``on_batch(step, losses)`` is called after each step.
    """
    if not train_set:
        raise ValueError("empty training set")
    model = Model(cfg)
    gen_opt = SGD(model.generator_parameters(), cfg.momentum)
    disc_opt = SGD(model.discriminator_parameters(), cfg.momentum)
    table = acmix.compute_class_frequencies(train_set) if cfg.acmix else None
    per_epoch = math.ceil(len(epoch_samples(train_set, cfg, 0, table)) / cfg.batch_size)
    total = steps if steps is not None else per_epoch * cfg.epochs
    result = TrainResult(model)
    t0 = time.perf_counter()
    step = 0
    epoch = 0
    while step < total:
        samples = epoch_samples(train_set, cfg, epoch, table)
        sums: dict = {}
        nb = 0
        for bi in range(0, len(samples), cfg.batch_size):
            if step >= total:
                break
            batch = samples[bi:bi + cfg.batch_size]
            lr = cosine_lr(step, total, cfg.learning_rate, cfg.min_learning_rate)
            d_lr = cosine_lr(step, total, cfg.disc_learning_rate, cfg.min_learning_rate) if cfg.learning_rate else 0.0
            try:
                losses = train_step(model, batch, gen_opt, disc_opt, lr, d_lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, bi // cfg.batch_size, {"error": str(exc)}) from exc
            if not all(math.isfinite(v) for v in losses.values()):
                raise TrainingDiverged(epoch, bi // cfg.batch_size, losses)
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
            step += 1
            if on_batch is not None:
                on_batch(step, losses)
        entry = {"epoch": epoch, "steps": nb, "lr": lr}
        entry.update({k: v / max(nb, 1) for k, v in sums.items()})
        if val_set is not None and eval_every and ((epoch + 1) % eval_every == 0 or step >= total):
            rep = evaluate_model(model, val_set)
            entry["val_map50"] = rep.map50
        result.log.append(entry)
        logger.info("epoch %d %s", epoch, {k: round(v, 5) if isinstance(v, float) else v for k, v in entry.items()})
        epoch += 1
    result.seconds = time.perf_counter() - t0
    return result


def train_step(model: Model, batch: Sequence[AnnotatedImage], gen_opt: SGD, disc_opt: SGD, lr: float, d_lr: float) -> dict:
    cfg = model.cfg
    x = images_to_tensor(batch)
    targets = build_targets([img.labels for img in batch], cfg)
    out = model.forward(x)

    # discriminator: inputs detached, only D parameters move
    disc_opt.zero_grad()
    gen_opt.zero_grad()
    _, d_loss = rfafpn.adversarial_losses(model.disc, out["real"], out["f1"].detach())
    d_loss.backward()
    disc_opt.step(d_lr)

    # generator: gradients reach D's parameters but are discarded
    gen_opt.zero_grad()
    g_loss = scale(
        tmean(tlog(rfafpn.discriminator_forward(model.disc, out["f1"]))), -1.0
    )
    parts = detection_losses(model, out, targets)
    L = rfafpn.composite_loss(parts["L_x"], parts["L_c"], parts["L_L1"])
    total = add(L, scale(g_loss, cfg.adv_weight))
    total.backward()
    disc_opt.zero_grad()
    gen_opt.step(lr)
    if cfg.bifpn:
        model.bifpn.rescale_fusion(cfg.fusion_floor)
    return {
        "L": L.item(),
        "L_x": parts["L_x"].item(),
        "L_c": parts["L_c"].item(),
        "L_L1": parts["L_L1"].item(),
        "g_loss": g_loss.item(),
        "d_loss": d_loss.item(),
    }


def batch_loss(model: Model, batch: Sequence[AnnotatedImage]) -> float:
    """Composite loss of ``batch`` without updating anything."""
    with no_grad():
        out = model.forward(images_to_tensor(batch))
        parts = detection_losses(model, out, build_targets([i.labels for i in batch], model.cfg))
        return rfafpn.composite_loss(parts["L_x"], parts["L_c"], parts["L_L1"]).item()


# ---------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopReport:
    modules: dict  # module -> MACs
    variants: dict = field(default_factory=dict)  # variant name -> total FLOPs

    @property
    def macs(self) -> int:
        return int(sum(self.modules.values()))

    @property
    def total(self) -> int:
        return 2 * self.macs

    def to_dict(self) -> dict:
        return {"modules_macs": self.modules, "total_flops": self.total, "variants": self.variants}


def conv_macs(c_in: int, c_out: int, k: int, h_out: int, w_out: int, groups: int = 1) -> int:
    return c_out * (c_in // groups) * k * k * h_out * w_out


def affine_macs(n_in: int, n_out: int) -> int:
    return n_in * n_out


def attention_macs(N: int, d: int, d_a: int) -> int:
    return N * d * d_a * 2 + N * N * d_a + N * N * d


def module_macs(cfg: ModelConfig) -> dict:
    """Inference MACs per module for the toggles in ``cfg`` (discriminator excluded)."""
    S, W = cfg.input_size, cfg.width
    mods: dict = {}
    h = S // 2
    bb = conv_macs(3, cfg.stem_channels, 3, h, h)
    c_in = cfg.stem_channels
    lateral = 0
    sizes = []
    for c in cfg.stage_channels:
        h //= 2
        bb += conv_macs(c_in, c, 3, h, h)
        lateral += conv_macs(c, W, 1, h, h)
        sizes.append(h)
        c_in = c
    mods["backbone"] = bb
    mods["lateral"] = lateral
    if cfg.rfaconv:
        mods["rfaconv"] = sum(
            conv_macs(W, W, k, s, s, groups=W) + conv_macs(W, W, 1, s, s) for s in sizes for k in rfafpn.RFA_KERNELS
        )
    if cfg.bifpn:
        mods["bifpn"] = sum(
            conv_macs(W, W, 3, sizes[lv], sizes[lv], groups=W) + conv_macs(W, W, 1, sizes[lv], sizes[lv])
            for _, lv, _ in rfafpn.bifpn_topology(cfg.levels)
        )
    if cfg.caa:
        N = sizes[0] * sizes[0]
        d_a = caa.default_da(W)
        mods["caa_value"] = N * affine_macs(W, W)
        if cfg.self_attention:
            mods["caa_attention"] = attention_macs(N, W, d_a)
    G = cfg.grid
    mods["head"] = conv_macs(W, W, 3, G, G) + conv_macs(W, cfg.head_channels, 1, G, G)
    return mods


ABLATION_VARIANTS = {
    "full": {},
    "no-rfaconv": {"rfaconv": False},
    "no-bifpn": {"bifpn": False},
    "no-self-attention": {"self_attention": False},
    "no-rfafpn": {"rfaconv": False, "bifpn": False},
    "no-caa": {"caa": False},
    "no-acmix": {"acmix": False},
}


def count_flops(cfg: ModelConfig, variants: dict | None = None) -> FlopReport:
    rep = FlopReport(module_macs(cfg))
    for name, toggles in (variants if variants is not None else ABLATION_VARIANTS).items():
        rep.variants[name] = 2 * int(sum(module_macs(cfg.with_toggles(**toggles)).values()))
    return rep


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"YRSCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    """Binary container: magic, version, config JSON, then named float64 LE tensors."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    cfg_blob = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        arr = model.params[name].data
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Model:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    version, clen = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    cfg = ModelConfig.from_dict(json.loads(blob[pos:pos + clen]))
    pos += clen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    model = Model(cfg)
    model.load_state(state)
    return model
