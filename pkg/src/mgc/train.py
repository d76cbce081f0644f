"""Losses, optimizers and the two training loops.

Segmentation is trained first on a small set of (spectrogram, mask) pairs
doubled by horizontal flips. The classifier is then trained end to end on
spectrograms plus masks that come either from the synthetic ground truth or
from a frozen segmentation checkpoint.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .maskgen import hflip
from .models import ClassifierConfig, MGCClassifier, SegConfig, SegNet
from .nn import Module, Parameter, Tensor
from .nn import functional as F

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adam")
TASKS = ("segmentation", "joint_multiclass", "multilabel")
MASK_SOURCES = ("ground_truth", "generated")


class TrainingError(RuntimeError):
    pass


class MissingMasksError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    seed: int = 0
    augment_hflip: bool = False
    task: str = "joint_multiclass"
    fusion: str | None = "xattn"
    mask_source: str = "ground_truth"
    soft_sigma: float | None = 6.0  # None -> binary masks
    threshold: float = 0.5
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.mask_source not in MASK_SOURCES:
            raise ValueError(f"unknown mask source {self.mask_source!r}")
        if self.soft_sigma is not None and self.soft_sigma <= 0:
            raise ValueError("soft_sigma must be positive")

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


SEG_DEFAULTS = dict(epochs=40, batch_size=8, learning_rate=2e-3, task="segmentation", augment_hflip=True,
                    fusion=None)


# -- config files ------------------------------------------------------------------

def load_config(path) -> TrainConfig:
    """Read a flat ``key = value`` TOML file into a :class:`TrainConfig`."""
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    for key in ("fusion", "soft_sigma"):
        if data.get(key) in ("none", "None", ""):
            data[key] = None
    return TrainConfig(**data)


def dump_config(cfg: TrainConfig, path) -> None:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if v is None:
            v = "none"
        lines.append(f"{f.name} = {json.dumps(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- losses ----------------------------------------------------------------------

def pixelwise_ce(logits, labels) -> Tensor:
    """Mean over pixels of ``-z_y + log Σ exp z``; logits (N, K, H, W) or (K, H, W)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = logits.reshape((1,) + logits.shape)
        labels = labels[None]
    return F.cross_entropy(logits, labels.astype(np.int64), axis=1)


def joint_ce(logits, target) -> Tensor:
    """Cross-entropy over the 8 joint classes; logits (N, 8) or (8,)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    target = np.atleast_1d(np.asarray(target))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    if logits.shape[1] != 8:
        raise ValueError("joint_ce expects 8 logits")
    if target.min() < 0 or target.max() >= 8:
        raise ValueError(f"invalid joint class index in {target}")
    return F.cross_entropy(logits, target.astype(np.int64), axis=1)


def multilabel_bce(logits, y) -> Tensor:
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(y)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        y = y.reshape(1, -1)
    if logits.shape[1] != 3 or not np.isin(y, (0, 1)).all():
        raise ValueError("multilabel_bce expects 3 logits and binary targets")
    return F.bce_with_logits(logits, y)


def predict_labels(logits: np.ndarray, head: str, threshold: float = 0.5) -> np.ndarray:
    """(N, 3) label vectors from joint (argmax) or multilabel (sigmoid > threshold) logits."""
    logits = np.atleast_2d(logits)
    if head == "joint":
        j = logits.argmax(axis=1)
        return np.stack([(j >> 2) & 1, (j >> 1) & 1, j & 1], axis=1)
    prob = 1.0 / (1.0 + np.exp(-logits))
    return (prob > threshold).astype(np.int64)


# -- optimizers ------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    slots: dict = field(default_factory=dict)


def optimizer_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None], state: OptimizerState,
                   cfg: TrainConfig, lr: float | None = None) -> OptimizerState:
    """In-place SGD-with-momentum or Adam update of ``params``."""
    lr = cfg.learning_rate if lr is None else lr
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {p.name or i} at step {t}")
        if cfg.optimizer == "sgd_momentum":
            v = state.slots.get(i)
            v = g.copy() if v is None else cfg.momentum * v + g
            state.slots[i] = v
            p.data = p.data - lr * v
        else:
            m, s = state.slots.get(i, (np.zeros_like(g), np.zeros_like(g)))
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            s = cfg.beta2 * s + (1 - cfg.beta2) * g * g
            state.slots[i] = (m, s)
            mhat = m / (1 - cfg.beta1 ** t)
            shat = s / (1 - cfg.beta2 ** t)
            p.data = p.data - lr * mhat / (np.sqrt(shat) + cfg.adam_eps)
        if not np.isfinite(p.data).all():
            raise TrainingError(f"parameter {p.name or i} became non-finite at step {t}")
    return state


def _step(model: Module, loss: Tensor, state: OptimizerState, cfg: TrainConfig) -> None:
    params = model.parameters()
    model.zero_grad()
    loss.backward()
    optimizer_step(params, [p.grad for p in params], state, cfg)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# -- metric logs ------------------------------------------------------------------

CLS_LOG_FIELDS = ("epoch", "split", "loss", "joint_acc", "macro_f1")
SEG_LOG_FIELDS = ("epoch", "split", "loss", "iou")


def write_log(rows: Sequence[dict], path, fields_: Sequence[str]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(fields_), lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)


# -- segmentation -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Module
    history: list[dict]
    best_epoch: int
    best_metric: float
    steps: int
    seconds: float


def seg_predict(model: SegNet, specs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = [model.predict_mask(specs[i:i + batch_size]) for i in range(0, len(specs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,) + specs.shape[1:], dtype=np.uint8)


def _seg_eval(model: SegNet, specs, masks, batch_size) -> tuple[float, float]:
    losses, preds = [], []
    for i in range(0, len(specs), batch_size):
        logits = model(specs[i:i + batch_size])
        losses.append(pixelwise_ce(logits, masks[i:i + batch_size]).item() * len(logits.data))
        preds.append((logits.data[:, 1] > logits.data[:, 0]).astype(np.uint8))
    return float(np.sum(losses) / len(specs)), metrics.pooled_iou(np.concatenate(preds), masks)


def train_segmentation(specs: np.ndarray, masks: np.ndarray, cfg: TrainConfig,
                       val: tuple[np.ndarray, np.ndarray] | None = None,
                       seg_cfg: SegConfig | None = None, log_path=None) -> TrainResult:
    """Few-shot segmentation training; keeps the parameters of the best-IoU epoch."""
    specs = np.asarray(specs, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.uint8)
    if len(specs) == 0:
        raise TrainingError("empty segmentation corpus")
    if len(specs) < 2:
        raise TrainingError("segmentation training needs at least 2 pairs")
    if cfg.augment_hflip:
        specs = np.concatenate([specs, hflip(specs)])
        masks = np.concatenate([masks, hflip(masks)])
    seg_cfg = seg_cfg or SegConfig(in_hw=specs.shape[1:], seed=cfg.seed)
    model = SegNet(seg_cfg)
    rng = np.random.default_rng([cfg.seed, 21])
    state = OptimizerState()
    history: list[dict] = []
    best = (-1.0, 0, model.state_dict())
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(specs), cfg.batch_size, rng):
            loss = pixelwise_ce(model(specs[idx]), masks[idx])
            _step(model, loss, state, cfg)
            total += loss.item() * len(idx)
        history.append({"epoch": epoch, "split": "train", "loss": total / len(specs), "iou": ""})
        score = -history[-1]["loss"]
        if val is not None:
            vloss, viou = _seg_eval(model, np.asarray(val[0], dtype=np.float64), np.asarray(val[1]), cfg.batch_size)
            history.append({"epoch": epoch, "split": "val", "loss": vloss, "iou": viou})
            score = viou
        if score > best[0]:
            best = (score, epoch, model.state_dict())
        logger.info("seg epoch %d: %s", epoch, history[-1])
        if log_path is not None:
            write_log(history, log_path, SEG_LOG_FIELDS)
    model.load_state_dict(best[2])
    return TrainResult(model, history, best[1], best[0], state.step, time.perf_counter() - t0)


# -- classification ---------------------------------------------------------------------

def _cls_loss(logits: Tensor, labels: np.ndarray, head: str) -> Tensor:
    if head == "joint":
        return joint_ce(logits, metrics.joints(labels))
    return multilabel_bce(logits, labels)


def cls_logits(model: MGCClassifier, specs: np.ndarray, masks: np.ndarray | None,
               batch_size: int = 32) -> np.ndarray:
    out = []
    for i in range(0, len(specs), batch_size):
        m = None if masks is None or not model.uses_mask else masks[i:i + batch_size]
        out.append(model(specs[i:i + batch_size], m).data)
    return np.concatenate(out)


def _cls_eval(model, specs, masks, labels, cfg) -> dict:
    head = model.cfg.head
    logits = cls_logits(model, specs, masks, cfg.batch_size)
    loss = _cls_loss(Tensor(logits), labels, head).item()
    preds = predict_labels(logits, head, cfg.threshold)
    _, macro = metrics.per_class_prf(preds, labels)
    return {"loss": loss, "joint_acc": metrics.joint_accuracy(preds, labels), "macro_f1": macro}


def train_classifier(specs: np.ndarray, labels: np.ndarray, cfg: TrainConfig, masks: np.ndarray | None = None,
                     val: tuple | None = None, cls_cfg: ClassifierConfig | None = None,
                     log_path=None, eval_train: bool = True) -> TrainResult:
    """End-to-end training of encoders + fusion + head.

    ``val`` is ``(specs, masks, labels)``. ``masks`` must be given for
    mask-guided models; they are consumed as-is (the caller decides whether
    they are ground-truth or generated, binary or soft).
    """
    specs = np.asarray(specs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    head = "multilabel" if cfg.task == "multilabel" else "joint"
    cls_cfg = cls_cfg or ClassifierConfig(fusion=cfg.fusion, head=head, in_hw=specs.shape[1:], seed=cfg.seed)
    if cls_cfg.head != head:
        cls_cfg = replace(cls_cfg, head=head)
    model = MGCClassifier(cls_cfg)
    if model.uses_mask:
        if masks is None:
            raise MissingMasksError(f"fusion {cls_cfg.fusion!r} needs masks (mask_source={cfg.mask_source})")
        masks = np.asarray(masks, dtype=np.float64)
        if masks.shape != specs.shape:
            raise MissingMasksError(f"mask array {masks.shape} does not match spectrograms {specs.shape}")
    rng = np.random.default_rng([cfg.seed, 22])
    state = OptimizerState()
    history: list[dict] = []
    best = (-1.0, 0, model.state_dict())
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for idx in _batches(len(specs), cfg.batch_size, rng):
            x, m = specs[idx], masks[idx] if model.uses_mask else None
            if cfg.augment_hflip:
                flip = rng.random(len(idx)) < 0.5
                x = np.where(flip[:, None, None], x[:, :, ::-1], x)
                if m is not None:
                    m = np.where(flip[:, None, None], m[:, :, ::-1], m)
            loss = _cls_loss(model(x, m), labels[idx], head)
            _step(model, loss, state, cfg)
            total += loss.item() * len(idx)
        row = {"epoch": epoch, "split": "train", "loss": total / len(specs), "joint_acc": "", "macro_f1": ""}
        if eval_train:
            row.update({k: v for k, v in _cls_eval(model, specs, masks, labels, cfg).items() if k != "loss"})
        history.append(row)
        score = row["joint_acc"] if eval_train else -row["loss"]
        if val is not None:
            vrow = {"epoch": epoch, "split": "val", **_cls_eval(model, *val, cfg)}
            history.append(vrow)
            score = vrow["joint_acc"]
        if score > best[0]:
            best = (score, epoch, model.state_dict())
        logger.info("cls epoch %d: %s", epoch, history[-1])
        if log_path is not None:
            write_log(history, log_path, CLS_LOG_FIELDS)
    model.load_state_dict(best[2])
    return TrainResult(model, history, best[1], best[0], state.step, time.perf_counter() - t0)
