"""Training engine: poly LR schedule, batch-scaled SGD with momentum,
main + auxiliary loss, CSV/line logging, and binary checkpoints."""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from . import ops
from .data import SceneDataset, augment
from .errors import (
    ConfigError,
    CorruptCheckpointError,
    DivergenceError,
    FormatError,
    GradientError,
    ScheduleError,
)
from .layers import BatchNorm2d, Module
from .model import SegModel
from .tensor import Tape, Tensor, backward

log = logging.getLogger("aceseg")

REFERENCE_BATCH = 16
CHECKPOINT_MAGIC = b"ACESEG01"
CSV_HEADER = "iter,lr,main,aux,total"


@dataclass
class TrainConfig:
    """Optimization protocol knobs. base_lr is quoted per reference batch 16
    and rescaled to the actual batch size."""

    base_lr: float = 0.001
    batch_size: int = 16
    epochs: int = 80
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0001
    aux_weight: float = 0.2
    crop: int = 64
    scale_lo: float = 0.5
    scale_hi: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.crop < 1:
            raise ConfigError("batch_size, epochs, and crop must be positive")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight must be non-negative")
        if self.scale_lo > self.scale_hi:
            raise ConfigError("scale_lo must not exceed scale_hi")


@dataclass
class SegBatch:
    images: Tensor       # N x 3 x H x W in [0, 1]
    labels: np.ndarray   # N x H x W integer map with 255 reserved


@dataclass
class IterRecord:
    iteration: int
    lr: float
    main: float
    aux: float
    total: float


def adjusted_base_lr(cfg: TrainConfig) -> float:
    """Scale the reference-batch learning rate to the configured batch."""
    return cfg.base_lr / REFERENCE_BATCH * cfg.batch_size


def poly_lr(base: float, iteration: int, total: int, power: float) -> float:
    """base * (1 - iter/total) ** power."""
    if total <= 0:
        raise ConfigError("total iteration count must be positive")
    if not 0 <= iteration <= total:
        raise ScheduleError(f"iteration {iteration} outside schedule of {total}")
    return base * (1.0 - iteration / total) ** power


def sgd_update(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
               lr: float, momentum: float, weight_decay: float) -> None:
    """One in-place heavy-ball step: v = m*v + (g + wd*p); p -= lr*v."""
    g = grad + weight_decay * param if weight_decay else grad
    velocity *= momentum
    velocity += g
    param -= lr * velocity


class SGD:
    """Momentum SGD over a module's parameters.

    BatchNorm affine parameters are exempt from weight decay; decaying them
    would shrink normalization scales without regularizing anything useful.
    """

    def __init__(self, model: Module, momentum: float = 0.9,
                 weight_decay: float = 0.0001):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.entries = []
        for prefix, module in model.named_modules():
            decay = not isinstance(module, BatchNorm2d)
            for name, p in module._params.items():
                full = f"{prefix}.{name}" if prefix else name
                self.entries.append((full, p, decay))
        self.velocity = {name: np.zeros_like(p.data) for name, p, _ in self.entries}

    def step(self, lr: float) -> None:
        for name, p, decay in self.entries:
            if p.grad is None:
                raise GradientError(f"parameter '{name}' has no gradient; "
                                    "run backward before step")
            wd = self.weight_decay if decay else 0.0
            sgd_update(p.data, p.grad, self.velocity[name], lr, self.momentum, wd)

    def zero_grad(self) -> None:
        for _, p, _ in self.entries:
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {f"opt.{name}": v for name, v in self.velocity.items()}


def train_step(batch: SegBatch, model: SegModel, optimizer: SGD, lr: float,
               aux_weight: float) -> tuple[float, float, float]:
    """One forward/backward/update cycle; returns (main, aux, total) losses."""
    with Tape() as tape:
        out = model(batch.images)
        main = ops.softmax_cross_entropy(out.main, batch.labels)
        if out.aux is not None:
            # kept in the graph even at weight 0 so every parameter, aux
            # branch included, receives a (possibly zero) gradient
            aux = ops.softmax_cross_entropy(out.aux, batch.labels)
            total = ops.add(main, ops.scale(aux, aux_weight))
        else:
            aux = None
            total = main
    backward(tape, total)
    optimizer.step(lr)
    optimizer.zero_grad()
    return main.item(), aux.item() if aux is not None else 0.0, total.item()


def run_training(model: SegModel, dataset: SceneDataset, train_indices: list[int],
                 cfg: TrainConfig) -> list[IterRecord]:
    """Train over the index list for cfg.epochs; returns the per-iteration log.

    Deterministic given (model init, dataset, cfg): epoch shuffling and
    augmentation draw from generators derived from cfg.seed alone.
    """
    if not train_indices:
        raise ConfigError("no training samples")
    model.train()
    optimizer = SGD(model, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    per_epoch = -(-len(train_indices) // cfg.batch_size)
    total_iter = cfg.epochs * per_epoch
    base = adjusted_base_lr(cfg)
    records: list[IterRecord] = []
    iteration = 0
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng([cfg.seed, 1, epoch])
        aug_rng = np.random.default_rng([cfg.seed, 2, epoch])
        order = [train_indices[i] for i in order_rng.permutation(len(train_indices))]
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            images = np.empty((len(chunk), 3, cfg.crop, cfg.crop), dtype=np.float32)
            labels = np.empty((len(chunk), cfg.crop, cfg.crop), dtype=np.int64)
            for row, idx in enumerate(chunk):
                image, label = dataset.pair(idx)
                images[row], labels[row] = augment(
                    image, label, cfg.crop, cfg.scale_lo, cfg.scale_hi, aug_rng)
            batch = SegBatch(images=Tensor(images), labels=labels)
            lr = poly_lr(base, iteration, total_iter, cfg.power)
            main, aux, total = train_step(batch, model, optimizer, lr, cfg.aux_weight)
            if not np.isfinite(total):
                raise DivergenceError(iteration)
            records.append(IterRecord(iteration, lr, main, aux, total))
            log.info("iter=%d lr=%r main=%r aux=%r total=%r",
                     iteration, lr, main, aux, total)
            iteration += 1
    return records


def write_metrics_csv(path: str, records: Iterable[IterRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in records:
            fh.write(f"{r.iteration},{r.lr!r},{r.main!r},{r.aux!r},{r.total!r}\n")


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 tensor count, then per tensor
# u32 name length, UTF-8 name, u32 rank, u32 dims, little-endian f32 data


def save_checkpoint(path: str, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, value in tensors.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(value, dtype="<f4")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    pos = len(CHECKPOINT_MAGIC)

    def take(count: int) -> bytes:
        nonlocal pos
        if pos + count > len(blob):
            raise CorruptCheckpointError(f"{path}: truncated checkpoint")
        piece = blob[pos:pos + count]
        pos += count
        return piece

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        tensors[name] = data.copy()
    if pos != len(blob):
        raise CorruptCheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return tensors


def save_model_checkpoint(path: str, model: SegModel,
                          optimizer: Optional[SGD] = None) -> None:
    tensors = dict(model.state_dict())
    tensors.update(model.meta())
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_checkpoint(path, tensors)


def load_model_checkpoint(path: str) -> SegModel:
    tensors = load_checkpoint(path)
    meta = {k: v for k, v in tensors.items() if k.startswith("meta.")}
    state = {k: v for k, v in tensors.items()
             if not k.startswith("meta.") and not k.startswith("opt.")}
    if not meta:
        raise FormatError(f"{path}: checkpoint carries no model metadata")
    model = SegModel.from_meta(meta)
    model.load_state_dict(state)
    return model
