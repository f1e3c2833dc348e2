"""SGD with Nesterov momentum, warmup-cosine schedule, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .autograd import Parameter, backward
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .data import Dataset, augment_batch, epoch_order
from .layers import softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

CSV_HEADER = ["iter", "lr", "train_loss", "eval_acc", "eval_loss", "wall_ms"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 0.1
    iterations: int = 1000  # N_a
    warmup: Optional[int] = None  # N_w; None -> 5% of iterations
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    seed: int = 0
    eval_interval: int = 0  # 0: evaluate only after the last iteration
    checkpoint_interval: int = 0  # 0: checkpoint only at the end
    augment: bool = False
    dtype: str = "float32"
    record_wall_time: bool = True
    prefetch: bool = True

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = int(round(0.05 * self.iterations))
        if not 0 <= self.warmup <= self.iterations:
            raise ValueError(f"warmup {self.warmup} must lie in [0, {self.iterations}]")
        if self.lr_max <= 0:
            raise ValueError("lr_max must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)


def lr_schedule(i: int, config: TrainConfig) -> float:
    """Learning rate at iteration i.

    lr = lr_top(i) * (1 + cos(pi * i / N_a)) / 2, with lr_top ramping
    linearly from 0 over the first N_w iterations, then held at lr_max. The
    cosine factor applies during warmup too.
    """
    n_a, n_w = config.iterations, config.warmup
    if not 0 <= i <= n_a:
        raise ValueError(f"iteration {i} outside [0, {n_a}]")
    top = config.lr_max * i / n_w if (n_w > 0 and i <= n_w) else config.lr_max
    return top * (1.0 + math.cos(math.pi * i / n_a)) / 2.0


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0, grads: Optional[list] = None) -> None:
    """Nesterov SGD without dampening, updating values and buffers in place."""
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    for p, grad in zip(params, grads):
        g = np.zeros_like(p.data) if grad is None else grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {p.name}")
        if weight_decay and not p.decay_exempt:
            g = g + weight_decay * p.data
        p.momentum = momentum * p.momentum + g
        update = g + momentum * p.momentum
        p.data -= (lr * update).astype(p.dtype, copy=False)


def evaluate(net, data: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy in eval mode.

    Ties in the logits go to the lowest class index.
    """
    logits = net.predict(data.images, batch_size).astype(np.float64)
    pred = np.argmax(logits, axis=1)
    probs = softmax(logits)
    nll = -np.log(np.maximum(probs[np.arange(len(data)), data.labels], 1e-300))
    return float((pred == data.labels).mean()), float(nll.mean())


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(row)

    @property
    def last_eval(self) -> Optional[dict]:
        for row in reversed(self.rows):
            if row["eval_acc"] is not None:
                return row
        return None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])
                            for k in CSV_HEADER])


class _Batches:
    """Seed-deterministic batch source; batch i depends only on (seed, i)."""

    def __init__(self, data: Dataset, config: TrainConfig):
        self.data = data
        self.config = config
        self.size = min(config.batch_size, len(data))
        self.per_epoch = max(1, len(data) // self.size)
        self.dtype = np.dtype(config.dtype)

    def __call__(self, i: int):
        epoch, b = divmod(i, self.per_epoch)
        order = epoch_order(self.config.seed, epoch, len(self.data))
        idx = order[b * self.size : (b + 1) * self.size]
        images = self.data.images[idx]
        if self.config.augment:
            images = augment_batch(images, np.random.default_rng([self.config.seed, epoch, b, 7]))
        return images.astype(self.dtype), self.data.labels[idx]


def train(
    net,
    data: Dataset,
    config: TrainConfig,
    eval_data: Optional[Dataset] = None,
    out_dir=None,
    resume_from=None,
    extra_meta: Optional[dict] = None,
) -> RunMetrics:
    """Run iterations [start, N_a) of SGD; returns per-iteration metrics.

    With ``out_dir`` set, writes ``metrics.csv`` and checkpoints
    (``ckpt_<iter>.mdnw`` at the interval, ``final.mdnw`` at the end).
    ``resume_from`` continues a checkpoint written by this function.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = net.parameters()
    metrics = RunMetrics()
    start = 0
    if resume_from is not None:
        manifest, arrays = read_checkpoint(resume_from)
        load_into(net, manifest, arrays)
        start = manifest["meta"]["iteration"] + 1
        metrics.rows = [dict(r) for r in manifest["meta"].get("rows", [])]
    meta_base = dict(extra_meta or {}, train_config=config.to_dict())

    def checkpoint(i: int, name: str) -> None:
        if out is None:
            return
        meta = dict(meta_base, iteration=i, rows=metrics.rows)
        save_checkpoint(out / name, net, meta)

    batches = _Batches(data, config)
    pool = ThreadPoolExecutor(max_workers=1) if config.prefetch else None
    pending = pool.submit(batches, start) if pool and start < config.iterations else None
    t0 = time.perf_counter()
    net.train()
    try:
        for i in range(start, config.iterations):
            if pool:
                images, labels = pending.result()
                if i + 1 < config.iterations:
                    pending = pool.submit(batches, i + 1)
            else:
                images, labels = batches(i)
            lr = lr_schedule(i, config)
            net.zero_grad()
            loss = softmax_cross_entropy(net(images), labels)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at iteration {i} (lr={lr})")
            backward(loss)
            try:
                sgd_step(params, lr, config.momentum, config.weight_decay)
            except TrainingError as e:
                norms = {p.name: float(np.linalg.norm(p.grad)) for p in params if p.grad is not None}
                worst = sorted(norms.items(), key=lambda kv: -kv[1] if np.isfinite(kv[1]) else -np.inf)[:5]
                raise TrainingError(f"iteration {i}, lr={lr}: {e}; largest grad norms {worst}") from e
            row = {"iter": i, "lr": lr, "train_loss": float(loss.item()),
                   "eval_acc": None, "eval_loss": None, "wall_ms": None}
            last = i == config.iterations - 1
            if eval_data is not None and (last or (config.eval_interval and (i + 1) % config.eval_interval == 0)):
                row["eval_acc"], row["eval_loss"] = evaluate(net, eval_data)
                net.train()
            if config.record_wall_time:
                row["wall_ms"] = int((time.perf_counter() - t0) * 1000)
            metrics.append(row)
            if config.checkpoint_interval and (i + 1) % config.checkpoint_interval == 0 and not last:
                checkpoint(i, f"ckpt_{i}.mdnw")
    finally:
        if pool:
            pool.shutdown(wait=True)
    checkpoint(config.iterations - 1, "final.mdnw")
    if out is not None:
        metrics.write_csv(out / "metrics.csv")
    return metrics
