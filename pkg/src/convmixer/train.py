"""Training and evaluation loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np

from . import nn
from .augment import Augmenter
from .checkpoint import Checkpoint, load_into
from .config import RunConfig
from .data import Dataset, load_cifar10_dir, normalize, synthetic_dataset
from .model import ConvMixer, build
from .optim import AdamW, ScheduleConfig, clip_grad_global_norm, lr_at
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    train_loss: float
    train_acc: float
    test_acc: Optional[float]
    lr: float
    wall_time: float
    images_per_sec: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


TIMING_FIELDS = ("wall_time", "images_per_sec")


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Optional[Dataset]]:
    """Training split (with its channel statistics) and optional test split."""
    if cfg.data == "synthetic":
        train = synthetic_dataset(cfg.synthetic_n, cfg.model.n_classes, seed=cfg.seed)
        test = None
        if cfg.synthetic_test_n > 0:
            test = synthetic_dataset(cfg.synthetic_test_n, cfg.model.n_classes, seed=cfg.seed + 1)
    else:
        root = Path(cfg.data)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory {root} does not exist")
        train = load_cifar10_dir(root, "train")
        test = load_cifar10_dir(root, "test") if (root / "test_batch.bin").is_file() else None
    if cfg.train_subset:
        train = train.subset(cfg.train_subset)
    if test is not None:
        test = test.with_stats(train.channel_mean, train.channel_std)
    return train, test


def evaluate(model: ConvMixer, ds: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Top-1 accuracy and mean cross-entropy in eval mode.

    Ties in the logits resolve to the lowest class index.
    """
    was = model.mode
    model.eval()
    n_classes = model.config.n_classes
    correct = 0
    loss_sum = 0.0
    try:
        with no_grad():
            for start in range(0, len(ds), batch_size):
                imgs = normalize(ds, ds.images[start:start + batch_size])
                labels = ds.labels[start:start + batch_size]
                logits = model(Tensor(imgs))
                correct += int((np.argmax(logits.data, axis=1) == labels).sum())
                loss = nn.softmax_cross_entropy(logits, nn.one_hot(labels, n_classes))
                loss_sum += loss.item() * len(labels)
    finally:
        model.mode = was
    return correct / len(ds), loss_sum / len(ds)


class Trainer:
    """Runs the optimisation loop for one :class:`RunConfig`.

    Everything random (batch order, augmentation) draws from one generator
    whose state is stored in checkpoints, so a resumed run continues exactly
    where an uninterrupted one would be.
    """

    def __init__(self, cfg: RunConfig, train_set: Optional[Dataset] = None,
                 test_set: Optional[Dataset] = None):
        self.cfg = cfg
        if train_set is None:
            train_set, test_set = load_datasets(cfg)
        self.train_set = train_set
        self.test_set = test_set
        self.model = build(cfg.model, seed=cfg.seed)
        self.optimizer = AdamW(self.model.parameters(), cfg.optim)
        self.rng = np.random.default_rng(cfg.seed + 1)
        n = len(train_set)
        self.batch_size = min(cfg.batch_size, n)
        self.steps_per_epoch = n // self.batch_size
        self.schedule = ScheduleConfig.from_epochs(cfg.epochs, self.steps_per_epoch, cfg.optim.lr_peak)
        self.augmenter = Augmenter(cfg.augment, train_set, out_size=train_set.images.shape[-1])
        self.step = 0
        self.epoch = 0
        self.metrics: list[MetricsRecord] = []

    # -- checkpointing ----------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        meta = {
            "epoch": self.epoch,
            "rng_state": self.rng.bit_generator.state,
            "channel_mean": [float(v) for v in self.train_set.channel_mean],
            "channel_std": [float(v) for v in self.train_set.channel_std],
        }
        return Checkpoint.from_model(self.model, self.cfg, self.optimizer.state, self.step, meta)

    def restore(self, ckpt: Checkpoint) -> None:
        load_into(self.model, ckpt)
        if ckpt.optimizer is not None:
            self.optimizer.state = ckpt.optimizer
        self.step = ckpt.step
        self.epoch = int(ckpt.meta.get("epoch", 0))
        if "rng_state" in ckpt.meta:
            self.rng.bit_generator.state = ckpt.meta["rng_state"]

    # -- loop -------------------------------------------------------------------

    def _augment_flags(self) -> bool:
        a = self.cfg.augment
        return any((a.use_mixup, a.use_cutmix, a.use_erase, a.use_randaug, a.use_scaling, a.use_flip))

    def train_step(self, images: np.ndarray, labels: np.ndarray) -> tuple[float, int]:
        targets = nn.one_hot(labels, self.cfg.model.n_classes)
        if self._augment_flags():
            x, targets = self.augmenter(images, targets, self.rng)
        else:
            x = normalize(self.train_set, images)
        self.model.train()
        self.optimizer.zero_grad()
        logits = self.model(Tensor(x))
        loss = nn.softmax_cross_entropy(logits, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.step}")
        loss.backward()
        clip_grad_global_norm(list(self.model.parameters().values()), self.cfg.clip_norm)
        self.optimizer.step(lr_at(self.step, self.schedule))
        self.step += 1
        correct = int((np.argmax(logits.data, axis=1) == np.argmax(targets, axis=1)).sum())
        return value, correct

    def run_epoch(self) -> MetricsRecord:
        t0 = time.perf_counter()
        n = len(self.train_set)
        order = self.rng.permutation(n) if self.cfg.shuffle else np.arange(n)
        loss_sum, correct, seen = 0.0, 0, 0
        lr = 0.0
        for b in range(self.steps_per_epoch):
            idx = order[b * self.batch_size:(b + 1) * self.batch_size]
            lr = lr_at(self.step, self.schedule)
            loss, c = self.train_step(self.train_set.images[idx], self.train_set.labels[idx])
            loss_sum += loss * len(idx)
            correct += c
            seen += len(idx)
        self.epoch += 1
        elapsed = time.perf_counter() - t0
        test_acc = None
        if self.test_set is not None:
            test_acc, _ = evaluate(self.model, self.test_set, self.cfg.eval_batch_size)
        record = MetricsRecord(
            epoch=self.epoch, step=self.step, train_loss=loss_sum / seen, train_acc=correct / seen,
            test_acc=test_acc, lr=lr, wall_time=elapsed, images_per_sec=seen / elapsed if elapsed > 0 else 0.0,
        )
        self.metrics.append(record)
        return record

    def fit(self, on_epoch: Optional[Callable[[MetricsRecord], None]] = None,
            stop_after: Optional[int] = None) -> Checkpoint:
        """Train to ``cfg.epochs`` (or ``stop_after`` more epochs) and return the final checkpoint.

        On KeyboardInterrupt the current state is written to ``out_dir/last.ckpt``
        before the interrupt propagates.
        """
        out_dir = Path(self.cfg.out_dir) if self.cfg.out_dir else None
        target = self.cfg.epochs if stop_after is None else min(self.cfg.epochs, self.epoch + stop_after)
        try:
            while self.epoch < target:
                record = self.run_epoch()
                logger.info("epoch %d step %d loss %.4f acc %.4f", record.epoch, record.step,
                            record.train_loss, record.train_acc)
                if out_dir is not None:
                    out_dir.mkdir(parents=True, exist_ok=True)
                    with open(out_dir / "metrics.jsonl", "a") as fh:
                        fh.write(record.to_json() + "\n")
                if on_epoch is not None:
                    on_epoch(record)
        except KeyboardInterrupt:
            if out_dir is not None:
                self.checkpoint().save(out_dir / "last.ckpt")
            raise
        ckpt = self.checkpoint()
        if out_dir is not None:
            ckpt.save(out_dir / ("final.ckpt" if self.epoch >= self.cfg.epochs else "last.ckpt"))
        return ckpt


def train(cfg: RunConfig, resume: Optional[Checkpoint] = None,
          on_epoch: Optional[Callable[[MetricsRecord], None]] = None,
          stop_after: Optional[int] = None) -> tuple[Checkpoint, list[MetricsRecord]]:
    trainer = Trainer(cfg)
    if resume is not None:
        trainer.restore(resume)
    ckpt = trainer.fit(on_epoch=on_epoch, stop_after=stop_after)
    return ckpt, trainer.metrics


def dataset_stats_from(ckpt: Checkpoint) -> tuple[np.ndarray, np.ndarray]:
    mean = ckpt.meta.get("channel_mean")
    std = ckpt.meta.get("channel_std")
    if mean is None or std is None:
        raise ValueError("checkpoint carries no channel statistics")
    return np.asarray(mean, dtype=np.float32), np.asarray(std, dtype=np.float32)


def eval_checkpoint(ckpt: Checkpoint, ds: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Accuracy and mean loss of a checkpoint on ``ds``, normalized with the training statistics."""
    cfg = ckpt.config.model
    if ds.images.shape[1] != cfg.c_in:
        raise ValueError(f"dataset has {ds.images.shape[1]} channels, model expects {cfg.c_in}")
    if int(ds.labels.max()) >= cfg.n_classes:
        raise ValueError(f"dataset labels reach {int(ds.labels.max())}, model has {cfg.n_classes} classes")
    mean, std = dataset_stats_from(ckpt)
    model = ckpt.to_model()
    return evaluate(model, ds.with_stats(mean, std), batch_size)


def strip_timing(records: Iterable[MetricsRecord]) -> list[dict]:
    return [{k: v for k, v in asdict(r).items() if k not in TIMING_FIELDS} for r in records]
