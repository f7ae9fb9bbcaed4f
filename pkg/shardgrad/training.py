"""Single-machine training: mini-batch gradients, epochs, evaluation and sampling."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from shardgrad.data_io import CharCorpus, Dataset, ImageDataset, batches
from shardgrad.errors import ShapeError
from shardgrad.network.params import Gradients, Parameters
from shardgrad.network.passes import LossKind, backward, forward
from shardgrad.network.recurrent import DEFAULT_TRUNCATION, sample_sequence, tbptt_step
from shardgrad.network.spec import NetworkSpec
from shardgrad.optim import Optimizer, OptimizerConfig
from shardgrad.tensor import Rng

logger = logging.getLogger(__name__)

SAMPLE_LENGTH = 300


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float | None
    wall_ms: float
    grad_norm: float
    messages: int = 0
    data_units: int = 0


def batch_gradients(spec: NetworkSpec, params: Parameters, inputs: np.ndarray, targets: np.ndarray,
                    mask: np.ndarray | None = None, loss_kind: LossKind = "cross_entropy",
                    truncation: int = DEFAULT_TRUNCATION) -> tuple[Gradients, float, int]:
    """Mean gradient and mean loss over the unmasked samples (or characters) of a batch.

    Returns (gradients, mean loss, count). A batch with nothing unmasked gives
    zero gradients, zero loss and count 0.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if spec.is_recurrent:
        grads = Gradients.zeros_for(params)
        total = 0.0
        mask = np.ones(inputs.shape[:2]) if mask is None else np.asarray(mask)
        for seq, tgt, msk in zip(inputs, targets, mask):
            if not msk.any():
                continue
            g, value = tbptt_step(spec, params, seq, tgt, msk, truncation, loss_kind)
            grads.accumulate(g)
            total += value
        count = int(mask.sum())
    else:
        if mask is not None:
            keep = np.asarray(mask) == 1
            inputs, targets = inputs[keep], targets[keep]
        count = len(inputs)
        if count == 0:
            return Gradients.zeros_for(params), 0.0, 0
        if spec.is_dense_only:
            grads, total = backward(spec, params, forward(spec, params, inputs), targets, loss_kind)
        else:
            grads = Gradients.zeros_for(params)
            total = 0.0
            for x, t in zip(inputs, targets):
                g, value = backward(spec, params, forward(spec, params, x.reshape(spec.input_shape)), t, loss_kind)
                grads.accumulate(g)
                total += value
    if count == 0:
        return grads, 0.0, 0
    return grads.scaled(1.0 / count), total / count, count


def grad_norm(grads: Parameters) -> float:
    flat = grads.flatten()
    return float(np.sqrt(flat @ flat))


def predict_classes(spec: NetworkSpec, params: Parameters, dataset: ImageDataset) -> np.ndarray:
    if spec.is_dense_only:
        return np.argmax(forward(spec, params, dataset.images).output, axis=1)
    maps = dataset.images.reshape((len(dataset),) + spec.input_shape)
    return np.array([int(np.argmax(forward(spec, params, x).output)) for x in maps], dtype=np.int64)


def accuracy(spec: NetworkSpec, params: Parameters, dataset: ImageDataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_classes(spec, params, dataset) == dataset.labels))


class Trainer:
    """Epochs of mini-batch descent on one machine."""

    def __init__(self, spec: NetworkSpec, optimizer_config: OptimizerConfig,
                 loss_kind: LossKind = "cross_entropy", truncation: int = DEFAULT_TRUNCATION,
                 seq_len: int = 100, seed: int = 0) -> None:
        self.spec = spec
        self.optimizer = Optimizer(optimizer_config)
        self.batch_size = optimizer_config.batch
        self.loss_kind = loss_kind
        self.truncation = truncation
        self.seq_len = seq_len
        self.rng = Rng(seed)

    def train_epoch(self, params: Parameters, dataset: Dataset) -> tuple[float, float]:
        """One pass over ``dataset``; returns (mean loss, mean gradient norm)."""
        seq_len = self.seq_len if isinstance(dataset, CharCorpus) else None
        total, count, norms = 0.0, 0, []
        for inputs, targets, mask in batches(dataset, self.batch_size, self.rng, seq_len=seq_len):
            grads, mean_loss, n = batch_gradients(self.spec, params, inputs, targets, mask,
                                                  self.loss_kind, self.truncation)
            if n == 0:
                continue
            self.optimizer.apply(params, grads)
            if not params.is_finite():
                raise ShapeError("parameters became non-finite; lower the learning rate")
            total += mean_loss * n
            count += n
            norms.append(grad_norm(grads))
        return total / max(count, 1), float(np.mean(norms)) if norms else 0.0

    def fit(self, params: Parameters, train: Dataset, test: ImageDataset | None = None,
            epochs: int = 1) -> list[EpochRecord]:
        records = []
        for epoch in range(1, epochs + 1):
            started = time.perf_counter()
            train_loss, norm = self.train_epoch(params, train)
            wall_ms = (time.perf_counter() - started) * 1000.0
            test_acc = accuracy(self.spec, params, test) if test is not None else None
            records.append(EpochRecord(epoch, train_loss, test_acc, wall_ms, norm))
            logger.info("Epoch %d: loss=%.6f accuracy=%s grad_norm=%.3e (%.0f ms)", epoch, train_loss,
                        "n/a" if test_acc is None else f"{test_acc:.4f}", norm, wall_ms)
            if isinstance(train, CharCorpus):
                text = sample_text(self.spec, params, train, self.rng)
                logger.info("Sample after epoch %d: %r", epoch, text)
        return records


def sample_text(spec: NetworkSpec, params: Parameters, corpus: CharCorpus, rng: Rng,
                length: int = SAMPLE_LENGTH, mode: str = "stochastic") -> str:
    """Decode ``length`` sampled characters, seeded with the corpus's first character."""
    indices = sample_sequence(spec, params, int(corpus.stream[0]), length, rng, mode)
    return corpus.decode(indices)
