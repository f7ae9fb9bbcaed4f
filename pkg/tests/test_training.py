"""Tests for single-machine training."""
import logging

import numpy as np
import pytest

from shardgrad.config import get_settings
from shardgrad.data_io import CharCorpus, ImageDataset, load_corpus
from shardgrad.network import (
    Conv2D, Gradients, MeanPool, NetworkSpec, SoftmaxOutput, backward, fc_spec, forward, init_params, lstm_spec,
    rnn_spec,
)
from shardgrad.optim import OptimizerConfig
from shardgrad.tensor import Rng
from shardgrad.training import SAMPLE_LENGTH, Trainer, accuracy, batch_gradients, grad_norm, sample_text


def test_batch_gradients_is_mean_of_examples(small_spec, small_params, small_batch):
    xs, ys = small_batch
    total = Gradients.zeros_for(small_params)
    for x, y in zip(xs, ys):
        total.accumulate(backward(small_spec, small_params, forward(small_spec, small_params, x), y)[0])
    grads, _, count = batch_gradients(small_spec, small_params, xs, ys)
    assert count == 4
    assert grads.max_relative_error(total.scaled(0.25)) < 1e-12


def test_padding_rows_are_ignored(small_spec, small_params, small_batch):
    xs, ys = small_batch
    padded_x = np.vstack([xs, np.ones((2, 8))])
    padded_y = np.vstack([ys, np.eye(4)[:2]])
    mask = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
    plain, plain_loss, _ = batch_gradients(small_spec, small_params, xs, ys)
    masked, masked_loss, count = batch_gradients(small_spec, small_params, padded_x, padded_y, mask)
    assert count == 4
    assert masked_loss == pytest.approx(plain_loss)
    assert masked.equals(plain)


def test_fully_masked_batch(small_spec, small_params, small_batch):
    xs, ys = small_batch
    grads, value, count = batch_gradients(small_spec, small_params, xs, ys, np.zeros(4))
    assert (value, count) == (0.0, 0)
    assert grad_norm(grads) == 0.0


def test_cnn_batch_uses_image_shape(rng):
    spec = NetworkSpec(layers=(Conv2D(3, 3, 2), MeanPool(2, 2), SoftmaxOutput(10)), input_shape=(1, 6, 6))
    params = init_params(spec, rng)
    images = rng.uniform(0.0, 1.0, 3 * 36).reshape(3, 36)
    targets = np.eye(10)[[1, 4, 7]]
    grads, value, count = batch_gradients(spec, params, images, targets)
    assert count == 3
    single, _ = backward(spec, params, forward(spec, params, images[0].reshape(1, 6, 6)), targets[0])
    assert value > 0.0
    assert grads.layers[0]["K"].shape == single.layers[0]["K"].shape


def test_recurrent_count_is_unmasked_characters(rng):
    spec = rnn_spec(3, (4,))
    params = init_params(spec, rng)
    inputs = np.eye(3)[rng.integers(0, 3, (2, 5))]
    targets = np.eye(3)[rng.integers(0, 3, (2, 5))]
    mask = np.array([[1.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 0.0, 0.0, 0.0]])
    _, value, count = batch_gradients(spec, params, inputs, targets, mask)
    assert count == 7
    assert value > 0.0


def test_accuracy():
    spec = fc_spec([12, 8, 10])
    params = init_params(spec, Rng(0))
    data = ImageDataset(np.zeros((5, 12)), np.arange(5), rows=3, cols=4)
    acc = accuracy(spec, params, data)
    # every row is identical, so at most one label can be right
    assert acc in (0.0, 0.2)
    assert accuracy(spec, params, data.subset([])) == 0.0


def test_trainer_reduces_loss(tiny_images):
    spec = fc_spec([12, 16, 10])
    trainer = Trainer(spec, OptimizerConfig(lr=0.5, batch=8), seed=1)
    params = init_params(spec, Rng(1))
    records = trainer.fit(params, tiny_images, tiny_images, epochs=20)
    assert [r.epoch for r in records][-1] == 20
    assert records[-1].train_loss < records[0].train_loss
    assert records[0].grad_norm > 0.0
    assert records[-1].messages == 0


def test_trainer_is_seeded(tiny_images):
    spec = fc_spec([12, 8, 10])
    runs = []
    for _ in range(2):
        params = init_params(spec, Rng(2))
        Trainer(spec, OptimizerConfig(batch=8), seed=5).fit(params, tiny_images, epochs=2)
        runs.append(params)
    assert runs[0].equals(runs[1])


def test_character_training_logs_sample(corpus_file, caplog):
    corpus = load_corpus(corpus_file)
    spec = rnn_spec(corpus.vocab_size, (8,))
    trainer = Trainer(spec, OptimizerConfig(lr=0.1, batch=4), truncation=5, seq_len=20, seed=0)
    with caplog.at_level(logging.INFO, logger="shardgrad.training"):
        records = trainer.fit(init_params(spec, Rng(0)), corpus, epochs=1)
    assert len(records) == 1
    assert records[0].test_accuracy is None
    assert "Sample after epoch 1" in caplog.text


def test_sample_text_length():
    corpus = CharCorpus("hello world")
    spec = rnn_spec(corpus.vocab_size, (6,))
    text = sample_text(spec, init_params(spec, Rng(0)), corpus, Rng(1))
    assert len(text) == SAMPLE_LENGTH
    assert set(text) <= set(corpus.vocab)


@pytest.mark.slow
def test_mnist_accuracy(mnist):
    train, test = mnist
    spec = fc_spec([784, 480, 160, 10])
    trainer = Trainer(spec, OptimizerConfig(lr=0.1, batch=16), seed=0)
    records = trainer.fit(init_params(spec, Rng(0)), train, test, epochs=20)
    assert max(r.test_accuracy for r in records) >= 0.90


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lstm_corpus_loss_decreases(seed):
    path = get_settings().corpus
    if path is None:
        pytest.skip("SHARDGRAD_CORPUS is not set")
    corpus = load_corpus(path)
    assert len(corpus) >= 100_000
    spec = lstm_spec(corpus.vocab_size)
    params = init_params(spec, Rng(seed))
    trainer = Trainer(spec, OptimizerConfig(kind="rmsprop", lr=0.002, batch=32), seed=seed)
    losses = [r.train_loss for r in trainer.fit(params, corpus, epochs=5)]
    assert all(later < earlier for earlier, later in zip(losses, losses[1:]))
    text = sample_text(spec, params, corpus, Rng(seed))
    assert len(text) == SAMPLE_LENGTH
    assert set(text) <= set(corpus.vocab)
