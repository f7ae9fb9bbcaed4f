"""MNIST-format IDX files, character corpora and mini-batching with padding masks."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from shardgrad.errors import (
    BadMagicError, CountMismatchError, DataFormatError, EmptyCorpusError, RangeError, TruncatedFileError,
)
from shardgrad.tensor import Rng

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
CLASSES = 10


# ── Images ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ImageDataset:
    """Flattened images in [0, 1] (one row per sample) and their class indices."""

    images: np.ndarray
    labels: np.ndarray
    rows: int = 28
    cols: int = 28

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def one_hot(self, indices: np.ndarray | None = None, classes: int = CLASSES) -> np.ndarray:
        labels = self.labels if indices is None else self.labels[indices]
        out = np.zeros((len(labels), classes))
        out[np.arange(len(labels)), labels] = 1.0
        return out

    def subset(self, indices) -> ImageDataset:
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[indices], self.labels[indices], self.rows, self.cols)

    def as_maps(self, indices) -> np.ndarray:
        """Samples reshaped to (count, 1, rows, cols) for convolutional nets."""
        return self.images[indices].reshape(-1, 1, self.rows, self.cols)


def _read(path: Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc


def _header(data: bytes, path: Path, fields: int, expected_magic: int) -> tuple[int, ...]:
    size = 4 * fields
    if len(data) < size:
        raise TruncatedFileError(f"{path}: {len(data)} bytes, header needs {size}")
    values = struct.unpack(f">{fields}I", data[:size])
    if values[0] != expected_magic:
        raise BadMagicError(str(path), values[0], expected_magic)
    return values


def load_idx(images_path: str | Path, labels_path: str | Path, binarize: bool = False) -> ImageDataset:
    """Read an IDX image/label pair; pixels are scaled by 1/255 (or thresholded at 0.5)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    img_bytes = _read(images_path)
    _, count, rows, cols = _header(img_bytes, images_path, 4, IMAGES_MAGIC)
    need = 16 + count * rows * cols
    if len(img_bytes) < need:
        raise TruncatedFileError(f"{images_path}: {len(img_bytes)} bytes, header promises {need}")

    lbl_bytes = _read(labels_path)
    _, label_count = _header(lbl_bytes, labels_path, 2, LABELS_MAGIC)
    if len(lbl_bytes) < 8 + label_count:
        raise TruncatedFileError(f"{labels_path}: {len(lbl_bytes)} bytes, header promises {8 + label_count}")
    if count != label_count:
        raise CountMismatchError(f"{images_path} holds {count} images but {labels_path} holds {label_count} labels")

    pixels = np.frombuffer(img_bytes, dtype=np.uint8, count=count * rows * cols, offset=16)
    images = pixels.reshape(count, rows * cols).astype(np.float64) / 255.0
    if binarize:
        images = (images >= 0.5).astype(np.float64)
    labels = np.frombuffer(lbl_bytes, dtype=np.uint8, count=label_count, offset=8).astype(np.int64)
    if labels.size and labels.max() >= CLASSES:
        raise DataFormatError(f"{labels_path}: label {labels.max()} outside 0..{CLASSES - 1}")
    logger.info("Loaded %d images (%dx%d) from %s", count, rows, cols, images_path)
    return ImageDataset(images, labels, rows, cols)


def write_idx(images: np.ndarray, labels, images_path: str | Path, labels_path: str | Path,
              rows: int = 28, cols: int = 28) -> None:
    """Write [0, 1] images (any shape with rows*cols values per sample) as IDX uint8."""
    images = np.asarray(images, dtype=np.float64).reshape(len(images), rows * cols)
    labels = np.asarray(labels, dtype=np.uint8)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGES_MAGIC, len(images), rows, cols) + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes())


def split_dataset(dataset: ImageDataset, test_count: int, rng: Rng) -> tuple[ImageDataset, ImageDataset]:
    """Seeded random (train, test) split."""
    if not 0 <= test_count <= len(dataset):
        raise RangeError(f"test count {test_count} outside 0..{len(dataset)}")
    order = rng.permutation(len(dataset))
    return dataset.subset(order[test_count:]), dataset.subset(order[:test_count])


# ── Character corpora ─────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class CharCorpus:
    text: str
    vocab: tuple[str, ...] = field(init=False)
    index: dict[str, int] = field(init=False, repr=False)
    stream: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.text:
            raise EmptyCorpusError("corpus contains no characters")
        vocab = tuple(sorted(set(self.text)))
        index = {ch: i for i, ch in enumerate(vocab)}
        object.__setattr__(self, "vocab", vocab)
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "stream", np.fromiter((index[ch] for ch in self.text), dtype=np.int64,
                                                       count=len(self.text)))

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def __len__(self) -> int:
        return len(self.text)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[ch] for ch in text]
        except KeyError as exc:
            raise DataFormatError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, indices) -> str:
        return "".join(self.vocab[int(i)] for i in indices)


def load_corpus(path: str | Path) -> CharCorpus:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path} is not UTF-8 text: {exc}") from exc
    if not text:
        raise EmptyCorpusError(f"{path} is empty")
    corpus = CharCorpus(text)
    logger.info("Loaded corpus %s: %d characters, vocabulary %d", path, len(corpus), corpus.vocab_size)
    return corpus


# ── Batching ─────────────────────────────────────────────────────────────────

Batch = tuple[np.ndarray, np.ndarray, np.ndarray]
Dataset = Union[ImageDataset, CharCorpus]


def _pad_rows(arr: np.ndarray, rows: int) -> np.ndarray:
    if len(arr) >= rows:
        return arr
    pad = np.zeros((rows - len(arr),) + arr.shape[1:], dtype=arr.dtype)
    return np.concatenate([arr, pad])


def _image_batches(ds: ImageDataset, batch_size: int, rng: Rng | None, shuffle: bool, pad: bool) -> Iterator[Batch]:
    order = rng.permutation(len(ds)) if shuffle and rng is not None else np.arange(len(ds))
    if batch_size > len(ds):
        logger.warning("Batch size %d exceeds dataset size %d; emitting one padded batch", batch_size, len(ds))
        pad = True
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        inputs, targets, mask = ds.images[idx], ds.one_hot(idx), np.ones(len(idx))
        if pad:
            inputs, targets, mask = (_pad_rows(a, batch_size) for a in (inputs, targets, mask))
        yield inputs, targets, mask


def corpus_windows(corpus: CharCorpus, seq_len: int, rng: Rng | None = None,
                   shuffle: bool = False) -> list[tuple[int, int]]:
    """(start, length) windows covering every next-character prediction exactly once.

    With shuffling the stride grid starts at a seeded offset and a short
    leading window covers the characters before it.
    """
    predictions = len(corpus) - 1
    offset = int(rng.integers(0, seq_len)) if shuffle and rng is not None else 0
    offset = min(offset, predictions)
    windows = [(0, offset)] if offset else []
    windows += [(s, min(seq_len, predictions - s)) for s in range(offset, predictions, seq_len)]
    return windows


def _corpus_batches(corpus: CharCorpus, batch_size: int, seq_len: int, rng: Rng | None,
                    shuffle: bool, pad: bool) -> Iterator[Batch]:
    if len(corpus) < 2:
        raise EmptyCorpusError("corpus needs at least two characters to form a prediction")
    windows = corpus_windows(corpus, seq_len, rng, shuffle)
    if shuffle and rng is not None:
        windows = [windows[i] for i in rng.permutation(len(windows))]
    if batch_size > len(windows):
        logger.warning("Batch size %d exceeds %d corpus windows; emitting one padded batch",
                       batch_size, len(windows))
        pad = True
    V = corpus.vocab_size
    eye = np.eye(V)
    for start in range(0, len(windows), batch_size):
        group = windows[start:start + batch_size]
        rows = batch_size if pad else len(group)
        inputs = np.zeros((rows, seq_len, V))
        targets = np.zeros((rows, seq_len, V))
        mask = np.zeros((rows, seq_len))
        for r, (s, length) in enumerate(group):
            inputs[r, :length] = eye[corpus.stream[s:s + length]]
            targets[r, :length] = eye[corpus.stream[s + 1:s + 1 + length]]
            mask[r, :length] = 1.0
        yield inputs, targets, mask


def batches(dataset: Dataset, batch_size: int, rng: Rng | None = None, seq_len: int | None = None,
            shuffle: bool = True, pad: bool = False) -> Iterator[Batch]:
    """Yield (inputs, targets, mask) per mini-batch, covering each sample exactly once.

    Images: inputs (B, rows*cols), one-hot targets (B, 10), mask (B,). The last
    batch is short unless ``pad``. Corpora: one-hot (B, seq_len, V) windows whose
    padded tail positions carry mask 0.
    """
    if batch_size < 1:
        raise RangeError(f"batch size must be >= 1, got {batch_size}")
    if isinstance(dataset, CharCorpus):
        if seq_len is None or seq_len < 1:
            raise RangeError("corpus batching needs seq_len >= 1")
        return _corpus_batches(dataset, batch_size, seq_len, rng, shuffle, pad)
    return _image_batches(dataset, batch_size, rng, shuffle, pad)
