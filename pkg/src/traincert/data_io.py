"""Deterministic data ingestion: IDX-format image/label files, pre-tokenized
integer id streams, window extraction, and seeded batch iteration.

Tokenization is out of scope; the package consumes flat id files, either
little-endian unsigned 32-bit binary or newline/whitespace-separated decimal
text (auto-detected). Synthetic generators for both data kinds keep the repo
self-contained; see the README for the conversion recipe for real corpora.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgument, InvalidToken
from .linalg import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

N_CLASSES = 10


@dataclass
class MnistSet:
    """Flattened images in [0, 1] with one-hot labels."""

    images: np.ndarray  # (n, pixels) float64
    labels: np.ndarray  # (n, 10) one-hot float64

    @property
    def n(self) -> int:
        return self.images.shape[0]


@dataclass
class TokenCorpus:
    train_ids: np.ndarray
    test_ids: np.ndarray
    vocab_size: int
    context_len: int

    def __post_init__(self):
        for name, ids in (("train", self.train_ids), ("test", self.test_ids)):
            if ids.size and int(ids.max()) >= self.vocab_size:
                raise InvalidToken(
                    f"{name} split contains id {int(ids.max())} >= vocab {self.vocab_size}"
                )


def _read_idx_header(raw: bytes, path, expected_magic: int, n_dims: int) -> tuple:
    head_len = 4 * (1 + n_dims)
    if len(raw) < head_len:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    fields = struct.unpack(f">{1 + n_dims}I", raw[:head_len])
    if fields[0] != expected_magic:
        raise FormatError(
            f"{path}: bad IDX magic 0x{fields[0]:08x}, expected 0x{expected_magic:08x}",
            offset=0,
        )
    return fields[1:]


def load_mnist_idx(images_path, labels_path, subset: int | None = None) -> MnistSet:
    """Load the first ``subset`` samples from big-endian IDX files.

    Pixels are scaled to [0, 1]; labels become one-hot rows over 10 classes.
    """
    img_raw = Path(images_path).read_bytes()
    n_images, n_rows, n_cols = _read_idx_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    pixels = n_rows * n_cols
    expected = 16 + n_images * pixels
    if len(img_raw) < expected:
        raise FormatError(f"{images_path}: truncated image data", offset=len(img_raw))

    lbl_raw = Path(labels_path).read_bytes()
    (n_labels,) = _read_idx_header(lbl_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lbl_raw) < 8 + n_labels:
        raise FormatError(f"{labels_path}: truncated label data", offset=len(lbl_raw))
    if n_labels != n_images:
        raise FormatError(
            f"label count {n_labels} does not match image count {n_images}", offset=4
        )

    n = n_images if subset is None else subset
    if n > n_images:
        raise InvalidArgument(f"requested {n} samples but files hold {n_images}")
    images = (
        np.frombuffer(img_raw, dtype=np.uint8, count=n * pixels, offset=16)
        .reshape(n, pixels)
        .astype(np.float64)
        / 255.0
    )
    raw_labels = np.frombuffer(lbl_raw, dtype=np.uint8, count=n, offset=8)
    if raw_labels.size and raw_labels.max() >= N_CLASSES:
        raise FormatError(
            f"{labels_path}: label {int(raw_labels.max())} outside 0..{N_CLASSES - 1}",
            offset=8 + int(np.argmax(raw_labels >= N_CLASSES)),
        )
    labels = np.zeros((n, N_CLASSES))
    labels[np.arange(n), raw_labels] = 1.0
    return MnistSet(images=images, labels=labels)


def write_idx_images(path, images_u8: np.ndarray) -> None:
    """Write (n, rows, cols) uint8 images in IDX format."""
    n, rows, cols = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images_u8.astype(np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def synth_classification_images(
    n: int, rng: Rng, side: int = 28
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic MNIST-shaped synthetic data: one low-rank prototype per
    class plus pixel noise. Returns uint8 images (n, side, side) and labels."""
    protos = []
    for _ in range(N_CLASSES):
        u = rng.uniform((side,))
        v = rng.uniform((side,))
        proto = np.outer(u, v)
        protos.append(proto / proto.max())
    labels = rng.integers(0, N_CLASSES, n).astype(np.uint8)
    noise = rng.uniform((n, side, side))
    images = 0.75 * np.stack([protos[c] for c in labels]) + 0.25 * noise
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8), labels


def write_synth_mnist(images_path, labels_path, n: int, seed: int) -> None:
    images, labels = synth_classification_images(n, Rng(seed).derive("mnist"))
    write_idx_images(images_path, images)
    write_idx_labels(labels_path, labels)


# ---------------------------------------------------------------------------
# Token id streams.
# ---------------------------------------------------------------------------

_TEXT_CHARS = set(b"0123456789 \t\r\n")


def load_token_ids(path, take_first: int | None = None, vocab_size: int | None = None) -> np.ndarray:
    """Load a flat id stream; binary little-endian u32 or decimal text.

    Returns the first ``take_first`` ids (all of them when the file is
    shorter or ``take_first`` is None). Ids at or above ``vocab_size`` raise
    ``InvalidToken`` naming the offending position.
    """
    raw = Path(path).read_bytes()
    if raw and all(byte in _TEXT_CHARS for byte in raw):
        ids = np.array([int(tok) for tok in raw.split()], dtype=np.int64)
    else:
        if len(raw) % 4 != 0:
            raise FormatError(
                f"{path}: binary id stream length {len(raw)} not a multiple of 4",
                offset=len(raw) - len(raw) % 4,
            )
        ids = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    if take_first is not None:
        ids = ids[: max(take_first, 0)]
    if vocab_size is not None and ids.size and int(ids.max()) >= vocab_size:
        pos = int(np.argmax(ids >= vocab_size))
        raise InvalidToken(
            f"{path}: id {int(ids[pos])} at position {pos} >= vocab {vocab_size}"
        )
    return ids


def save_token_ids(path, ids: np.ndarray) -> None:
    """Write a binary little-endian u32 id stream."""
    np.asarray(ids, dtype="<u4").tofile(path)


def synth_token_stream(n_tokens: int, vocab_size: int, rng: Rng) -> np.ndarray:
    """Deterministic learnable stream: an affine next-token rule with noise.

    With probability 0.85 the next id is ``(3 * cur + 7) % vocab``, otherwise
    uniform noise, so a next-token model has real structure to pick up.
    """
    noise_flags = rng.uniform((n_tokens,)) < 0.15
    noise_vals = rng.integers(0, vocab_size, n_tokens)
    ids = np.empty(n_tokens, dtype=np.int64)
    cur = int(noise_vals[0])
    for i in range(n_tokens):
        cur = int(noise_vals[i]) if noise_flags[i] else (3 * cur + 7) % vocab_size
        ids[i] = cur
    return ids


# ---------------------------------------------------------------------------
# Windowing and batches.
# ---------------------------------------------------------------------------


def windows(ids: np.ndarray, context_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping windows: inputs of length T and targets shifted by one."""
    ids = np.asarray(ids, dtype=np.int64)
    span = context_len + 1
    n_win = ids.size // span
    block = ids[: n_win * span].reshape(n_win, span)
    return block[:, :-1], block[:, 1:]


def batches(
    ids: np.ndarray, batch_size: int, context_len: int, rng: Rng
):
    """Deterministic per-epoch batch stream over shuffled full windows."""
    inputs, targets = windows(ids, context_len)
    n_win = inputs.shape[0]
    if n_win == 0:
        raise InvalidArgument(
            f"corpus of {np.asarray(ids).size} tokens is too short for context {context_len}"
        )
    order = rng.permutation(n_win)
    for start in range(0, n_win, batch_size):
        rows = order[start : start + batch_size]
        yield inputs[rows], targets[rows]
