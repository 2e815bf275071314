"""Reader and writer for the big-endian IDX files used by MNIST."""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from aptsbench.data.datasets import Dataset
from aptsbench.errors import DomainError

LOG = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
UBYTE_TYPE = 0x08
MNIST_CLASSES = 10


class IdxFormatError(ValueError):
    """Raised when an IDX file has a bad header or a truncated payload."""

    def __init__(self, path: Path, offset: int, message: str) -> None:
        super().__init__(f"{path} (byte {offset}): {message}")
        self.path = path
        self.offset = offset


def read_idx(path: Path, *, expected_magic: int | None = None) -> NDArray[np.uint8]:
    """
    Return the unsigned-byte payload of an IDX file shaped by its header.

    Header layout: ``0x00 0x00 <type> <ndim>`` followed by ``ndim`` big-endian 32-bit sizes.
    """
    raw = path.read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(path, len(raw), "file too short for the magic number")
    (magic,) = struct.unpack(">i", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(path, 0, f"magic {magic:#010x}, expected {expected_magic:#010x}")
    if raw[0] != 0 or raw[1] != 0 or raw[2] != UBYTE_TYPE or raw[3] == 0:
        raise IdxFormatError(path, 0, f"unsupported magic {magic:#010x}")

    ndim = raw[3]
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(path, len(raw), f"header needs {ndim} dimension fields")
    shape = struct.unpack(f">{ndim}i", raw[4:header_end])
    if any(size < 0 for size in shape):
        raise IdxFormatError(path, 4, f"negative dimension in {shape}")
    expected = int(np.prod(shape, dtype=np.int64))
    available = len(raw) - header_end
    if available < expected:
        raise IdxFormatError(
            path,
            len(raw),
            f"payload truncated: {available} of {expected} bytes present",
        )
    if available > expected:
        LOG.warning("Ignoring %d trailing bytes in %s", available - expected, path)
    payload = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_end)
    return payload.reshape(shape).copy()


def load_idx(
    images_path: Path,
    labels_path: Path,
    *,
    limit: int | None = None,
    seed: int = 0,
) -> Dataset:
    """Load an image/label pair; pixels become float64 in ``[0, 1]``, images are flattened."""
    images = read_idx(images_path, expected_magic=IMAGE_MAGIC)
    labels = read_idx(labels_path, expected_magic=LABEL_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(images_path, 3, f"expected 3 image dimensions, got {images.ndim}")
    if labels.ndim != 1:
        raise IdxFormatError(labels_path, 3, f"expected 1 label dimension, got {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise DomainError(
            f"{images.shape[0]} images but {labels.shape[0]} labels",
        )
    if labels.size and int(labels.max()) >= MNIST_CLASSES:
        raise DomainError(f"label {int(labels.max())} outside [0, {MNIST_CLASSES})")
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit]

    inputs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    LOG.info("Loaded %d IDX samples with %d features", inputs.shape[0], inputs.shape[1])
    return Dataset(
        inputs=inputs,
        labels=labels.astype(np.int64),
        name=images_path.stem,
        seed=seed,
        num_classes=MNIST_CLASSES,
    )


def write_idx(path: Path, data: NDArray[np.uint8]) -> Path:
    if data.dtype != np.uint8:
        raise DomainError("IDX writer only supports unsigned bytes")
    header = struct.pack(">BBBB", 0, 0, UBYTE_TYPE, data.ndim)
    header += struct.pack(f">{data.ndim}i", *data.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + np.ascontiguousarray(data).tobytes())
    return path


def write_dataset_idx(
    dataset: Dataset,
    images_path: Path,
    labels_path: Path,
    *,
    rows: int = 28,
    cols: int = 28,
) -> tuple[Path, Path]:
    """Write ``dataset`` back to an image/label IDX pair; pixels are re-quantised to bytes."""
    if dataset.inputs.shape[1] != rows * cols:
        raise DomainError(f"inputs have {dataset.inputs.shape[1]} features, expected {rows * cols}")
    pixels = np.rint(dataset.inputs * 255.0)
    if pixels.min(initial=0.0) < 0.0 or pixels.max(initial=0.0) > 255.0:
        raise DomainError("pixel values must lie in [0, 1]")
    images = pixels.astype(np.uint8).reshape(-1, rows, cols)
    write_idx(images_path, images)
    write_idx(labels_path, dataset.labels.astype(np.uint8))
    return images_path, labels_path
