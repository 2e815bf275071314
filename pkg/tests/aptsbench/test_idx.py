from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from aptsbench.data.datasets import Dataset
from aptsbench.data.idx import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    IdxFormatError,
    load_idx,
    read_idx,
    write_dataset_idx,
    write_idx,
)
from aptsbench.errors import DomainError

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
IMAGES = FIXTURES / "mnist4-images.idx"
LABELS = FIXTURES / "mnist4-labels.idx"


def test_load_idx__reads_the_fixture_pair() -> None:
    data = load_idx(IMAGES, LABELS)

    assert data.inputs.shape == (4, 784)
    np.testing.assert_array_equal(data.labels, [3, 1, 4, 1])
    assert data.num_classes == 10
    assert 0.0 <= data.inputs.min() and data.inputs.max() <= 1.0


def test_load_idx__preserves_every_pixel_byte() -> None:
    payload = IMAGES.read_bytes()[16:]

    data = load_idx(IMAGES, LABELS)

    assert sum(payload) == 343296
    assert float(data.inputs.sum()) * 255.0 == pytest.approx(343296.0, rel=1e-12)


def test_load_idx_with_limit__keeps_leading_samples() -> None:
    data = load_idx(IMAGES, LABELS, limit=2)

    assert data.sample_count == 2
    np.testing.assert_array_equal(data.labels, [3, 1])


def test_read_idx__checks_the_expected_magic() -> None:
    assert read_idx(LABELS, expected_magic=LABEL_MAGIC).shape == (4,)

    with pytest.raises(IdxFormatError) as excinfo:
        read_idx(LABELS, expected_magic=IMAGE_MAGIC)

    assert excinfo.value.offset == 0


def test_corrupted_magic__raises_format_error(tmp_path: Path) -> None:
    corrupted = tmp_path / "images.idx"
    raw = bytearray(IMAGES.read_bytes())
    raw[2] = 0x0D
    corrupted.write_bytes(bytes(raw))

    with pytest.raises(IdxFormatError):
        read_idx(corrupted)


def test_truncated_payload__reports_the_file_length(tmp_path: Path) -> None:
    truncated = tmp_path / "images.idx"
    truncated.write_bytes(IMAGES.read_bytes()[:-10])

    with pytest.raises(IdxFormatError) as excinfo:
        load_idx(truncated, LABELS)

    assert excinfo.value.offset == 3142
    assert "truncated" in str(excinfo.value)


def test_mismatched_counts__raise_domain_error(tmp_path: Path) -> None:
    labels = write_idx(tmp_path / "labels.idx", np.array([1, 2, 3], dtype=np.uint8))

    with pytest.raises(DomainError):
        load_idx(IMAGES, labels)


def test_written_dataset__loads_back_unchanged(tmp_path: Path) -> None:
    original = load_idx(IMAGES, LABELS)

    images, labels = write_dataset_idx(original, tmp_path / "i.idx", tmp_path / "l.idx")
    reloaded = load_idx(images, labels)

    np.testing.assert_array_equal(reloaded.inputs, original.inputs)
    np.testing.assert_array_equal(reloaded.labels, original.labels)


def test_write_dataset_idx__rejects_non_image_widths(tmp_path: Path) -> None:
    dataset = Dataset(np.zeros((2, 3)), np.zeros(2, dtype=np.int64), "x", 0, 10)

    with pytest.raises(DomainError):
        write_dataset_idx(dataset, tmp_path / "i.idx", tmp_path / "l.idx")

