import gzip
import os
import struct
import sys

import numpy as np
import pytest

cur_dir = os.path.dirname(os.path.abspath(__file__))
src_path = os.path.dirname(cur_dir)
if src_path not in sys.path:
    sys.path.append(src_path)

from src.data.load_mnist_data import (
    IDX_IMAGE_MAGIC,
    MNIST_DIR_ENV,
    MNIST_FILES,
    Dataset,
    IdxFormatError,
    load_mnist,
    load_mnist_idx,
    mnist_dir_from_env,
    synthetic_dataset,
)


def write_idx(path, images, magic=IDX_IMAGE_MAGIC, extra=b"", cut=0, compress=False):
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    raw = struct.pack(">IIII", magic, count, rows, cols) + images.tobytes() + extra
    if cut:
        raw = raw[:-cut]
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(raw)
    return len(raw)


@pytest.fixture
def images():
    return np.arange(3 * 28 * 28, dtype=np.int64).reshape(3, 28, 28) % 256


"""IDX PARSING TESTS"""

# pixels come back flattened and divided by 255
def test_load_normalises_pixels(tmp_path, images):
    path = tmp_path / "imgs-idx3-ubyte"
    write_idx(path, images)

    data = load_mnist_idx(path)

    assert data.count == 3 and data.dim == 784
    assert data.samples[0, 0] == 0.0
    assert data.samples[0, 255] == 1.0
    np.testing.assert_array_equal(data.samples, images.reshape(3, 784) / 255.0)


def test_gzipped_file_is_read_transparently(tmp_path, images):
    plain, packed = tmp_path / "a-idx3-ubyte", tmp_path / "a-idx3-ubyte.gz"
    write_idx(plain, images)
    write_idx(packed, images, compress=True)

    np.testing.assert_array_equal(load_mnist_idx(plain).samples, load_mnist_idx(packed).samples)


def test_bad_magic_reports_offset_zero(tmp_path, images):
    path = tmp_path / "labels-idx1-ubyte"
    write_idx(path, images, magic=0x00000801)

    with pytest.raises(IdxFormatError) as error:
        load_mnist_idx(path)
    assert error.value.offset == 0


def test_shape_mismatch_reports_dimension_offset(tmp_path):
    path = tmp_path / "small-idx3-ubyte"
    write_idx(path, np.zeros((2, 14, 14)))

    with pytest.raises(IdxFormatError) as error:
        load_mnist_idx(path)
    assert error.value.offset == 8
    # the expected shape can be changed
    assert load_mnist_idx(path, expected_shape=(14, 14)).dim == 196


def test_truncated_payload_reports_end_of_file(tmp_path, images):
    path = tmp_path / "cut-idx3-ubyte"
    size = write_idx(path, images, cut=10)

    with pytest.raises(IdxFormatError) as error:
        load_mnist_idx(path)
    assert error.value.offset == size


def test_trailing_bytes_report_end_of_payload(tmp_path, images):
    path = tmp_path / "long-idx3-ubyte"
    write_idx(path, images, extra=b"\x00\x01")

    with pytest.raises(IdxFormatError) as error:
        load_mnist_idx(path)
    assert error.value.offset == 16 + 3 * 784


def test_short_header(tmp_path):
    path = tmp_path / "tiny-idx3-ubyte"
    path.write_bytes(b"\x00\x00\x08")

    with pytest.raises(IdxFormatError) as error:
        load_mnist_idx(path)
    assert error.value.offset == 3


def test_missing_file_raises():
    with pytest.raises(FileNotFoundError):
        load_mnist_idx(os.path.join("no", "such", "file-idx3-ubyte"))


def test_path_must_be_a_path():
    with pytest.raises(ValueError):
        load_mnist_idx(42)


"""DATASET TESTS"""

@pytest.mark.parametrize("bad", [np.zeros(5), np.full((2, 2), 1.5), np.full((2, 2), -0.1)])
def test_dataset_rejects_bad_samples(bad):
    with pytest.raises(ValueError):
        Dataset(bad)


def test_dataset_is_read_only():
    data = Dataset(np.zeros((2, 3)))

    with pytest.raises(ValueError):
        data.samples[0, 0] = 1.0


def test_take_keeps_the_first_rows():
    data = synthetic_dataset(3, 10, 4)

    np.testing.assert_array_equal(data.take(4).samples, data.samples[:4])


def test_synthetic_dataset_is_deterministic():
    a = synthetic_dataset(7, 20, 16, sparsity=0.5)
    b = synthetic_dataset(7, 20, 16, sparsity=0.5)
    c = synthetic_dataset(8, 20, 16, sparsity=0.5)

    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)


@pytest.mark.parametrize("sparsity", [0.0, 0.5, 1.0])
def test_synthetic_sparsity(sparsity):
    data = synthetic_dataset(0, 200, 50, sparsity=sparsity)

    zero_share = np.mean(data.samples == 0.0)
    assert abs(zero_share - sparsity) < 0.02
    assert data.samples.min() >= 0.0 and data.samples.max() <= 1.0


@pytest.mark.parametrize("count, dim, sparsity", [(-1, 4, 0.0), (4, 0, 0.0), (4, 4, 1.5)])
def test_synthetic_rejects_bad_arguments(count, dim, sparsity):
    with pytest.raises(ValueError):
        synthetic_dataset(0, count, dim, sparsity)


"""MNIST FOLDER TESTS"""

def test_env_var_overrides_default(monkeypatch, tmp_path):
    monkeypatch.setenv(MNIST_DIR_ENV, str(tmp_path))

    assert mnist_dir_from_env() == str(tmp_path)
    assert mnist_dir_from_env("explicit") == "explicit"


def test_load_mnist_reads_both_splits(monkeypatch, tmp_path, images):
    write_idx(tmp_path / MNIST_FILES["train"], images)
    write_idx(tmp_path / (MNIST_FILES["test"] + ".gz"), images[:1], compress=True)
    monkeypatch.setenv(MNIST_DIR_ENV, str(tmp_path))

    train, test = load_mnist()

    assert (train.count, test.count) == (3, 1)
