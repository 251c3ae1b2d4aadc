import gzip

import numpy as np
import pytest

from conftest import DATA
from ngpflow.mnist import (
    IdxFormatError, load_mnist, read_images, read_labels, subsample_indices, write_idx,
)


@pytest.mark.parametrize("compress", [True, False])
def test_round_trip(tmp_path, compress):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (5, 3, 4), dtype=np.uint8)
    labs = rng.integers(0, 10, 5, dtype=np.uint8)
    write_idx(tmp_path / "i", imgs, compress)
    write_idx(tmp_path / "l", labs, compress)
    assert np.array_equal(read_images(tmp_path / "i"), imgs)
    assert np.array_equal(read_labels(tmp_path / "l"), labs)
    ds = load_mnist(tmp_path / "i", tmp_path / "l", indices=[4, 1])
    assert ds.inputs.shape == (2, 12)
    assert np.array_equal(ds.inputs[0], imgs[4].ravel()) and list(ds.labels) == [labs[4], labs[1]]


def test_gzip_is_reproducible(tmp_path):
    a = np.arange(6, dtype=np.uint8)
    write_idx(tmp_path / "a", a)
    write_idx(tmp_path / "b", a)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_format_errors(tmp_path):
    labs = np.arange(4, dtype=np.uint8)
    write_idx(tmp_path / "l", labs, compress=False)
    with pytest.raises(IdxFormatError, match="bad magic.*offset 0"):
        read_images(tmp_path / "l")
    raw = (tmp_path / "l").read_bytes()
    (tmp_path / "t").write_bytes(raw[:-2])
    with pytest.raises(IdxFormatError, match="truncated data at offset 10"):
        read_labels(tmp_path / "t")
    (tmp_path / "h").write_bytes(raw[:6])
    with pytest.raises(IdxFormatError, match="truncated dimension"):
        read_labels(tmp_path / "h")
    with gzip.open(tmp_path / "g", "wb") as fh:
        fh.write(raw[:2])
    with pytest.raises(IdxFormatError, match="truncated header"):
        read_labels(tmp_path / "g")


def test_subsample_is_seeded():
    a = subsample_indices(100, 10, 3)
    assert np.array_equal(a, subsample_indices(100, 10, 3))
    assert len(set(a)) == 10
    assert not np.array_equal(a, subsample_indices(100, 10, 4))
    assert np.array_equal(subsample_indices(5, None, 0), np.arange(5))


def test_bundled_subset():
    imgs = read_images(DATA / "train-images-idx3-ubyte.gz")
    labs = read_labels(DATA / "train-labels-idx1-ubyte.gz")
    assert imgs.shape == (4000, 28, 28) and labs.shape == (4000,)
    assert np.bincount(labs).tolist() == [400] * 10
    assert read_images(DATA / "test-images-idx3-ubyte.gz").shape == (1000, 28, 28)
