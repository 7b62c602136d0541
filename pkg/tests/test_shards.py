"""Shard files, readers, packing, and the bounded batch stream."""

import os
import time

import numpy as np
import pytest
from PIL import Image

from lanedetect import shards
from lanedetect.data import DatasetIndex, IndexEntry
from lanedetect.errors import DataError


def _sample_arrays(n=7, h=10, w=12, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, (n, h, w, 3), np.uint8)
    masks = (rng.random((n, h, w)) > 0.7).astype(np.uint8)
    return imgs, masks


def test_shard_roundtrip_is_lossless(tmp_path):
    imgs, masks = _sample_arrays()
    path = str(tmp_path / "s.ldpk")
    shards.write_shard(path, imgs, masks)
    got_imgs, got_masks = shards.read_shard(path)
    assert np.array_equal(got_imgs, imgs)
    assert np.array_equal(got_masks, masks)


def test_shard_reader_random_access(tmp_path):
    imgs, masks = _sample_arrays()
    path = str(tmp_path / "s.ldpk")
    shards.write_shard(path, imgs, masks)
    r = shards.ShardReader(path)
    assert (r.count, r.h, r.w) == (7, 10, 12)
    assert np.array_equal(r.image(3), imgs[3])
    assert np.array_equal(r.mask(6), masks[6])


def test_write_shard_validation(tmp_path):
    imgs, masks = _sample_arrays()
    with pytest.raises(DataError, match="bad shard arrays"):
        shards.write_shard(str(tmp_path / "x"), imgs[..., :2], masks)
    with pytest.raises(DataError, match="uint8"):
        shards.write_shard(str(tmp_path / "x"), imgs.astype(np.float32), masks)


def test_reader_rejects_corrupt_files(tmp_path):
    imgs, masks = _sample_arrays()
    good = str(tmp_path / "good.ldpk")
    shards.write_shard(good, imgs, masks)
    raw = open(good, "rb").read()

    short = tmp_path / "short.ldpk"
    short.write_bytes(raw[:10])
    with pytest.raises(DataError, match="too short"):
        shards.ShardReader(str(short))

    wrong = tmp_path / "wrong.ldpk"
    wrong.write_bytes(b"XXXX0001" + raw[8:])
    with pytest.raises(DataError, match="magic"):
        shards.ShardReader(str(wrong))

    cut = tmp_path / "cut.ldpk"
    cut.write_bytes(raw[:-1])
    with pytest.raises(DataError, match="header implies"):
        shards.ShardReader(str(cut))

    fat = tmp_path / "fat.ldpk"
    fat.write_bytes(raw + b"\x00")
    with pytest.raises(DataError, match="header implies"):
        shards.ShardReader(str(fat))


# ------------------------------------------------------------------ packing

def _repeated_index(tmp_path, n):
    """An index of n entries all backed by the same tiny files on disk."""
    img = np.random.default_rng(1).integers(0, 256, (10, 16, 3), np.uint8)
    mask = np.zeros((10, 16), np.uint8)
    mask[4:7, :] = 1
    img_p = str(tmp_path / "frame.png")
    mask_p = str(tmp_path / "frame_mask.png")
    Image.fromarray(img).save(img_p)
    Image.fromarray(mask).save(mask_p)
    entries = tuple(IndexEntry(img_p, mask_p, None) for _ in range(n))
    return DatasetIndex(str(tmp_path), entries)


def test_pack_shards_sizes_300_at_128(tmp_path):
    index = _repeated_index(tmp_path, 300)
    out = tmp_path / "packed"
    paths = shards.pack_shards(index, str(out), shard_size=128,
                               scale=1.0, allow_any_size=True)
    assert [os.path.basename(p) for p in paths] == [
        "shard-0000.ldpk", "shard-0001.ldpk", "shard-0002.ldpk"]
    counts = [shards.ShardReader(p).count for p in paths]
    assert counts == [128, 128, 44]


def test_pack_shards_content_matches_source(tmp_path):
    index = _repeated_index(tmp_path, 3)
    paths = shards.pack_shards(index, str(tmp_path / "packed"), shard_size=10,
                               scale=1.0, allow_any_size=True)
    imgs, masks = shards.read_shard(paths[0])
    src = np.asarray(Image.open(index.entries[0].image))
    assert np.array_equal(imgs[1], src)
    assert np.array_equal(masks[2], masks[0])
    assert set(np.unique(masks)) == {0, 1}


def test_pack_shards_validation(tmp_path):
    index = _repeated_index(tmp_path, 2)
    with pytest.raises(DataError, match="shard_size"):
        shards.pack_shards(index, str(tmp_path / "p"), shard_size=0)
    with pytest.raises(DataError, match="empty"):
        shards.pack_shards(DatasetIndex("/x", ()), str(tmp_path / "p"))


def test_find_shards_file_dir_list(tmp_path, tiny_shards):
    single = os.path.join(tiny_shards, "shard-0000.ldpk")
    assert shards.find_shards(single) == [single]
    assert shards.find_shards(tiny_shards) == [single]
    assert shards.find_shards([tiny_shards, single]) == [single, single]
    empty = tmp_path / "nothing"
    empty.mkdir()
    with pytest.raises(DataError, match="no .ldpk"):
        shards.find_shards(str(empty))
    with pytest.raises(DataError, match="does not exist"):
        shards.find_shards(str(tmp_path / "missing"))


# ------------------------------------------------------------- batch stream

def test_batch_stream_shapes_and_ranges(tiny_shards):
    paths = shards.find_shards(tiny_shards)
    batches = list(shards.batch_iterator(paths, batch_size=5, seed=1))
    assert [b[0].data.shape[0] for b in batches] == [5, 5, 2]   # 12 samples
    for x, y in batches:
        assert x.data.dtype == np.float32 and y.data.dtype == np.float32
        assert x.data.shape[1:] == (3, 16, 32)
        assert y.data.shape[1:] == (1, 16, 32)
        assert x.data.min() >= 0.0 and x.data.max() <= 1.0
        assert set(np.unique(y.data)) <= {0.0, 1.0}
        assert not x.data.flags.writeable and not y.data.flags.writeable


def test_batch_stream_x_is_image_over_255(tiny_shards):
    paths = shards.find_shards(tiny_shards)
    r = shards.ShardReader(paths[0])
    x, y = next(iter(shards.batch_iterator(paths, batch_size=4, shuffle=False)))
    want = r.image(0).transpose(2, 0, 1).astype(np.float32) * np.float32(1 / 255)
    assert np.array_equal(x.data[0], want)
    assert np.array_equal(y.data[0, 0], r.mask(0).astype(np.float32))


def test_batch_stream_epoch_order(tiny_shards):
    paths = shards.find_shards(tiny_shards)

    def first_batch(epoch, seed=3):
        it = shards.batch_iterator(paths, batch_size=12, seed=seed, epoch=epoch)
        return next(iter(it))[0].data

    assert np.array_equal(first_batch(0), first_batch(0))
    assert not np.array_equal(first_batch(0), first_batch(1))
    assert not np.array_equal(first_batch(0), first_batch(0, seed=4))


def test_batch_stream_prefetch_bound(tiny_shards):
    paths = shards.find_shards(tiny_shards)
    for depth in (0, 1, 2):
        stream = shards.batch_iterator(paths, batch_size=1, prefetch_depth=depth)
        it = iter(stream)
        time.sleep(0.05)               # let the producer run ahead
        for _ in range(4):
            next(it)
            time.sleep(0.005)
        for _ in it:
            pass
        stats = stream.stats()
        assert stats["batches"] == 12
        assert stats["peak_in_flight"] <= depth + 1


def test_batch_stream_augmentation(tiny_shards):
    paths = shards.find_shards(tiny_shards)
    plain = next(iter(shards.batch_iterator(paths, batch_size=12, seed=2)))
    aug1 = next(iter(shards.batch_iterator(paths, batch_size=12, seed=2,
                                           augment_intensity=0.3)))
    aug2 = next(iter(shards.batch_iterator(paths, batch_size=12, seed=2,
                                           augment_intensity=0.3)))
    assert not np.array_equal(plain[0].data, aug1[0].data)
    assert np.array_equal(aug1[0].data, aug2[0].data)
    assert np.array_equal(plain[1].data, aug1[1].data)   # labels untouched
    assert aug1[0].data.min() >= 0.0 and aug1[0].data.max() <= 1.0


def test_batch_stream_validation(tmp_path, tiny_shards):
    paths = shards.find_shards(tiny_shards)
    with pytest.raises(DataError, match="batch_size"):
        shards.batch_iterator(paths, batch_size=0)
    with pytest.raises(DataError, match="prefetch_depth"):
        shards.batch_iterator(paths, prefetch_depth=-1)
    with pytest.raises(DataError, match="at least one shard"):
        shards.batch_iterator([])

    other = tmp_path / "other.ldpk"
    imgs, masks = _sample_arrays(n=2, h=8, w=8)
    shards.write_shard(str(other), imgs, masks)
    with pytest.raises(DataError, match="dims"):
        shards.batch_iterator(paths + [str(other)])

    empty = tmp_path / "empty.ldpk"
    shards.write_shard(str(empty), np.empty((0, 8, 8, 3), np.uint8),
                       np.empty((0, 8, 8), np.uint8))
    with pytest.raises(DataError, match="no samples"):
        shards.batch_iterator([str(empty)])


def test_batch_stream_surfaces_producer_errors(tiny_shards):
    paths = shards.find_shards(tiny_shards)
    stream = shards.batch_iterator(paths, batch_size=4)
    stream.readers[0].image = None     # producer will raise TypeError
    with pytest.raises(TypeError):
        for _ in stream:
            pass
