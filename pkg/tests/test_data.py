"""Dataset scanning, annotation parsing, mask handling, resizing, splits."""

import os

import numpy as np
import pytest
from PIL import Image

from lanedetect import data
from lanedetect.errors import AnnotationError, DataError, DomainError
from lanedetect.rng import derive_rng


# ------------------------------------------------------------- annotations

def test_parse_annotation_single_lane():
    polys = data.parse_annotation("10 590 20 580 30 570")
    assert polys == [[(10.0, 590.0), (20.0, 580.0), (30.0, 570.0)]]


def test_parse_annotation_multiple_lanes_and_blank_lines():
    text = "1 2 3 4\n\n5.5 6.5\n"
    polys = data.parse_annotation(text)
    assert polys == [[(1.0, 2.0), (3.0, 4.0)], [(5.5, 6.5)]]


def test_parse_annotation_rejects_fifth_lane():
    text = "\n".join("0 0 1 1" for _ in range(5))
    with pytest.raises(AnnotationError, match="lanes"):
        data.parse_annotation(text)


def test_parse_annotation_rejects_odd_token_count():
    with pytest.raises(AnnotationError) as exc:
        data.parse_annotation("1 2 3 4\n5 6 7", path="drive/frame.lines.txt")
    assert exc.value.line == 2
    assert exc.value.path == "drive/frame.lines.txt"
    assert "frame.lines.txt:2" in str(exc.value)


def test_parse_annotation_rejects_non_numeric():
    with pytest.raises(AnnotationError, match="non-numeric"):
        data.parse_annotation("1 2 x 4")


def test_parse_annotation_file(tmp_path):
    path = tmp_path / "a.lines.txt"
    path.write_text("7 8 9 10\n")
    assert data.parse_annotation_file(str(path)) == [[(7.0, 8.0), (9.0, 10.0)]]


# ------------------------------------------------------------------- masks

def test_binarize_mask_exhaustive_lane_ids():
    raw = np.array([[0, 1, 2], [3, 4, 0]], np.uint8)
    out = data.binarize_mask(raw)
    assert out.dtype == np.uint8
    assert np.array_equal(out, [[0, 1, 1], [1, 1, 0]])


def test_binarize_mask_rejects_out_of_range():
    with pytest.raises(DataError, match="out of range"):
        data.binarize_mask(np.array([[5]], np.uint8))


def test_render_polylines_band_and_point():
    mask = data.render_polylines((40, 60), [[(10, 20), (50, 20)]], width=4)
    assert mask.shape == (40, 60)
    assert set(np.unique(mask)) <= {0, 1}
    assert mask[20, 30] == 1          # on the stroke
    assert mask[5, 30] == 0           # far above it
    dot = data.render_polylines((40, 60), [[(30, 10)]], width=6)
    assert dot[10, 30] == 1
    assert data.render_polylines((40, 60), []).sum() == 0


# ----------------------------------------------------------------- resizing

def _raw_image(fill=None):
    if fill is not None:
        return np.full((data.RAW_HEIGHT, data.RAW_WIDTH, 3), fill, np.uint8)
    rng = np.random.default_rng(3)
    return rng.integers(0, 256, (data.RAW_HEIGHT, data.RAW_WIDTH, 3), dtype=np.uint8)


def test_resize_image_to_target_geometry():
    out = data.resize(_raw_image())
    assert out.shape == (118, 328, 3)
    assert out.dtype == np.uint8


def test_resize_constant_image_stays_constant():
    out = data.resize(_raw_image(fill=137))
    assert np.all(out == 137)


def test_resize_mask_stays_binary():
    mask = np.zeros((data.RAW_HEIGHT, data.RAW_WIDTH), np.uint8)
    mask[250:330, :] = 1
    out = data.resize(mask)
    assert out.shape == (118, 328)
    assert set(np.unique(out)) <= {0, 1}
    assert out[58, :].all()           # middle of the band survives


def test_resize_rejects_unexpected_geometry():
    with pytest.raises(DataError, match="allow_any_size"):
        data.resize(np.zeros((100, 200, 3), np.uint8))
    out = data.resize(np.zeros((100, 200, 3), np.uint8), scale=0.5, allow_any_size=True)
    assert out.shape == (50, 100, 3)


def test_resize_rejects_degenerate_scale():
    with pytest.raises(DomainError, match="collapses"):
        data.resize(_raw_image(), scale=1e-5)


def test_resize_rejects_bad_rank():
    with pytest.raises(DataError):
        data.resize(np.zeros((4, 4, 4, 4), np.uint8), allow_any_size=True)


# ------------------------------------------------------------------- splits

def _fake_index(n):
    entries = tuple(data.IndexEntry(f"img{i:03d}.jpg", f"mask{i:03d}.png", None)
                    for i in range(n))
    return data.DatasetIndex(root="/fake", entries=entries)


def test_split_90_10():
    train, dev = data.split_dataset(_fake_index(100), data.SplitSpec(seed=0))
    assert len(train) == 90 and len(dev) == 10
    joined = {e.image for e in train.entries} | {e.image for e in dev.entries}
    assert len(joined) == 100         # a partition, nothing lost or doubled


def test_split_single_entry_goes_to_dev():
    train, dev = data.split_dataset(_fake_index(1), data.SplitSpec(seed=0))
    assert len(train) == 0 and len(dev) == 1


def test_split_seed_determinism():
    a = data.split_dataset(_fake_index(37), data.SplitSpec(seed=5))
    b = data.split_dataset(_fake_index(37), data.SplitSpec(seed=5))
    c = data.split_dataset(_fake_index(37), data.SplitSpec(seed=6))
    assert a[0].entries == b[0].entries and a[1].entries == b[1].entries
    assert a[0].entries != c[0].entries


def test_split_rejects_empty_and_bad_fraction():
    with pytest.raises(DataError):
        data.split_dataset(data.DatasetIndex("/fake", ()), data.SplitSpec(seed=0))
    with pytest.raises(DomainError):
        data.SplitSpec(seed=0, train_fraction=1.0)
    with pytest.raises(DomainError):
        data.SplitSpec(seed=0, train_fraction=0.0)


# ----------------------------------------------------------------- scanning

def _write_png(path, arr):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.fromarray(arr).save(path)


def _make_tree(root):
    """Four frames: mask+annotation, mask only, annotation only, neither."""
    img = np.zeros((8, 16, 3), np.uint8)
    mask = np.zeros((8, 16), np.uint8)
    for name in ("00000", "00030", "00060", "00090"):
        _write_png(os.path.join(root, "drive_a", f"{name}.jpg"), img)
    _write_png(os.path.join(root, "laneseg_label_w16", "drive_a", "00000.png"), mask)
    _write_png(os.path.join(root, "laneseg_label_w16", "drive_a", "00030.png"), mask)
    with open(os.path.join(root, "drive_a", "00000.lines.txt"), "w") as f:
        f.write("1 2 3 4\n")
    with open(os.path.join(root, "drive_a", "00060.lines.txt"), "w") as f:
        f.write("1 2 3 4\n")


def test_scan_dataset_pairs_and_exclusions(tmp_path):
    _make_tree(str(tmp_path))
    with pytest.warns(UserWarning, match="00090"):
        index = data.scan_dataset(str(tmp_path))
    names = [os.path.basename(e.image) for e in index.entries]
    assert names == ["00000.jpg", "00030.jpg", "00060.jpg"]
    both, mask_only, ann_only = index.entries
    assert both.mask is not None and both.annotation is not None
    assert mask_only.mask is not None and mask_only.annotation is None
    assert ann_only.mask is None and ann_only.annotation is not None


def test_scan_dataset_does_not_index_mask_images(tmp_path):
    _make_tree(str(tmp_path))
    with pytest.warns(UserWarning):
        index = data.scan_dataset(str(tmp_path))
    assert all("laneseg_label_w16" not in e.image for e in index.entries)


def test_scan_dataset_with_list_file(tmp_path):
    _make_tree(str(tmp_path))
    lst = tmp_path / "train.txt"
    lst.write_text("/drive_a/00030.jpg\ndrive_a/00000.jpg\n\n")
    index = data.scan_dataset(str(tmp_path), list_file=str(lst))
    names = [os.path.basename(e.image) for e in index.entries]
    assert names == ["00000.jpg", "00030.jpg"]   # sorted, leading slash stripped


def test_scan_dataset_listed_image_missing(tmp_path):
    _make_tree(str(tmp_path))
    lst = tmp_path / "train.txt"
    lst.write_text("drive_a/nope.jpg\n")
    with pytest.raises(DataError, match="does not exist"):
        data.scan_dataset(str(tmp_path), list_file=str(lst))


def test_scan_dataset_rejects_missing_root(tmp_path):
    with pytest.raises(DataError, match="not a directory"):
        data.scan_dataset(str(tmp_path / "missing"))


# ------------------------------------------------------------- augmentation

def test_channel_shift_zero_intensity_is_identity():
    x = np.random.default_rng(0).random((3, 6, 8)).astype(np.float32)
    assert data.channel_shift(x, 0.0, derive_rng(0, 4)) is x


def test_channel_shift_bounds_and_determinism():
    x = np.full((3, 6, 8), 0.5, np.float32)
    a = data.channel_shift(x.copy(), 0.2, derive_rng(1, 4, 0))
    b = data.channel_shift(x.copy(), 0.2, derive_rng(1, 4, 0))
    assert np.array_equal(a, b)
    assert np.all(a >= 0.0) and np.all(a <= 1.0)
    assert np.abs(a - 0.5).max() <= 0.2 + 1e-6
    # one delta per channel
    for c in range(3):
        assert np.unique(a[c]).size == 1
    hot = data.channel_shift(np.full((3, 2, 2), 0.95, np.float32), 0.5, derive_rng(2, 4))
    assert hot.max() <= 1.0


def test_channel_shift_rejects_negative_intensity():
    with pytest.raises(DomainError):
        data.channel_shift(np.zeros((3, 2, 2), np.float32), -0.1, derive_rng(0, 4))


# ------------------------------------------------------------- full samples

def test_load_sample_prefers_mask_over_annotation(tmp_path):
    img = np.full((data.RAW_HEIGHT, data.RAW_WIDTH, 3), 90, np.uint8)
    mask = np.zeros((data.RAW_HEIGHT, data.RAW_WIDTH), np.uint8)
    mask[295:305, :] = 2
    img_p = str(tmp_path / "f.jpg")
    mask_p = str(tmp_path / "f.png")
    Image.fromarray(img).save(img_p)
    Image.fromarray(mask).save(mask_p)
    ann_p = str(tmp_path / "f.lines.txt")
    with open(ann_p, "w") as f:
        f.write("0 10 1639 10\n")     # would paint the top, mask must win

    got_img, got_mask = data.load_sample(data.IndexEntry(img_p, mask_p, ann_p))
    assert got_img.shape == (118, 328, 3)
    assert got_mask.shape == (118, 328)
    assert set(np.unique(got_mask)) == {0, 1}
    assert got_mask[60, :].any() and not got_mask[2, :].any()


def test_load_sample_renders_annotation_when_no_mask(tmp_path):
    img = np.zeros((data.RAW_HEIGHT, data.RAW_WIDTH, 3), np.uint8)
    img_p = str(tmp_path / "g.jpg")
    Image.fromarray(img).save(img_p)
    ann_p = str(tmp_path / "g.lines.txt")
    with open(ann_p, "w") as f:
        f.write("0 300 1639 300\n")

    _, got_mask = data.load_sample(data.IndexEntry(img_p, None, ann_p))
    assert got_mask.shape == (118, 328)
    assert got_mask[60, :].any()      # 300 * 0.2 = 60
    assert not got_mask[10, :].any()


def test_load_image_error_path(tmp_path):
    bad = tmp_path / "broken.jpg"
    bad.write_bytes(b"not an image")
    with pytest.raises(DataError, match="cannot read"):
        data.load_image(str(bad))
