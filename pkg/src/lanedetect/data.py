"""Dataset ingestion: scanning, annotation parsing, masks, resizing, splits.

Directory layout expected (CULane-style, suffixes configurable):

    <root>/<drive>/<frame>.jpg            camera frames
    <root>/<drive>/<frame>.lines.txt      polyline annotations
    <root>/<mask_dir>/<drive>/<frame>.png per-pixel lane-id masks, values 0..4

Supervision comes from mask images when they exist; polylines are used
to render a mask only when no mask image is present, and for overlays.
Raw image decoding stays in this module; training reads packed shards.
"""

import os
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .errors import AnnotationError, DataError, DomainError
from .rng import STREAM_SPLIT, derive_rng

IMAGE_EXTS = (".jpg", ".jpeg", ".png", ".ppm", ".pgm")
RAW_HEIGHT, RAW_WIDTH = 590, 1640
TARGET_HEIGHT, TARGET_WIDTH = 118, 328
MAX_LANES = 4
MASK_RENDER_WIDTH = 16   # full-resolution stroke width, matches the w16 masks


@dataclass(frozen=True)
class IndexEntry:
    image: str
    mask: Optional[str]
    annotation: Optional[str]


@dataclass(frozen=True)
class DatasetIndex:
    root: str
    entries: Tuple[IndexEntry, ...]

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    train_fraction: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise DomainError(f"train fraction must be in (0,1), got {self.train_fraction}")


def scan_dataset(root: str, list_file: Optional[str] = None,
                 mask_dir: str = "laneseg_label_w16",
                 annotation_suffix: str = ".lines.txt") -> DatasetIndex:
    """Build a deterministic index of (image, mask, annotation) triples.

    Images with neither a mask nor an annotation are excluded with a
    warning.  Ordering is lexicographic on the image path relative to
    the root, independent of filesystem enumeration order.
    """
    if not os.path.isdir(root):
        raise DataError(f"dataset root {root!r} is not a directory")
    rels: List[str] = []
    if list_file is not None:
        with open(list_file) as f:
            for line in f:
                line = line.strip()
                if line:
                    rels.append(line.lstrip("/"))
    else:
        mask_root = os.path.join(root, mask_dir)
        for dirpath, dirnames, filenames in os.walk(root):
            if os.path.commonpath([os.path.abspath(dirpath),
                                   os.path.abspath(mask_root)]) == os.path.abspath(mask_root):
                continue
            for fn in filenames:
                if fn.lower().endswith(IMAGE_EXTS):
                    rels.append(os.path.relpath(os.path.join(dirpath, fn), root))
    rels.sort()

    entries = []
    for rel in rels:
        img_path = os.path.join(root, rel)
        if not os.path.isfile(img_path):
            raise DataError(f"listed image does not exist: {img_path}")
        stem = os.path.splitext(rel)[0]
        mask_path = os.path.join(root, mask_dir, stem + ".png")
        ann_path = os.path.join(root, stem + annotation_suffix)
        mask = mask_path if os.path.isfile(mask_path) else None
        ann = ann_path if os.path.isfile(ann_path) else None
        if mask is None and ann is None:
            warnings.warn(f"no mask or annotation for {rel}, excluded")
            continue
        entries.append(IndexEntry(img_path, mask, ann))
    return DatasetIndex(root=root, entries=tuple(entries))


def parse_annotation(text: str, path: Optional[str] = None):
    """Parse polyline annotation text: one lane per nonempty line,
    whitespace-separated alternating x y coordinates."""
    polylines = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) % 2:
            raise AnnotationError(f"odd coordinate count ({len(tokens)} tokens)",
                                  path=path, line=lineno)
        try:
            vals = [float(t) for t in tokens]
        except ValueError as exc:
            raise AnnotationError(f"non-numeric coordinate: {exc}",
                                  path=path, line=lineno) from None
        polylines.append([(vals[i], vals[i + 1]) for i in range(0, len(vals), 2)])
        if len(polylines) > MAX_LANES:
            raise AnnotationError(f"more than {MAX_LANES} lanes", path=path, line=lineno)
    return polylines


def parse_annotation_file(path: str):
    with open(path) as f:
        return parse_annotation(f.read(), path=path)


def binarize_mask(raw: np.ndarray) -> np.ndarray:
    """Collapse lane ids: 0 stays background, 1..4 all become 1."""
    if raw.max(initial=0) > MAX_LANES:
        raise DataError(f"mask value {int(raw.max())} out of range 0..{MAX_LANES}")
    return (raw > 0).astype(np.uint8)


def resize(arr: np.ndarray, scale: float = 0.2,
           allow_any_size: bool = False) -> np.ndarray:
    """Scale an image (H,W,3 u8, area-average) or mask (H,W u8, nearest).

    Inputs must be the raw 1640x590 unless allow_any_size is set.  Masks
    are re-binarized after resampling when the input was binary.
    """
    if arr.ndim not in (2, 3):
        raise DataError(f"expected HxW mask or HxWx3 image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if not allow_any_size and (h, w) != (RAW_HEIGHT, RAW_WIDTH):
        raise DataError(
            f"input is {w}x{h}, expected {RAW_WIDTH}x{RAW_HEIGHT} "
            f"(pass allow_any_size to accept)")
    tw, th = round(w * scale), round(h * scale)
    if min(tw, th) < 1:
        raise DomainError(f"scale {scale} collapses {w}x{h} to {tw}x{th}")
    if arr.ndim == 3:
        out = np.asarray(Image.fromarray(arr, "RGB").resize((tw, th), Image.BOX))
    else:
        binary = bool(np.all((arr == 0) | (arr == 1)))
        out = np.asarray(Image.fromarray(arr, "L").resize((tw, th), Image.NEAREST))
        if binary:
            out = (out > 0).astype(np.uint8)
    return out


def split_dataset(index: DatasetIndex, spec: SplitSpec):
    """Seeded shuffle, then first floor(fraction*N) entries train, rest dev."""
    n = len(index.entries)
    if n == 0:
        raise DataError("cannot split an empty dataset")
    order = derive_rng(spec.seed, STREAM_SPLIT).permutation(n)
    n_train = int(spec.train_fraction * n)
    train = tuple(index.entries[i] for i in order[:n_train])
    dev = tuple(index.entries[i] for i in order[n_train:])
    return (DatasetIndex(index.root, train), DatasetIndex(index.root, dev))


def channel_shift(image: np.ndarray, intensity: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Add one uniform delta in [-intensity, intensity] per channel, clamp to [0,1].

    Augmentation is off by default in training; it gave no measurable
    benefit in our runs.
    """
    if intensity < 0:
        raise DomainError(f"intensity must be >= 0, got {intensity}")
    if intensity == 0:
        return image
    deltas = rng.uniform(-intensity, intensity, size=image.shape[0])
    out = image + deltas.astype(image.dtype)[:, None, None]
    return np.clip(out, 0.0, 1.0, out=out)


def render_polylines(hw: Tuple[int, int], polylines: Sequence[Sequence[Tuple[float, float]]],
                     width: int = MASK_RENDER_WIDTH) -> np.ndarray:
    """Rasterize lane polylines to a binary u8 mask with a fixed stroke width."""
    img = Image.new("L", (hw[1], hw[0]), 0)
    draw = ImageDraw.Draw(img)
    for line in polylines:
        pts = [(float(x), float(y)) for x, y in line]
        if len(pts) == 1:
            x, y = pts[0]
            r = width / 2
            draw.ellipse([x - r, y - r, x + r, y + r], fill=1)
        else:
            draw.line(pts, fill=1, width=width, joint="curve")
    return np.asarray(img, dtype=np.uint8)


def load_image(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise DataError(f"cannot read image {path!r}: {exc}") from exc


def load_mask(path: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"))
    except OSError as exc:
        raise DataError(f"cannot read mask {path!r}: {exc}") from exc


def load_sample(entry: IndexEntry, scale: float = 0.2,
                allow_any_size: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Load one index entry as a resized (image u8 HWC, binary mask u8 HW) pair."""
    img = load_image(entry.image)
    if entry.mask is not None:
        mask = binarize_mask(load_mask(entry.mask))
    else:
        polys = parse_annotation_file(entry.annotation)
        mask = render_polylines(img.shape[:2], polys)
    img_r = resize(img, scale, allow_any_size)
    mask_r = resize(mask, scale, allow_any_size)
    return img_r, mask_r
