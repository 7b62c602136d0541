"""Packed sample shards and the streaming batch iterator.

Shard layout (little-endian header fields):

    magic "LDPK0001" | u32 count | u32 H | u32 W
    then per sample: H*W*3 image bytes (u8 RGB, row-major) + H*W mask bytes

Training never touches image codecs: shards are memory-mapped and
batches are assembled by one producer thread whose allocations are
bounded by a semaphore, so at most prefetch_depth+1 batches exist
beyond the consumer no matter how fast the producer runs.
"""

import os
import struct
import threading
import queue
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import DatasetIndex, channel_shift, load_sample
from .errors import DataError
from .rng import STREAM_AUGMENT, STREAM_SHUFFLE, derive_rng
from .tensor import Tensor

SHARD_MAGIC = b"LDPK0001"
_HEADER = struct.Struct("<8sIII")


def write_shard(path, images: np.ndarray, masks: np.ndarray):
    """Write u8 images (N,H,W,3) and binary u8 masks (N,H,W) as one shard."""
    if images.ndim != 4 or images.shape[3] != 3 or masks.shape != images.shape[:3]:
        raise DataError(f"bad shard arrays: images {images.shape}, masks {masks.shape}")
    if images.dtype != np.uint8 or masks.dtype != np.uint8:
        raise DataError("shard samples must be uint8")
    n, h, w = masks.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(SHARD_MAGIC, n, h, w))
        for i in range(n):
            f.write(images[i].tobytes())
            f.write(masks[i].tobytes())


class ShardReader:
    """Memory-mapped random access to one shard's samples."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as f:
            head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DataError(f"shard {path!r} too short for a header")
        magic, count, h, w = _HEADER.unpack(head)
        if magic != SHARD_MAGIC:
            raise DataError(f"bad shard magic {magic!r} in {path!r}")
        stride = h * w * 3 + h * w
        expect = _HEADER.size + count * stride
        actual = os.path.getsize(path)
        if actual != expect:
            raise DataError(f"shard {path!r} is {actual} bytes, header implies {expect}")
        self.count, self.h, self.w = count, h, w
        self._img_len = h * w * 3
        self._stride = stride
        self._mm = np.memmap(path, np.uint8, "r", offset=_HEADER.size)

    def image(self, i: int) -> np.ndarray:
        off = i * self._stride
        return self._mm[off:off + self._img_len].reshape(self.h, self.w, 3)

    def mask(self, i: int) -> np.ndarray:
        off = i * self._stride + self._img_len
        return self._mm[off:off + self.h * self.w].reshape(self.h, self.w)


def read_shard(path) -> Tuple[np.ndarray, np.ndarray]:
    """Materialize a whole shard as (images (N,H,W,3), masks (N,H,W)) u8 arrays."""
    r = ShardReader(path)
    images = np.empty((r.count, r.h, r.w, 3), np.uint8)
    masks = np.empty((r.count, r.h, r.w), np.uint8)
    for i in range(r.count):
        images[i] = r.image(i)
        masks[i] = r.mask(i)
    return images, masks


def pack_shards(index: DatasetIndex, out_dir, shard_size: int = 1000,
                scale: float = 0.2, allow_any_size: bool = False,
                prefix: str = "shard") -> List[str]:
    """Load, resize, and binarize every index entry into fixed-size shards."""
    if shard_size < 1:
        raise DataError(f"shard_size must be >= 1, got {shard_size}")
    if len(index.entries) == 0:
        raise DataError("cannot pack an empty index")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    images = masks = None
    filled = 0
    shard_no = 0
    for entry in index.entries:
        img, mask = load_sample(entry, scale, allow_any_size)
        if images is None:
            h, w = mask.shape
            images = np.empty((shard_size, h, w, 3), np.uint8)
            masks = np.empty((shard_size, h, w), np.uint8)
        if img.shape != images.shape[1:] or mask.shape != masks.shape[1:]:
            raise DataError(f"inconsistent sample dims for {entry.image!r}: {img.shape}")
        images[filled] = img
        masks[filled] = mask
        filled += 1
        if filled == shard_size:
            path = os.path.join(out_dir, f"{prefix}-{shard_no:04d}.ldpk")
            write_shard(path, images, masks)
            paths.append(path)
            shard_no += 1
            filled = 0
    if filled:
        path = os.path.join(out_dir, f"{prefix}-{shard_no:04d}.ldpk")
        write_shard(path, images[:filled], masks[:filled])
        paths.append(path)
    return paths


def find_shards(shards_arg) -> List[str]:
    """Accept a shard file, a directory of *.ldpk files, or a list of either."""
    if isinstance(shards_arg, (list, tuple)):
        out = []
        for item in shards_arg:
            out.extend(find_shards(item))
        return out
    if os.path.isdir(shards_arg):
        found = sorted(
            os.path.join(shards_arg, fn) for fn in os.listdir(shards_arg)
            if fn.endswith(".ldpk"))
        if not found:
            raise DataError(f"no .ldpk shards in directory {shards_arg!r}")
        return found
    if os.path.isfile(shards_arg):
        return [shards_arg]
    raise DataError(f"shard path {shards_arg!r} does not exist")


class BatchStream:
    """Iterator over (x, labels) Tensor batches from a set of shards.

    One background producer assembles batches in a deterministic,
    epoch-seeded order.  A semaphore with prefetch_depth+1 slots gates
    every allocation: the producer cannot start batch k+depth+1 until
    the consumer has taken batch k off the queue.  stats() exposes the
    instrumented high-water mark for the memory-bound tests.
    """

    def __init__(self, shard_paths: Sequence[str], batch_size: int = 128,
                 seed: int = 0, epoch: int = 0, prefetch_depth: int = 2,
                 shuffle: bool = True, augment_intensity: float = 0.0):
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        if prefetch_depth < 0:
            raise DataError(f"prefetch_depth must be >= 0, got {prefetch_depth}")
        self.readers = [ShardReader(p) for p in shard_paths]
        if not self.readers:
            raise DataError("batch stream needs at least one shard")
        h, w = self.readers[0].h, self.readers[0].w
        for r in self.readers[1:]:
            if (r.h, r.w) != (h, w):
                raise DataError(f"shard {r.path!r} dims {(r.h, r.w)} != {(h, w)}")
        self.hw = (h, w)
        self.total = sum(r.count for r in self.readers)
        if self.total == 0:
            raise DataError("shards contain no samples")
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.prefetch_depth = prefetch_depth
        self.shuffle = shuffle
        self.augment_intensity = augment_intensity

        self._locate = []
        for si, r in enumerate(self.readers):
            self._locate.extend((si, li) for li in range(r.count))
        self._slots = threading.Semaphore(prefetch_depth + 1)
        self._queue: queue.Queue = queue.Queue()
        self._in_flight = 0
        self._peak_in_flight = 0
        self._count_lock = threading.Lock()
        self._batches_emitted = 0
        self._finished = False
        self._thread: Optional[threading.Thread] = None

    def __len__(self):
        return (self.total + self.batch_size - 1) // self.batch_size

    def stats(self) -> dict:
        return {"peak_in_flight": self._peak_in_flight,
                "batches": self._batches_emitted}

    def _order(self) -> np.ndarray:
        if self.shuffle:
            return derive_rng(self.seed, STREAM_SHUFFLE, self.epoch).permutation(self.total)
        return np.arange(self.total)

    def _produce(self):
        try:
            order = self._order()
            aug_rng = None
            if self.augment_intensity > 0:
                aug_rng = derive_rng(self.seed, STREAM_AUGMENT, self.epoch)
            h, w = self.hw
            for start in range(0, self.total, self.batch_size):
                self._slots.acquire()
                idx = order[start:start + self.batch_size]
                b = len(idx)
                x = np.empty((b, 3, h, w), np.float32)
                y = np.empty((b, 1, h, w), np.float32)
                for k, gi in enumerate(idx):
                    si, li = self._locate[gi]
                    r = self.readers[si]
                    x[k] = r.image(li).transpose(2, 0, 1)
                    y[k, 0] = r.mask(li)
                x *= np.float32(1.0 / 255.0)
                if aug_rng is not None:
                    for k in range(b):
                        x[k] = channel_shift(x[k], self.augment_intensity, aug_rng)
                x.flags.writeable = False
                y.flags.writeable = False
                with self._count_lock:
                    self._in_flight += 1
                    self._peak_in_flight = max(self._peak_in_flight, self._in_flight)
                self._queue.put((Tensor(x, copy=False, check=False),
                                 Tensor(y, copy=False, check=False)))
            self._queue.put(None)
        except BaseException as exc:   # surfaced on the consumer side
            self._queue.put(exc)

    def __iter__(self):
        if self._thread is None:
            self._thread = threading.Thread(target=self._produce, daemon=True)
            self._thread.start()
        return self

    def __next__(self):
        if self._finished:
            raise StopIteration
        if self._thread is None:
            self.__iter__()
        item = self._queue.get()
        if item is None:
            self._finished = True
            self._thread.join()
            raise StopIteration
        if isinstance(item, BaseException):
            self._finished = True
            self._thread.join()
            raise item
        with self._count_lock:
            self._in_flight -= 1
        self._slots.release()
        self._batches_emitted += 1
        return item


def batch_iterator(shard_paths, batch_size: int = 128, seed: int = 0,
                   epoch: int = 0, prefetch_depth: int = 2, shuffle: bool = True,
                   augment_intensity: float = 0.0) -> BatchStream:
    """Stream (x in [0,1], labels in {0,1}) batches; the short final batch is kept."""
    return BatchStream(shard_paths, batch_size, seed, epoch, prefetch_depth,
                       shuffle, augment_intensity)
