import numpy as np
import pytest

from lanedetect import shards


def make_shard_dir(path, n=12, h=16, w=32, seed=5, band=(6, 10)):
    """Write one shard of n random images with a horizontal band mask."""
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, (n, h, w, 3), np.uint8)
    masks = np.zeros((n, h, w), np.uint8)
    masks[:, band[0]:band[1], :] = 1
    path.mkdir(parents=True, exist_ok=True)
    shards.write_shard(str(path / "shard-0000.ldpk"), imgs, masks)
    return str(path)


@pytest.fixture
def tiny_shards(tmp_path):
    return make_shard_dir(tmp_path / "shards")
