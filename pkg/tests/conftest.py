import numpy as np
import pytest

from m3sample.cloud import LabeledPointCloud, compute_bounds, zscore_normalize
from m3sample.morton import morton_sort
from m3sample.partition import Partition, PartitionConfig, build_partition


def prepared(cloud):
    """Normalized cloud, its bounding cube and Morton order."""
    norm = zscore_normalize(cloud)
    cube = compute_bounds(norm)
    return norm, cube, morton_sort(norm, cube)


def partition_of(cloud, **config):
    norm, cube, si = prepared(cloud)
    cfg = PartitionConfig(**config)
    return build_partition(norm, si, cfg, cube), si, norm, cube, cfg


def fake_partition(n, delta=None, h=None) -> Partition:
    """A Partition with given cell sizes, scores and widths (geometry is fake)."""
    n = np.asarray(n, dtype=np.int64)
    hi = np.cumsum(n)
    lo = hi - n
    c = n.shape[0]
    return Partition(
        key=np.arange(c, dtype=np.uint64), depth=np.full(c, 5, dtype=np.int64), lo=lo, hi=hi,
        h=np.full(c, 1 / 32) if h is None else np.asarray(h, dtype=np.float64),
        delta=np.zeros(c) if delta is None else np.asarray(delta, dtype=np.float64),
        trigger=np.zeros(c, dtype=np.int64), stop=np.zeros(c, dtype=np.uint8), channels=("p",),
        n_scalar=1, thr_counts=np.zeros(1, dtype=np.int64), refine_counts=np.zeros(1, dtype=np.int64))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cloud():
    pos = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5], [0.2, 0.3, 0.9]])
    return LabeledPointCloud(pos, {"p": np.array([1.0, 2.0, 3.0, 4.0])})
