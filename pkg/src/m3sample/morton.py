"""Lattice quantization and Morton (Z-order) keys.

Keys interleave 21 bits per axis into a 63-bit integer with x in the least
significant position (``... z1 y1 x1 z0 y0 x0``).  Points in the same
depth-``d`` octree cell share the top ``3*d`` bits of their key, so after a
single sort every octree cell is a contiguous span.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .cloud import BoundingCube, LabeledPointCloud

MAX_BITS = 21
KEY_BITS = 3 * MAX_BITS

_SPREAD = (
    (32, 0x1F00000000FFFF),
    (16, 0x1F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    x = v.astype(np.uint64) & np.uint64((1 << MAX_BITS) - 1)
    for shift, mask in _SPREAD:
        x = (x | (x << np.uint64(shift))) & np.uint64(mask)
    return x


def _compact_bits(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & np.uint64(0x1249249249249249)
    x = (x ^ (x >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    x = (x ^ (x >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    x = (x ^ (x >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    x = (x ^ (x >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    x = (x ^ (x >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return x


def quantize(positions, cube: BoundingCube, bits: int = MAX_BITS) -> np.ndarray:
    """Map positions to integer lattice coordinates in ``[0, 2**bits - 1]``.

    Accepts a single triple or an ``(N, 3)`` array; returns the same leading
    shape with ``int64`` coordinates.
    """
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [1, {MAX_BITS}], got {bits}")
    pos = np.asarray(positions, dtype=np.float64)
    single = pos.ndim == 1
    pos = np.atleast_2d(pos)
    inside = np.all((pos >= cube.origin) & (pos <= cube.origin + cube.edge), axis=1)
    if not inside.all():
        bad = int(np.flatnonzero(~inside)[0])
        raise ValueError(f"position {pos[bad].tolist()} (record {bad}) lies outside the bounding cube")
    top = (1 << bits) - 1
    lattice = np.floor((pos - cube.origin) / cube.edge * float(1 << bits))
    lattice = np.clip(lattice, 0, top).astype(np.int64)
    return lattice[0] if single else lattice


def morton_encode(lattice, bits: int = MAX_BITS) -> np.ndarray | int:
    """Interleave lattice coordinates into Morton keys (x lowest)."""
    lat = np.asarray(lattice)
    single = lat.ndim == 1
    lat = np.atleast_2d(lat).astype(np.int64)
    if np.any(lat < 0) or np.any(lat >= (1 << bits)):
        raise OverflowError(f"lattice coordinate outside [0, 2**{bits})")
    key = _spread_bits(lat[:, 0]) | (_spread_bits(lat[:, 1]) << np.uint64(1)) \
        | (_spread_bits(lat[:, 2]) << np.uint64(2))
    return int(key[0]) if single else key


def morton_decode(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.uint64)
    single = k.ndim == 0
    k = np.atleast_1d(k)
    out = np.stack([_compact_bits(k), _compact_bits(k >> np.uint64(1)),
                    _compact_bits(k >> np.uint64(2))], axis=1).astype(np.int64)
    return out[0] if single else out


def cell_prefix(keys, depth: int) -> np.ndarray:
    """Depth-``depth`` octree cell identifier: the top ``3*depth`` key bits."""
    return np.asarray(keys, dtype=np.uint64) >> np.uint64(3 * (MAX_BITS - depth))


@dataclass(frozen=True, eq=False)
class SortedIndex:
    """Permutation ordering points by Morton key, with the sorted keys."""

    perm: np.ndarray
    keys: np.ndarray

    def __len__(self) -> int:
        return self.perm.shape[0]

    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.shape[0], dtype=self.perm.dtype)
        return inv


@njit(cache=True)
def _spread21(v):
    x = np.uint64(v)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


@njit(cache=True)
def _fused_keys(pos, origin, edge, out):
    """Quantize and interleave in one pass; returns the first outside record or -1."""
    scale = float(1 << MAX_BITS)
    top = (1 << MAX_BITS) - 1
    for i in range(pos.shape[0]):
        key = np.uint64(0)
        for a in range(3):
            p = pos[i, a]
            if not (p >= origin[a] and p <= origin[a] + edge):
                return i
            q = np.floor((p - origin[a]) / edge * scale)
            c = min(max(int(q), 0), top)
            key |= _spread21(c) << np.uint64(a)
        out[i] = key
    return -1


def morton_keys(positions: np.ndarray, cube: BoundingCube) -> np.ndarray:
    """Depth-21 keys of an ``(N, 3)`` array; same values as quantize + encode."""
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    out = np.empty(pos.shape[0], dtype=np.uint64)
    bad = _fused_keys(pos, np.asarray(cube.origin, dtype=np.float64), float(cube.edge), out)
    if bad >= 0:
        raise ValueError(f"position {pos[bad].tolist()} (record {bad}) lies outside the bounding cube")
    return out


def morton_sort(cloud: LabeledPointCloud | np.ndarray, cube: BoundingCube) -> SortedIndex:
    """Stable sort by Morton key: equal keys keep their input order."""
    positions = cloud.positions if isinstance(cloud, LabeledPointCloud) else cloud
    keys = morton_keys(np.atleast_2d(positions), cube)
    perm = np.argsort(keys)
    sorted_keys = keys[perm]
    if np.any(sorted_keys[1:] == sorted_keys[:-1]):
        # the fast sort is not stable; only ties need the slower one
        perm = np.argsort(keys, kind="stable")
        sorted_keys = keys[perm]
    return SortedIndex(perm=perm, keys=sorted_keys)
