"""Labeled point clouds: data model, file I/O and channel normalization.

Two on-disk formats are supported.  ``M3PC`` is a little-endian binary
layout::

    magic "M3PC" | version u32 | N u64 | n_scalar u16 | n_vector u16 |
    has_weights u8 | (name_len u16, utf-8 name) per scalar, then per vector |
    positions f64[N,3] | scalars f64[N] ... | vectors f64[N,3] ... | weights f64[N]

The CSV alternative uses the header ``x,y,z,s:<name>...,v:<name>_x,
v:<name>_y,v:<name>_z...,w``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"M3PC"
VERSION = 1
_HEADER = struct.Struct("<4sIQHHB")

# relative std below which a channel is treated as constant
_ZERO_STD_RTOL = 1e-12


class CloudFormatError(ValueError):
    """Malformed cloud file or invalid cloud contents.

    ``record`` is the offending point index when one can be named.
    """

    def __init__(self, message: str, record: int | None = None):
        if record is not None:
            message = f"{message} (record {record})"
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class BoundingCube:
    origin: np.ndarray
    edge: float

    def contains(self, positions: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(positions)
        return np.all((p >= self.origin) & (p < self.origin + self.edge), axis=1)


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    positions: np.ndarray
    scalars: Mapping[str, np.ndarray] = field(default_factory=dict)
    vectors: Mapping[str, np.ndarray] = field(default_factory=dict)
    weights: np.ndarray | None = None
    norm_stats: Mapping[str, dict] = field(default_factory=dict)
    meta: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise CloudFormatError(f"positions must have shape (N, 3), got {pos.shape}")
        n = pos.shape[0]
        if n == 0:
            raise CloudFormatError("cloud must contain at least one point")
        _check_finite(pos, "positions")
        scalars = {}
        for name, values in self.scalars.items():
            v = np.asarray(values, dtype=np.float64)
            if v.shape != (n,):
                raise CloudFormatError(
                    f"length mismatch: scalar channel {name!r} has {v.shape[0] if v.ndim else 0} entries, expected {n}",
                    record=min(v.shape[0], n) if v.ndim == 1 else None)
            _check_finite(v, f"scalar channel {name!r}")
            scalars[name] = v
        vectors = {}
        for name, values in self.vectors.items():
            v = np.asarray(values, dtype=np.float64)
            if v.ndim != 2 or v.shape[1] != 3 or v.shape[0] != n:
                raise CloudFormatError(
                    f"length mismatch: vector channel {name!r} has shape {v.shape}, expected ({n}, 3)",
                    record=min(v.shape[0], n) if v.ndim == 2 else None)
            _check_finite(v, f"vector channel {name!r}")
            vectors[name] = v
        weights = self.weights
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (n,):
                raise CloudFormatError(
                    f"length mismatch: weights have {weights.shape[0] if weights.ndim else 0} entries, expected {n}",
                    record=min(weights.shape[0], n) if weights.ndim == 1 else None)
            _check_finite(weights, "weights")
            neg = np.flatnonzero(weights < 0)
            if neg.size:
                raise CloudFormatError("negative geometric weight", record=int(neg[0]))
            if not np.any(weights > 0):
                raise CloudFormatError("geometric weights are all zero")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "scalars", scalars)
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "norm_stats", dict(self.norm_stats))
        object.__setattr__(self, "meta", dict(self.meta))

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def channel_names(self) -> list[str]:
        """Scalar channels first, then vector channels, each in declaration order."""
        return list(self.scalars) + list(self.vectors)

    def take(self, index: np.ndarray) -> "LabeledPointCloud":
        """Sub-cloud at ``index`` (keeps norm_stats and meta)."""
        index = np.asarray(index)
        return LabeledPointCloud(
            positions=self.positions[index],
            scalars={k: v[index] for k, v in self.scalars.items()},
            vectors={k: v[index] for k, v in self.vectors.items()},
            weights=None if self.weights is None else self.weights[index],
            norm_stats=self.norm_stats,
            meta=self.meta,
        )


def _check_finite(a: np.ndarray, what: str) -> None:
    ok = np.isfinite(a)
    if not ok.all():
        bad = np.argwhere(~ok)[0]
        raise CloudFormatError(f"non-finite value in {what}", record=int(bad[0]))


# -- normalization -------------------------------------------------------------

def _zscore(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    mean = float(np.mean(values))
    centered = values - mean
    std = float(np.sqrt(np.mean(centered * centered)))
    if std <= _ZERO_STD_RTOL * max(1.0, abs(mean)):
        return np.zeros_like(values), mean, 0.0
    return centered / std, mean, std


def zscore_normalize(cloud: LabeledPointCloud) -> LabeledPointCloud:
    """Z-score every scalar channel and every vector component.

    Population statistics are used.  Constant channels map to zeros with a
    recorded std of 0.  Geometric weights are measures, not fields, and are
    left untouched.
    """
    stats: dict[str, dict] = {}
    scalars = {}
    for name, v in cloud.scalars.items():
        z, mean, std = _zscore(v)
        scalars[name] = z
        stats[name] = {"kind": "scalar", "mean": mean, "std": std}
    vectors = {}
    for name, v in cloud.vectors.items():
        out = np.empty_like(v)
        means, stds = [], []
        for axis in range(3):
            out[:, axis], mean, std = _zscore(v[:, axis])
            means.append(mean)
            stds.append(std)
        vectors[name] = out
        stats[name] = {"kind": "vector", "mean": means, "std": stds}
    meta = dict(cloud.meta)
    meta["normalized"] = True
    return LabeledPointCloud(cloud.positions, scalars, vectors, cloud.weights, stats, meta)


def compute_bounds(positions: np.ndarray | LabeledPointCloud) -> BoundingCube:
    """Axis-aligned bounding cube whose edge is the largest axis extent.

    The cube is inflated by ``1e-9 * edge`` so that boundary points quantize
    strictly inside.  Coincident points fall back to a unit cube centred on
    the point.
    """
    if isinstance(positions, LabeledPointCloud):
        positions = positions.positions
    pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    # per-column reductions are much faster than axis=0 on (N, 3) rows
    lo = np.array([pos[:, a].min() for a in range(3)])
    hi = np.array([pos[:, a].max() for a in range(3)])
    edge = float(np.max(hi - lo))
    if edge == 0.0:
        return BoundingCube(origin=lo - 0.5, edge=1.0)
    pad = 1e-9 * edge
    origin = np.minimum(lo - 0.5 * pad, np.nextafter(lo, -np.inf))
    edge = edge + pad
    # keep the far faces strictly beyond the max coordinate despite rounding
    while np.any(origin + edge <= hi):
        edge = np.nextafter(edge + pad, np.inf)
    return BoundingCube(origin=origin, edge=float(edge))


# -- binary format -----------------------------------------------------------------

def _infer_format(path: Path) -> str:
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def write_cloud(cloud: LabeledPointCloud, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or _infer_format(path)
    if fmt == "binary":
        _write_binary(cloud, path)
    elif fmt == "csv":
        _write_csv(cloud, path)
    else:
        raise ValueError(f"unknown cloud format {fmt!r}")


def load_cloud(path, fmt: str | None = None, mmap: bool = False) -> LabeledPointCloud:
    """Read a cloud written in ``binary`` (M3PC) or ``csv`` format.

    With ``mmap=True`` the binary data blocks are memory-mapped rather than
    read, so large files can be scanned in chunks.
    """
    path = Path(path)
    fmt = fmt or _infer_format(path)
    if fmt == "binary":
        return _read_binary(path, mmap=mmap)
    if fmt == "csv":
        return _read_csv(path)
    raise ValueError(f"unknown cloud format {fmt!r}")


def _write_binary(cloud: LabeledPointCloud, path: Path) -> None:
    n = cloud.n_points
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, len(cloud.scalars), len(cloud.vectors),
                              int(cloud.weights is not None)))
        for name in cloud.channel_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
        fh.write(np.ascontiguousarray(cloud.positions, dtype="<f8").tobytes())
        for v in cloud.scalars.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        for v in cloud.vectors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
        if cloud.weights is not None:
            fh.write(np.ascontiguousarray(cloud.weights, dtype="<f8").tobytes())


def _read_binary(path: Path, mmap: bool = False) -> LabeledPointCloud:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise CloudFormatError("truncated header")
        magic, version, n, n_scalar, n_vector, has_weights = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CloudFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CloudFormatError(f"unsupported version {version}")
        if has_weights not in (0, 1):
            raise CloudFormatError(f"bad has_weights flag {has_weights}")
        names = []
        for _ in range(n_scalar + n_vector):
            raw = fh.read(2)
            if len(raw) != 2:
                raise CloudFormatError("truncated channel name table")
            (length,) = struct.unpack("<H", raw)
            raw = fh.read(length)
            if len(raw) != length:
                raise CloudFormatError("truncated channel name table")
            try:
                names.append(raw.decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise CloudFormatError(f"channel name is not utf-8: {exc}") from None
        data_offset = fh.tell()

    blocks = [("positions", 3)] + [(nm, 1) for nm in names[:n_scalar]] \
        + [(nm, 3) for nm in names[n_scalar:]] + ([("weights", 1)] if has_weights else [])
    expected = data_offset + 8 * n * sum(width for _, width in blocks)
    actual = path.stat().st_size
    if actual != expected:
        # locate the first block that runs past the end of the file
        offset = data_offset
        for name, width in blocks:
            size = 8 * n * width
            if offset + size > actual:
                have = max(0, (actual - offset) // (8 * width))
                raise CloudFormatError(
                    f"length mismatch: block {name!r} holds {have} of {n} records", record=int(have))
            offset += size
        raise CloudFormatError(f"length mismatch: {actual - expected} trailing bytes after data blocks")

    if mmap:
        raw = np.memmap(path, dtype="<f8", mode="r", offset=data_offset)
    else:
        with open(path, "rb") as fh:
            fh.seek(data_offset)
            raw = np.frombuffer(fh.read(), dtype="<f8")
    arrays = []
    offset = 0
    for _, width in blocks:
        block = raw[offset: offset + n * width]
        arrays.append(block.reshape(n, 3) if width == 3 else block)
        offset += n * width
    positions = arrays[0]
    scalars = dict(zip(names[:n_scalar], arrays[1: 1 + n_scalar]))
    vectors = dict(zip(names[n_scalar:], arrays[1 + n_scalar: 1 + n_scalar + n_vector]))
    weights = arrays[-1] if has_weights else None
    return LabeledPointCloud(positions, scalars, vectors, weights, meta={"source": str(path)})


# -- csv format -----------------------------------------------------------------------

def _csv_header(cloud: LabeledPointCloud) -> list[str]:
    cols = ["x", "y", "z"] + [f"s:{nm}" for nm in cloud.scalars]
    for nm in cloud.vectors:
        cols += [f"v:{nm}_x", f"v:{nm}_y", f"v:{nm}_z"]
    if cloud.weights is not None:
        cols.append("w")
    return cols


def _write_csv(cloud: LabeledPointCloud, path: Path) -> None:
    columns = [cloud.positions] + [v[:, None] for v in cloud.scalars.values()] \
        + list(cloud.vectors.values())
    if cloud.weights is not None:
        columns.append(cloud.weights[:, None])
    table = np.hstack(columns)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_csv_header(cloud))
        for row in table:
            writer.writerow([repr(float(x)) for x in row])


def _parse_csv_header(header: list[str]):
    if header[:3] != ["x", "y", "z"]:
        raise CloudFormatError(f"CSV header must start with x,y,z; got {header[:3]}")
    scalars, vectors = [], []
    has_weights = False
    i = 3
    while i < len(header):
        col = header[i]
        if col.startswith("s:"):
            if vectors or has_weights:
                raise CloudFormatError(f"scalar column {col!r} after vector/weight columns")
            scalars.append(col[2:])
            i += 1
        elif col.startswith("v:"):
            if has_weights:
                raise CloudFormatError(f"vector column {col!r} after weight column")
            base = col[2:]
            if not base.endswith("_x"):
                raise CloudFormatError(f"vector column {col!r} must end in _x")
            name = base[:-2]
            if header[i + 1: i + 3] != [f"v:{name}_y", f"v:{name}_z"]:
                raise CloudFormatError(f"vector channel {name!r} needs _x,_y,_z columns")
            vectors.append(name)
            i += 3
        elif col == "w" and i == len(header) - 1:
            has_weights = True
            i += 1
        else:
            raise CloudFormatError(f"unrecognized CSV column {col!r}")
    return scalars, vectors, has_weights


def _read_csv(path: Path) -> LabeledPointCloud:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CloudFormatError("empty CSV file") from None
        scalars, vectors, has_weights = _parse_csv_header(header)
        width = len(header)
        rows = []
        for record, row in enumerate(reader):
            if not row:
                continue
            if len(row) != width or any(not cell.strip() for cell in row):
                raise CloudFormatError(
                    f"length mismatch: expected {width} values, found {sum(1 for c in row if c.strip())}",
                    record=record)
            try:
                rows.append([float(cell) for cell in row])
            except ValueError as exc:
                raise CloudFormatError(f"unparseable value: {exc}", record=record) from None
    if not rows:
        raise CloudFormatError("CSV file has no records")
    table = np.asarray(rows, dtype=np.float64)
    col = 3
    sc = {}
    for nm in scalars:
        sc[nm] = table[:, col]
        col += 1
    vc = {}
    for nm in vectors:
        vc[nm] = table[:, col: col + 3]
        col += 3
    weights = table[:, col] if has_weights else None
    return LabeledPointCloud(table[:, :3], sc, vc, weights, meta={"source": str(path)})
