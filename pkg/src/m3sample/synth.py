"""Synthetic labeled clouds with closed-form fields.

A cloud description is a JSON-compatible dict::

    {"density": {"kind": "slab", "ratio": 100, "thickness": 0.1},
     "scalars": {"p": {"kind": "gaussian", "center": [0.5, 0.5, 0.3], "width": 0.15}},
     "vectors": {"u": {"kind": "shear_vortex"}},
     "weights": true}

or the name of an entry in :data:`CATALOG`.  Points live in the unit cube.
Generation runs in fixed-size blocks, each with its own Philox stream keyed
by ``(seed, block)``, so output depends only on the seed and N.
"""
from __future__ import annotations

import copy
from typing import Mapping

import numpy as np

from .cloud import LabeledPointCloud

BLOCK = 1 << 16
_MASK64 = (1 << 64) - 1

DENSITIES = ("uniform", "slab", "radial")
SCALAR_FIELDS = ("constant", "linear", "step", "gaussian")
VECTOR_FIELDS = ("constant", "shear_vortex")

CATALOG: dict[str, dict] = {
    "uniform-linear": {
        "density": {"kind": "uniform"},
        "scalars": {"p": {"kind": "linear", "coef": [1.0, 0.0, 0.0]}},
    },
    "step-plane": {
        "density": {"kind": "uniform"},
        "scalars": {"p": {"kind": "step", "normal": [1.0, 0.0, 0.0], "offset": 0.5}},
    },
    # dense near-wall slab under a sparse far field; the stress case for sampling
    "boundary-layer": {
        "density": {"kind": "slab", "ratio": 100.0, "thickness": 0.1},
        "scalars": {"p": {"kind": "gaussian", "center": [0.5, 0.5, 0.35], "width": 0.12}},
        "vectors": {"u": {"kind": "shear_vortex", "center": [0.5, 0.5], "width": 0.15,
                          "shear": 1.0, "bl_thickness": 0.05, "swirl": 1.0}},
        "weights": True,
    },
    "radial-bump": {
        "density": {"kind": "radial", "center": [0.5, 0.5, 0.5], "scale": 0.1},
        "scalars": {"p": {"kind": "gaussian", "center": [0.5, 0.5, 0.5], "width": 0.2}},
        "vectors": {"u": {"kind": "shear_vortex"}},
        "weights": True,
    },
}


class UnknownSpecError(ValueError):
    pass


def resolve_spec(spec: str | Mapping) -> dict:
    if isinstance(spec, str):
        if spec not in CATALOG:
            raise UnknownSpecError(f"unknown cloud spec {spec!r}; known: {sorted(CATALOG)}")
        return copy.deepcopy(CATALOG[spec])
    spec = copy.deepcopy(dict(spec))
    density = spec.setdefault("density", {"kind": "uniform"})
    if density.get("kind") not in DENSITIES:
        raise UnknownSpecError(f"unknown density {density.get('kind')!r}")
    for name, f in spec.get("scalars", {}).items():
        if f.get("kind") not in SCALAR_FIELDS:
            raise UnknownSpecError(f"unknown scalar field {f.get('kind')!r} for {name!r}")
    for name, f in spec.get("vectors", {}).items():
        if f.get("kind") not in VECTOR_FIELDS:
            raise UnknownSpecError(f"unknown vector field {f.get('kind')!r} for {name!r}")
    if not spec.get("scalars") and not spec.get("vectors"):
        raise UnknownSpecError("cloud spec needs at least one channel")
    return spec


# -- densities --------------------------------------------------------------------

def _slab_params(d: Mapping):
    ratio = float(d.get("ratio", 100.0))
    thick = float(d.get("thickness", 0.1))
    axis = int(d.get("axis", 2))
    if ratio <= 0 or not 0 < thick < 1:
        raise ValueError("slab needs ratio > 0 and 0 < thickness < 1")
    return ratio, thick, axis


def slab_fraction(density: Mapping) -> float:
    """Expected share of points inside the slab: ``ratio / (ratio + 1)``.

    ``ratio`` is the ratio of expected point counts, slab to far field.
    """
    ratio, _, _ = _slab_params(density)
    return ratio / (ratio + 1.0)


def density_pdf(density: Mapping, x: np.ndarray) -> np.ndarray:
    """Probability density of the point distribution on the unit cube."""
    kind = density["kind"]
    if kind == "uniform":
        return np.ones(x.shape[0])
    if kind == "slab":
        ratio, thick, axis = _slab_params(density)
        inside = x[:, axis] < thick
        frac = ratio / (ratio + 1.0)
        return np.where(inside, frac / thick, (1.0 - frac) / (1.0 - thick))
    if kind == "radial":
        # unnormalized; weights are self-normalized so the constant drops out
        c = np.asarray(density.get("center", [0.5, 0.5, 0.5]))
        s = float(density.get("scale", 0.1))
        return (s / (np.linalg.norm(x - c, axis=1) + s)) ** 2
    raise UnknownSpecError(f"unknown density {kind!r}")


def _sample_block(density: Mapping, rng: np.random.Generator, n: int) -> np.ndarray:
    kind = density["kind"]
    if kind == "uniform":
        return rng.random((n, 3))
    if kind == "slab":
        ratio, thick, axis = _slab_params(density)
        x = rng.random((n, 3))
        inside = rng.random(n) < ratio / (ratio + 1.0)
        u = x[:, axis]
        x[:, axis] = np.where(inside, u * thick, thick + u * (1.0 - thick))
        return x
    # radial: rejection against the uniform envelope
    out = np.empty((0, 3))
    while out.shape[0] < n:
        cand = rng.random((2 * n, 3))
        keep = rng.random(2 * n) < density_pdf(density, cand)
        out = np.concatenate([out, cand[keep]])
    return out[:n]


# -- fields ---------------------------------------------------------------------------

def scalar_field(f: Mapping, x: np.ndarray) -> np.ndarray:
    kind = f["kind"]
    if kind == "constant":
        return np.full(x.shape[0], float(f.get("value", 0.0)))
    if kind == "linear":
        return float(f.get("offset", 0.0)) + x @ np.asarray(f.get("coef", [1.0, 0.0, 0.0]), dtype=float)
    if kind == "step":
        n = np.asarray(f.get("normal", [1.0, 0.0, 0.0]), dtype=float)
        amp = float(f.get("amplitude", 1.0))
        return np.where(x @ n >= float(f.get("offset", 0.5)), amp, -amp)
    if kind == "gaussian":
        c = np.asarray(f.get("center", [0.5, 0.5, 0.5]), dtype=float)
        w = float(f.get("width", 0.15))
        r2 = np.sum((x - c) ** 2, axis=1)
        return float(f.get("amplitude", 1.0)) * np.exp(-r2 / (2.0 * w * w))
    raise UnknownSpecError(f"unknown scalar field {kind!r}")


def vector_field(f: Mapping, x: np.ndarray) -> np.ndarray:
    kind = f["kind"]
    if kind == "constant":
        return np.tile(np.asarray(f.get("value", [1.0, 0.0, 0.0]), dtype=float), (x.shape[0], 1))
    if kind == "shear_vortex":
        # wall-bounded shear layer along x plus a Gaussian-core swirl about a z-parallel axis
        cx, cy = f.get("center", [0.5, 0.5])
        w = float(f.get("width", 0.15))
        bl = float(f.get("bl_thickness", 0.05))
        dx, dy = x[:, 0] - cx, x[:, 1] - cy
        core = float(f.get("swirl", 1.0)) * np.exp(-(dx * dx + dy * dy) / (2.0 * w * w)) / w
        out = np.empty_like(x)
        out[:, 0] = float(f.get("shear", 1.0)) * np.tanh(x[:, 2] / bl) - dy * core
        out[:, 1] = dx * core
        out[:, 2] = 0.0
        return out
    raise UnknownSpecError(f"unknown vector field {kind!r}")


def field_range(f: Mapping, lo, hi) -> float:
    """Exact range (max - min) of a scalar field over the closed box [lo, hi]."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    kind = f["kind"]
    if kind == "constant":
        return 0.0
    if kind == "linear":
        return float(np.sum(np.abs(np.asarray(f.get("coef", [1.0, 0.0, 0.0]))) * (hi - lo)))
    if kind == "step":
        n = np.asarray(f.get("normal", [1.0, 0.0, 0.0]), dtype=float)
        vmin = float(np.sum(np.minimum(n * lo, n * hi)))
        vmax = float(np.sum(np.maximum(n * lo, n * hi)))
        off = float(f.get("offset", 0.5))
        return 2.0 * abs(float(f.get("amplitude", 1.0))) if vmin < off <= vmax else 0.0
    if kind == "gaussian":
        c = np.asarray(f.get("center", [0.5, 0.5, 0.5]), dtype=float)
        w = float(f.get("width", 0.15))
        near = np.sum((np.clip(c, lo, hi) - c) ** 2)
        far = np.sum(np.maximum(np.abs(c - lo), np.abs(c - hi)) ** 2)
        amp = abs(float(f.get("amplitude", 1.0)))
        return amp * (np.exp(-near / (2 * w * w)) - np.exp(-far / (2 * w * w)))
    raise UnknownSpecError(f"no closed-form range for field {kind!r}")


# -- generation ---------------------------------------------------------------------------

def generate_positions(density: Mapping, n: int, seed: int) -> np.ndarray:
    out = np.empty((n, 3))
    for b, start in enumerate(range(0, n, BLOCK)):
        size = min(BLOCK, n - start)
        rng = np.random.Generator(np.random.Philox(key=[seed & _MASK64, b]))
        out[start: start + size] = _sample_block(density, rng, size)
    return out


def generate_cloud(spec: str | Mapping, n: int, seed: int) -> LabeledPointCloud:
    """Sample ``n`` points and evaluate every channel analytically.

    When ``weights`` is set, point ``i`` gets the geometric weight
    ``(1/pdf(x_i)) / sum_j (1/pdf(x_j))``: its share of the unit volume.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = resolve_spec(spec)
    x = generate_positions(spec["density"], n, seed)
    scalars = {name: scalar_field(f, x) for name, f in spec.get("scalars", {}).items()}
    vectors = {name: vector_field(f, x) for name, f in spec.get("vectors", {}).items()}
    weights = None
    if spec.get("weights"):
        inv = 1.0 / density_pdf(spec["density"], x)
        weights = inv / inv.sum()
    return LabeledPointCloud(x, scalars, vectors, weights, meta={"synth": spec, "seed": seed})
