"""Weighted and unweighted field error metrics.

With per-point weights w and error e_i = ||f_i - f_hat_i||_2::

    MAE_w  = sum(e * w) / sum(w)
    MSE_w  = sum(e**2 * w) / sum(w)
    relL2_w = sqrt(sum(e**2 * w)) / sqrt(sum(||f||**2 * w))

Sums are correctly rounded (``math.fsum``), so the result does not depend
on summation order, and unit weights reproduce the unweighted values bit
for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class Errors(NamedTuple):
    mae: float
    mse: float
    rel_l2: float


def _as_field(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError("fields must be (N,) or (N, d) arrays")
    return a


@dataclass(frozen=True, eq=False)
class FieldPair:
    truth: np.ndarray
    pred: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        f, g = _as_field(self.truth), _as_field(self.pred)
        if f.shape != g.shape:
            raise ValueError(f"truth {f.shape} and prediction {g.shape} differ in shape")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
            raise ValueError("fields must be finite")
        w = self.weights
        if w is not None:
            w = np.asarray(w, dtype=np.float64)
            if w.shape != (f.shape[0],):
                raise ValueError(f"weights must have shape ({f.shape[0]},)")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise ValueError("weights must be finite and >= 0")
        object.__setattr__(self, "truth", f)
        object.__setattr__(self, "pred", g)
        object.__setattr__(self, "weights", w)


def _errors(sq_err: np.ndarray, sq_norm: np.ndarray, w: np.ndarray | None) -> Errors:
    err = np.sqrt(sq_err)
    if w is None:
        total = float(sq_err.shape[0])
        num_abs, num_sq, den = math.fsum(err), math.fsum(sq_err), math.fsum(sq_norm)
    else:
        total = math.fsum(w)
        if total == 0:
            raise ValueError("weights sum to zero")
        num_abs, num_sq, den = math.fsum(err * w), math.fsum(sq_err * w), math.fsum(sq_norm * w)
    if den == 0:
        if num_sq != 0:
            raise ValueError("relative L2 undefined: reference field has zero norm")
        rel = 0.0
    else:
        rel = math.sqrt(num_sq) / math.sqrt(den)
    return Errors(num_abs / total, num_sq / total, rel)


def weighted_errors(pair: FieldPair) -> Errors:
    """MAE, MSE and relative L2 under the pair's weights (unit weights if none)."""
    diff = pair.truth - pair.pred
    sq_err = np.einsum("ij,ij->i", diff, diff)
    sq_norm = np.einsum("ij,ij->i", pair.truth, pair.truth)
    w = pair.weights if pair.weights is not None else np.ones(sq_err.shape[0])
    return _errors(sq_err, sq_norm, w)


def unweighted_errors(truth, pred) -> Errors:
    """Plain means over points, computed without any weight vector."""
    pair = FieldPair(truth, pred)
    diff = pair.truth - pair.pred
    return _errors(np.einsum("ij,ij->i", diff, diff),
                   np.einsum("ij,ij->i", pair.truth, pair.truth), None)


def error_report(truth, pred, weights=None) -> dict:
    """Both metric families, keyed as ``mae, mse, rel_l2, mae_w, mse_w, rel_l2_w``."""
    plain = unweighted_errors(truth, pred)
    weighted = weighted_errors(FieldPair(truth, pred, weights))
    return {"mae": plain.mae, "mse": plain.mse, "rel_l2": plain.rel_l2,
            "mae_w": weighted.mae, "mse_w": weighted.mse, "rel_l2_w": weighted.rel_l2}
