"""Affine-invariant mean absolute error between depth maps.

Each map is normalized by its own spatial median and mean absolute deviation
before comparison, which makes the loss invariant to positive per-map affine
transforms. The induced log-likelihood is the negated loss with the
proportionality constant dropped; every downstream quantity (NLL deltas,
posterior weights) is invariant to that constant.

All operations accept plain arrays or autodiff nodes and return a float or a
node accordingly, so the training gradient flows through the normalizers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError

__all__ = [
    "EPS_NORM",
    "NormalizedMap",
    "affine_invariant_mae",
    "log_likelihood",
    "mae_dev",
    "normalize_map",
    "spatial_median",
]

# Guard against division by a vanishing mean absolute deviation; a map this
# close to constant carries no affine-invariant signal.
EPS_NORM = 1e-8


@dataclass(frozen=True, eq=False)
class NormalizedMap:
    """A map shifted by its median and scaled by its mean absolute deviation."""

    values: np.ndarray
    median: float
    mae: float


def _check_map(m, what: str):
    value = ad.value_of(m)
    if value.ndim != 2:
        raise ShapeError(f"{what} must be a 2-d map, got shape {value.shape}")
    if value.size == 0:
        raise DomainError(f"{what} is empty")
    return value


def spatial_median(m) -> float:
    """Median over all pixels; even pixel counts average the middle pair."""
    _check_map(m, "map")
    out = ad.median(m)
    return out if isinstance(out, ad.Node) else float(out)


def mae_dev(m) -> float:
    """Mean absolute deviation from the spatial median."""
    _check_map(m, "map")
    out = ad.mean(ad.absolute(ad.subtract(m, ad.median(m))))
    return out if isinstance(out, ad.Node) else float(out)


def _normalized(m, label: str):
    """(m - median) / mae as array or node; raises on degenerate maps."""
    med = ad.median(m)
    dev = ad.mean(ad.absolute(ad.subtract(m, med)))
    dev_value = float(ad.value_of(dev))
    if not dev_value > EPS_NORM:
        raise DomainError(
            f"degenerate map ({label}): mean absolute deviation {dev_value:.3e} <= {EPS_NORM:.0e}"
        )
    return ad.divide(ad.subtract(m, med), dev), med, dev


def normalize_map(m) -> NormalizedMap:
    """Normalize a plain map, keeping the median/mae that were divided out."""
    value = _check_map(m, "map")
    normalized, med, dev = _normalized(value, "map")
    return NormalizedMap(values=normalized, median=float(ad.value_of(med)), mae=float(ad.value_of(dev)))


def _as_batch(maps, what: str) -> list:
    if isinstance(maps, (list, tuple)):
        batch = list(maps)
    else:
        value = ad.value_of(maps)
        if value.ndim == 2:
            batch = [maps]
        elif value.ndim == 3 and not isinstance(maps, ad.Node):
            batch = [value[i] for i in range(value.shape[0])]
        else:
            raise ShapeError(f"{what} must be a map or a batch of maps, got shape {value.shape}")
    if not batch:
        raise DomainError(f"{what} batch is empty")
    return batch


def affine_invariant_mae(pred, target):
    """Mean over images of the per-pixel MAE between normalized maps."""
    preds = _as_batch(pred, "prediction")
    targets = _as_batch(target, "target")
    if len(preds) != len(targets):
        raise ShapeError(f"{len(preds)} predictions vs {len(targets)} targets")
    terms = []
    for index, (p, t) in enumerate(zip(preds, targets)):
        pv = _check_map(p, f"prediction {index}")
        tv = _check_map(t, f"target {index}")
        if pv.shape != tv.shape:
            raise ShapeError(
                f"image {index}: prediction shape {pv.shape} != target shape {tv.shape}"
            )
        pn, _, _ = _normalized(p, f"prediction, image {index}")
        tn, _, _ = _normalized(t, f"target, image {index}")
        terms.append(ad.mean(ad.absolute(ad.subtract(pn, tn))))
    out = terms[0]
    for term in terms[1:]:
        out = ad.add(out, term)
    out = ad.multiply(out, 1.0 / len(terms))
    return out if isinstance(out, ad.Node) else float(out)


def log_likelihood(pred, target):
    """Unnormalized log-likelihood: the negated affine-invariant MAE."""
    loss = affine_invariant_mae(pred, target)
    if isinstance(loss, ad.Node):
        return ad.multiply(loss, -1.0)
    return -loss
