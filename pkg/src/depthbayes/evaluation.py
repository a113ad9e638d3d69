"""Posterior-predictive Monte Carlo, NLL, and calibration summaries.

Prediction maps are affine-normalized per sample (median and mean absolute
deviation of that sample's own map) before any statistic is taken: the
training objective leaves per-map scale and shift unidentified, so raw-space
moments would mostly measure that nuisance. Pixelwise standard deviations use
the population (n-divisor) convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import t as student_t

from .errors import DomainError, ShapeError
from .loss import normalize_map
from .peft import SubspaceDescriptor, flatten, unflatten
from .posterior import SampleSet

__all__ = [
    "PredictiveSummary",
    "RetentionCurve",
    "mean_confidence_halfwidth",
    "pixelwise_loss",
    "posterior_predict",
    "predictive_nll",
    "rank_sweep",
    "retention_curve",
]


@dataclass(eq=False)
class PredictiveSummary:
    """Per-image Monte-Carlo summary over posterior samples."""

    sample_maps: np.ndarray  # (samples, h, w), each affine-normalized
    mean_map: np.ndarray  # (h, w)
    std_map: np.ndarray  # (h, w), population convention
    nll: float | None = None  # filled once a target is supplied


def posterior_predict(model, desc: SubspaceDescriptor, samples: SampleSet, x) -> PredictiveSummary:
    """Forward every sample through the model and summarize pixelwise.

    The model's subspace vector is restored bit-exactly afterwards.
    """
    for member in samples.members:
        if member.size != desc.dim:
            raise ShapeError(
                f"sample has length {member.size}, subspace dim is {desc.dim}"
            )
    snapshot = flatten(model, desc)
    maps = np.empty((len(samples.members), model.config.image_height, model.config.image_width))
    try:
        for s, member in enumerate(samples.members):
            unflatten(model, desc, member)
            prediction = model.forward(x)
            maps[s] = normalize_map(prediction[0]).values
    finally:
        unflatten(model, desc, snapshot)
    return PredictiveSummary(
        sample_maps=maps,
        mean_map=maps.mean(axis=0),
        std_map=maps.std(axis=0),
    )


def predictive_nll(summary: PredictiveSummary, target) -> float:
    """Negative log of the mean sample likelihood against ``target``.

    Computed as -log((1/S) * sum_s exp(-loss_s)) via log-sum-exp; the
    likelihood's proportionality constant is dropped, consistent with the
    training loss.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 3 and target.shape[0] == 1:
        target = target[0]
    target_normalized = normalize_map(target).values
    count = summary.sample_maps.shape[0]
    if count < 1:
        raise DomainError("predictive summary has no samples")
    losses = np.abs(summary.sample_maps - target_normalized[None]).mean(axis=(1, 2))
    nll = float(-(logsumexp(-losses) - np.log(count)))
    summary.nll = nll
    return nll


def pixelwise_loss(summary: PredictiveSummary, target) -> np.ndarray:
    """|normalized mean prediction - normalized target| per pixel."""
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 3 and target.shape[0] == 1:
        target = target[0]
    return np.abs(summary.mean_map - normalize_map(target).values)


@dataclass(frozen=True)
class RetentionCurve:
    """Mean per-pixel loss restricted to the q most certain pixels."""

    quantiles: tuple[float, ...]
    losses: tuple[float, ...]


def retention_curve(std_maps, loss_maps, grid) -> RetentionCurve:
    """Pool pixels across maps, rank by ascending std, take prefix means.

    ``grid`` must be strictly increasing within (0, 1]; the value at q is the
    mean per-pixel loss of the ceil(q * P) most certain pixels. Ties in std
    are broken by pooled pixel index, for determinism.
    """
    grid = [float(q) for q in grid]
    if not grid:
        raise DomainError("empty quantile grid")
    if any(not 0.0 < q <= 1.0 for q in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise DomainError(f"quantile grid must be strictly increasing within (0, 1]: {grid}")
    std_all = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in std_maps])
    loss_all = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in loss_maps])
    if std_all.shape != loss_all.shape:
        raise ShapeError(f"{std_all.size} std pixels vs {loss_all.size} loss pixels")
    order = np.lexsort((np.arange(std_all.size), std_all))
    prefix_means = np.cumsum(loss_all[order]) / np.arange(1, std_all.size + 1)
    values = tuple(float(prefix_means[int(np.ceil(q * std_all.size)) - 1]) for q in grid)
    return RetentionCurve(quantiles=tuple(grid), losses=values)


RANK_SWEEP_QUANTILES = (0.25, 0.5, 0.75)


def mean_confidence_halfwidth(values, level: float = 0.95) -> float:
    """Half-width of the t-based confidence interval for the mean."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n < 2:
        return 0.0
    spread = values.std(ddof=1)
    if spread == 0.0:
        return 0.0
    quantile = float(student_t.ppf(0.5 + level / 2.0, n - 1))
    return float(quantile * spread / np.sqrt(n))


def rank_sweep(rows) -> list[dict]:
    """Aggregate per-seed retention losses at the 25/50/75% quantiles.

    ``rows`` are dicts with method, inference, rank, quantile, loss (one per
    seed). Returns rows grouped over seeds with mean and 95% half-width,
    sorted by (method, inference, rank, quantile).
    """
    rows = list(rows)
    if not rows:
        raise DomainError("rank_sweep got no rows")
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        quantile = float(row["quantile"])
        if quantile not in RANK_SWEEP_QUANTILES:
            continue
        key = (str(row["method"]), str(row["inference"]), int(row["rank"]), quantile)
        groups.setdefault(key, []).append(float(row["loss"]))
    out = []
    for key in sorted(groups):
        method, inference, rank, quantile = key
        losses = groups[key]
        out.append(
            {
                "method": method,
                "inference": inference,
                "rank": rank,
                "quantile": quantile,
                "loss_mean": float(np.mean(losses)),
                "loss_ci95": mean_confidence_halfwidth(losses),
            }
        )
    return out
