"""Posterior approximations built from training checkpoints.

Two Gaussian forms fit the empirical first and second moments of flattened
checkpoint vectors: a diagonal one, and a low-rank-plus-diagonal one whose
covariance is half the diagonal plus half the sample covariance, kept as
deviation columns and never materialized during sampling. Checkpoint and
deep ensembles treat the vectors themselves as posterior samples.

Sampling uses the counter-based Philox generator keyed by (seed, stream), so
concurrent draws with disjoint stream ids stay reproducible.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import load_tensor, save_tensor
from .errors import DomainError, ShapeError
from .train import Checkpoint, equidistant_indices

__all__ = [
    "DEFAULT_JITTER",
    "DiagGaussian",
    "LowRankPlusDiagGaussian",
    "SampleSet",
    "checkpoint_ensemble",
    "deep_ensemble",
    "fit_swag_diag",
    "fit_swag_lowrank",
    "load_posterior",
    "sample",
    "save_posterior",
]

# Stabilizes low-rank sampling when checkpoint spread collapses; set to 0 to
# reproduce the undamped behavior.
DEFAULT_JITTER = 1e-8


@dataclass(frozen=True, eq=False)
class DiagGaussian:
    mean: np.ndarray
    variance: np.ndarray  # per-coordinate, >= 0

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True, eq=False)
class LowRankPlusDiagGaussian:
    mean: np.ndarray
    variance: np.ndarray
    deviations: np.ndarray  # (dim, n) columns of checkpoint - mean
    jitter: float = DEFAULT_JITTER

    @property
    def dim(self) -> int:
        return self.mean.size

    def materialized_covariance(self) -> np.ndarray:
        """Dense covariance, for small-dimension tests and inspection only."""
        n = self.deviations.shape[1]
        lowrank = self.deviations @ self.deviations.T / (n - 1)
        return 0.5 * (np.diag(self.variance) + lowrank) + self.jitter * np.eye(self.dim)


@dataclass(frozen=True, eq=False)
class SampleSet:
    members: tuple[np.ndarray, ...]
    provenance: str

    def __post_init__(self):
        if not self.members:
            raise DomainError("sample set has no members")
        dims = {m.size for m in self.members}
        if len(dims) != 1:
            raise ShapeError(f"sample set members have mixed lengths {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.members[0].size


def _as_vectors(checkpoints) -> np.ndarray:
    vectors = [
        np.asarray(c.params if isinstance(c, Checkpoint) else c, dtype=np.float64).reshape(-1)
        for c in checkpoints
    ]
    if len(vectors) < 2:
        raise DomainError(f"need at least 2 checkpoints, got {len(vectors)}")
    lengths = {v.size for v in vectors}
    if len(lengths) != 1:
        raise ShapeError(f"checkpoints have mixed lengths {sorted(lengths)}")
    return np.stack(vectors, axis=1)  # (dim, n)


def fit_swag_diag(checkpoints) -> DiagGaussian:
    """Empirical mean and (population) variance of the checkpoints."""
    stacked = _as_vectors(checkpoints)
    mean = stacked.mean(axis=1)
    variance = (stacked * stacked).mean(axis=1) - mean * mean
    return DiagGaussian(mean=mean, variance=np.maximum(variance, 0.0))


def fit_swag_lowrank(checkpoints, jitter: float = DEFAULT_JITTER) -> LowRankPlusDiagGaussian:
    """Diagonal moments plus the full deviation matrix (one column each)."""
    stacked = _as_vectors(checkpoints)
    mean = stacked.mean(axis=1)
    variance = (stacked * stacked).mean(axis=1) - mean * mean
    deviations = stacked - mean[:, None]
    return LowRankPlusDiagGaussian(
        mean=mean, variance=np.maximum(variance, 0.0), deviations=deviations, jitter=float(jitter)
    )


def _rng(seed: int, stream: int) -> np.random.Generator:
    key = np.array([seed % (1 << 64), stream % (1 << 64)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample(posterior, count: int, seed: int, stream: int = 0) -> SampleSet:
    """Draw ``count`` parameter vectors from the posterior, deterministically.

    Sample sets pass their members through (count capped at membership).
    """
    if count < 1:
        raise DomainError(f"sample count must be >= 1, got {count}")
    if isinstance(posterior, SampleSet):
        members = posterior.members[: min(count, len(posterior.members))]
        return SampleSet(members=tuple(members), provenance=posterior.provenance)
    rng = _rng(seed, stream)
    if isinstance(posterior, DiagGaussian):
        std = np.sqrt(posterior.variance)
        members = tuple(
            posterior.mean + std * rng.standard_normal(posterior.dim) for _ in range(count)
        )
        return SampleSet(members=members, provenance="swag-diag-draws")
    if isinstance(posterior, LowRankPlusDiagGaussian):
        n = posterior.deviations.shape[1]
        # Covariance of the two noise terms: 0.5*diag(variance) + jitter*I
        # plus 0.5 * deviations @ deviations.T / (n - 1).
        diag_scale = np.sqrt(0.5 * posterior.variance + posterior.jitter)
        lowrank_scale = 1.0 / np.sqrt(2.0 * (n - 1))
        members = []
        for _ in range(count):
            z_diag = rng.standard_normal(posterior.dim)
            z_lr = rng.standard_normal(n)
            members.append(
                posterior.mean + diag_scale * z_diag + lowrank_scale * (posterior.deviations @ z_lr)
            )
        return SampleSet(members=tuple(members), provenance="swag-lowrank-draws")
    raise TypeError(f"unknown posterior type {type(posterior).__name__}")


def checkpoint_ensemble(checkpoints, count: int) -> SampleSet:
    """``count`` equidistant checkpoints (always including the last one)."""
    vectors = [
        np.asarray(c.params if isinstance(c, Checkpoint) else c, dtype=np.float64).reshape(-1)
        for c in checkpoints
    ]
    if not 1 <= count <= len(vectors):
        raise DomainError(f"cannot pick {count} of {len(vectors)} checkpoints")
    picks = equidistant_indices(len(vectors), count)
    return SampleSet(members=tuple(vectors[i] for i in picks), provenance="checkpoint-ensemble")


def deep_ensemble(final_checkpoints) -> SampleSet:
    """Final checkpoints of independent replicates, passed through unchanged."""
    vectors = [
        np.asarray(c.params if isinstance(c, Checkpoint) else c, dtype=np.float64).reshape(-1)
        for c in final_checkpoints
    ]
    if len(vectors) < 2:
        raise DomainError(f"deep ensemble needs >= 2 members, got {len(vectors)}")
    return SampleSet(members=tuple(vectors), provenance="deep-ensemble")


def save_posterior(dirpath: str, posterior) -> None:
    """Serialize to tensor files plus a manifest naming the kind."""
    os.makedirs(dirpath, exist_ok=True)
    lines = []
    if isinstance(posterior, DiagGaussian):
        lines.append("kind = diag-gaussian")
        save_tensor(os.path.join(dirpath, "mean.tnsr"), posterior.mean)
        save_tensor(os.path.join(dirpath, "variance.tnsr"), posterior.variance)
    elif isinstance(posterior, LowRankPlusDiagGaussian):
        lines.append("kind = lowrank-gaussian")
        lines.append(f"jitter = {posterior.jitter!r}")
        save_tensor(os.path.join(dirpath, "mean.tnsr"), posterior.mean)
        save_tensor(os.path.join(dirpath, "variance.tnsr"), posterior.variance)
        save_tensor(os.path.join(dirpath, "deviations.tnsr"), posterior.deviations)
    elif isinstance(posterior, SampleSet):
        lines.append("kind = sample-set")
        lines.append(f"provenance = {posterior.provenance}")
        lines.append(f"count = {len(posterior.members)}")
        for i, member in enumerate(posterior.members):
            save_tensor(os.path.join(dirpath, f"member_{i:05}.tnsr"), member)
    else:
        raise TypeError(f"unknown posterior type {type(posterior).__name__}")
    with open(os.path.join(dirpath, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_posterior(dirpath: str):
    with open(os.path.join(dirpath, "manifest.txt"), encoding="utf-8") as fh:
        fields = dict(
            (k.strip(), v.strip())
            for k, _, v in (line.partition("=") for line in fh if line.strip())
        )
    kind = fields["kind"]
    if kind == "diag-gaussian":
        return DiagGaussian(
            mean=load_tensor(os.path.join(dirpath, "mean.tnsr")),
            variance=load_tensor(os.path.join(dirpath, "variance.tnsr")),
        )
    if kind == "lowrank-gaussian":
        return LowRankPlusDiagGaussian(
            mean=load_tensor(os.path.join(dirpath, "mean.tnsr")),
            variance=load_tensor(os.path.join(dirpath, "variance.tnsr")),
            deviations=load_tensor(os.path.join(dirpath, "deviations.tnsr")),
            jitter=float(fields["jitter"]),
        )
    if kind == "sample-set":
        count = int(fields["count"])
        members = tuple(
            load_tensor(os.path.join(dirpath, f"member_{i:05}.tnsr")) for i in range(count)
        )
        return SampleSet(members=members, provenance=fields["provenance"])
    raise DomainError(f"unknown posterior kind '{kind}' in {dirpath}")
