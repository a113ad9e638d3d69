"""Tucker decomposition and reconstruction.

A factorization holds a core tensor plus one entry per mode: either a factor
matrix of shape (extent, rank) or the :data:`IDENTITY_MODE` marker for modes
left undecomposed (partial / Tucker-n form). Decomposition is plain HOSVD:
per-mode leading left singular vectors of the unfoldings, core obtained by
contracting with the factor transposes. HOSVD truncation is not the optimal
low-rank approximation, but it is deterministic and exact at full ranks,
which is all this package needs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import as_tensor, mode_product, mode_unfold, svd

__all__ = ["IDENTITY_MODE", "IdentityMode", "TuckerFactors", "tucker_decompose", "tucker_reconstruct"]


class IdentityMode:
    """Marker for a mode whose factor is the identity (not decomposed)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "IDENTITY_MODE"


IDENTITY_MODE = IdentityMode()


@dataclass
class TuckerFactors:
    """Core tensor plus per-mode factor matrices (or identity markers)."""

    core: np.ndarray
    factors: tuple

    def __post_init__(self):
        self.core = as_tensor(self.core)
        factors = []
        for entry in self.factors:
            factors.append(entry if entry is IDENTITY_MODE else as_tensor(entry))
        self.factors = tuple(factors)
        if len(self.factors) != self.core.ndim:
            raise ShapeError(
                f"{len(self.factors)} factors for core of rank {self.core.ndim}"
            )
        for mode, entry in enumerate(self.factors):
            if entry is IDENTITY_MODE:
                continue
            if entry.ndim != 2:
                raise ShapeError(f"factor for mode {mode} must be a matrix, got {entry.shape}")
            extent, rank = entry.shape
            if rank != self.core.shape[mode]:
                raise ShapeError(
                    f"factor for mode {mode} has {rank} columns, core extent is {self.core.shape[mode]}"
                )
            if rank > extent:
                raise ShapeError(
                    f"factor for mode {mode} has rank {rank} exceeding extent {extent}"
                )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(
            self.core.shape[mode] if entry is IDENTITY_MODE else entry.shape[0]
            for mode, entry in enumerate(self.factors)
        )


def tucker_reconstruct(factors: TuckerFactors) -> np.ndarray:
    """Contract the core with every factor matrix; identity modes pass through."""
    out = factors.core
    for mode, entry in enumerate(factors.factors):
        if entry is IDENTITY_MODE:
            continue
        out = mode_product(out, entry, mode)
    return out


def tucker_decompose(a, ranks) -> TuckerFactors:
    """HOSVD of ``a`` at the requested per-mode ranks.

    ``ranks`` is an iterable of (mode, rank) pairs; modes not listed keep an
    identity factor. Factor columns are sign-fixed so their largest-magnitude
    entry is non-negative.
    """
    a = as_tensor(a)
    requested = dict()
    for mode, rank in ranks:
        mode = int(mode)
        rank = int(rank)
        if not 0 <= mode < a.ndim:
            raise ShapeError(f"mode {mode} out of range for tensor of rank {a.ndim}")
        if mode in requested:
            raise DomainError(f"mode {mode} listed twice")
        if rank <= 0:
            raise DomainError(f"rank for mode {mode} must be positive, got {rank}")
        if rank > a.shape[mode]:
            raise DomainError(
                f"rank {rank} for mode {mode} exceeds extent {a.shape[mode]}"
            )
        requested[mode] = rank

    factors: list = [IDENTITY_MODE] * a.ndim
    for mode, rank in sorted(requested.items()):
        u, _, _ = svd(mode_unfold(a, mode))
        u = u[:, :rank].copy()
        for col in range(u.shape[1]):
            peak = np.argmax(np.abs(u[:, col]))
            if u[peak, col] < 0:
                u[:, col] = -u[:, col]
        factors[mode] = u

    core = a
    for mode, rank in sorted(requested.items()):
        core = mode_product(core, factors[mode].T, mode)
    return TuckerFactors(core=core, factors=tuple(factors))
