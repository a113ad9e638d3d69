"""Dense tensor primitives: convolution, matricization, and SVD.

Tensors throughout the package are plain C-contiguous ``float64`` numpy
arrays; :func:`as_tensor` is the single coercion point. Everything in this
module is a pure function of its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "ConvSpec",
    "as_tensor",
    "conv2d",
    "mode_fold",
    "mode_product",
    "mode_unfold",
    "svd",
]


def as_tensor(values) -> np.ndarray:
    """Coerce ``values`` to a C-contiguous float64 array, preserving rank 0.

    (``np.ascontiguousarray`` alone would promote 0-d arrays to 1-d.)
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class ConvSpec:
    """Stride and zero-padding of a 2-d cross-correlation."""

    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if len(self.stride) != 2 or any(int(s) < 1 for s in self.stride):
            raise DomainError(f"stride must be two positive integers, got {self.stride}")
        if len(self.padding) != 2 or any(int(p) < 0 for p in self.padding):
            raise DomainError(f"padding must be two non-negative integers, got {self.padding}")
        object.__setattr__(self, "stride", (int(self.stride[0]), int(self.stride[1])))
        object.__setattr__(self, "padding", (int(self.padding[0]), int(self.padding[1])))

    def output_extent(self, extent: int, kernel: int, axis: int) -> int:
        return (extent + 2 * self.padding[axis] - kernel) // self.stride[axis] + 1


def conv2d(x, kernel, spec: ConvSpec = ConvSpec(), bias=None) -> np.ndarray:
    """Channel-summed 2-d cross-correlation (no kernel flip) with zero padding.

    ``x`` has shape (cin, h, w), ``kernel`` (cout, cin, k1, k2) and the
    optional ``bias`` (cout,). Output spatial extents follow
    floor((h + 2*pad - k) / stride) + 1 and must be >= 1.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must have shape (cin, h, w), got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must have shape (cout, cin, k1, k2), got {kernel.shape}")
    cin, h, w = x.shape
    cout, kcin, k1, k2 = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, input has {cin}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias must have shape ({cout},), got {bias.shape}")
    hout = spec.output_extent(h, k1, 0)
    wout = spec.output_extent(w, k2, 1)
    if hout < 1 or wout < 1:
        raise DomainError(
            f"conv2d output extent ({hout}, {wout}) is empty for input {x.shape[1:]}, "
            f"kernel ({k1}, {k2}), stride {spec.stride}, padding {spec.padding}"
        )
    ph, pw = spec.padding
    sh, sw = spec.stride
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    out = np.zeros((cout, hout, wout))
    # Direct evaluation, vectorized over output positions per kernel offset.
    for a in range(k1):
        for b in range(k2):
            window = padded[:, a : a + sh * (hout - 1) + 1 : sh, b : b + sw * (wout - 1) + 1 : sw]
            out += np.tensordot(kernel[:, :, a, b], window, axes=(1, 0))
    if bias is not None:
        out += bias[:, None, None]
    return out


def mode_unfold(a, mode: int) -> np.ndarray:
    """Matricize ``a`` along ``mode``: rows index that mode, columns the rest.

    Columns are ordered row-major over the remaining modes, so that
    :func:`mode_fold` inverts the operation bit-exactly.
    """
    a = as_tensor(a)
    if not 0 <= mode < a.ndim:
        raise ShapeError(f"mode {mode} out of range for tensor of rank {a.ndim}")
    return np.ascontiguousarray(np.moveaxis(a, mode, 0).reshape(a.shape[mode], -1))


def mode_fold(m, mode: int, shape) -> np.ndarray:
    """Inverse of :func:`mode_unfold` for a tensor of the given ``shape``."""
    m = as_tensor(m)
    shape = tuple(int(s) for s in shape)
    if not 0 <= mode < len(shape):
        raise ShapeError(f"mode {mode} out of range for shape {shape}")
    rest = shape[:mode] + shape[mode + 1 :]
    if m.shape != (shape[mode], int(np.prod(rest, dtype=np.int64))):
        raise ShapeError(f"unfolded matrix {m.shape} does not match shape {shape} at mode {mode}")
    return np.ascontiguousarray(np.moveaxis(m.reshape((shape[mode],) + rest), 0, mode))


def mode_product(a, m, mode: int) -> np.ndarray:
    """Contract ``a`` with the matrix ``m`` (r, h_mode) along ``mode``.

    The extent of ``a`` at ``mode`` becomes ``r``; all other extents are
    unchanged.
    """
    a = as_tensor(a)
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"mode_product factor must be a matrix, got shape {m.shape}")
    if not 0 <= mode < a.ndim:
        raise ShapeError(f"mode {mode} out of range for tensor of rank {a.ndim}")
    if m.shape[1] != a.shape[mode]:
        raise ShapeError(
            f"factor has {m.shape[1]} columns but tensor extent at mode {mode} is {a.shape[mode]}"
        )
    return np.ascontiguousarray(np.moveaxis(np.tensordot(m, a, axes=(1, mode)), 0, mode))


# One-sided Jacobi SVD. Adequate and accurate for the small matrices this
# package produces (mode unfoldings of conv kernels, checkpoint deviation
# blocks); not meant for large dense problems.

_JACOBI_TOL = 1e-14
_JACOBI_MAX_SWEEPS = 60


def svd(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full SVD ``m = U @ diag(s) @ V.T`` via one-sided Jacobi rotations.

    Returns square orthogonal ``U`` (p, p) and ``V`` (q, q) and singular
    values ``s`` (min(p, q),), non-negative and non-increasing.
    """
    m = as_tensor(m)
    if m.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError("svd input contains non-finite entries")
    p, q = m.shape
    transposed = p < q
    a = m.T.copy() if transposed else m.copy()  # tall orientation, t >= k
    t, k = a.shape

    rot = np.eye(k)
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for i in range(k - 1):
            for j in range(i + 1, k):
                aii = a[:, i] @ a[:, i]
                ajj = a[:, j] @ a[:, j]
                aij = a[:, i] @ a[:, j]
                if aii == 0.0 or ajj == 0.0:
                    continue
                if abs(aij) <= _JACOBI_TOL * np.sqrt(aii * ajj):
                    continue
                rotated = True
                tau = (ajj - aii) / (2.0 * aij)
                tan = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    tan = 1.0
                cos = 1.0 / np.sqrt(1.0 + tan * tan)
                sin = cos * tan
                gi = cos * a[:, i] - sin * a[:, j]
                gj = sin * a[:, i] + cos * a[:, j]
                a[:, i], a[:, j] = gi, gj
                ri = cos * rot[:, i] - sin * rot[:, j]
                rj = sin * rot[:, i] + cos * rot[:, j]
                rot[:, i], rot[:, j] = ri, rj
        if not rotated:
            break

    norms = np.sqrt(np.sum(a * a, axis=0))
    order = np.argsort(-norms, kind="stable")
    s = norms[order]
    a = a[:, order]
    rot = rot[:, order]

    cutoff = max(t, k) * np.finfo(np.float64).eps * (s[0] if k else 0.0)
    u_tall = np.zeros((t, t))
    have = 0
    for c in range(k):
        if s[c] > cutoff and s[c] > 0.0:
            u_tall[:, c] = a[:, c] / s[c]
            have = c + 1
        else:
            break
    _complete_orthonormal(u_tall, have)

    if transposed:
        return rot, s, u_tall
    return u_tall, s, rot


def _complete_orthonormal(u: np.ndarray, have: int) -> None:
    """Fill columns ``have:`` of square ``u`` with an orthonormal completion.

    Greedily picks the identity candidate with the largest residual against
    the columns accumulated so far; that norm is bounded below by
    sqrt((t - col) / t), so the completion never stalls.
    """
    t = u.shape[0]
    if have == t:
        return
    basis = u[:, :have]
    resid = np.eye(t) - basis @ basis.T
    for col in range(have, t):
        norms = np.linalg.norm(resid, axis=0)
        pick = int(np.argmax(norms))
        vec = resid[:, pick] / norms[pick]
        vec -= u[:, :col] @ (u[:, :col].T @ vec)  # second pass against drift
        vec /= np.linalg.norm(vec)
        u[:, col] = vec
        resid -= np.outer(vec, vec @ resid)
