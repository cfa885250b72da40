"""Dense tensor helpers: matricization, mode products and a Jacobi SVD.

Tensors are plain ``numpy`` arrays of rank 1-4 stored as float32. Kernels use
the ``(K, K, C, N)`` layout and feature maps ``(H, W, C)``. Arithmetic inside
the mode product and the SVD runs in float64; results are cast back to the
requested dtype (float32 unless stated otherwise).

Unfolding convention
--------------------
``unfold(t, mode)`` moves ``mode`` to the rows and orders the remaining modes
cyclically starting at ``mode + 1``: for a rank-4 tensor and ``mode=1`` the
columns enumerate ``(i2, i3, i0)`` in row-major order, ``i0`` fastest.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidArgument

DTYPE = np.float32

SVD_TOL = 1e-10
SVD_MAX_SWEEPS = 60


def as_tensor(data, *, ndim: Sequence[int] | None = None, name: str = "tensor") -> np.ndarray:
    """Return ``data`` as a finite float32 array, validating rank if asked."""
    arr = np.asarray(data, dtype=DTYPE)
    if not 1 <= arr.ndim <= 4:
        raise InvalidArgument(f"{name}: rank {arr.ndim} outside 1-4")
    if ndim is not None and arr.ndim not in ndim:
        raise InvalidArgument(f"{name}: expected rank in {tuple(ndim)}, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name}: contains non-finite values")
    return arr


def _cyclic_axes(mode: int, ndim: int) -> list[int]:
    return [mode] + list(range(mode + 1, ndim)) + list(range(mode))


def unfold(t: np.ndarray, mode: int) -> np.ndarray:
    """Mode-``mode`` matricization, ``dims[mode]`` rows by the rest."""
    t = np.asarray(t)
    if not 0 <= mode < t.ndim:
        raise InvalidArgument(f"mode {mode} out of range for rank {t.ndim}")
    return np.transpose(t, _cyclic_axes(mode, t.ndim)).reshape(t.shape[mode], -1)


def fold(m: np.ndarray, mode: int, dims: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`; ``fold(unfold(t, k), k, t.shape)`` is ``t``."""
    m = np.asarray(m)
    dims = tuple(int(d) for d in dims)
    if not 0 <= mode < len(dims):
        raise InvalidArgument(f"mode {mode} out of range for rank {len(dims)}")
    if m.ndim != 2 or m.shape[0] != dims[mode] or m.size != int(np.prod(dims)):
        raise InvalidArgument(f"matrix of shape {m.shape} cannot fold into {dims} along mode {mode}")
    axes = _cyclic_axes(mode, len(dims))
    permuted = m.reshape([dims[a] for a in axes])
    return np.transpose(permuted, np.argsort(axes))


def mode_multiply(t: np.ndarray, m: np.ndarray, mode: int, dtype=DTYPE) -> np.ndarray:
    """Mode-n product ``t x_mode m``: dimension ``mode`` becomes ``m.shape[0]``."""
    t = np.asarray(t)
    m = np.asarray(m)
    if not 0 <= mode < t.ndim:
        raise InvalidArgument(f"mode {mode} out of range for rank {t.ndim}")
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise InvalidArgument(
            f"cannot multiply mode {mode} of size {t.shape[mode]} by matrix {m.shape}")
    out = np.tensordot(m.astype(np.float64), t.astype(np.float64), axes=(1, mode))
    return np.moveaxis(out, 0, mode).astype(dtype, copy=False)


class SVDResult(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint column pairings covering every pair once (circle method, n even)."""
    idx = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(idx[:half])
        q = np.array(idx[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of ``a`` in place; returns (a, v) with a_in @ v = a."""
    n = a.shape[1]
    if n % 2:
        a = np.hstack([a, np.zeros((a.shape[0], 1))])
    size = a.shape[1]
    v = np.eye(size)
    if size < 2:
        return a[:, :n], v[:n, :n]
    rounds = _round_robin(size)
    for _ in range(max_sweeps):
        worst = 0.0
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            active = (scale > 0) & (np.abs(gamma) > tol * scale)
            if not active.any():
                continue
            worst = max(worst, float(np.max(np.abs(gamma[active]) / scale[active])))
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if worst <= tol:
            break
    return a[:, :n], v[:n, :n]


def _complete_basis(u: np.ndarray, k: int) -> np.ndarray:
    """Replace columns ``k:`` of ``u`` with an orthonormal complement of ``u[:, :k]``."""
    m, width = u.shape
    q, _ = np.linalg.qr(np.hstack([u[:, :k], np.eye(m)]))
    u = u.copy()
    u[:, k:] = q[:, k:width]
    return u


def svd(m: np.ndarray, dtype=DTYPE, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> SVDResult:
    """Thin SVD ``m = u @ diag(s) @ v.T`` by one-sided Jacobi rotations.

    Tall inputs are reduced with a QR factorization first so the rotations
    act on a square ``min(rows, cols)`` block. Singular values come back
    non-negative and sorted in decreasing order; ``u`` and ``v`` always have
    orthonormal columns, including for rank-deficient input.
    """
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgument(f"svd expects a matrix, got rank {a.ndim}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgument("svd input contains non-finite values")
    if a.shape[0] < a.shape[1]:
        u, s, v = svd(a.T, dtype=np.float64, tol=tol, max_sweeps=max_sweeps)
        return SVDResult(v.astype(dtype), s.astype(dtype), u.astype(dtype))

    q, r = np.linalg.qr(a)
    b, v = _jacobi(r.copy(), tol, max_sweeps)
    s = np.linalg.norm(b, axis=0)
    order = np.argsort(-s, kind="stable")
    s, b, v = s[order], b[:, order], v[:, order]

    # columns below this are rounding residue, not signal
    cutoff = (s[0] if s.size else 0.0) * max(a.shape) * np.finfo(np.float64).eps
    k = int(np.sum(s > cutoff))
    ur = np.zeros_like(b)
    ur[:, :k] = b[:, :k] / s[:k]
    if k < ur.shape[1]:
        s[k:] = np.where(s[k:] > 0, s[k:], 0.0)
        ur = _complete_basis(ur, k)
    u = q @ ur
    return SVDResult(u.astype(dtype), s.astype(dtype), v.astype(dtype))


def truncated_svd(m: np.ndarray, rank: int, dtype=np.float64) -> SVDResult:
    u, s, v = svd(m, dtype=dtype)
    return SVDResult(u[:, :rank], s[:rank], v[:, :rank])
