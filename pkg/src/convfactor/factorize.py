"""Turning dense convolution weights into factorized ones.

* :func:`hooi_tucker2` - Tucker-2 across the channel modes of a ``(K, K, C, N)``
  kernel by higher-order orthogonal iteration; spatial modes are left whole.
* :func:`evbmf_rank` - rank of a matrix from the analytic empirical VBMF
  solution (Nakajima et al., 2013) with the noise variance estimated by
  minimizing the free energy.
* :func:`merge_depthsep` / :func:`merged_kernel` - contraction of a factorized
  layer back into one dense kernel (valid when the layer has no intermediate
  activation).
* :func:`select_bottleneck_rank` / :func:`split_pointwise` - bottleneck width
  and factors for the TDW layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .cost import tdw_compresses
from .errors import InvalidArgument, UnsupportedConfiguration
from .layers import LayerSpec, check_weights
from .tensor import DTYPE, as_tensor, mode_multiply, svd, truncated_svd, unfold

HOOI_TOL = 1e-6
HOOI_MAX_ITER = 100

C_MODE, N_MODE = 2, 3


@dataclass
class TuckerFactors:
    proj_in: np.ndarray  # (C, R1), orthonormal columns
    core: np.ndarray  # (K, K, R1, R2)
    proj_out: np.ndarray  # (R2, N), orthonormal rows
    reconstruction_error: float
    history: list[float] = field(default_factory=list)
    ranks_estimated: bool = False

    @property
    def ranks(self) -> tuple[int, int]:
        return self.proj_in.shape[1], self.proj_out.shape[0]

    def weights(self) -> dict[str, np.ndarray]:
        return {"proj_in": self.proj_in, "core": self.core, "proj_out": self.proj_out}

    def reconstruct(self) -> np.ndarray:
        full = mode_multiply(self.core, self.proj_in, C_MODE, dtype=np.float64)
        return mode_multiply(full, self.proj_out.T, N_MODE, dtype=DTYPE)


def _leading(m: np.ndarray, r: int) -> np.ndarray:
    return truncated_svd(m, r).u


def _tucker2_error(x, u1, u2, norm_x):
    core = mode_multiply(mode_multiply(x, u1.T, C_MODE, np.float64), u2.T, N_MODE, np.float64)
    approx = mode_multiply(mode_multiply(core, u1, C_MODE, np.float64), u2, N_MODE, np.float64)
    return core, float(np.linalg.norm(x - approx) / norm_x)


def hooi_tucker2(kernel, r1: int, r2: int, tol: float = HOOI_TOL,
                 max_iter: int = HOOI_MAX_ITER) -> TuckerFactors:
    """Tucker-2 decomposition of a conv kernel over its channel modes.

    Factors start from the truncated SVDs of the channel unfoldings and are
    then refined alternately: each factor is the leading subspace of the
    kernel projected onto the other factor. Iteration stops once the core's
    Frobenius norm changes by less than ``tol`` (relative) or after
    ``max_iter`` rounds. ``history`` holds the relative reconstruction error
    of the starting point and of every round.
    """
    x = as_tensor(kernel, ndim=(4,), name="kernel").astype(np.float64)
    c, n = x.shape[C_MODE], x.shape[N_MODE]
    if not (1 <= r1 <= c and 1 <= r2 <= n):
        raise InvalidArgument(f"ranks ({r1}, {r2}) outside [1, {c}] x [1, {n}]")

    u1 = _leading(unfold(x, C_MODE), r1)
    u2 = _leading(unfold(x, N_MODE), r2)
    norm_x = float(np.linalg.norm(x))
    if norm_x == 0.0:
        core = np.zeros(x.shape[:2] + (r1, r2))
        return TuckerFactors(u1.astype(DTYPE), core.astype(DTYPE), u2.T.astype(DTYPE), 0.0, [0.0])

    core, err = _tucker2_error(x, u1, u2, norm_x)
    history = [err]
    prev = float(np.linalg.norm(core))
    for _ in range(max_iter):
        u1 = _leading(unfold(mode_multiply(x, u2.T, N_MODE, np.float64), C_MODE), r1)
        u2 = _leading(unfold(mode_multiply(x, u1.T, C_MODE, np.float64), N_MODE), r2)
        core, err = _tucker2_error(x, u1, u2, norm_x)
        history.append(err)
        g = float(np.linalg.norm(core))
        if abs(g - prev) <= tol * prev:
            break
        prev = g
    return TuckerFactors(u1.astype(DTYPE), core.astype(DTYPE), u2.T.astype(DTYPE), err, history)


# -- EVBMF -------------------------------------------------------------------

class RankEstimate(NamedTuple):
    rank: int
    noise_variance: float
    retained_singular_values: list[float]


_TAU_FACTOR = 2.5129  # tau_bar / sqrt(L/M) at the VB detection threshold


def _free_energy(sigma2, L, M, s, residual, xubar):
    """Empirical-VB free energy (up to constants) as a function of the noise variance."""
    alpha = L / M
    x = s ** 2 / (M * sigma2)
    big = x > xubar
    z1, z2 = x[big], x[~big]
    tau = 0.5 * (z1 - (1 + alpha) + np.sqrt((z1 - (1 + alpha)) ** 2 - 4 * alpha))
    obj = (np.sum(z2 - np.log(z2)) + np.sum(z1 - tau)
           + np.sum(np.log((tau + 1) / z1)) + alpha * np.sum(np.log(tau / alpha + 1)))
    return obj + residual / (M * sigma2) + (L - len(s)) * math.log(sigma2)


def _golden_section(f, lo, hi, tol):
    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2


def evbmf_rank(m, grid: int = 64, tol: float = 1e-8) -> RankEstimate:
    """Effective rank of ``m`` from the global analytic EVBMF solution.

    The noise variance is found by a coarse log-spaced scan of the admissible
    interval followed by golden-section refinement (in log-variance, to
    ``tol``) around the best grid point. Singular values above the analytic
    threshold ``sqrt(M * sigma2 * (1 + tau) * (1 + alpha / tau))`` are kept.

    Singular values below ``s[0] * M * eps`` (``eps`` of the input dtype) are
    treated as rounding residue. An all-zero matrix yields rank 0 with
    ``noise_variance`` 0.
    """
    raw = np.asarray(m)
    eps = np.finfo(raw.dtype if raw.dtype.kind == "f" else np.float64).eps
    y = raw.astype(np.float64)
    if y.ndim != 2 or min(y.shape) < 1:
        raise InvalidArgument(f"evbmf_rank expects a non-empty matrix, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InvalidArgument("evbmf_rank input contains non-finite values")
    if y.shape[0] > y.shape[1]:
        y = y.T
    L, M = y.shape
    s = svd(y, dtype=np.float64).s
    if s[0] == 0.0:
        return RankEstimate(0, 0.0, [])
    # values below the input's precision are rounding residue; clamp them to one floor
    s = np.maximum(s, s[0] * M * eps)

    alpha = L / M
    tauubar = _TAU_FACTOR * math.sqrt(alpha)
    xubar = (1 + tauubar) * (1 + alpha / tauubar)
    residual = 0.0  # full-rank decomposition: no discarded energy

    ub_index = int(min(math.ceil(L / (1 + alpha)) - 1, L)) - 1
    upper = (np.sum(s ** 2) + residual) / (L * M)
    lower = max(s[ub_index + 1] ** 2 / (M * xubar), np.mean(s[ub_index + 1:] ** 2) / M)
    lower = min(lower, upper)

    def objective(log_s2):
        return _free_energy(math.exp(log_s2), L, M, s, residual, xubar)

    lo, hi = math.log(lower), math.log(upper)
    if hi - lo <= tol:
        log_s2 = lo
    else:
        pts = np.linspace(lo, hi, grid)
        vals = [objective(p) for p in pts]
        best = int(np.argmin(vals))
        log_s2 = _golden_section(objective, pts[max(best - 1, 0)], pts[min(best + 1, grid - 1)], tol)
    sigma2 = math.exp(log_s2)

    threshold = math.sqrt(M * sigma2 * (1 + tauubar) * (1 + alpha / tauubar))
    rank = int(np.sum(s > threshold))
    return RankEstimate(rank, sigma2, [float(v) for v in s[:rank]])


# -- layer-level decomposition -------------------------------------------------

def estimate_tucker_ranks(kernel) -> tuple[RankEstimate, RankEstimate]:
    """EVBMF on the input-channel and output-channel unfoldings."""
    x = as_tensor(kernel, ndim=(4,), name="kernel")
    return evbmf_rank(unfold(x, C_MODE)), evbmf_rank(unfold(x, N_MODE))


def decompose_layer(kernel, ranks: tuple[int, int] | None = None) -> TuckerFactors:
    """Tucker-2 factors for a standard kernel; ranks from EVBMF when not given."""
    estimated = ranks is None
    if estimated:
        e1, e2 = estimate_tucker_ranks(kernel)
        ranks = (max(e1.rank, 1), max(e2.rank, 1))
    factors = hooi_tucker2(kernel, *ranks)
    factors.ranks_estimated = estimated
    return factors


def merge_depthsep(depthwise, pointwise, t: int = 1) -> np.ndarray:
    """Contract depthwise ``(K, K, C)`` and pointwise ``(C, N)`` into ``(K, K, C, N)``."""
    if t != 1:
        raise UnsupportedConfiguration("merge_depthsep only handles width multiplier 1")
    d = as_tensor(depthwise, ndim=(3,), name="depthwise").astype(np.float64)
    p = as_tensor(pointwise, ndim=(2,), name="pointwise").astype(np.float64)
    if d.shape[2] != p.shape[0]:
        raise InvalidArgument(f"depthwise has {d.shape[2]} channels, pointwise expects {p.shape[0]}")
    return (d[:, :, :, None] * p[None, None, :, :]).astype(DTYPE)


def _expand_merge(depthwise, pointwise, c, t):
    k = depthwise.shape[0]
    d = depthwise.reshape(k, k, c, t)
    p = pointwise.reshape(c, t, -1)
    return np.einsum("abcj,cjn->abcn", d, p)


def merged_kernel(spec: LayerSpec, weights) -> np.ndarray:
    """Dense ``(K, K, C, N)`` kernel equivalent to an activation-free layer."""
    check_weights(spec, weights)
    w = {role: np.asarray(v, dtype=np.float64) for role, v in weights.items()}
    if spec.kind == "standard":
        full = w["kernel"]
    elif spec.kind == "depthsep":
        full = _expand_merge(w["depthwise"], w["pointwise"], spec.c, spec.t)
    elif spec.kind == "tdw":
        full = _expand_merge(w["depthwise"], w["bottleneck_in"] @ w["bottleneck_out"], spec.c, spec.t)
    elif spec.kind == "tucker2":
        full = np.einsum("cr,abrs,sn->abcn", w["proj_in"], w["core"], w["proj_out"])
    else:
        a, n = spec.alpha, spec.n
        full = np.zeros((spec.k, spec.k, spec.c, n))
        p = w["pointwise"]
        if a > 0:
            full[:, :, :a] = np.einsum("abim,mn->abin", w["conv"], p[:n])
        if a < spec.c:
            full[:, :, a:] = w["depthwise"][:, :, :, None] * p[None, None, n:]
    return full.astype(DTYPE)


class BottleneckRank(NamedTuple):
    rank: int
    compresses: bool
    rank_in: int
    rank_out: int


def select_bottleneck_rank(pointwise) -> BottleneckRank:
    """Bottleneck width ``max(R1, R2)`` from EVBMF on both channel modes, at least 1."""
    p = as_tensor(pointwise, ndim=(2,), name="pointwise")
    r_in = evbmf_rank(p).rank
    r_out = evbmf_rank(p.T).rank
    rank = max(r_in, r_out, 1)
    return BottleneckRank(rank, tdw_compresses(p.shape[0], p.shape[1], rank), r_in, r_out)


def split_pointwise(pointwise, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-``rank`` factors ``(C, R) @ (R, N)`` of a pointwise kernel by truncated SVD."""
    p = as_tensor(pointwise, ndim=(2,), name="pointwise")
    if not 1 <= rank <= max(p.shape):
        raise InvalidArgument(f"bottleneck rank {rank} outside [1, {max(p.shape)}]")
    u, s, v = svd(p, dtype=np.float64)
    r = min(rank, len(s))
    root = np.sqrt(s[:r])
    b_in = np.zeros((p.shape[0], rank))
    b_out = np.zeros((rank, p.shape[1]))
    b_in[:, :r] = u[:, :r] * root
    b_out[:r] = (v[:, :r] * root).T
    return b_in.astype(DTYPE), b_out.astype(DTYPE)
