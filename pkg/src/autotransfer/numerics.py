"""Dense linear-algebra and kernel utilities.

Every kernel in the package has the form

    k(a, b) = exp(-||a - b||^2 * (beta_a + beta_b) / 2)

where ``beta`` is a per-point inverse length scale. A global length scale
``sigma`` corresponds to the constant ``beta = 1 / (2 sigma^2)``, which gives
the usual RBF kernel ``exp(-||a - b||^2 / (2 sigma^2))``. The perplexity
policy assigns each point its own ``beta`` by binary search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, DegenerateBatchError

PERPLEXITY_TOL = 1e-5
PERPLEXITY_MAX_STEPS = 100
PERPLEXITY_MAX_BRACKET = 50


def as_mat(a, name="matrix"):
    """Return ``a`` as a finite float64 2-D array (1-D input becomes a column)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class LengthScalePolicy:
    """How a kernel length scale is chosen for a batch.

    ``fixed`` uses ``sigma`` as given, ``median`` uses the median pairwise
    distance of the batch, ``perplexity`` tunes a per-point scale to a target
    neighbourhood perplexity (t-SNE style).
    """

    kind: str = "median"
    sigma: float | None = None
    target: float | None = None

    def __post_init__(self):
        if self.kind == "fixed":
            if self.sigma is None or not self.sigma > 0:
                raise ConfigError("fixed length scale needs sigma > 0")
        elif self.kind == "perplexity":
            if self.target is None or not self.target > 1:
                raise ConfigError("perplexity target must be > 1")
        elif self.kind != "median":
            raise ConfigError(f"unknown length-scale policy {self.kind!r}")

    @classmethod
    def fixed(cls, sigma):
        return cls("fixed", sigma=float(sigma))

    @classmethod
    def median(cls):
        return cls("median")

    @classmethod
    def perplexity(cls, target=5.0):
        return cls("perplexity", target=float(target))

    @classmethod
    def parse(cls, text):
        """Parse ``"median"``, ``"fixed:1.5"`` or ``"perplexity:10"``."""
        if isinstance(text, cls):
            return text
        name, _, arg = str(text).partition(":")
        name = name.strip().lower()
        if name in ("tsne", "t-sne"):
            name = "perplexity"
        if name == "median":
            return cls.median()
        if name == "fixed":
            return cls.fixed(float(arg))
        if name == "perplexity":
            return cls.perplexity(float(arg) if arg else 5.0)
        raise ConfigError(f"unknown length-scale policy {text!r}")

    def __str__(self):
        if self.kind == "fixed":
            return f"fixed:{self.sigma:g}"
        if self.kind == "perplexity":
            return f"perplexity:{self.target:g}"
        return "median"


def pairwise_sq_dists(A, B):
    A = as_mat(A, "A")
    B = as_mat(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return cdist(A, B, "sqeuclidean")


def median_heuristic(points):
    """Median of the T(T-1)/2 distinct-pair Euclidean distances."""
    points = as_mat(points, "points")
    if points.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 points")
    dists = pdist(points, "euclidean")
    if not np.any(dists > 0):
        raise DegenerateBatchError()
    return float(np.median(dists))


def rbf_kernel(d2, sigma):
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d2 = np.asarray(d2, dtype=np.float64)
    return np.exp(-d2 / (2.0 * sigma * sigma))


def _row_perplexity(d, beta):
    # d: distances to neighbours (positive); shift by the minimum for stability
    shifted = d - d.min()
    w = np.exp(-beta * shifted)
    z = w.sum()
    p = w / z
    entropy = math.log(z) + beta * float(p @ shifted)
    return math.exp(entropy)


def perplexity_beta(d, target, tol=PERPLEXITY_TOL, max_steps=PERPLEXITY_MAX_STEPS):
    """Binary-search the inverse scale for one row of squared distances.

    Returns ``(beta, steps)``. Zero distances (the point itself or exact
    duplicates) are not neighbours. Perplexity decreases in ``beta``; the
    search starts at 1, brackets by doubling or halving, then bisects in
    log space.
    """
    d = np.asarray(d, dtype=np.float64)
    d = d[d > 0]
    if d.size == 0:
        raise DegenerateBatchError()
    beta = 1.0
    steps = 1
    perp = _row_perplexity(d, beta)
    if abs(perp - target) <= tol:
        return beta, steps

    lo, hi = None, None  # lo: perplexity too high, hi: too low
    if perp > target:
        lo = beta
    else:
        hi = beta
    for _ in range(PERPLEXITY_MAX_BRACKET):
        if lo is not None and hi is not None or steps >= max_steps:
            break
        beta = beta * 2.0 if hi is None else beta / 2.0
        steps += 1
        perp = _row_perplexity(d, beta)
        if abs(perp - target) <= tol:
            return beta, steps
        if perp > target:
            lo = beta
        else:
            hi = beta
    if lo is None or hi is None:
        return beta, steps

    while steps < max_steps:
        beta = math.sqrt(lo * hi)
        steps += 1
        perp = _row_perplexity(d, beta)
        if abs(perp - target) <= tol:
            break
        if perp > target:
            lo = beta
        else:
            hi = beta
    return beta, steps


def perplexity_betas(d2, target):
    """Per-row inverse scales for a matrix of squared distances."""
    return np.array([perplexity_beta(row, target)[0] for row in np.asarray(d2)])


def perplexity_kernel(points, target):
    """Per-point scales and the symmetrised kernel ``exp(-d_ij (b_i + b_j) / 2)``."""
    points = as_mat(points, "points")
    T = points.shape[0]
    if T < 2:
        raise ValueError("perplexity kernel needs at least 2 points")
    if not 1 < target < T:
        raise ValueError(f"perplexity target must lie in (1, {T}), got {target}")
    d2 = pairwise_sq_dists(points, points)
    beta = perplexity_betas(d2, target)
    log_directed = -beta[:, None] * d2
    k_sym = np.exp((log_directed + log_directed.T) / 2.0)
    return beta, k_sym


def inverse_scales(points, policy):
    """Per-point inverse length scales of ``points`` under ``policy``."""
    points = as_mat(points, "points")
    T = points.shape[0]
    if policy.kind == "fixed":
        return np.full(T, 1.0 / (2.0 * policy.sigma**2))
    if policy.kind == "median":
        sigma = median_heuristic(points)
        return np.full(T, 1.0 / (2.0 * sigma**2))
    d2 = pairwise_sq_dists(points, points)
    if not np.any(d2 > 0):
        raise DegenerateBatchError()
    # clamp into the reachable range so small subsets still get a scale
    target = min(policy.target, max(T - 1, 1) - 1e-3) if T > 2 else 1.0 + 1e-3
    target = max(target, 1.0 + 1e-3)
    return perplexity_betas(d2, target)


def scaled_kernel(d2, beta_rows, beta_cols):
    """``exp(-d2 * (b_i + b_j) / 2)`` and the pairwise rate ``b_i + b_j``."""
    rate = beta_rows[:, None] + beta_cols[None, :]
    return np.exp(-d2 * rate / 2.0), rate


def quantile(values, q):
    """Linear-interpolation quantile between order statistics (h = q (n - 1))."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("quantile of empty input")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    h = q * (v.size - 1)
    lo = int(math.floor(h))
    hi = int(math.ceil(h))
    return float(v[lo] + (h - lo) * (v[hi] - v[lo]))


def solve_ridge(K, eta, B, sym_tol=1e-8):
    """Solve ``(K + eta I) X = B`` for symmetric PSD ``K``."""
    K = as_mat(K, "K")
    B = as_mat(B, "B")
    if K.shape[0] != K.shape[1]:
        raise ValueError("K must be square")
    if B.shape[0] != K.shape[0]:
        raise ValueError("B rows must match K")
    if not eta > 0:
        raise ValueError("eta must be positive")
    scale = max(1.0, float(np.abs(K).max()))
    if np.abs(K - K.T).max() > sym_tol * scale:
        raise ValueError("K is not symmetric")
    A = K + eta * np.eye(K.shape[0])
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, B, check_finite=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.solve(A, B, assume_a="sym", check_finite=False)


def sym_eig_topj(K, J):
    """Top-``J`` eigenpairs of a symmetric matrix, eigenvalues descending."""
    K = as_mat(K, "K")
    T = K.shape[0]
    if K.shape[1] != T:
        raise ValueError("K must be square")
    if not 1 <= J <= T:
        raise ValueError(f"J must lie in [1, {T}], got {J}")
    vals, vecs = scipy.linalg.eigh(K, subset_by_index=[T - J, T - 1], check_finite=False)
    return vals[::-1].copy(), vecs[:, ::-1].copy()
