"""Kernel score-function estimators and the entropy-gradient subroutine.

All four estimators share one out-of-sample form. With training samples
``x_1..x_T`` and a query ``q``,

    score(q) = c * xi(q) + sum_m k(q, x_m) A[m]

where ``xi(q) = sum_m grad_{x_m} k(q, x_m)`` is the kernel divergence
feature and ``A`` is a ``T x K`` coefficient matrix. The estimators differ
only in how ``c`` and ``A`` are obtained:

* ``stein``: values at the samples are ``G = -(K + eta I)^{-1} b`` with
  ``b_i = xi(x_i)`` and ``eta = T * score_reg``. Rearranging gives the fixed
  point ``G = -(b + K G) / eta``; extending that identity to arbitrary
  queries (Nystrom style) yields ``c = -1/eta`` and ``A = -G/eta``. At a
  training point this reproduces ``G`` exactly.
* ``tikhonov``: the same normal equations produce ``G``, which is then
  carried to queries by kernel ridge regression, ``A = (K + eta I)^{-1} G``
  and ``c = 0``.
* ``nu_method``: accelerated Landweber (Brakhage nu-method, nu = 1) on the
  regression ``L g = -zeta`` with the normalised sample operator. Iterates
  stay in ``span{xi, k(., x_m)}``, so they are tracked as ``(c, A)``
  pairs. The iteration count acts as the regulariser:
  ``min(nu_iters, ceil(1 / sqrt(score_reg)))``.
* ``ssge``: truncated spectral expansion with Nystrom eigenfunctions;
  ``A = -U diag(1/lambda^2) U^T b`` over the retained eigenpairs, ``c = 0``.
  By default (``ssge_j="auto"``) eigenpairs of ``K / T`` at or above
  ``score_reg`` are kept; ``"all"`` keeps everything above
  ``1e-8 * lambda_max``; an integer keeps that many. ``mige_default`` is
  SSGE truncated at 99% of the cumulative eigenvalue mass.

Kernel widths come from the length-scale policy times ``bandwidth``
(default 2). At the bare median heuristic the 1-D Gaussian score estimate
is visibly wiggly (mean cosine about 0.87 against ``-z``); doubling the
width brings every estimator above 0.93 in 1-D and 0.99 in 2-D and 4-D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from . import numerics
from .errors import ConfigError, DegenerateBatchError
from .numerics import LengthScalePolicy

SCORE_KINDS = ("ssge", "stein", "tikhonov", "nu_method", "mige_default")
SSGE_REL_CUTOFF = 1e-8
MIGE_EIGEN_MASS = 0.99


@dataclass(frozen=True)
class ScoreConfig:
    kind: str = "stein"
    score_reg: float = 1e-3
    lengthscale: LengthScalePolicy = field(default_factory=LengthScalePolicy.median)
    ssge_j: int | str = "auto"
    nu_iters: int = 100
    bandwidth: float = 2.0  # multiplies the policy's length scale


    def __post_init__(self):
        kind = self.kind.replace("-", "_").lower()
        if kind in ("nu", "nu-method"):
            kind = "nu_method"
        if kind == "mige":
            kind = "mige_default"
        object.__setattr__(self, "kind", kind)
        if kind not in SCORE_KINDS:
            raise ConfigError(f"unknown score estimator {self.kind!r}")
        if not self.score_reg > 0:
            raise ConfigError("score_reg must be positive")
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if self.nu_iters < 1:
            raise ConfigError("nu_iters must be >= 1")
        if not (self.ssge_j in ("all", "auto") or (isinstance(self.ssge_j, int) and self.ssge_j >= 1)):
            raise ConfigError("ssge_j must be 'auto', 'all' or a positive count")
        if not isinstance(self.lengthscale, LengthScalePolicy):
            object.__setattr__(self, "lengthscale", LengthScalePolicy.parse(self.lengthscale))


@dataclass(frozen=True)
class FittedScore:
    samples: np.ndarray
    beta: np.ndarray
    coef: np.ndarray
    xi_weight: float
    config: ScoreConfig
    diameter: float

    @property
    def dim(self):
        return self.samples.shape[1]


def _query_beta(fitted, queries, d2):
    policy = fitted.config.lengthscale
    if policy.kind == "perplexity":
        T = fitted.samples.shape[0]
        target = min(policy.target, max(T - 1, 1) - 1e-3) if T > 2 else 1.0 + 1e-3
        target = max(target, 1.0 + 1e-3)
        return numerics.perplexity_betas(d2, target) / fitted.config.bandwidth**2
    # global scales are constant across samples
    return np.full(queries.shape[0], fitted.beta[0])


def _kernel_terms(queries, samples, beta_q, beta_s, d2=None):
    """Kernel values ``k(q, x_m)`` and divergence features ``xi(q)``."""
    if d2 is None:
        d2 = numerics.pairwise_sq_dists(queries, samples)
    kmat, rate = numerics.scaled_kernel(d2, beta_q, beta_s)
    w = kmat * rate
    xi = w.sum(axis=1)[:, None] * queries - w @ samples
    return kmat, xi


def _nu_method(kmat, b, iters, nu=1.0):
    T = kmat.shape[0]
    top = numerics.sym_eig_topj(kmat, 1)[0][0]
    kappa = max(top / T, 1e-12)

    def residual(c, a):
        return -1.0 / (T * kappa), -(c * b + kmat @ a) / (T * kappa)

    c_prev, a_prev = 0.0, np.zeros_like(b)
    rc, ra = residual(c_prev, a_prev)
    omega = (4 * nu + 2) / (4 * nu + 1)
    c_cur, a_cur = omega * rc, omega * ra
    for k in range(2, iters + 1):
        mu = ((k - 1) * (2 * k - 3) * (2 * k + 2 * nu - 1)) / (
            (k + 2 * nu - 1) * (2 * k + 4 * nu - 1) * (2 * k + 2 * nu - 3)
        )
        omega = (4 * (2 * k + 2 * nu - 1) * (k + nu - 1)) / (
            (k + 2 * nu - 1) * (2 * k + 4 * nu - 1)
        )
        rc, ra = residual(c_cur, a_cur)
        c_next = c_cur + mu * (c_cur - c_prev) + omega * rc
        a_next = a_cur + mu * (a_cur - a_prev) + omega * ra
        c_prev, a_prev = c_cur, a_cur
        c_cur, a_cur = c_next, a_next
    return c_cur, a_cur


def _ssge_coef(kmat, b, cfg):
    T = kmat.shape[0]
    if isinstance(cfg.ssge_j, int) and cfg.kind == "ssge":
        vals, vecs = numerics.sym_eig_topj(kmat, min(cfg.ssge_j, T))
    else:
        vals, vecs = numerics.sym_eig_topj(kmat, T)
        if cfg.kind == "mige_default":
            pos = np.clip(vals, 0.0, None)
            mass = np.cumsum(pos) / pos.sum()
            keep = int(np.searchsorted(mass, MIGE_EIGEN_MASS) + 1)
        elif cfg.ssge_j == "all":
            keep = int(np.sum(vals > SSGE_REL_CUTOFF * vals[0]))
        else:
            keep = max(1, int(np.sum(vals / T >= cfg.score_reg)))
        vals, vecs = vals[:keep], vecs[:, :keep]
    keep = vals > 0
    vals, vecs = vals[keep], vecs[:, keep]
    return -vecs @ ((vecs.T @ b) / (vals**2)[:, None])


def fit_score(samples, cfg=None):
    """Fit a score estimator of ``grad log q`` to ``samples``."""
    cfg = cfg or ScoreConfig()
    samples = numerics.as_mat(samples, "samples")
    T = samples.shape[0]
    if T < 2:
        raise ValueError("score estimation needs at least 2 samples")
    dists = pdist(samples)
    if not np.any(dists > 0):
        raise DegenerateBatchError()
    beta = numerics.inverse_scales(samples, cfg.lengthscale) / cfg.bandwidth**2
    d2 = numerics.pairwise_sq_dists(samples, samples)
    kmat, b = _kernel_terms(samples, samples, beta, beta, d2)

    eta = T * cfg.score_reg
    if cfg.kind == "stein":
        G = -numerics.solve_ridge(kmat, eta, b)
        coef, c = -G / eta, -1.0 / eta
    elif cfg.kind == "tikhonov":
        G = -numerics.solve_ridge(kmat, eta, b)
        coef, c = numerics.solve_ridge(kmat, eta, G), 0.0
    elif cfg.kind == "nu_method":
        iters = min(cfg.nu_iters, math.ceil(1.0 / math.sqrt(cfg.score_reg)))
        c, coef = _nu_method(kmat, b, iters)
    else:
        coef, c = _ssge_coef(kmat, b, cfg), 0.0
    return FittedScore(
        samples=samples,
        beta=beta,
        coef=coef,
        xi_weight=float(c),
        config=cfg,
        diameter=float(dists.max()),
    )


def score_at(fitted, queries, return_count=False):
    """Evaluate a fitted estimator at ``queries``.

    With ``return_count`` the number of queries lying farther from every
    training sample than the training set's diameter is returned as well;
    such extrapolated values are finite but carry little information.
    """
    queries = numerics.as_mat(queries, "queries")
    if queries.shape[1] != fitted.dim:
        raise ValueError(f"query dimension {queries.shape[1]} != fitted dimension {fitted.dim}")
    d2 = numerics.pairwise_sq_dists(queries, fitted.samples)
    beta_q = _query_beta(fitted, queries, d2)
    kmat, xi = _kernel_terms(queries, fitted.samples, beta_q, fitted.beta, d2)
    out = fitted.xi_weight * xi + kmat @ fitted.coef
    if not return_count:
        return out
    far = int(np.sum(np.sqrt(d2.min(axis=1)) > fitted.diameter))
    return out, far


def entropy_grad_cotangents(samples, cfg=None, fitted=None):
    """Per-sample cotangents ``-(1/T) score(z_i)``.

    Back-propagating these through the encoder as the upstream gradient of
    ``z_i`` gives an estimate of the gradient of the differential entropy
    ``H(z)`` with respect to the encoder parameters.
    """
    samples = numerics.as_mat(samples, "samples")
    if fitted is None:
        fitted = fit_score(samples, cfg)
    return -score_at(fitted, samples) / samples.shape[0]
