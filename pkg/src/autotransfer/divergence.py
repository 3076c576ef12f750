"""Unbiased MMD estimates and the MMD / pairwise-MMD censoring penalties.

Penalties are returned together with their gradient with respect to the
latent batch ``z`` so the trainer can push them through the encoder. The
kernel length scale is computed once per call from the full batch (per
latent half in complementary mode) and treated as a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ConfigError, NumericalError
from .numerics import LengthScalePolicy

MODES = ("marginal", "conditional", "complementary")


class NoComputableTermsError(NumericalError):
    pass


@dataclass(frozen=True)
class PairPolicy:
    kind: str = "bernoulli"
    b: float = 0.5
    d: int = 4

    def __post_init__(self):
        if self.kind == "bernoulli":
            if not 0.0 <= self.b <= 1.0:
                raise ConfigError("bernoulli fraction must lie in [0, 1]")
        elif self.kind == "clique":
            if self.d < 1:
                raise ConfigError("clique size must be >= 1")
        else:
            raise ConfigError(f"unknown pair policy {self.kind!r}")

    @classmethod
    def parse(cls, text):
        """Parse ``"bernoulli:0.5"`` or ``"clique:3"``."""
        if isinstance(text, cls):
            return text
        name, _, arg = str(text).partition(":")
        if name == "bernoulli":
            return cls("bernoulli", b=float(arg) if arg else 0.5)
        if name == "clique":
            return cls("clique", d=int(arg) if arg else 4)
        raise ConfigError(f"unknown pair policy {text!r}")

    def __str__(self):
        return f"bernoulli:{self.b:g}" if self.kind == "bernoulli" else f"clique:{self.d}"


@dataclass
class MmdPenaltyResult:
    """Penalty value(s), gradient(s) with respect to ``z``, and term counts.

    In complementary mode ``penalty`` and ``grad`` are ``(first, second)``
    pairs for the two latent halves; each gradient has the full width of
    ``z`` with zeros outside its half.
    """

    penalty: float | tuple
    grad: np.ndarray | tuple
    terms_computed: int
    terms_skipped: int = 0


def mmd_sq_unbiased(X, Y, sigma):
    """Unbiased squared MMD between samples ``X`` and ``Y`` under an RBF kernel."""
    X = numerics.as_mat(X, "X")
    Y = numerics.as_mat(Y, "Y")
    n, u = X.shape[0], Y.shape[0]
    if n < 2 or u < 2:
        raise ValueError("subset too small")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    kxx = numerics.rbf_kernel(numerics.pairwise_sq_dists(X, X), sigma)
    kyy = numerics.rbf_kernel(numerics.pairwise_sq_dists(Y, Y), sigma)
    kxy = numerics.rbf_kernel(numerics.pairwise_sq_dists(X, Y), sigma)
    term1 = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    term2 = (kyy.sum() - np.trace(kyy)) / (u * (u - 1))
    term3 = 2.0 * kxy.sum() / (n * u)
    return float(term1 + term2 - term3)


class _BatchKernel:
    """Kernel over one latent batch, accumulating weighted MMD terms.

    Each MMD term is ``sum_ij W_ij k(z_i, z_j)`` for a weight matrix built
    from subset indicators, so the gradient of the whole penalty follows
    from the accumulated weights in one pass.
    """

    def __init__(self, z, policy):
        self.z = z
        beta = numerics.inverse_scales(z, policy)
        d2 = numerics.pairwise_sq_dists(z, z)
        self.k, self.rate = numerics.scaled_kernel(d2, beta, beta)
        self.weights = np.zeros_like(self.k)

    def mmd(self, ix, iy, scale=1.0):
        n, u = ix.size, iy.size
        N = self.z.shape[0]
        ux = np.bincount(ix, minlength=N).astype(np.float64)
        uy = np.bincount(iy, minlength=N).astype(np.float64)
        w = (np.outer(ux, ux) - np.diag(ux)) / (n * (n - 1))
        w += (np.outer(uy, uy) - np.diag(uy)) / (u * (u - 1))
        w -= 2.0 * np.outer(ux, uy) / (n * u)
        self.weights += scale * w
        return float(np.sum(w * self.k))

    def grad(self):
        s = (self.weights + self.weights.T) * self.k * self.rate
        return -(s.sum(axis=1)[:, None] * self.z - s @ self.z)


def split_halves(K):
    """Column slices of the two latent halves (first half takes ceil(K/2))."""
    if K < 2:
        raise ConfigError("complementary censoring needs a latent width >= 2")
    cut = math.ceil(K / 2)
    return slice(0, cut), slice(cut, K)


def _embed(grad, cols, K):
    full = np.zeros((grad.shape[0], K))
    full[:, cols] = grad
    return full


def _marginal_terms(bk, s):
    N = bk.z.shape[0]
    everyone = np.arange(N)
    total, done, skipped = 0.0, 0, 0
    for m in np.unique(s):
        idx = np.flatnonzero(s == m)
        if idx.size < 2:
            skipped += 1
            continue
        total += bk.mmd(everyone, idx)
        done += 1
    return total, done, skipped


def _conditional_terms(bk, s, y):
    total, done, skipped = 0.0, 0, 0
    for c in np.unique(y):
        in_class = np.flatnonzero(y == c)
        for m in np.unique(s[in_class]):
            idx = in_class[s[in_class] == m]
            if in_class.size < 2 or idx.size < 2:
                skipped += 1
                continue
            total += bk.mmd(in_class, idx)
            done += 1
    return total, done, skipped


def _pair_terms(bk, s, y, pairs, conditional, average):
    groups = [np.arange(s.size)] if not conditional else [np.flatnonzero(y == c) for c in np.unique(y)]
    plan = []
    for members in groups:
        for r, t in pairs:
            ir = members[s[members] == r]
            it = members[s[members] == t]
            plan.append((ir, it))
    usable = [(ir, it) for ir, it in plan if ir.size >= 2 and it.size >= 2]
    scale = 1.0 / len(usable) if (average and usable) else 1.0
    total = 0.0
    for ir, it in usable:
        total += bk.mmd(ir, it, scale) * scale
    return total, len(usable), len(plan) - len(usable)


def _check(z, s, y, mode):
    z = numerics.as_mat(z, "z")
    s = np.asarray(s)
    if mode not in MODES:
        raise ConfigError(f"unknown censoring mode {mode!r}")
    if z.shape[0] < 2:
        raise ValueError("need at least 2 latent samples")
    if s.shape != (z.shape[0],):
        raise ValueError("one subject label per latent row required")
    if mode == "conditional":
        if y is None:
            raise ValueError("conditional mode needs task labels")
        y = np.asarray(y)
        if y.shape != s.shape:
            raise ValueError("one task label per latent row required")
    return z, s, y


def _run(z, s, y, mode, lengthscale, terms_fn):
    z, s, y = _check(z, s, y, mode)
    lengthscale = LengthScalePolicy.parse(lengthscale)
    K = z.shape[1]
    if mode == "complementary":
        halves = split_halves(K)
        penalties, grads, done, skipped = [], [], 0, 0
        for cols in halves:
            bk = _BatchKernel(z[:, cols], lengthscale)
            value, d, sk = terms_fn(bk, s, None)
            penalties.append(value)
            grads.append(_embed(bk.grad(), cols, K))
            done += d
            skipped += sk
        return MmdPenaltyResult(tuple(penalties), tuple(grads), done, skipped)
    bk = _BatchKernel(z, lengthscale)
    value, done, skipped = terms_fn(bk, s, y)
    return MmdPenaltyResult(value, bk.grad(), done, skipped)


def mmd_penalty(z, s, y=None, mode="marginal", lengthscale="median"):
    """MMD between the whole batch and each subject's subset (per class if conditional)."""

    def terms(bk, s_, y_):
        if mode == "conditional":
            return _conditional_terms(bk, s_, y_)
        return _marginal_terms(bk, s_)

    result = _run(z, s, y, mode, lengthscale, terms)
    if result.terms_computed == 0:
        raise NoComputableTermsError("no computable terms")
    return result


def select_pairs(M, policy, rng):
    """Ordered subject pairs ``(r, t)``, ``r != t``, drawn from ``rng``.

    Labels are ``0..M-1``.
    """
    if M < 2:
        raise ValueError("pair selection needs at least 2 subjects")
    if policy.kind == "bernoulli":
        pairs = []
        for r in range(M):
            for t in range(M):
                if t != r and rng.uniform() < policy.b:
                    pairs.append((r, t))
        return pairs
    if policy.d > M:
        raise ValueError(f"clique size {policy.d} exceeds {M} subjects")
    chosen = [int(v) for v in rng.permutation(M)[: policy.d]]
    return [(r, t) for r in chosen for t in chosen if t != r]


def pairmmd_penalty(
    z, s, y=None, mode="marginal", policy=None, lengthscale="median", rng=None, average=False, pairs=None
):
    """Sum (or average) of MMD terms between selected pairs of subject subsets.

    Subject labels must be ``0..M-1``. Pairs are drawn from ``rng`` unless
    given explicitly.
    """
    z, s, y = _check(z, s, y, mode)
    if pairs is None:
        policy = PairPolicy.parse(policy) if policy is not None else PairPolicy()
        rng = rng if rng is not None else np.random.default_rng()
        M = int(s.max()) + 1
        pairs = select_pairs(M, policy, rng) if M >= 2 else []
    if not pairs:
        K = z.shape[1]
        if mode == "complementary":
            split_halves(K)
            zero = np.zeros_like(z)
            return MmdPenaltyResult((0.0, 0.0), (zero, zero.copy()), 0)
        return MmdPenaltyResult(0.0, np.zeros_like(z), 0)

    def terms(bk, s_, y_):
        return _pair_terms(bk, s_, y_, pairs, mode == "conditional", average)

    result = _run(z, s, y, mode, lengthscale, terms)
    if result.terms_computed == 0:
        raise NoComputableTermsError("no computable terms")
    return result
