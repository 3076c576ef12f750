"""Censoring penalty engines behind one contract.

Every engine receives a latent batch ``z`` (with subject labels ``s`` and
task labels ``y``) and returns a :class:`PenaltyOutput` holding

* ``encoder_penalty``: the scalar penalty the encoder minimises (``None``
  for MIGE, which produces gradients directly),
* ``latent_grad``: d(penalty)/dz, ready to be scaled by lambda and pushed
  through the encoder,
* ``aux_losses`` / ``aux_grads``: objectives of the auxiliary models
  (adversaries, discriminators) and their parameter gradients,
* ``control_next``: the next BEGAN control value(s).

Engines never apply lambda; the trainer does. Auxiliary models take labels
``0..M-1`` for subjects and ``0..C-1`` for classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import divergence, neural, scores
from .divergence import PairPolicy, split_halves
from .errors import ConfigError, DegenerateBatchError, NumericalError
from .numerics import LengthScalePolicy
from .scores import ScoreConfig

METHODS = ("adversarial", "mige", "mmd", "pairmmd", "began")
MODES = divergence.MODES


@dataclass(frozen=True)
class CensorConfig:
    method: str = "adversarial"
    mode: str = "marginal"
    lam: float = 0.0
    score: ScoreConfig = field(default_factory=ScoreConfig)
    pair: PairPolicy = field(default_factory=PairPolicy)
    lengthscale: LengthScalePolicy = field(default_factory=LengthScalePolicy.median)
    pair_average: bool = False
    began_beta: float = 0.001
    began_diversity: float = 0.5
    adv_steps: int = 5
    aux_hidden: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown censoring method {self.method!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown censoring mode {self.mode!r}")
        if not self.lam >= 0:
            raise ConfigError("lambda must be >= 0")
        if not 0 < self.began_diversity <= 1:
            raise ConfigError("began_diversity must lie in (0, 1]")
        if self.adv_steps < 1:
            raise ConfigError("adv_steps must be >= 1")
        if self.aux_hidden < 1:
            raise ConfigError("aux_hidden must be >= 1")
        if isinstance(self.score, dict):
            object.__setattr__(self, "score", ScoreConfig(**self.score))
        if not isinstance(self.pair, PairPolicy):
            object.__setattr__(self, "pair", PairPolicy.parse(self.pair))
        if not isinstance(self.lengthscale, LengthScalePolicy):
            object.__setattr__(self, "lengthscale", LengthScalePolicy.parse(self.lengthscale))

    @property
    def active(self):
        return self.lam > 0

    def with_lam(self, lam):
        return replace(self, lam=lam)

    def label(self):
        """Short human-readable id, e.g. ``adversarial/marginal/lam=0.3``."""
        if not self.active:
            return "baseline"
        parts = [self.method, self.mode, f"lam={self.lam:g}"]
        if self.method == "mige":
            parts += [self.score.kind, f"reg={self.score.score_reg:g}", str(self.score.lengthscale)]
        if self.method == "pairmmd":
            parts.append(str(self.pair))
        return "/".join(parts)

    def to_dict(self):
        d = asdict(self)
        d["score"] = {
            "kind": self.score.kind,
            "score_reg": self.score.score_reg,
            "lengthscale": str(self.score.lengthscale),
            "ssge_j": self.score.ssge_j,
            "nu_iters": self.score.nu_iters,
            "bandwidth": self.score.bandwidth,
        }
        d["pair"] = str(self.pair)
        d["lengthscale"] = str(self.lengthscale)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "score" in d and isinstance(d["score"], dict):
            d["score"] = ScoreConfig(**d["score"])
        return cls(**d)


@dataclass
class PenaltyOutput:
    encoder_penalty: float | None
    latent_grad: np.ndarray
    aux_losses: dict = field(default_factory=dict)
    aux_grads: dict = field(default_factory=dict)
    control_next: tuple | None = None
    info: dict = field(default_factory=dict)


def make_aux_models(cfg, K, n_subjects, n_classes, rng):
    """Fresh auxiliary networks required by ``cfg`` (may be empty)."""
    h = cfg.aux_hidden
    if cfg.method == "adversarial":
        if cfg.mode == "complementary":
            h1, h2 = split_halves(K)
            widths = {"adv1": h1.stop - h1.start, "adv2": h2.stop - h2.start}
        elif cfg.mode == "conditional":
            widths = {"adv": K + n_classes}
        else:
            widths = {"adv": K}
        return {
            name: neural.ParamStore.init(neural.NetSpec.mlp(w, (h,), n_subjects, "relu", "softmax"), rng)
            for name, w in widths.items()
        }
    if cfg.method == "began":
        if cfg.mode == "complementary":
            h1, h2 = split_halves(K)
            widths = {"disc1": h1.stop - h1.start, "disc2": h2.stop - h2.start}
        else:
            widths = {"disc": K}
        return {
            name: neural.ParamStore.init(neural.NetSpec.mlp(w, (h,), w, "relu", "identity"), rng)
            for name, w in widths.items()
        }
    return {}


def initial_control(cfg):
    if cfg.method != "began":
        return None
    return (0.0, 0.0) if cfg.mode == "complementary" else (0.0,)


# ---------------------------------------------------------------- adversarial


def _one_hot(labels, n):
    out = np.zeros((labels.size, n))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _adversary_ce(adv, inputs, s, weights):
    """Weighted CE ``sum_i w_i (-log q(s_i | input_i))`` with its gradients."""
    probs, tape = neural.forward(adv, inputs)
    picked = np.maximum(probs[np.arange(s.size), s], neural.PROB_FLOOR)
    loss = float(np.sum(weights * -np.log(picked)))
    g = np.zeros_like(probs)
    g[np.arange(s.size), s] = -weights / picked
    grad_params, grad_inputs = neural.backward(adv, tape, g)
    return loss, grad_params, grad_inputs


def _check_subjects(s, n_out):
    if s.size and (s.min() < 0 or s.max() >= n_out):
        raise ValueError(f"subject label outside 0..{n_out - 1}")


def adversarial_penalty(z, s, y, adversaries, mode="marginal", n_classes=None):
    """Adversary cross-entropy and the encoder penalty ``-CE``.

    ``adversaries`` maps ``"adv"`` (or ``"adv1"``, ``"adv2"`` in
    complementary mode) to parameter stores of softmax classifiers over
    subjects. Conditional mode feeds ``[z, one_hot(y)]`` and weights each
    sample by the inverse size of its class subset.
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    N, K = z.shape
    if mode == "complementary":
        halves = split_halves(K)
        grad_z = np.zeros_like(z)
        losses, grads = {}, {}
        for sign, name, cols in ((-1.0, "adv1", halves[0]), (1.0, "adv2", halves[1])):
            adv = adversaries[name]
            _check_subjects(s, adv.spec.n_out)
            loss, gp, gi = _adversary_ce(adv, z[:, cols], s, np.full(N, 1.0 / N))
            losses[name] = loss
            grads[name] = gp
            grad_z[:, cols] = sign * gi
        penalty = -(losses["adv1"] - losses["adv2"])
        return PenaltyOutput(penalty, grad_z, losses, grads)

    adv = adversaries["adv"]
    _check_subjects(s, adv.spec.n_out)
    if mode == "conditional":
        y = np.asarray(y, dtype=np.int64)
        if n_classes is None:
            n_classes = adv.spec.n_in - K
        inputs = np.hstack([z, _one_hot(y, n_classes)])
        _, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
        weights = 1.0 / counts[inverse]
    else:
        inputs = z
        weights = np.full(N, 1.0 / N)
    loss, gp, gi = _adversary_ce(adv, inputs, s, weights)
    return PenaltyOutput(-loss, -gi[:, :K], {"adv": loss}, {"adv": gp})


# ----------------------------------------------------------------------- MIGE


def _fit_or_none(points, cfg):
    if points.shape[0] < 2:
        return None
    try:
        return scores.fit_score(points, cfg)
    except DegenerateBatchError:
        return None


def _mige_marginal(z, s, cfg):
    """Cotangents of ``grad I(z; s)`` for one latent block."""
    N = z.shape[0]
    full = _fit_or_none(z, cfg)
    if full is None:
        raise DegenerateBatchError("no computable terms")
    cot = -scores.score_at(full, z) / N
    subsets = []
    skipped = 0
    for m in np.unique(s):
        idx = np.flatnonzero(s == m)
        if idx.size == N:
            fitted = full  # reuse so a single subject cancels exactly
        else:
            fitted = _fit_or_none(z[idx], cfg)
        if fitted is None:
            skipped += 1
            continue
        subsets.append((idx, fitted))
    M = len(subsets)
    for idx, fitted in subsets:
        cot[idx] += scores.score_at(fitted, z[idx]) / (M * idx.size)
    return cot, M, skipped


def _mige_conditional(z, s, y, cfg):
    cot = np.zeros_like(z)
    done = skipped = 0
    for c in np.unique(y):
        in_class = np.flatnonzero(y == c)
        nc = in_class.size
        zc = z[in_class]
        fitted_c = _fit_or_none(zc, cfg)
        if fitted_c is None:
            skipped += 1
            continue
        cot[in_class] += -scores.score_at(fitted_c, zc) / (nc * nc)
        sc = s[in_class]
        cells = []
        for m in np.unique(sc):
            local = np.flatnonzero(sc == m)
            fitted = fitted_c if local.size == nc else _fit_or_none(zc[local], cfg)
            if fitted is None:
                skipped += 1
                continue
            cells.append((local, fitted))
        M = len(cells)
        for local, fitted in cells:
            cot[in_class[local]] += scores.score_at(fitted, zc[local]) / (M * nc * local.size)
        done += M
    if done == 0:
        raise DegenerateBatchError("no computable terms")
    return cot, done, skipped


def mige_penalty(z, s, y=None, score_cfg=None, mode="marginal"):
    """Latent cotangents whose encoder pullback estimates the MI gradient.

    Marginal: ``c_i = -score_full(z_i)/N + score_{S_m}(z_i) / (M |S_m|)``.
    Conditional adds class nesting with inverse class-size weights.
    Complementary returns the marginal cotangents on the first half and
    their negation (maximised information) on the second.
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s)
    score_cfg = score_cfg or ScoreConfig()
    if mode == "marginal":
        cot, done, skipped = _mige_marginal(z, s, score_cfg)
    elif mode == "conditional":
        if y is None:
            raise ValueError("conditional mode needs task labels")
        cot, done, skipped = _mige_conditional(z, s, np.asarray(y), score_cfg)
    elif mode == "complementary":
        cot = np.zeros_like(z)
        done = skipped = 0
        for sign, cols in zip((1.0, -1.0), split_halves(z.shape[1])):
            part, d, sk = _mige_marginal(z[:, cols], s, score_cfg)
            cot[:, cols] = sign * part
            done += d
            skipped += sk
    else:
        raise ConfigError(f"unknown censoring mode {mode!r}")
    return PenaltyOutput(None, cot, info={"terms_computed": done, "terms_skipped": skipped})


# ---------------------------------------------------------------------- BEGAN


def _ae_losses(disc, zp, w_enc, w_disc):
    """Weighted per-item L1 reconstruction losses and their gradients."""
    if zp.shape[1] != disc.spec.n_in or disc.spec.n_out != disc.spec.n_in:
        raise ValueError(f"discriminator width {disc.spec.n_in} != latent width {zp.shape[1]}")
    recon, tape = neural.forward(disc, zp)
    r = zp - recon
    per_item = np.abs(r).sum(axis=1)
    sign = np.sign(r)
    g_enc = sign * w_enc[:, None]
    _, through = neural.backward(disc, tape, g_enc)
    grad_z = g_enc - through
    grad_params, _ = neural.backward(disc, tape, -sign * w_disc[:, None])
    return per_item, grad_z, grad_params


def _group_weights(s, groups):
    """Item weights for ``sum_groups (1/|G|) sum_{subjects} (1/M_G)(1/|S|) L_i``."""
    real = np.zeros(s.size)
    fake = np.zeros(s.size)
    for members in groups:
        real[members] = 1.0 / members.size
        subj = np.unique(s[members])
        for m in subj:
            idx = members[s[members] == m]
            fake[idx] = 1.0 / (subj.size * idx.size)
    return real, fake


def began_penalty(z, s, y, discriminators, control, beta=0.001, diversity=0.5, mode="marginal"):
    """Autoencoder-discriminator losses, encoder penalty and control update.

    ``control`` is ``(k,)`` or ``(k1, k2)`` for complementary mode.
    """
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(s)
    N, K = z.shape
    if mode == "conditional":
        if y is None:
            raise ValueError("conditional mode needs task labels")
        y = np.asarray(y)
        groups = [np.flatnonzero(y == c) for c in np.unique(y)]
    else:
        groups = [np.arange(N)]
    real_w, fake_w = _group_weights(s, groups)

    if mode == "complementary":
        blocks = list(zip(("disc1", "disc2"), split_halves(K)))
    else:
        blocks = [("disc", slice(0, K))]
    ks = tuple(float(k) for k in control)
    if len(ks) != len(blocks) or any(not 0.0 <= k <= 1.0 for k in ks):
        raise ValueError("control values must lie in [0, 1], one per discriminator")

    grad_z = np.zeros_like(z)
    enc_total = disc_total = 0.0
    aux_grads, k_next, info = {}, [], {}
    for j, ((name, cols), k) in enumerate(zip(blocks, ks)):
        disc = discriminators[name]
        if mode == "complementary" and j == 1:
            w_enc = real_w - k * fake_w  # second half: maximise the gap
        else:
            w_enc = fake_w
        w_disc = real_w - k * fake_w
        per_item, gz, gp = _ae_losses(disc, z[:, cols], w_enc, w_disc)
        l_real = float(real_w @ per_item)
        l_fake = float(fake_w @ per_item)
        enc_total += float(w_enc @ per_item)
        disc_total += l_real - k * l_fake
        grad_z[:, cols] += gz
        aux_grads[name] = gp
        k_next.append(began_control_update(k, l_real, l_fake, beta, diversity))
        info[f"{name}_real"] = l_real
        info[f"{name}_fake"] = l_fake
    return PenaltyOutput(enc_total, grad_z, {"disc": disc_total}, aux_grads, tuple(k_next), info)


def began_control_update(k, l_real, l_fake, beta, diversity):
    """``clip(k + beta (gamma L_real - L_fake), 0, 1)``."""
    return float(np.clip(k + beta * (diversity * l_real - l_fake), 0.0, 1.0))


# ----------------------------------------------------------------- dispatcher


def _from_mmd(result):
    if isinstance(result.penalty, tuple):
        p1, p2 = result.penalty
        g1, g2 = result.grad
        penalty, grad = p1 - p2, g1 - g2
        info = {"penalty_z1": p1, "penalty_z2": p2}
    else:
        penalty, grad, info = result.penalty, result.grad, {}
    info.update(terms_computed=result.terms_computed, terms_skipped=result.terms_skipped)
    return PenaltyOutput(float(penalty), grad, info=info)


def compute_penalty(cfg, z, s, y, aux=None, control=None, rng=None, n_classes=None):
    """Run the engine selected by ``cfg`` on one batch.

    Batches where no term is computable yield a zero penalty (reported via
    ``info["empty"]``) instead of an error.
    """
    aux = aux or {}
    try:
        if cfg.method == "adversarial":
            return adversarial_penalty(z, s, y, aux, cfg.mode, n_classes)
        if cfg.method == "mige":
            return mige_penalty(z, s, y, cfg.score, cfg.mode)
        if cfg.method == "began":
            return began_penalty(
                z, s, y, aux, control, cfg.began_beta, cfg.began_diversity, cfg.mode
            )
        if cfg.method == "mmd":
            return _from_mmd(divergence.mmd_penalty(z, s, y, cfg.mode, cfg.lengthscale))
        return _from_mmd(
            divergence.pairmmd_penalty(
                z, s, y, cfg.mode, cfg.pair, cfg.lengthscale, rng, average=cfg.pair_average
            )
        )
    except (divergence.NoComputableTermsError, DegenerateBatchError):
        z = np.asarray(z)
        penalty = None if cfg.method == "mige" else 0.0
        return PenaltyOutput(penalty, np.zeros_like(z, dtype=np.float64), control_next=control, info={"empty": True})


def check_finite(out, where):
    vals = [out.encoder_penalty] if out.encoder_penalty is not None else []
    vals += list(out.aux_losses.values())
    if not all(np.isfinite(v) for v in vals) or not np.all(np.isfinite(out.latent_grad)):
        raise NumericalError(f"non-finite censoring output in {where}", snapshot={"aux_losses": out.aux_losses})
