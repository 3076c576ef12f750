"""Regularised ERM training with alternating auxiliary-model updates.

Each batch runs (a) ``adv_steps`` updates of any auxiliary models with the
encoder output held fixed, then (b) one encoder + classifier update on
``weighted CE + lambda * penalty``. The penalty enters through its latent
gradient, which is added to the classifier's latent gradient before a
single encoder backward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import censoring, neural
from .censoring import CensorConfig
from .errors import ConfigError, DataError, NumericalError


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    aux_lr: float | None = 1e-2  # None: same as lr
    patience: int | None = 75
    latent_dim: int = 8
    encoder_hidden: tuple = (64,)
    stratified: bool = False
    seed: int = 0
    censor: CensorConfig = field(default_factory=CensorConfig)

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        object.__setattr__(self, "encoder_hidden", tuple(int(h) for h in self.encoder_hidden))
        if isinstance(self.censor, dict):
            object.__setattr__(self, "censor", CensorConfig.from_dict(self.censor))

    def optim(self, params, lr=None):
        return neural.OptimState.like(
            params, lr=lr or self.lr, weight_decay=self.weight_decay,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps,
        )

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "censor"}
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["censor"] = self.censor.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainResult:
    encoder: neural.ParamStore
    classifier: neural.ParamStore
    aux: dict
    history: list
    best_epoch: int  # index into history
    k_trace: list = field(default_factory=list)
    subject_map: dict = field(default_factory=dict)

    def encode(self, X):
        return neural.forward(self.encoder, X)[0]

    def predict_proba(self, X):
        return neural.forward(self.classifier, self.encode(X))[0]

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)


def balanced_accuracy(y_true, y_pred):
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.size == 0:
        raise ValueError("balanced accuracy of empty input")
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


def model_specs(dim, n_classes, cfg):
    encoder = neural.NetSpec.mlp(dim, cfg.encoder_hidden, cfg.latent_dim, "relu", "identity")
    classifier = neural.NetSpec.mlp(cfg.latent_dim, (), n_classes, out_act="softmax")
    return encoder, classifier


def _batches(n, size, rng, groups=None):
    if groups is None:
        order = rng.permutation(n)
    else:
        # spread each group's shuffled members evenly through the epoch
        pos = np.empty(n)
        for g in np.unique(groups):
            idx = np.flatnonzero(groups == g)
            pos[idx[rng.permutation(idx.size)]] = (np.arange(idx.size) + rng.uniform(size=idx.size)) / idx.size
        order = np.argsort(pos, kind="stable")
    cuts = list(range(0, n, size))
    out = [order[c : c + size] for c in cuts]
    if len(out) > 1 and out[-1].size < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _snapshot(epoch, batch, **values):
    snap = {"epoch": epoch, "batch": batch}
    for k, v in values.items():
        snap[k] = None if v is None else float(v)
    return snap


def train(train_set, val_set, cfg=None, metrics_path=None, specs=None):
    """Train encoder + classifier (+ auxiliaries) and keep the min-val-loss epoch."""
    cfg = cfg or TrainConfig()
    if set(train_set.subjects().tolist()) & set(val_set.subjects().tolist()):
        raise DataError("training and validation subjects overlap")
    if train_set.dim != val_set.dim:
        raise DataError("training and validation widths differ")
    censor = cfg.censor
    C = train_set.n_classes
    subjects = train_set.subjects()
    subject_map = {int(m): i for i, m in enumerate(subjects)}
    s_dense = np.searchsorted(subjects, train_set.s)
    X, y = train_set.X, train_set.y

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    init_rng, shuffle_rng, pair_rng, aux_rng = (np.random.default_rng(q) for q in seeds)
    enc_spec, cls_spec = specs or model_specs(train_set.dim, C, cfg)
    encoder = neural.ParamStore.init(enc_spec, init_rng)
    classifier = neural.ParamStore.init(cls_spec, init_rng)
    enc_opt, cls_opt = cfg.optim(encoder), cfg.optim(classifier)
    active = censor.active
    aux = censoring.make_aux_models(censor, enc_spec.n_out, subjects.size, C, aux_rng) if active else {}
    aux_opt = {name: cfg.optim(p, cfg.aux_lr) for name, p in aux.items()}
    control = censoring.initial_control(censor) if active else None

    counts = np.bincount(y, minlength=C)
    weights = neural.class_weights(counts)

    history, k_trace = [], []
    best = None
    metrics = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            task_sum = pen_sum = 0.0
            pen_n = 0
            n_seen = 0
            groups = s_dense if cfg.stratified else None
            for b, idx in enumerate(_batches(X.shape[0], cfg.batch_size, shuffle_rng, groups)):
                xb, yb, sb = X[idx], y[idx], s_dense[idx]
                z, enc_tape = neural.forward(encoder, xb)

                if active and aux:
                    for _ in range(censor.adv_steps):
                        out = censoring.compute_penalty(censor, z, sb, yb, aux, control, pair_rng, C)
                        for name, p in aux.items():
                            neural.optim_step(p, out.aux_grads[name], aux_opt[name], epoch)

                probs, cls_tape = neural.forward(classifier, z)
                task = neural.weighted_ce(probs, yb, weights)
                g_cls, dz = neural.backward(classifier, cls_tape, neural.weighted_ce_grad(probs, yb, weights))
                penalty = None
                if active:
                    out = censoring.compute_penalty(censor, z, sb, yb, aux, control, pair_rng, C)
                    penalty = out.encoder_penalty
                    dz = dz + censor.lam * out.latent_grad
                    if out.control_next is not None:
                        control = out.control_next
                        k_trace.append(list(control))
                    if penalty is not None:
                        pen_sum += penalty * idx.size
                        pen_n += idx.size
                if not np.isfinite(task) or (penalty is not None and not np.isfinite(penalty)) or not np.all(
                    np.isfinite(dz)
                ):
                    raise NumericalError(
                        "non-finite loss during training",
                        snapshot=_snapshot(epoch, b, task_loss=task, penalty=penalty),
                    )
                g_enc, _ = neural.backward(encoder, enc_tape, dz)
                neural.optim_step(encoder, g_enc, enc_opt, epoch)
                neural.optim_step(classifier, g_cls, cls_opt, epoch)
                task_sum += task * idx.size
                n_seen += idx.size

            val_probs = neural.forward(classifier, neural.forward(encoder, val_set.X)[0])[0]
            val_loss = neural.weighted_ce(val_probs, val_set.y, weights)
            if not np.isfinite(val_loss):
                raise NumericalError("non-finite validation loss", snapshot=_snapshot(epoch, -1, val_loss=val_loss))
            record = {
                "epoch": epoch,
                "lr": enc_opt.rate(epoch),
                "task_loss": task_sum / n_seen,
                "penalty": pen_sum / pen_n if pen_n else (0.0 if not active else None),
                "val_loss": val_loss,
                "val_bacc": balanced_accuracy(val_set.y, val_probs.argmax(axis=1)),
            }
            if control is not None:
                record["k"] = list(control)
            history.append(record)
            if metrics:
                metrics.write(json.dumps(record) + "\n")
            if best is None or val_loss < history[best[0]]["val_loss"]:
                best = (len(history) - 1, encoder.copy(), classifier.copy(), {n: p.copy() for n, p in aux.items()})
            if cfg.patience is not None and epoch - history[best[0]]["epoch"] >= cfg.patience:
                break
    finally:
        if metrics:
            metrics.close()
    idx, enc_best, cls_best, aux_best = best
    return TrainResult(enc_best, cls_best, aux_best, history, idx, k_trace, subject_map)


def evaluate(result, ts):
    """Balanced accuracy of a trained model on ``ts``."""
    return balanced_accuracy(ts.y, result.predict(ts.X))


def subject_probe(latents, s, seed=0, hidden=(32,), epochs=100, batch_size=64, lr=1e-2):
    """Held-out balanced accuracy of a fresh subject classifier on frozen latents.

    The split is 80/20 within every subject (seeded); features are
    standardised with training-split statistics.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim == 1:
        latents = latents[:, None]
    s = np.asarray(s)
    labels, s_dense = np.unique(s, return_inverse=True)
    if labels.size < 2:
        raise ValueError("subject probe needs at least 2 subjects")
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(s.size, dtype=bool)
    for m in range(labels.size):
        idx = np.flatnonzero(s_dense == m)
        n_test = max(1, int(round(0.2 * idx.size))) if idx.size > 1 else 0
        test_mask[rng.choice(idx, size=n_test, replace=False)] = True
    tr, te = ~test_mask, test_mask
    mu = latents[tr].mean(axis=0)
    sd = np.maximum(latents[tr].std(axis=0), 1e-8)
    feats = (latents - mu) / sd

    spec = neural.NetSpec.mlp(feats.shape[1], hidden, labels.size, "relu", "softmax")
    probe = neural.ParamStore.init(spec, rng)
    opt = neural.OptimState.like(probe, lr=lr, weight_decay=0.0)
    Xtr, ytr = feats[tr], s_dense[tr]
    w = np.full(labels.size, 1.0 / labels.size)
    for epoch in range(1, epochs + 1):
        for idx in _batches(Xtr.shape[0], batch_size, rng):
            probs, tape = neural.forward(probe, Xtr[idx])
            g, _ = neural.backward(probe, tape, neural.weighted_ce_grad(probs, ytr[idx], w))
            neural.optim_step(probe, g, opt, epoch)
    pred = neural.forward(probe, feats[te])[0].argmax(axis=1)
    return balanced_accuracy(s_dense[te], pred)
