"""Hyperparameter grid, tuning, cross-subject validation, selection, reports.

Folds rotate the test subject through all ``M`` subjects; the validation
subject is the next one cyclically (0-based ``(test + 1) % M``). Every run
is seeded from ``(seed, fold)`` only, so an entry's fold vector does not
depend on which other configurations share the report.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import data, numerics, training
from .censoring import CensorConfig
from .divergence import PairPolicy, split_halves
from .errors import ConfigError, DataError
from .scores import ScoreConfig

SMALL_LAMS = (1.0, 0.3, 0.1, 0.03, 0.01)
LARGE_LAMS = (1.0, 3.0, 10.0, 30.0, 100.0)
DEFAULT_LAMS = {
    "adversarial": SMALL_LAMS,
    "mige": SMALL_LAMS,
    "began": SMALL_LAMS,
    "mmd": LARGE_LAMS,
    "pairmmd": LARGE_LAMS,
}
SCORE_KINDS = ("ssge", "mige_default", "nu_method", "tikhonov", "stein")
SCORE_REGS = (0.01, 0.001, 0.0001)
LENGTHSCALES = ("median", "perplexity:5")
BASELINE = "baseline"


@dataclass(frozen=True)
class HyperGrid:
    methods: tuple = ("adversarial", "mige", "mmd", "pairmmd", "began")
    modes: tuple = ("marginal", "conditional", "complementary")
    lams: dict = field(default_factory=lambda: dict(DEFAULT_LAMS))
    score_kinds: tuple = SCORE_KINDS
    score_regs: tuple = SCORE_REGS
    lengthscales: tuple = LENGTHSCALES
    pair_policies: tuple | None = None  # None: bernoulli:0.5 and clique:min(4, M)

    def __post_init__(self):
        for name in ("methods", "modes", "score_kinds", "score_regs", "lengthscales"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        lams = {m: tuple(float(v) for v in vals) for m, vals in dict(self.lams).items()}
        object.__setattr__(self, "lams", lams)
        if self.pair_policies is not None:
            object.__setattr__(self, "pair_policies", tuple(str(p) for p in self.pair_policies))
        missing = [m for m in self.methods if m not in lams]
        if missing:
            raise ConfigError(f"no lambda values for {missing}")

    def reduced(self, n_lams=2, modes=("marginal",)):
        """Keep the first ``n_lams`` lambda values per method and the given modes."""
        lams = {m: v[:n_lams] for m, v in self.lams.items()}
        return replace(self, lams=lams, modes=tuple(modes))

    def configs(self, n_subjects, base=None):
        """Enumerate censoring configs, restricted to each method's axes."""
        base = base or CensorConfig()
        out = []
        pairs = self.pair_policies or ("bernoulli:0.5", f"clique:{min(4, n_subjects)}")
        for method in self.methods:
            for mode in self.modes:
                for lam in self.lams[method]:
                    common = dict(method=method, mode=mode, lam=lam)
                    if method == "mige":
                        for kind in self.score_kinds:
                            for reg in self.score_regs:
                                for ls in self.lengthscales:
                                    score = ScoreConfig(kind=kind, score_reg=reg, lengthscale=ls)
                                    out.append(replace(base, score=score, **common))
                    elif method == "pairmmd":
                        for p in pairs:
                            out.append(replace(base, pair=PairPolicy.parse(p), **common))
                    else:
                        out.append(replace(base, **common))
        return out

    def to_dict(self):
        return {
            "methods": list(self.methods),
            "modes": list(self.modes),
            "lams": {m: list(v) for m, v in self.lams.items()},
            "score_kinds": list(self.score_kinds),
            "score_regs": list(self.score_regs),
            "lengthscales": list(self.lengthscales),
            "pair_policies": list(self.pair_policies) if self.pair_policies else None,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def fold_plan(subjects):
    """``(val, test)`` pairs: every subject is tested once, validated by its successor."""
    subjects = [int(m) for m in subjects]
    M = len(subjects)
    if M < 3:
        raise DataError("cross-subject validation needs at least 3 subjects")
    return [(subjects[(i + 1) % M], subjects[i]) for i in range(M)]


def run_seed(seed, fold):
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


@dataclass
class CvEntry:
    label: str
    config: dict
    folds: list = field(default_factory=list)  # [(val_subject, test_subject)]
    val_accs: list = field(default_factory=list)
    test_accs: list = field(default_factory=list)
    runtimes: list = field(default_factory=list)
    probes: list = field(default_factory=list)  # per fold: [probe] or [probe_z1, probe_z2]

    @property
    def method(self):
        return BASELINE if self.label == BASELINE else self.config["method"]

    def to_dict(self):
        return {
            "label": self.label,
            "config": self.config,
            "folds": [list(f) for f in self.folds],
            "val_accs": self.val_accs,
            "test_accs": self.test_accs,
            "runtimes": self.runtimes,
            "probes": self.probes,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["folds"] = [tuple(f) for f in d["folds"]]
        return cls(**d)


@dataclass
class CvReport:
    entries: list
    n_subjects: int
    seed: int
    subject_names: tuple = ()

    def entry(self, label):
        for e in self.entries:
            if e.label == label:
                return e
        raise KeyError(label)

    def to_dict(self):
        return {
            "n_subjects": self.n_subjects,
            "seed": self.seed,
            "subject_names": list(self.subject_names),
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            [CvEntry.from_dict(e) for e in d["entries"]], d["n_subjects"], d["seed"], tuple(d.get("subject_names", ()))
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read report {path}: {exc}") from exc


def _run_one(job):
    ts, censor, train_cfg, val_subj, test_subj, seed, probe = job
    t0 = time.perf_counter()
    trn, val, tst = data.loso_split(ts, val_subj, test_subj)
    cfg = replace(train_cfg, censor=censor, seed=seed)
    result = training.train(trn, val, cfg)
    val_acc = result.history[result.best_epoch]["val_bacc"]
    test_acc = training.evaluate(result, tst)
    probes = []
    if probe:
        z = result.encode(trn.X)
        parts = split_halves(z.shape[1]) if censor.mode == "complementary" else (slice(None),)
        probes = [training.subject_probe(z[:, cols], trn.s, seed=seed) for cols in parts]
    return val_acc, test_acc, time.perf_counter() - t0, probes


def _map(jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def tune(ts, grid, split=None, train_cfg=None, seed=0, top=3, workers=1):
    """Train every grid config on one split; keep the best ``top`` per method.

    Ranked by validation balanced accuracy, ties broken by smaller lambda,
    then enumeration order. Returns ``(best, all_results)`` where ``best``
    maps method to a list of ``(config, val_acc)``.
    """
    train_cfg = train_cfg or training.TrainConfig()
    subjects = ts.subjects()
    if subjects.size < 3:
        raise DataError("tuning needs at least 3 subjects")
    if split is None:
        split = fold_plan(subjects)[0]
    val_subj, test_subj = split
    configs = grid.configs(subjects.size, train_cfg.censor)
    if not configs:
        raise ConfigError("hyperparameter grid is empty")
    fold_seed = run_seed(seed, 0)
    jobs = [(ts, c, train_cfg, val_subj, test_subj, fold_seed, False) for c in configs]
    results = _map(jobs, workers)
    scored = [(c, r[0], i) for i, (c, r) in enumerate(zip(configs, results))]
    best = {}
    for method in grid.methods:
        ranked = sorted((x for x in scored if x[0].method == method), key=lambda x: (-x[1], x[0].lam, x[2]))
        best[method] = [(c, acc) for c, acc, _ in ranked[:top]]
    return best, scored


def cross_validate(ts, configs, train_cfg=None, seed=0, workers=1, probe=False):
    """Rotate test/validation subjects over all folds for every config plus a baseline."""
    train_cfg = train_cfg or training.TrainConfig()
    plan = fold_plan(ts.subjects())
    baseline = replace(train_cfg.censor, lam=0.0)
    unique, seen = [], set()
    for c in [baseline, *configs]:
        label = c.label()
        if label not in seen:
            seen.add(label)
            unique.append(c)
    jobs = [
        (ts, c, train_cfg, v, t, run_seed(seed, fold), probe)
        for c in unique
        for fold, (v, t) in enumerate(plan)
    ]
    results = _map(jobs, workers)
    entries = []
    for ci, c in enumerate(unique):
        e = CvEntry(c.label(), c.to_dict())
        for fold, (v, t) in enumerate(plan):
            val_acc, test_acc, secs, probes = results[ci * len(plan) + fold]
            e.folds.append((v, t))
            e.val_accs.append(val_acc)
            e.test_accs.append(test_acc)
            e.runtimes.append(secs)
            e.probes.append(probes)
        entries.append(e)
    return CvReport(entries, ts.n_subjects, seed, ts.subject_names)


def autotransfer_select(report, q=0.25):
    """Entry with the highest ``q``-quantile of validation accuracy.

    Ties favour the baseline, then lexicographic method and label order.
    """
    if not report.entries:
        raise ValueError("empty report")
    scored = []
    for e in report.entries:
        if not e.val_accs:
            raise ValueError(f"entry {e.label} has no folds")
        scored.append((round(numerics.quantile(e.val_accs, q), 12), e))
    top = max(v for v, _ in scored)
    tied = [e for v, e in scored if v == top]
    for e in tied:
        if e.label == BASELINE:
            return e
    return min(tied, key=lambda e: (e.method, e.label))


def _quartiles(values):
    return {f"q{int(q * 100)}": numerics.quantile(values, q) for q in (0.25, 0.5, 0.75)}


def summarize(report, q=0.25):
    chosen = autotransfer_select(report, q)
    entries = []
    for e in report.entries:
        entries.append(
            {
                "label": e.label,
                "method": e.method,
                "val": _quartiles(e.val_accs),
                "test": _quartiles(e.test_accs),
                "val_mean": float(np.mean(e.val_accs)),
                "test_mean": float(np.mean(e.test_accs)),
                "selection_score": numerics.quantile(e.val_accs, q),
            }
        )
    per_method = {}
    for item in entries:
        cur = per_method.get(item["method"])
        if cur is None or item["selection_score"] > cur["selection_score"]:
            per_method[item["method"]] = item
    return {
        "selection": {"label": chosen.label, "method": chosen.method, "quantile": q,
                      "score": numerics.quantile(chosen.val_accs, q)},
        "entries": entries,
        "best_per_method": {m: v["label"] for m, v in sorted(per_method.items())},
    }


def emit_report(report, out_dir, q=0.25):
    """Write ``cv_folds.csv``, ``summary.json``, ``cv_report.json`` and two SVG plots."""
    if not report.entries or not any(e.folds for e in report.entries):
        raise ValueError("nothing to render: report has no entries")
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {name: os.path.join(out_dir, name) for name in
                 ("cv_folds.csv", "summary.json", "cv_report.json", "fold_scores.svg", "subject_curves.svg")}
        with open(paths["cv_folds.csv"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "method", "fold", "val_subject", "test_subject", "val_acc", "test_acc", "runtime_s"])
            for e in report.entries:
                for i, (v, t) in enumerate(e.folds):
                    w.writerow([e.label, e.method, i, v, t, repr(e.val_accs[i]), repr(e.test_accs[i]),
                                f"{e.runtimes[i]:.3f}"])
        with open(paths["summary.json"], "w") as fh:
            json.dump(summarize(report, q), fh, indent=1)
        report.save(paths["cv_report.json"])
        _plot_fold_scores(report, paths["fold_scores.svg"])
        _plot_subject_curves(report, paths["subject_curves.svg"])
    except OSError as exc:
        raise DataError(f"cannot write report to {out_dir}: {exc}") from exc
    return paths


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_fold_scores(report, path):
    plt = _pyplot()
    n = len(report.entries)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * n + 2), 4))
    jitter = np.random.default_rng(0)
    for i, e in enumerate(report.entries):
        xs = i + jitter.uniform(-0.15, 0.15, len(e.test_accs))
        ax.scatter(xs, e.test_accs, s=14, alpha=0.7, color="tab:blue")
        ax.scatter([i], [np.mean(e.test_accs)], marker="D", s=40, color="tab:red", zorder=3)
    ax.set_xticks(range(n))
    ax.set_xticklabels([e.label for e in report.entries], rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("test balanced accuracy")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_subject_curves(report, path):
    plt = _pyplot()
    try:
        base = report.entry(BASELINE)
    except KeyError:
        base = report.entries[0]
    by_subject = {t: acc for (_, t), acc in zip(base.folds, base.test_accs)}
    order = sorted(by_subject, key=lambda t: (by_subject[t], t))
    fig, ax = plt.subplots(figsize=(6, 4))
    for e in report.entries:
        accs = {t: acc for (_, t), acc in zip(e.folds, e.test_accs)}
        ys = [accs.get(t, np.nan) for t in order]
        style = dict(color="black", linewidth=2) if e is base else dict(alpha=0.6, linewidth=1)
        ax.plot(range(len(order)), ys, marker="o", markersize=3, label=e.label, **style)
    names = report.subject_names or tuple(str(t + 1) for t in range(report.n_subjects))
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels([names[t] if t < len(names) else str(t) for t in order], fontsize=7)
    ax.set_xlabel("test subject (sorted by baseline accuracy)")
    ax.set_ylabel("test balanced accuracy")
    ax.legend(fontsize=6, loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def run_autotransfer(ts, grid, train_cfg=None, seed=0, out_dir="autotransfer_out", workers=1, top=3, q=0.25):
    """Tune on one split, cross-validate the best configs, select, and write the report."""
    best, _ = tune(ts, grid, train_cfg=train_cfg, seed=seed, top=top, workers=workers)
    configs = [c for method in grid.methods for c, _ in best[method]]
    report = cross_validate(ts, configs, train_cfg, seed=seed, workers=workers)
    chosen = autotransfer_select(report, q)
    paths = emit_report(report, out_dir, q)
    return report, chosen, paths
