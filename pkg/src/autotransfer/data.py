"""Trial containers, preprocessing, synthetic data, table I/O and LOSO splits.

Labels are stored 0-based: classes ``0..C-1`` and subjects ``0..M-1``. The
original names read from a table are kept in ``class_names`` /
``subject_names`` so files can be written back unchanged.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError

CACHE_VERSION = 1
ZSCORE_EPS = 1e-8


@dataclass(frozen=True)
class TrialSet:
    X: np.ndarray
    y: np.ndarray
    s: np.ndarray
    n_classes: int
    n_subjects: int
    channels: int = 1
    samples_per_channel: int = 0
    class_names: tuple = ()
    subject_names: tuple = ()
    source: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        s = np.asarray(self.s, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise DataError("X must be a non-empty N x D matrix")
        if y.shape != (X.shape[0],) or s.shape != (X.shape[0],):
            raise DataError("y and s need one entry per trial")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise DataError(f"class labels must lie in 0..{self.n_classes - 1}")
        if s.min() < 0 or s.max() >= self.n_subjects:
            raise DataError(f"subject labels must lie in 0..{self.n_subjects - 1}")
        spc = self.samples_per_channel or X.shape[1] // max(self.channels, 1)
        if self.channels * spc != X.shape[1]:
            raise DataError(f"{self.channels} channels x {spc} samples != width {X.shape[1]}")
        for name, arr in (("X", X), ("y", y), ("s", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "samples_per_channel", spc)
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(str(c + 1) for c in range(self.n_classes)))
        if not self.subject_names:
            object.__setattr__(self, "subject_names", tuple(str(m + 1) for m in range(self.n_subjects)))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def subjects(self):
        """Subject labels present, ascending."""
        return np.unique(self.s)

    def subset(self, mask):
        return TrialSet(
            self.X[mask], self.y[mask], self.s[mask], self.n_classes, self.n_subjects,
            self.channels, self.samples_per_channel, self.class_names, self.subject_names, self.source,
        )

    def with_X(self, X):
        return TrialSet(
            X, self.y, self.s, self.n_classes, self.n_subjects, self.channels,
            self.samples_per_channel, self.class_names, self.subject_names, self.source,
        )


def zscore_trials(ts):
    """Standardise every channel of every trial (population std).

    Channels whose std falls below 1e-8 count as constant and map to zeros,
    which keeps the transform idempotent.
    """
    if ts.samples_per_channel < 2:
        raise DataError("z-scoring needs at least 2 samples per channel")
    X = ts.X.reshape(ts.n, ts.channels, ts.samples_per_channel)
    mean = X.mean(axis=2, keepdims=True)
    std = X.std(axis=2, keepdims=True)
    flat = std < ZSCORE_EPS
    out = np.where(flat, 0.0, (X - mean) / np.where(flat, 1.0, std))
    return ts.with_X(out.reshape(ts.n, ts.dim))


@dataclass(frozen=True)
class SynthConfig:
    M: int = 6
    C: int = 2
    channels: int = 4
    samples_per_channel: int = 16
    trials_per_subject: int = 200
    subject_offset_scale: float = 1.0
    subject_gain_scale: float = 0.3
    class_template_scale: float = 0.5
    noise_scale: float = 1.0
    label_skew: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "C", "channels", "samples_per_channel", "trials_per_subject"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("subject_offset_scale", "subject_gain_scale", "class_template_scale", "noise_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.label_skew < 1:
            raise ConfigError("label_skew must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


def synth_generate(cfg):
    """Draw ``x = g_m * (t_c + o_m) + noise`` trials for every subject.

    ``t_c`` are class templates, ``o_m`` per-subject offset patterns and
    ``g_m`` per-subject channel gains (log-normal), all over the full
    channel x time grid. Subject ``m`` draws labels from
    ``(1 - skew) * uniform + skew * onehot(m mod C)``.
    """
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.channels, cfg.samples_per_channel)
    templates = cfg.class_template_scale * rng.standard_normal((cfg.C, *shape))
    offsets = cfg.subject_offset_scale * rng.standard_normal((cfg.M, *shape))
    gains = np.exp(cfg.subject_gain_scale * rng.standard_normal((cfg.M, cfg.channels, 1)))

    X, y, s = [], [], []
    for m in range(cfg.M):
        prior = np.full(cfg.C, (1 - cfg.label_skew) / cfg.C)
        prior[m % cfg.C] += cfg.label_skew
        labels = rng.choice(cfg.C, size=cfg.trials_per_subject, p=prior)
        noise = cfg.noise_scale * rng.standard_normal((cfg.trials_per_subject, *shape))
        trials = gains[m] * (templates[labels] + offsets[m]) + noise
        X.append(trials.reshape(cfg.trials_per_subject, -1))
        y.append(labels)
        s.append(np.full(cfg.trials_per_subject, m))
    return TrialSet(
        np.concatenate(X), np.concatenate(y), np.concatenate(s), cfg.C, cfg.M,
        cfg.channels, cfg.samples_per_channel, source=f"synthetic:seed={cfg.seed}",
    )


@dataclass(frozen=True)
class TableSchema:
    subject_col: str = "subject"
    label_col: str = "label"
    feature_cols: tuple | None = None  # None: every other column
    channels: int = 1
    delimiter: str = ","


def _dense_index(values):
    names = sorted(set(values), key=_natural_key)
    lookup = {v: i for i, v in enumerate(names)}
    return np.array([lookup[v] for v in values], dtype=np.int64), tuple(names)


def _natural_key(v):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def load_table(path, schema=None):
    """Read a delimited text file with a header row into a :class:`TrialSet`.

    Subject and class values are re-indexed densely in natural sort order.
    Errors name the 1-based data row (the header is not counted).
    """
    schema = schema or TableSchema()
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        header = [h.strip() for h in header]
        for col in (schema.subject_col, schema.label_col):
            if col not in header:
                raise DataError(f"missing column {col!r}")
        if schema.feature_cols is None:
            feats = [h for h in header if h not in (schema.subject_col, schema.label_col)]
        else:
            feats = list(schema.feature_cols)
            missing = [f for f in feats if f not in header]
            if missing:
                raise DataError(f"missing feature columns {missing}")
        if not feats:
            raise DataError("no feature columns")
        i_s = header.index(schema.subject_col)
        i_y = header.index(schema.label_col)
        i_f = [header.index(f) for f in feats]

        rows, subj, lab = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", row=row_no)
            try:
                rows.append([float(row[i]) for i in i_f])
            except ValueError:
                bad = next(feats[j] for j, i in enumerate(i_f) if not _is_float(row[i]))
                raise DataError(f"non-numeric value in column {bad!r}", row=row_no) from None
            if not np.all(np.isfinite(rows[-1])):
                raise DataError("non-finite feature value", row=row_no)
            subj.append(row[i_s].strip())
            lab.append(row[i_y].strip())
    if not rows:
        raise DataError(f"{path} has no data rows")
    s, subject_names = _dense_index(subj)
    y, class_names = _dense_index(lab)
    return TrialSet(
        np.array(rows), y, s, len(class_names), len(subject_names), schema.channels,
        class_names=class_names, subject_names=subject_names, source=str(path),
    )


def _is_float(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def save_table(ts, path, schema=None):
    schema = schema or TableSchema()
    feats = list(schema.feature_cols) if schema.feature_cols else [f"f{j}" for j in range(ts.dim)]
    if len(feats) != ts.dim:
        raise DataError("feature column count does not match data width")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=schema.delimiter)
        w.writerow([schema.subject_col, schema.label_col, *feats])
        for i in range(ts.n):
            w.writerow([ts.subject_names[ts.s[i]], ts.class_names[ts.y[i]], *(repr(float(v)) for v in ts.X[i])])


def _checksum(arrays):
    h = hashlib.sha256()
    for name in ("X", "y", "s"):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_cache(ts, path):
    """Binary ``.npz`` cache with a versioned header and SHA-256 checksum."""
    arrays = {"X": ts.X, "y": ts.y, "s": ts.s}
    header = {
        "version": CACHE_VERSION,
        "checksum": _checksum(arrays),
        "n_classes": ts.n_classes,
        "n_subjects": ts.n_subjects,
        "channels": ts.channels,
        "samples_per_channel": ts.samples_per_channel,
        "class_names": list(ts.class_names),
        "subject_names": list(ts.subject_names),
        "source": ts.source,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_cache(path):
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read cache {path}: {exc}") from exc
    with data:
        header = json.loads(str(data["header"]))
        if header.get("version") != CACHE_VERSION:
            raise DataError(f"unsupported cache version {header.get('version')}")
        arrays = {k: data[k] for k in ("X", "y", "s")}
    if _checksum(arrays) != header["checksum"]:
        raise DataError(f"checksum mismatch in {path}")
    return TrialSet(
        arrays["X"], arrays["y"], arrays["s"], header["n_classes"], header["n_subjects"],
        header["channels"], header["samples_per_channel"], tuple(header["class_names"]),
        tuple(header["subject_names"]), header["source"],
    )


def load_dataset(path, schema=None):
    """Load a ``.npz`` cache or a delimited table depending on the suffix."""
    if str(path).endswith(".npz"):
        return load_cache(path)
    return load_table(path, schema)


def loso_split(ts, val_subject, test_subject):
    """Split into (train, val, test) by subject; labels keep their global values."""
    if val_subject == test_subject:
        raise DataError("validation and test subject must differ")
    present = set(ts.subjects().tolist())
    for name, subj in (("validation", val_subject), ("test", test_subject)):
        if subj not in present:
            raise DataError(f"{name} subject {subj} not present")
    train_mask = (ts.s != val_subject) & (ts.s != test_subject)
    if not train_mask.any():
        raise DataError("no training subjects remain")
    return ts.subset(train_mask), ts.subset(ts.s == val_subject), ts.subset(ts.s == test_subject)
