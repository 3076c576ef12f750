import json
import math

import numpy as np
import pytest

from autotransfer import censoring as cz
from autotransfer import data as dt
from autotransfer import neural as nn
from autotransfer import training as tr
from autotransfer.errors import ConfigError, DataError, NumericalError


def separable(seed=0, n=240, M=3):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 6)) * 0.5
    X[:, 0] += np.where(y == 1, 3.0, -3.0)
    s = np.arange(n) % M
    ts = dt.TrialSet(X, y, s, 2, M)
    return ts.subset(ts.s != M - 1), ts.subset(ts.s == M - 1)


def shifted(seed=0, M=4, n=40):
    ts = dt.zscore_trials(dt.synth_generate(dt.SynthConfig(M=M, trials_per_subject=n, seed=seed)))
    return ts.subset(ts.s != M - 1), ts.subset(ts.s == M - 1)


def test_separable_data_fits():
    train_set, val_set = separable()
    cfg = tr.TrainConfig(max_epochs=50, patience=None, seed=1)
    res = tr.train(train_set, val_set, cfg)
    assert len(res.history) == 50
    assert tr.evaluate(res, train_set) >= 0.99


def test_determinism(tmp_path):
    train_set, val_set = shifted()
    cfg = tr.TrainConfig(max_epochs=4, seed=3, censor=cz.CensorConfig("adversarial", lam=0.3, adv_steps=2))
    a = tr.train(train_set, val_set, cfg, metrics_path=tmp_path / "a.jsonl")
    b = tr.train(train_set, val_set, cfg, metrics_path=tmp_path / "b.jsonl")
    assert a.history == b.history
    assert np.array_equal(a.encoder.values, b.encoder.values)
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()
    lines = [json.loads(line) for line in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert lines == a.history


def test_best_epoch_and_lr_schedule():
    train_set, val_set = shifted(seed=1)
    res = tr.train(train_set, val_set, tr.TrainConfig(max_epochs=12, lr=2e-3, patience=None))
    vals = [h["val_loss"] for h in res.history]
    assert res.history[res.best_epoch]["val_loss"] == min(vals)
    assert res.best_epoch == int(np.argmin(vals))
    for h in res.history:
        assert h["lr"] == 2e-3 / math.sqrt(h["epoch"])


def test_patience_stops_early():
    train_set, val_set = shifted(seed=2)
    res = tr.train(train_set, val_set, tr.TrainConfig(max_epochs=200, lr=5e-2, patience=3))
    assert len(res.history) < 200
    assert len(res.history) - 1 - res.best_epoch == 3


def _record_steps(monkeypatch):
    """Wrap optim_step; assert each call changes only its own store."""
    calls, known = [], {}
    original = nn.optim_step

    def wrapped(params, grad, state, epoch):
        known[id(params)] = params
        before = {k: p.values.copy() for k, p in known.items()}
        original(params, grad, state, epoch)
        for k, p in known.items():
            if k != id(params):
                assert np.array_equal(before[k], p.values)
        calls.append(params.spec)

    monkeypatch.setattr(tr.neural, "optim_step", wrapped)
    return calls


def test_lambda_zero_is_plain_erm(monkeypatch):
    calls = _record_steps(monkeypatch)
    train_set, val_set = shifted()
    cfg = tr.TrainConfig(max_epochs=3, censor=cz.CensorConfig("adversarial", lam=0.0))
    res = tr.train(train_set, val_set, cfg)
    enc_spec, cls_spec = tr.model_specs(train_set.dim, 2, cfg)
    assert set(calls) == {enc_spec, cls_spec}
    assert all(h["penalty"] == 0.0 for h in res.history)
    assert res.aux == {}


def test_parameter_partition(monkeypatch):
    calls = _record_steps(monkeypatch)
    train_set, val_set = shifted()
    cfg = tr.TrainConfig(max_epochs=1, batch_size=32, censor=cz.CensorConfig("adversarial", lam=0.5, adv_steps=3))
    tr.train(train_set, val_set, cfg)
    enc_spec, cls_spec = tr.model_specs(train_set.dim, 2, cfg)
    # 120 training trials in batches of 32: three aux steps then encoder and classifier, per batch
    assert len(calls) == 4 * 5
    for b in range(len(calls) // 5):
        block = calls[5 * b : 5 * b + 5]
        assert all(spec not in (enc_spec, cls_spec) for spec in block[:3])
        assert block[3:] == [enc_spec, cls_spec]


def test_began_control_recorded():
    train_set, val_set = shifted()
    cfg = tr.TrainConfig(max_epochs=3, censor=cz.CensorConfig("began", "complementary", lam=1.0))
    res = tr.train(train_set, val_set, cfg)
    assert len(res.k_trace) == 3 * 2  # 120 trials in batches of 64
    assert all(0.0 <= k <= 1.0 for ks in res.k_trace for k in ks)
    assert all(len(h["k"]) == 2 for h in res.history)


@pytest.mark.parametrize("method", ["mige", "mmd", "pairmmd"])
def test_other_methods_run(method):
    train_set, val_set = shifted()
    res = tr.train(train_set, val_set, tr.TrainConfig(max_epochs=2, censor=cz.CensorConfig(method, lam=0.1)))
    assert len(res.history) == 2


def test_nonfinite_loss_aborts_with_snapshot():
    train_set, val_set = separable()
    X = train_set.X.copy()
    X[5, 2] = np.nan
    bad = train_set.with_X(X)
    with pytest.raises(NumericalError) as info:
        tr.train(bad, val_set, tr.TrainConfig(max_epochs=2))
    assert info.value.snapshot["epoch"] == 1


def test_overlapping_subjects_rejected():
    train_set, _ = separable()
    with pytest.raises(DataError):
        tr.train(train_set, train_set, tr.TrainConfig(max_epochs=1))


def test_batches_merge_tail():
    rng = np.random.default_rng(0)
    parts = tr._batches(129, 64, rng)
    assert [p.size for p in parts] == [64, 65]
    assert sorted(np.concatenate(parts).tolist()) == list(range(129))
    groups = np.repeat([0, 1, 2], 30)
    parts = tr._batches(90, 30, rng, groups)
    assert all(np.bincount(groups[p], minlength=3).min() >= 8 for p in parts)


def test_balanced_accuracy_examples():
    assert tr.balanced_accuracy([0, 0, 1], [0, 1, 1]) == pytest.approx(0.75)
    assert tr.balanced_accuracy([2, 0, 1], [2, 0, 1]) == 1.0
    assert tr.balanced_accuracy([0, 1, 1, 0], [1, 1, 1, 1]) == 0.5
    with pytest.raises(ValueError):
        tr.balanced_accuracy([], [])


def test_probe_on_one_hot_latents():
    s = np.repeat(np.arange(4), 50)
    assert tr.subject_probe(np.eye(4)[s], s, seed=0) >= 0.95


def test_probe_on_noise_is_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        s = np.repeat(np.arange(4), 100)
        accs.append(tr.subject_probe(rng.normal(size=(400, 4)), s, seed=seed, epochs=30))
    assert abs(np.mean(accs) - 0.25) <= 0.1


def test_probe_needs_two_subjects():
    with pytest.raises(ValueError):
        tr.subject_probe(np.zeros((10, 2)), np.zeros(10))


def test_train_config_round_trip():
    cfg = tr.TrainConfig(max_epochs=7, censor=cz.CensorConfig("mige", "conditional", lam=0.1))
    assert tr.TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        tr.TrainConfig(max_epochs=0)
    with pytest.raises(ConfigError):
        tr.TrainConfig(batch_size=1)
