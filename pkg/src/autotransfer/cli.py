"""Command-line entry point.

Settings come from an optional JSON config file with sections ``data``,
``synth``, ``train``, ``censor`` and ``grid``; any flag given on the
command line overrides the file. Subjects are numbered from 1 on the
command line.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import data, neural, pipeline, training
from .censoring import CensorConfig
from .errors import ConfigError, DataError, NumericalError
from .scores import ScoreConfig

log = logging.getLogger("autotransfer")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _merge(section, overrides):
    out = dict(section or {})
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _build(cls, values, what):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {what} settings: {exc}") from exc


def _csv_list(text, cast=str):
    return None if text is None else [cast(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- settings


def _dataset(args, cfg):
    dcfg = _merge(cfg.get("data"), {"path": args.data, "zscore": args.zscore})
    if "path" not in dcfg:
        raise ConfigError("no dataset given (use --data or the config's data.path)")
    schema = _build(data.TableSchema, dcfg.get("schema", {}), "data.schema")
    ts = data.load_dataset(dcfg["path"], schema)
    if dcfg.get("zscore", True):
        ts = data.zscore_trials(ts)
    return ts


def _censor(args, cfg):
    c = dict(cfg.get("censor") or {})
    score = dict(c.pop("score", {}) or {})
    score = _merge(score, {"kind": args.score, "score_reg": args.score_reg, "lengthscale": args.lengthscale})
    c = _merge(c, {"method": args.method, "mode": args.mode, "lam": args.lam, "pair": args.pair,
                   "adv_steps": args.adv_steps})
    c["score"] = _build(ScoreConfig, score, "score")
    return _build(CensorConfig, c, "censor")


def _train_cfg(args, cfg):
    t = _merge(cfg.get("train"), {
        "max_epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
        "patience": args.patience, "latent_dim": args.latent_dim, "seed": args.seed,
    })
    t.pop("censor", None)
    t["censor"] = _censor(args, cfg)
    return _build(training.TrainConfig, t, "train")


def _grid(args, cfg):
    g = _merge(cfg.get("grid"), {"methods": _csv_list(args.methods), "modes": _csv_list(args.modes)})
    grid = _build(pipeline.HyperGrid, g, "grid")
    if args.n_lams is not None:
        grid = grid.reduced(args.n_lams, grid.modes)
    return grid


def _subject(ts, number, what):
    if number is None:
        return None
    if not 1 <= number <= ts.n_subjects:
        raise ConfigError(f"{what} subject must lie in 1..{ts.n_subjects}")
    return number - 1


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg):
    s = _merge(cfg.get("synth"), {
        "M": args.subjects, "C": args.classes, "channels": args.channels,
        "samples_per_channel": args.samples, "trials_per_subject": args.trials,
        "subject_offset_scale": args.offset, "subject_gain_scale": args.gain,
        "class_template_scale": args.template, "noise_scale": args.noise,
        "label_skew": args.skew, "seed": args.seed,
    })
    ts = data.synth_generate(_build(data.SynthConfig, s, "synth"))
    if args.out.endswith(".npz"):
        data.save_cache(ts, args.out)
    else:
        data.save_table(ts, args.out)
    print(f"wrote {ts.n} trials ({ts.n_subjects} subjects, {ts.n_classes} classes, D={ts.dim}) to {args.out}")


def cmd_train(args, cfg):
    ts = _dataset(args, cfg)
    tcfg = _train_cfg(args, cfg)
    plan = pipeline.fold_plan(ts.subjects())
    test = _subject(ts, args.test, "test")
    val = _subject(ts, args.val, "validation")
    if test is None:
        val, test = plan[0] if val is None else (val, next(t for v, t in plan if v == val))
    elif val is None:
        val = next(v for v, t in plan if t == test)
    trn, va, te = data.loso_split(ts, val, test)
    result = training.train(trn, va, tcfg, metrics_path=args.metrics)
    best = result.history[result.best_epoch]
    summary = {
        "config": tcfg.censor.label(),
        "val_subject": val + 1,
        "test_subject": test + 1,
        "best_epoch": best["epoch"],
        "val_bacc": best["val_bacc"],
        "test_bacc": training.evaluate(result, te),
    }
    if args.checkpoint:
        models = {"encoder": result.encoder, "classifier": result.classifier, **result.aux}
        neural.save_checkpoint(args.checkpoint, models, meta={"train": tcfg.to_dict(), "summary": summary})
    print(json.dumps(summary, indent=1))


def cmd_tune(args, cfg):
    ts = _dataset(args, cfg)
    tcfg = _train_cfg(args, cfg)
    grid = _grid(args, cfg)
    split = None
    if args.test is not None or args.val is not None:
        test = _subject(ts, args.test, "test")
        val = _subject(ts, args.val, "validation")
        if test is None or val is None:
            raise ConfigError("give both --val and --test for a fixed tuning split")
        split = (val, test)
    best, _ = pipeline.tune(ts, grid, split, tcfg, seed=tcfg.seed, top=args.top, workers=args.workers)
    out = {m: [{"config": c.to_dict(), "label": c.label(), "val_bacc": acc} for c, acc in v]
           for m, v in best.items()}
    _write_json(args.out, out)


def _read_configs(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read configs {path}: {exc}") from exc
    if isinstance(raw, dict):  # output of `tune`
        raw = [item["config"] for items in raw.values() for item in items]
    return [CensorConfig.from_dict(c) for c in raw]


def cmd_cv(args, cfg):
    ts = _dataset(args, cfg)
    tcfg = _train_cfg(args, cfg)
    configs = _read_configs(args.configs) if args.configs else [tcfg.censor]
    report = pipeline.cross_validate(ts, configs, tcfg, seed=tcfg.seed, workers=args.workers, probe=args.probe)
    paths = pipeline.emit_report(report, args.out, args.quantile)
    print(json.dumps({"selection": pipeline.autotransfer_select(report, args.quantile).label, "files": paths}, indent=1))


def cmd_autotransfer(args, cfg):
    ts = _dataset(args, cfg)
    tcfg = _train_cfg(args, cfg)
    grid = _grid(args, cfg)
    report, chosen, paths = pipeline.run_autotransfer(
        ts, grid, tcfg, seed=tcfg.seed, out_dir=args.out, workers=args.workers, top=args.top, q=args.quantile
    )
    print(json.dumps({"selection": chosen.label, "files": paths}, indent=1))


def cmd_report(args, cfg):
    report = pipeline.CvReport.load(args.report)
    paths = pipeline.emit_report(report, args.out, args.quantile)
    print(json.dumps({"selection": pipeline.autotransfer_select(report, args.quantile).label, "files": paths}, indent=1))


def _write_json(path, obj):
    text = json.dumps(obj, indent=1)
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    print(text)


# ------------------------------------------------------------------ parser


def _add_data(p):
    p.add_argument("--data", help="dataset (.npz cache or delimited table)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--zscore", dest="zscore", action="store_true", default=None, help="z-score each channel (default)")
    g.add_argument("--no-zscore", dest="zscore", action="store_false")


def _add_train(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", choices=("adversarial", "mige", "mmd", "pairmmd", "began"))
    p.add_argument("--mode", choices=("marginal", "conditional", "complementary"))
    p.add_argument("--lam", type=float)
    p.add_argument("--score", help="score estimator for mige")
    p.add_argument("--score-reg", type=float)
    p.add_argument("--lengthscale", help="median | perplexity:T | fixed:S")
    p.add_argument("--pair", help="bernoulli:B | clique:D")
    p.add_argument("--adv-steps", type=int)


def _add_grid(p):
    p.add_argument("--methods", help="comma-separated censoring methods")
    p.add_argument("--modes", help="comma-separated censoring modes")
    p.add_argument("--n-lams", type=int, help="keep only the first N lambda values per method")
    p.add_argument("--top", type=int, default=3)


def build_parser():
    parser = argparse.ArgumentParser(prog="autotransfer", description="Subject-transfer censoring toolkit")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    for flag, typ in (("--subjects", int), ("--classes", int), ("--channels", int), ("--samples", int),
                      ("--trials", int), ("--offset", float), ("--gain", float), ("--template", float),
                      ("--noise", float), ("--skew", float), ("--seed", int)):
        p.add_argument(flag, type=typ)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="single training run")
    _add_data(p)
    _add_train(p)
    p.add_argument("--val", type=int, help="validation subject (1-based)")
    p.add_argument("--test", type=int, help="test subject (1-based)")
    p.add_argument("--metrics", help="JSON-lines metrics output")
    p.add_argument("--checkpoint", help="write final parameters here (.npz)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="grid search on one split")
    _add_data(p)
    _add_train(p)
    _add_grid(p)
    p.add_argument("--val", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="write the top configs as JSON")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("cv", help="cross-subject validation")
    _add_data(p)
    _add_train(p)
    p.add_argument("--configs", help="JSON list of censor configs, or the output of `tune`")
    p.add_argument("--probe", action="store_true", help="also probe latents for subject information")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--quantile", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("autotransfer", help="tune, cross-validate, select and report")
    _add_data(p)
    _add_train(p)
    _add_grid(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--quantile", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_autotransfer)

    p = sub.add_parser("report", help="re-render a saved cross-validation report")
    p.add_argument("--report", required=True, help="cv_report.json")
    p.add_argument("--quantile", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.snapshot:
            print(json.dumps(exc.snapshot), file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
