"""Command-line entry point: ``reqgate <command> [options]``.

Exit codes: 0 success, 1 requirements unmet or dead model, 2 usage or
configuration error, 3 I/O or file-format error.
"""

import argparse
from dataclasses import asdict
import json
import logging
import math
from pathlib import Path
import sys
import warnings

from threadpoolctl import threadpool_limits

from . import __version__
from . import fileio
from .datagen import generate_signal_dataset, generate_toy_dataset
from .exceptions import ConfigurationError, ConvergenceWarning, DataFormatError, ShapeError
from .features import SpectrogramExtractor, mean_energy
from .loss import Requirements
from .metrics import DEFAULT_RATIOS, roc, weighted_roc_sweep
from .trainer import (
    GatedProductClassifier,
    TrainConfig,
    evaluate,
    predict_product,
    split_dataset,
)
from ._validation import check_spectrograms

EXIT_OK = 0
EXIT_UNMET = 1
EXIT_USAGE = 2
EXIT_IO = 3

DEFAULT_TRAIN_FRACTION = 2 / 3
FEATURE_CONFIG_KEYS = {"n_calibration", "normalization", "seed"}
TOY_SPEC_KEYS = {"n_class0", "n_class1", "seed"}
REQUIREMENT_KEYS = {"tp_fraction", "fp_fraction"}

log = logging.getLogger("reqgate")


class UsageError(Exception):
    pass


def _manifest_path(out):
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


def _seed(args, config):
    if args.seed is not None:
        return args.seed
    return config.get("seed", 0)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def _fraction(text):
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a decimal number, got {text!r}") from None


# -- commands ----------------------------------------------------------------


def cmd_gen_signals(args):
    args.spec = args.spec or args.config
    mapping = fileio.read_config(args.spec, fileio.SIGNAL_SPEC_KEYS) if args.spec else {}
    for key in ("n_motion", "n_easy_noise", "n_spurious_noise"):
        value = getattr(args, key)
        if value is not None:
            mapping[key] = value
    mapping["seed"] = _seed(args, mapping)
    spec = fileio.signal_spec_from_mapping(mapping)
    dataset = generate_signal_dataset(spec)
    fileio.write_dataset_csv(args.out, dataset)
    fileio.write_manifest(
        _manifest_path(args.out), "gen-signals", __version__, spec.seed, args.spec,
        inputs=[args.spec] if args.spec else [], outputs=[args.out],
        parameters=asdict(spec),
    )
    log.info("wrote %d groups to %s", len(dataset), args.out)
    return EXIT_OK


def cmd_gen_toy(args):
    args.spec = args.spec or args.config
    mapping = fileio.read_config(args.spec, TOY_SPEC_KEYS) if args.spec else {}
    for key in ("n_class0", "n_class1"):
        value = getattr(args, key)
        if value is not None:
            mapping[key] = value
    mapping["seed"] = _seed(args, mapping)
    X, y = generate_toy_dataset(
        n_class0=mapping.get("n_class0", 100_000),
        n_class1=mapping.get("n_class1", 1_000),
        seed=mapping["seed"],
    )
    fileio.write_toy_csv(args.out, X, y)
    fileio.write_manifest(
        _manifest_path(args.out), "gen-toy", __version__, mapping["seed"], args.spec,
        inputs=[args.spec] if args.spec else [], outputs=[args.out], parameters=mapping,
    )
    log.info("wrote %d points to %s", len(y), args.out)
    return EXIT_OK


def cmd_features(args):
    config = fileio.read_config(args.config, FEATURE_CONFIG_KEYS) if args.config else {}
    if args.normalization is not None:
        config["normalization"] = args.normalization
    seed = _seed(args, config)
    dataset = fileio.read_dataset_csv(args.data)
    extractor = SpectrogramExtractor(
        n_calibration=config.get("n_calibration", 4096),
        normalization=config.get("normalization"),
        random_state=seed,
    )
    features = extractor.fit_transform(dataset.samples)
    labels = dataset.labels
    del dataset
    fileio.write_features_csv(args.out, features, labels)
    settings = {
        "n_calibration": extractor.n_calibration,
        "normalization": extractor.normalization_,
        "seed": seed,
    }
    outputs = [args.out]
    if args.save_config:
        fileio.write_text(args.save_config, fileio.format_config(settings))
        outputs.append(args.save_config)
    fileio.write_manifest(
        _manifest_path(args.out), "features", __version__, seed, args.config,
        inputs=[args.data] + ([args.config] if args.config else []), outputs=outputs,
        parameters=settings,
    )
    log.info("normalisation constant %r; wrote %d rows to %s",
             extractor.normalization_, len(labels), args.out)
    return EXIT_OK


def _requirements(args):
    req = fileio.read_config(args.requirements, REQUIREMENT_KEYS) if args.requirements else {}
    if args.tp is not None:
        req["tp_fraction"] = args.tp
    if args.fp is not None:
        req["fp_fraction"] = args.fp
    req.setdefault("tp_fraction", 0.5)
    req.setdefault("fp_fraction", 0.001)
    return req


def _train_config(args):
    config = fileio.read_config(args.config, set(TrainConfig.field_names())) if args.config else {}
    config["seed"] = _seed(args, config)
    if "lambda_schedule" in config:
        config["lambda_schedule"] = tuple(tuple(p) for p in config["lambda_schedule"])
    try:
        return TrainConfig(**config)
    except TypeError as exc:
        raise ConfigurationError(f"invalid training config: {exc}") from None


def _split(y, args, seed):
    return split_dataset(y, train_fraction=args.train_fraction, seed=seed)


def cmd_train(args):
    cfg = _train_config(args)
    req = _requirements(args)
    # validate the requirement values before the expensive read
    Requirements(req["tp_fraction"], req["fp_fraction"], 1, 1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    F, y = fileio.read_features_csv(args.features)
    tr, va = _split(y, args, cfg.seed)
    X_tr, y_tr = F[tr], y[tr]
    X_va, y_va = F[va], y[va]
    del F
    clf = GatedProductClassifier.from_config(cfg, req["tp_fraction"], req["fp_fraction"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(X_tr, y_tr, eval_set=(X_va, y_va), log=log.info)
    report = clf.report_
    paths = {
        "model": out / "model.json",
        "report_csv": out / "report.csv",
        "report_table": out / "report.txt",
        "report_json": out / "report.json",
    }
    fileio.save_model(paths["model"], clf.weights_)
    fileio.write_text(paths["report_csv"], fileio.report_csv_text(report, args.timings))
    fileio.write_text(paths["report_table"], fileio.report_table_text(report, args.timings))
    split_info = {"seed": cfg.seed, "train_fraction": args.train_fraction,
                  "n_train": int(len(tr)), "n_validation": int(len(va))}
    extra = {"requirements": req, "split": split_info, "config": cfg.to_dict()}
    fileio.write_text(paths["report_json"], fileio.report_json_text(report, extra, args.timings))
    fileio.write_manifest(
        out / "manifest.json", "train", __version__, cfg.seed, args.config,
        inputs=[args.features] + [p for p in (args.config, args.requirements) if p],
        outputs=list(paths.values()), parameters=extra,
    )
    for line in fileio.report_table_text(report).splitlines():
        log.info("%s", line)
    if report.dead_model:
        log.error("training ended with a dead model (no motion sample left in the loss support)")
        return EXIT_UNMET
    if not report.requirements_met:
        log.error("requirements not met on the training set; best-effort weights saved")
        return EXIT_UNMET
    return EXIT_OK


def _load_subset(args):
    F, y = fileio.read_features_csv(args.features)
    if args.subset != "all":
        tr, va = _split(y, args, args.seed if args.seed is not None else 0)
        idx = tr if args.subset == "train" else va
        F, y = F[idx], y[idx]
    return check_spectrograms(F), y


def _model_scores(args):
    w = fileio.load_model(args.model)
    X, y = _load_subset(args)
    return predict_product(X, mean_energy(X), w), y


def cmd_eval(args):
    p, y = _model_scores(args)
    summary = evaluate(p, y, threshold=0.5)
    summary["subset"] = args.subset
    text = json.dumps(summary, indent=1, sort_keys=True) + "\n"
    if args.out:
        fileio.write_text(args.out, text)
        fileio.write_manifest(
            _manifest_path(args.out), "eval", __version__, args.seed, None,
            inputs=[args.model, args.features], outputs=[args.out], parameters=summary,
        )
    sys.stdout.write(text)
    return EXIT_OK


def cmd_roc(args):
    if args.scores:
        if args.model or args.features:
            raise UsageError("--scores cannot be combined with --model/--features")
        scores, y = fileio.read_scores_csv(args.scores)
        inputs = [args.scores]
    else:
        if not (args.model and args.features):
            raise UsageError("roc needs either --scores or both --model and --features")
        scores, y = _model_scores(args)
        inputs = [args.model, args.features]
    curve = roc(scores, y)
    fileio.write_text(args.out, fileio.roc_csv_text([(None, curve)]))
    fileio.write_manifest(
        _manifest_path(args.out), "roc", __version__, args.seed, None,
        inputs=inputs, outputs=[args.out],
        parameters={"auc": curve.auc, "n_points": len(curve.points)},
    )
    sys.stdout.write(f"auc {fileio.format_float(curve.auc)}\n")
    return EXIT_OK


def cmd_sweep(args):
    X, y = fileio.read_toy_csv(args.toy)
    results = weighted_roc_sweep(X, y, args.ratios)
    ok = [r for r in results if r.curve is not None]
    fileio.write_text(args.out, fileio.roc_csv_text([(r.class_weight_ratio, r.curve) for r in ok]))
    summary = []
    for r in results:
        entry = {"class_weight_ratio": r.class_weight_ratio, "error": r.error}
        if r.weights is not None:
            entry["weights"] = asdict(r.weights)
            entry["operating_point"] = r.operating_point
            entry["auc"] = r.curve.auc
        summary.append(entry)
    fileio.write_manifest(
        _manifest_path(args.out), "sweep", __version__, args.seed, None,
        inputs=[args.toy], outputs=[args.out], parameters={"results": summary},
    )
    for entry in summary:
        if entry.get("operating_point"):
            op = entry["operating_point"]
            sys.stdout.write(
                f"ratio {entry['class_weight_ratio']:g}: fp_fraction {op['fp_fraction']!r} "
                f"tp_fraction {op['tp_fraction']!r} auc {entry['auc']!r}"
                f"{'  (' + entry['error'] + ')' if entry['error'] else ''}\n"
            )
        else:
            sys.stdout.write(f"ratio {entry['class_weight_ratio']:g}: failed: {entry['error']}\n")
    return EXIT_OK if all(r.curve is not None for r in results) else EXIT_UNMET


# -- parser ------------------------------------------------------------------


def _ratios(text):
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values or not all(v > 0 and math.isfinite(v) for v in values):
        raise argparse.ArgumentTypeError("ratios must be positive numbers")
    return values


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=_nonneg_int, help="random seed (overrides the config)")
    common.add_argument("--threads", type=_positive_int, default=1,
                        help="upper bound for native thread pools (default 1)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(
        prog="reqgate", description="Requirement-driven gated classifier toolkit."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-signals", parents=[common], help="generate the synthetic signal dataset")
    p.add_argument("--spec", help="dataset spec file (n_motion, motion.coverage, ...)")
    p.add_argument("--n-motion", dest="n_motion", type=_nonneg_int)
    p.add_argument("--n-easy-noise", dest="n_easy_noise", type=_nonneg_int)
    p.add_argument("--n-spurious-noise", dest="n_spurious_noise", type=_nonneg_int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_signals)

    p = sub.add_parser("gen-toy", parents=[common], help="generate the 2D toy dataset")
    p.add_argument("--spec", help="spec file with n_class0, n_class1, seed")
    p.add_argument("--n-class0", dest="n_class0", type=_positive_int)
    p.add_argument("--n-class1", dest="n_class1", type=_positive_int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("features", parents=[common], help="compute normalised spectrogram features")
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--normalization", type=_fraction, help="reuse a stored normalisation constant")
    p.add_argument("--save-config", dest="save_config",
                   help="write the feature settings, including the constant, to this file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    subset_help = "which part of the stratified split to use (default: all rows)"

    p = sub.add_parser("train", parents=[common], help="two-phase training")
    p.add_argument("--features", required=True)
    p.add_argument("--requirements", help="file with tp_fraction and fp_fraction")
    p.add_argument("--tp", type=_fraction, help="minimum TP fraction (default 0.5)")
    p.add_argument("--fp", type=_fraction, help="maximum FP fraction (default 0.001)")
    p.add_argument("--train-fraction", dest="train_fraction", type=_fraction,
                   default=DEFAULT_TRAIN_FRACTION)
    p.add_argument("--timings", action="store_true",
                   help="fill the wall-time column (reports are then not reproducible)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("eval", cmd_eval, "TP/FP fractions of a saved model"),
        ("roc", cmd_roc, "ROC curve of a saved model or a score file"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--model")
        p.add_argument("--features")
        p.add_argument("--subset", choices=("all", "train", "validation"), default="all",
                       help=subset_help)
        p.add_argument("--train-fraction", dest="train_fraction", type=_fraction,
                       default=DEFAULT_TRAIN_FRACTION)
        p.set_defaults(func=func)
    sub.choices["eval"].add_argument("--out")
    sub.choices["roc"].add_argument("--scores", help="CSV with label,score columns")
    sub.choices["roc"].add_argument("--out", required=True)

    p = sub.add_parser("sweep", parents=[common], help="class-weight sweep on the toy data")
    p.add_argument("--toy", required=True, help="toy dataset CSV")
    p.add_argument("--ratios", type=_ratios, default=list(DEFAULT_RATIOS),
                   help="comma-separated class-weight ratios (default 1,3,10,30,100)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if args.command == "eval" and not (args.model and args.features):
        parser.error("eval needs --model and --features")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except ConfigurationError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    except (DataFormatError, ShapeError) as exc:
        log.error("format error: %s", exc)
        return EXIT_IO
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
