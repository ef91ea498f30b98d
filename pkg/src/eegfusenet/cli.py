"""Command-line entry point: ``eegfusenet <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data or integrity error,
4 divergence or leakage trap.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import save_tensor
from .data import (
    PreprocConfig,
    SynthSpec,
    import_csv,
    load_manifest,
    load_segments,
    load_store,
    preprocess,
    save_store,
    segment_trial,
    synth_dataset,
)
from .errors import ConfigurationError, DataError, EEGFuseNetError
from .evaluation import (
    FEATURES,
    ExperimentConfig,
    emit_report,
    format_table,
    load_report,
    run_experiment,
    standardize_by_group,
    sweep,
    write_predictions,
)
from .features import extract_matrix, fit_pca, usable_bands
from .hypergraph import DecodeConfig, LabeledFeatures, subsample_training
from .model import encode_many, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, fit

VARIANT_CHOICES = ("cnn", "cnn-gan", "cnn-rnn", "cnn-rnn-gan")
FEATURE_CHOICES = tuple(FEATURES)
DECODER_CHOICES = ("hypergraph", "simple-graph", "pca-kmeans")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAP = 0, 2, 3, 4


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("shared")
    g.add_argument("--manifest", type=Path, help="dataset manifest (file or store directory)")
    g.add_argument("--variant", choices=VARIANT_CHOICES, default="cnn-rnn-gan")
    g.add_argument("--features", choices=FEATURE_CHOICES, default="fusenet")
    g.add_argument("--decoder", choices=DECODER_CHOICES, default="hypergraph")
    g.add_argument("--kappa", type=int, default=5)
    g.add_argument("--eta", type=float, default=10.0)
    g.add_argument("--latent", type=int, default=64)
    g.add_argument("--lambda", dest="lambda_l1", type=float, default=10.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--vote-per-trial", action="store_true")
    g.add_argument("--out", type=Path, default=Path("out"))
    g.add_argument("--config", type=Path, help="JSON file whose keys override flags")
    m = p.add_argument_group("training")
    m.add_argument("--epochs", type=int, default=100)
    m.add_argument("--batch-size", type=int, default=128)
    m.add_argument("--lr-generator", type=float, default=0.001)
    m.add_argument("--lr-discriminator", type=float, default=0.0002)
    m.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    m.add_argument("--f1", type=int, help="temporal filters")
    m.add_argument("--depth", type=int, help="depthwise multiplier")
    m.add_argument("--gru-hidden", type=int, help="hidden units per GRU direction")
    m.add_argument("--pool1", type=int)
    m.add_argument("--pool2", type=int)
    m.add_argument("--standardize", choices=("none", "train", "subject"), default="subject")
    m.add_argument("--f1-average", choices=("binary", "macro"), default="binary")
    return p


def _preproc_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bandpass", type=float, nargs=2, metavar=("LOW", "HIGH"), default=(4.0, 45.0))
    p.add_argument("--no-bandpass", action="store_true")
    p.add_argument("--notch", type=float)
    p.add_argument("--no-reref", action="store_true")
    p.add_argument("--target-rate", type=float)
    p.add_argument("--segment-seconds", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    shared = _shared()
    parser = argparse.ArgumentParser(prog="eegfusenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[shared], help="write a planted-signal synthetic corpus")
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--segments", type=int, default=30)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--rate", type=float, default=64.0)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--dimensions", default="valence")
    p.add_argument("--amplitude", type=float, default=1.5)

    p = sub.add_parser("preprocess", parents=[shared], help="re-filter and re-segment a stored corpus")
    _preproc_flags(p)

    p = sub.add_parser("import-csv", parents=[shared], help="build a store from per-trial CSV files")
    p.add_argument("index", type=Path, help="CSV with subject,trial,path,<dimension> columns")
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--dimensions", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--name", default="imported")
    _preproc_flags(p)

    sub.add_parser("train", parents=[shared], help="fit a generator on every segment of the corpus")

    p = sub.add_parser("extract", parents=[shared], help="write one feature row per segment")
    p.add_argument("--checkpoint", type=Path, help="trained generator directory (fusenet features)")

    p = sub.add_parser("decode", parents=[shared], help="decode one held-out subject from extracted features")
    p.add_argument("--feature-file", type=Path, required=True, help="features.csv written by extract")
    p.add_argument("--test-subject", required=True)

    sub.add_parser("evaluate", parents=[shared], help="leave-one-subject-out experiment")

    p = sub.add_parser("sweep", parents=[shared], help="grid over segment length, kappa and eta")
    p.add_argument("--kappa-grid", type=int, nargs="+")
    p.add_argument("--eta-grid", type=float, nargs="+")
    p.add_argument("--timepoints-grid", type=int, nargs="+")
    p.add_argument("--timing-repeats", type=int, default=1)

    p = sub.add_parser("report", parents=[shared], help="tabulate emitted reports")
    p.add_argument("reports", type=Path, nargs="+")
    p.add_argument("--metrics", nargs="+", default=["p_acc", "p_f"], choices=("p_acc", "p_f", "nmi"))
    return parser


def apply_config(args: argparse.Namespace) -> argparse.Namespace:
    """Overlay keys from ``--config`` onto parsed flags (JSON wins)."""
    if args.config is None:
        return args
    try:
        body = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {args.config}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(body, dict):
        raise ConfigurationError(f"config {args.config} must hold a JSON object")
    for key, value in body.items():
        dest = "lambda_l1" if key == "lambda" else key.replace("-", "_")
        if not hasattr(args, dest):
            raise ConfigurationError(f"config {args.config}: unknown key {key!r}")
        current = getattr(args, dest)
        if isinstance(current, Path) or dest in ("manifest", "out", "checkpoint", "feature_file"):
            value = Path(value)
        setattr(args, dest, value)
    return args


# -- helpers ---------------------------------------------------------------------------


def _require_manifest(args):
    if args.manifest is None:
        raise ConfigurationError(f"{args.command} needs --manifest")
    return load_manifest(args.manifest)


def _preproc(args) -> PreprocConfig:
    return PreprocConfig(
        bandpass=None if args.no_bandpass else tuple(args.bandpass),
        notch=args.notch,
        reref=not args.no_reref,
        target_rate=args.target_rate,
        segment_seconds=args.segment_seconds,
    )


def _model(args) -> dict:
    keys = {"f1": "f1", "depth": "depth", "gru_hidden": "gru_hidden", "pool1": "pool1", "pool2": "pool2"}
    return {k: getattr(args, a) for k, a in keys.items() if getattr(args, a) is not None}


def experiment_config(args) -> ExperimentConfig:
    train = TrainConfig(
        lr_generator=args.lr_generator, lr_discriminator=args.lr_discriminator, batch_size=args.batch_size,
        max_epochs=args.epochs, lambda_l1=args.lambda_l1, seed=args.seed, variant=args.variant, dtype=args.dtype,
    )
    decode = DecodeConfig(kappa=args.kappa, eta=args.eta, latent=args.latent, seed=args.seed)
    cfg = ExperimentConfig(
        features=args.features, decoder=args.decoder.replace("-", "_"), train=train, decode=decode,
        model=_model(args), standardize=args.standardize, vote_per_trial=args.vote_per_trial,
        f1_average=args.f1_average, seed=args.seed, jobs=args.jobs,
    )
    cfg.validate()
    return cfg


def _dataset(args, cfg: ExperimentConfig | None = None):
    manifest = _require_manifest(args)
    data = load_segments(manifest)
    if cfg is not None:
        cfg.decode = replace(cfg.decode, n_classes=manifest.n_classes)
    return manifest, data


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- subcommands -----------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec(
        subjects=args.subjects, trials=args.trials, classes=args.classes, channels=args.channels, rate=args.rate,
        segments_per_trial=args.segments, dimensions=tuple(d for d in args.dimensions.split(",") if d),
        amplitude=args.amplitude, seed=args.seed,
    )
    manifest, store = synth_dataset(spec)
    root = save_store(manifest, store, args.out)
    _say(f"wrote {manifest.segment_count()} segments from {len(manifest.subjects)} subjects to {root}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    manifest = _require_manifest(args)
    store = load_store(manifest)
    config = _preproc(args)
    out, rate = {}, manifest.sampling_rate
    for s in manifest.subjects:
        for t in s.trials:
            stream = np.concatenate(list(store[(s.id, t.id)]), axis=-1)
            x, rate = preprocess(stream, manifest.sampling_rate, config)
            segs = segment_trial(x, rate, config.segment_seconds)
            t.segments, t.path = len(segs), ""
            out[(s.id, t.id)] = np.stack([g.samples for g in segs])
    manifest.sampling_rate = float(rate)
    manifest.timepoints = next(iter(out.values())).shape[-1]
    save_store(manifest, out, args.out)
    _say(f"wrote {manifest.segment_count()} preprocessed segments to {args.out}")
    return EXIT_OK


def cmd_import_csv(args) -> int:
    dims = [d for d in args.dimensions.split(",") if d]
    manifest = import_csv(args.index, args.out, args.rate, dims, _preproc(args), args.name, args.classes)
    _say(f"imported {manifest.segment_count()} segments into {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = experiment_config(args)
    _, data = _dataset(args, cfg)
    spec = cfg.generator_spec(data.channels, data.timepoints)
    result = fit(data, cfg.train, spec, log=_say)
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out, result.generator, result.discriminator, train=cfg.train.__dict__,
                    lambda_l1=cfg.train.lambda_l1, best_epoch=result.history.best_epoch)
    result.history.to_csv(args.out / "history.csv")
    _say(f"best epoch {result.history.best_epoch}; checkpoint in {args.out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    manifest, data = _dataset(args)
    if args.features == "fusenet":
        if args.checkpoint is None:
            raise ConfigurationError("fusenet features need --checkpoint")
        gen, _, _ = load_checkpoint(args.checkpoint)
        F = encode_many(data.X, gen)
    else:
        family = FEATURES[args.features]
        bands = usable_bands(data.sampling_rate) if family != "time_domain" else None
        raw = extract_matrix(data.X, family, data.sampling_rate, bands)
        F = fit_pca(raw, args.latent).transform(raw)
    args.out.mkdir(parents=True, exist_ok=True)
    save_tensor(args.out / "features.eft", np.asarray(F, dtype=np.float64))
    with open(args.out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "trial", "segment"] + [f"f{i}" for i in range(F.shape[1])])
        for i in range(len(F)):
            w.writerow([data.subject[i], data.trial[i].split("/", 1)[-1], int(data.index[i])]
                       + [repr(float(v)) for v in F[i]])
    _say(f"wrote {F.shape[0]}x{F.shape[1]} {args.features} features to {args.out}")
    return EXIT_OK


def _read_features(path: Path):
    try:
        with open(path) as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read features {path}: {exc}") from exc
    if not rows or rows[0][:3] != ["subject", "trial", "segment"]:
        raise DataError(f"{path}: expected subject,trial,segment,f0,... header")
    body = rows[1:]
    ident = [(r[0], r[1], int(r[2])) for r in body]
    F = np.array([[float(v) for v in r[3:]] for r in body])
    return ident, F


def cmd_decode(args) -> int:
    from .evaluation import _DECODE, check_leakage, loocv_folds

    cfg = experiment_config(args)
    manifest, data = _dataset(args, cfg)
    ident, F = _read_features(args.feature_file)
    key = {(s, t.split("/", 1)[-1], i): n for n, (s, t, i) in enumerate(
        zip(data.subject, data.trial, data.index.tolist()))}
    try:
        order = np.array([key[k] for k in ident])
    except KeyError as exc:
        raise DataError(f"{args.feature_file}: segment {exc.args[0]} is not in the manifest") from exc
    subject = data.subject[order]
    if args.test_subject not in set(subject.tolist()):
        raise ConfigurationError(f"unknown test subject {args.test_subject!r}")
    plan = next(p for p in loocv_folds(data, cfg.seed) if p.test_subject == args.test_subject)
    test, train = subject == plan.test_subject, np.isin(subject, plan.candidates)
    check_leakage(plan, subject[train])
    if cfg.standardize == "subject":
        F = standardize_by_group(F, subject)
    args.out.mkdir(parents=True, exist_ok=True)
    out = args.out / "predictions.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "trial", "segment", "dimension", "predicted", "true"])
        for dim, labels in data.labels.items():
            y = labels[order]
            sub, _ = subsample_training(LabeledFeatures(F[train], y[train]), cfg.decode.eta, plan.seed)
            result = _DECODE[cfg.decoder](sub, F[test], replace(cfg.decode, seed=plan.seed))
            for n, p in zip(np.flatnonzero(test), result.predictions):
                w.writerow([*ident[n], dim, int(p), int(y[n])])
    _say(f"wrote predictions for subject {plan.test_subject} to {out}")
    return EXIT_OK


def _emit(report, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    emit_report(report, out / f"{stem}.csv")
    emit_report(report, out / f"{stem}.json")
    write_predictions(report, out / f"{stem}_predictions.csv")


def cmd_evaluate(args) -> int:
    cfg = experiment_config(args)
    _, data = _dataset(args, cfg)
    report = run_experiment(data, cfg)
    _emit(report, args.out, "report")
    table = format_table({cfg.label: report}, ("p_acc", "p_f", "nmi"))
    (args.out / "table.txt").write_text(table)
    sys.stdout.write(table)
    for row in report.failed():
        _say(f"fold {row.fold} {row.dimension}: {row.status}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = experiment_config(args)
    _, data = _dataset(args, cfg)
    grid = {}
    if args.kappa_grid:
        grid["kappa"] = args.kappa_grid
    if args.eta_grid:
        grid["eta"] = args.eta_grid
    if args.timepoints_grid:
        grid["timepoints"] = args.timepoints_grid
    if not grid:
        raise ConfigurationError("sweep needs at least one of --kappa-grid, --eta-grid, --timepoints-grid")
    result = sweep(data, grid, cfg, args.timing_repeats)
    args.out.mkdir(parents=True, exist_ok=True)
    for point, report in zip(result.points, result.reports):
        stem = f"T{point['timepoints']}_k{point['kappa']}_eta{point['eta']:g}"
        emit_report(report, args.out / f"{stem}.csv")
        emit_report(report, args.out / f"{stem}.json")
    result.write_timing(args.out / "timing.csv")
    for row in result.timing_table():
        _say(", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_report(args) -> int:
    reports = {}
    for path in args.reports:
        rep = load_report(path)
        reports[rep.meta.get("label") or Path(path).stem] = rep
    table = format_table(reports, tuple(args.metrics))
    sys.stdout.write(table)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "table.txt").write_text(table)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "import-csv": cmd_import_csv,
    "train": cmd_train,
    "extract": cmd_extract,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        args = apply_config(args)
        return COMMANDS[args.command](args)
    except EEGFuseNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
