"""Leave-one-subject-out experiments, scoring metrics, sweeps and reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, SegmentSet
from .errors import ConfigurationError, ContractError, DataError, LeakageError
from .features import extract_matrix, fit_pca, pca_kmeans_baseline, simple_graph_baseline, usable_bands
from .hypergraph import DecodeConfig, LabeledFeatures, decode_fold, subsample_training
from .model import VARIANTS, GeneratorSpec, encode_many, normalize_variant
from .trainer import TrainConfig, fit

FEATURES = {"fusenet": "eegfusenet", "time": "time_domain", "psd": "band_power", "de": "differential_entropy"}
DECODERS = ("hypergraph", "simple_graph", "pca_kmeans")
STANDARDIZE = ("none", "train", "subject")


# -- folds ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    test_subject: str
    candidates: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if self.test_subject in self.candidates:
            raise LeakageError(f"fold {self.test_subject}: test subject listed among training candidates")


def _subject_ids(source) -> list[str]:
    if isinstance(source, DatasetManifest):
        return source.subject_ids()
    if isinstance(source, SegmentSet):
        return source.subjects()
    return [str(s) for s in source]


def loocv_folds(manifest, seed: int = 0) -> list[FoldPlan]:
    """One fold per subject, ordered by subject id."""
    subjects = sorted(set(_subject_ids(manifest)))
    if len(subjects) < 2:
        raise ContractError(f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}")
    return [
        FoldPlan(s, tuple(o for o in subjects if o != s), seed * 100003 + i)
        for i, s in enumerate(subjects)
    ]


def check_leakage(plan: FoldPlan, train_subjects) -> None:
    """Hard stop if any training segment belongs to the held-out subject."""
    present = set(np.asarray(train_subjects).tolist())
    if plan.test_subject in present:
        raise LeakageError(f"fold {plan.test_subject}: test subject segments reached the training side")
    stray = present - set(plan.candidates)
    if stray:
        raise LeakageError(f"fold {plan.test_subject}: unexpected training subjects {sorted(stray)}")


# -- metrics -------------------------------------------------------------------------


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ContractError(f"labelings must be equal-length vectors, got {pred.shape} and {truth.shape}")
    return pred, truth


def accuracy(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    if len(pred) == 0:
        raise ContractError("cannot score an empty labeling")
    return 100.0 * float(np.mean(pred == truth))


def _binary_f1(pred, truth, positive) -> float:
    tp = int(np.sum((pred == positive) & (truth == positive)))
    fp = int(np.sum((pred == positive) & (truth != positive)))
    fn = int(np.sum((pred != positive) & (truth == positive)))
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 100.0 * 2 * precision * recall / (precision + recall)


def f1_score(pred, truth, positive_class: int = 1, average: str = "binary") -> float:
    """F1 in percent on ``positive_class``; ``average='macro'`` averages over observed classes."""
    pred, truth = _pair(pred, truth)
    if len(pred) == 0:
        raise ContractError("cannot score an empty labeling")
    if average == "binary":
        return _binary_f1(pred, truth, positive_class)
    if average == "macro":
        classes = np.union1d(pred, truth)
        return float(np.mean([_binary_f1(pred, truth, c) for c in classes]))
    raise ConfigurationError(f"unknown F1 average {average!r}")


def contingency(a, b) -> np.ndarray:
    a, b = _pair(a, b)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def nmi(a, b) -> float:
    """``I(a;b) / sqrt(H(a) H(b))`` in nats from the contingency table."""
    table = contingency(a, b).astype(np.float64)
    n = table.sum()
    if n == 0:
        raise ContractError("cannot score an empty labeling")
    pa, pb = table.sum(axis=1) / n, table.sum(axis=0) / n
    ha = -float(np.sum(pa * np.log(pa)))
    hb = -float(np.sum(pb * np.log(pb)))
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    nz = table > 0
    pij = table[nz] / n
    mi = float(np.sum(pij * np.log(pij / np.outer(pa, pb)[nz])))
    return float(min(max(mi / math.sqrt(ha * hb), 0.0), 1.0))


def vote_per_trial(pred, trials) -> tuple[np.ndarray, np.ndarray]:
    """Majority class per trial (ties to the smaller class) and the trial keys in order."""
    pred, trials = np.asarray(pred), np.asarray(trials)
    keys = np.array(sorted(set(trials.tolist())))
    votes = np.array([np.bincount(pred[trials == k]).argmax() for k in keys], dtype=np.int64)
    return votes, keys


# -- configuration ---------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    features: str = "fusenet"
    decoder: str = "hypergraph"
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    model: dict = field(default_factory=dict)
    standardize: str = "subject"
    vote_per_trial: bool = False
    f1_average: str = "binary"
    positive_class: int = 1
    seed: int = 0
    jobs: int = 1
    keep_predictions: bool = True

    def validate(self) -> None:
        if self.features not in FEATURES:
            raise ConfigurationError(f"unknown feature source {self.features!r}; expected one of {sorted(FEATURES)}")
        if self.decoder not in DECODERS:
            raise ConfigurationError(f"unknown decoder {self.decoder!r}; expected one of {list(DECODERS)}")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")
        if self.standardize not in STANDARDIZE:
            raise ConfigurationError(f"standardize must be one of {STANDARDIZE}, got {self.standardize!r}")
        self.train.validate()
        self.decode.validate()

    @property
    def label(self) -> str:
        src = self.train.variant if self.features == "fusenet" else self.features
        return f"{src}+{self.decoder}"

    def generator_spec(self, channels: int, timepoints: int) -> GeneratorSpec:
        kw = {"latent": self.decode.latent, **self.model}
        if "rnn" in self.train.variant and "gru_hidden" not in self.model:
            # the fused vector concatenates both directions
            kw["gru_hidden"] = kw["latent"] // 2
        return GeneratorSpec(variant=self.train.variant, channels=channels, timepoints=timepoints, **kw)


# -- reports ---------------------------------------------------------------------------


@dataclass
class FoldRow:
    fold: str
    dimension: str
    p_acc: float
    p_f: float
    nmi: float
    n_train: int
    n_test: int
    train_s: float
    extract_s: float
    decode_s: float
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


REPORT_COLUMNS = tuple(f.name for f in fields(FoldRow))
PREDICTION_COLUMNS = ("subject", "trial", "segment", "dimension", "predicted", "true")


def _same(a, b) -> bool:
    return a == b or (isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b))


@dataclass
class EvalReport:
    rows: list[FoldRow]
    meta: dict = field(default_factory=dict)
    predictions: list[tuple] = field(default_factory=list, compare=False)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvalReport) or len(self.rows) != len(other.rows) or self.meta != other.meta:
            return False
        return all(
            _same(getattr(r, c), getattr(s, c)) for r, s in zip(self.rows, other.rows) for c in REPORT_COLUMNS
        )

    def dimensions(self) -> list[str]:
        return list(dict.fromkeys(r.dimension for r in self.rows))

    def folds(self) -> list[str]:
        return list(dict.fromkeys(r.fold for r in self.rows))

    def failed(self) -> list[FoldRow]:
        return [r for r in self.rows if not r.ok]

    def values(self, metric: str, dimension: str | None = None) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.rows if r.ok and dimension in (None, r.dimension)])

    def mean(self, metric: str, dimension: str | None = None) -> float:
        v = self.values(metric, dimension)
        return float(v.mean()) if len(v) else float("nan")

    def std(self, metric: str, dimension: str | None = None) -> float:
        v = self.values(metric, dimension)
        return float(v.std()) if len(v) else float("nan")

    def timing(self) -> dict[str, float]:
        """Phase seconds summed over folds (each fold's train/extract counted once)."""
        per_fold = {}
        for r in self.rows:
            t = per_fold.setdefault(r.fold, {"train": r.train_s, "extract": r.extract_s, "decode": 0.0})
            t["decode"] += r.decode_s
        return {k: float(sum(t[k] for t in per_fold.values())) for k in ("train", "extract", "decode")}

    def summary(self) -> dict:
        out = {}
        for d in self.dimensions():
            out[d] = {m: self.mean(m, d) for m in ("p_acc", "p_f", "nmi")}
        out["all"] = {m: self.mean(m) for m in ("p_acc", "p_f", "nmi")}
        return out


def emit_report(report: EvalReport, path, fmt: str | None = None) -> Path:
    """Write ``report`` as CSV (fold rows) or JSON (rows plus metadata)."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(REPORT_COLUMNS)
                for r in report.rows:
                    w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(r, c) for c in REPORT_COLUMNS)])
        elif fmt == "json":
            body = {"meta": report.meta, "columns": list(REPORT_COLUMNS),
                    "rows": [[_json_float(getattr(r, c)) for c in REPORT_COLUMNS] for r in report.rows]}
            path.write_text(json.dumps(body, indent=1))
        else:
            raise ConfigurationError(f"unknown report format {fmt!r}; expected csv or json")
    except OSError as exc:
        raise DataError(f"cannot write report to {path}: {exc}") from exc
    return path


def _json_float(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _row(values) -> FoldRow:
    kinds = {f.name: f.type for f in fields(FoldRow)}
    out = {}
    for name, v in zip(REPORT_COLUMNS, values):
        kind = kinds[name]
        if kind in ("float", float):
            out[name] = float(v)
        elif kind in ("int", int):
            out[name] = int(v)
        else:
            out[name] = str(v)
    return FoldRow(**out)


def load_report(path) -> EvalReport:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read report {path}: {exc}") from exc
    if path.suffix.lower() == ".json":
        body = json.loads(text)
        if tuple(body["columns"]) != REPORT_COLUMNS:
            raise DataError(f"{path}: unexpected report columns")
        return EvalReport([_row(v) for v in body["rows"]], body.get("meta", {}))
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != REPORT_COLUMNS:
        raise DataError(f"{path}: report header must be {','.join(REPORT_COLUMNS)}")
    return EvalReport([_row(v) for v in reader], {})


def write_predictions(report: EvalReport, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        w.writerows(report.predictions)
    return path


def format_table(reports: dict[str, EvalReport], metrics=("p_acc", "p_f")) -> str:
    """Method-by-dimension table of mean (std) per metric, one row per method."""
    dims = list(dict.fromkeys(d for r in reports.values() for d in r.dimensions()))
    names = {"p_acc": "P_acc", "p_f": "P_f", "nmi": "NMI"}
    head = ["Method"] + [f"{d} {names[m]}" for d in dims for m in metrics]
    body = []
    for method, rep in reports.items():
        cells = [method]
        for d in dims:
            for m in metrics:
                mu, sd = rep.mean(m, d), rep.std(m, d)
                cells.append(f"{mu:.4f} ({sd:.4f})" if m == "nmi" else f"{mu:.2f} ({sd:.2f})")
        body.append(cells)
    width = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, width))
    rule = "-+-".join("-" * w for w in width)
    return "\n".join([line(head), rule] + [line(c) for c in body]) + "\n"


# -- experiment ------------------------------------------------------------------------


def shuffle_labels(dataset: SegmentSet, seed: int) -> SegmentSet:
    """Label-permutation control: each dimension's labels permuted across all segments."""
    rng = np.random.default_rng(seed)
    return dataset.with_labels({d: rng.permutation(v) for d, v in dataset.labels.items()})


def resegment(dataset: SegmentSet, timepoints: int) -> SegmentSet:
    """Re-cut each trial's contiguous samples into windows of ``timepoints``."""
    if timepoints < 1:
        raise ConfigurationError("segment length must be positive")
    xs, subj, trial, idx = [], [], [], []
    labels = {d: [] for d in dataset.labels}
    for key in dataset.trials():
        sel = np.flatnonzero(dataset.trial == key)
        sel = sel[np.argsort(dataset.index[sel], kind="stable")]
        stream = np.concatenate(list(dataset.X[sel]), axis=-1)
        n = stream.shape[-1] // timepoints
        for j in range(n):
            xs.append(stream[:, j * timepoints : (j + 1) * timepoints])
            subj.append(dataset.subject[sel[0]])
            trial.append(key)
            idx.append(j)
            for d in labels:
                labels[d].append(dataset.labels[d][sel[0]])
    if not xs:
        raise ContractError(f"no trial is long enough for {timepoints}-sample segments")
    return SegmentSet(np.stack(xs), np.array(subj), np.array(trial), np.array(idx),
                      {d: np.array(v, dtype=np.int64) for d, v in labels.items()}, dataset.sampling_rate)


def _moments(F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu, sd = F.mean(axis=0), F.std(axis=0)
    return mu, np.where(sd > 0, sd, 1.0)


def standardize_by_group(F, groups) -> np.ndarray:
    """Z-score each column within each group (label-free, so usable on the test subject)."""
    F = np.asarray(F, dtype=np.float64)
    groups = np.asarray(groups)
    out = np.empty_like(F)
    for g in np.unique(groups):
        sel = groups == g
        mu, sd = _moments(F[sel])
        out[sel] = (F[sel] - mu) / sd
    return out


@dataclass
class FoldFeatures:
    plan: FoldPlan
    train: np.ndarray
    test: np.ndarray
    train_index: np.ndarray
    test_index: np.ndarray
    train_s: float
    extract_s: float


def fold_features(dataset: SegmentSet, plan: FoldPlan, config: ExperimentConfig) -> FoldFeatures:
    """Fit the feature source on the candidate subjects and featurize both sides."""
    test_mask = dataset.subject == plan.test_subject
    train_mask = np.isin(dataset.subject, plan.candidates)
    if not test_mask.any():
        raise ContractError(f"fold {plan.test_subject}: subject has no segments")
    train_set = dataset.subset(train_mask)
    check_leakage(plan, train_set.subject)
    test_X = dataset.X[test_mask]
    t0 = time.perf_counter()
    if config.features == "fusenet":
        spec = config.generator_spec(dataset.channels, dataset.timepoints)
        tcfg = replace(config.train, seed=plan.seed)
        gen = fit(train_set, tcfg, spec).generator
        t1 = time.perf_counter()
        F_train, F_test = encode_many(train_set.X, gen), encode_many(test_X, gen)
    else:
        t1 = time.perf_counter()
        family = FEATURES[config.features]
        bands = usable_bands(dataset.sampling_rate) if family != "time_domain" else None
        raw_train = extract_matrix(train_set.X, family, dataset.sampling_rate, bands)
        raw_test = extract_matrix(test_X, family, dataset.sampling_rate, bands)
        pca = fit_pca(raw_train, config.decode.latent)
        F_train, F_test = pca.transform(raw_train), pca.transform(raw_test)
    F_train, F_test = np.asarray(F_train, np.float64), np.asarray(F_test, np.float64)
    if config.standardize == "train":
        mu, sd = _moments(F_train)
        F_train, F_test = (F_train - mu) / sd, (F_test - mu) / sd
    elif config.standardize == "subject":
        F_train = standardize_by_group(F_train, train_set.subject)
        F_test = standardize_by_group(F_test, np.zeros(len(F_test)))
    t2 = time.perf_counter()
    return FoldFeatures(plan, F_train, F_test, np.flatnonzero(train_mask), np.flatnonzero(test_mask),
                        t1 - t0, t2 - t1)


_DECODE = {"hypergraph": decode_fold, "simple_graph": simple_graph_baseline, "pca_kmeans": pca_kmeans_baseline}


def decode_features(dataset: SegmentSet, ff: FoldFeatures, config: ExperimentConfig,
                    timing_repeats: int = 1) -> tuple[list[FoldRow], list[tuple]]:
    """Subsample candidates, decode every emotion dimension and score the held-out subject."""
    plan = ff.plan
    check_leakage(plan, dataset.subject[ff.train_index])
    dcfg = replace(config.decode, seed=plan.seed)
    rows, preds = [], []
    for dim in dataset.labels:
        y_all = dataset.labels[dim]
        cands = LabeledFeatures(ff.train, y_all[ff.train_index])
        sub, chosen = subsample_training(cands, dcfg.eta, plan.seed)
        check_leakage(plan, dataset.subject[ff.train_index[chosen]])
        decoder = _DECODE[config.decoder]
        best = math.inf
        for _ in range(timing_repeats):
            t0 = time.perf_counter()
            result = decoder(sub, ff.test, dcfg)
            best = min(best, time.perf_counter() - t0)
        truth = y_all[ff.test_index]
        pred = result.predictions
        if config.keep_predictions:
            for i, p in zip(ff.test_index, pred):
                preds.append((str(dataset.subject[i]), str(dataset.trial[i]).split("/", 1)[-1],
                              int(dataset.index[i]), dim, int(p), int(y_all[i])))
        if config.vote_per_trial:
            trials = dataset.trial[ff.test_index]
            pred, keys = vote_per_trial(pred, trials)
            truth = np.array([truth[trials == k][0] for k in keys])
        rows.append(FoldRow(
            plan.test_subject, dim, accuracy(pred, truth),
            f1_score(pred, truth, config.positive_class, config.f1_average), nmi(pred, truth),
            len(sub), len(ff.test), ff.train_s, ff.extract_s, best,
        ))
    return rows, preds


def _failed_rows(dataset: SegmentSet, plan: FoldPlan, exc: Exception) -> list[FoldRow]:
    msg = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
    nan = float("nan")
    return [FoldRow(plan.test_subject, d, nan, nan, nan, 0, 0, nan, nan, nan, msg) for d in dataset.labels]


def _run_fold(dataset: SegmentSet, plan: FoldPlan, config: ExperimentConfig):
    try:
        ff = fold_features(dataset, plan, config)
        return decode_features(dataset, ff, config)
    except LeakageError:
        raise
    except Exception as exc:  # a broken fold is reported, not fatal
        return _failed_rows(dataset, plan, exc), []


def _meta(dataset: SegmentSet, config: ExperimentConfig) -> dict:
    return {
        "label": config.label,
        "features": config.features,
        "decoder": config.decoder,
        "variant": config.train.variant,
        "kappa": config.decode.kappa,
        "eta": config.decode.eta,
        "latent": config.decode.latent,
        "lambda": config.train.lambda_l1,
        "seed": config.seed,
        "timepoints": dataset.timepoints,
        "segments": len(dataset),
    }


def run_experiment(dataset: SegmentSet, config: ExperimentConfig | None = None) -> EvalReport:
    """Leave-one-subject-out run over every emotion dimension of ``dataset``."""
    config = config or ExperimentConfig()
    config.validate()
    if not dataset.labels:
        raise ContractError("dataset carries no emotion labels")
    plans = loocv_folds(dataset, config.seed)
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            outcomes = list(pool.map(_run_fold, [dataset] * len(plans), plans, [config] * len(plans)))
    else:
        outcomes = [_run_fold(dataset, p, config) for p in plans]
    rows = [r for rs, _ in outcomes for r in rs]
    preds = [p for _, ps in outcomes for p in ps]
    return EvalReport(rows, _meta(dataset, config), preds)


# -- sweeps ----------------------------------------------------------------------------


@dataclass
class SweepResult:
    points: list[dict]
    reports: list[EvalReport]

    def timing_table(self) -> list[dict]:
        return [{**p, **{f"{k}_s": v for k, v in r.timing().items()}} for p, r in zip(self.points, self.reports)]

    def write_timing(self, path) -> Path:
        table = self.timing_table()
        keys = list(table[0]) if table else []
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(table)
        return Path(path)


def sweep(dataset: SegmentSet, grid: dict, config: ExperimentConfig | None = None,
          timing_repeats: int = 1) -> SweepResult:
    """One experiment per point of the product grid over ``timepoints``, ``kappa`` and ``eta``.

    Features depend only on the segment length, so they are computed once per
    length and reused across decoder settings.
    """
    config = config or ExperimentConfig()
    config.validate()
    unknown = set(grid) - {"timepoints", "kappa", "eta"}
    if unknown:
        raise ConfigurationError(f"unknown sweep axes {sorted(unknown)}")
    lengths = list(grid.get("timepoints", [dataset.timepoints]))
    kappas = list(grid.get("kappa", [config.decode.kappa]))
    etas = list(grid.get("eta", [config.decode.eta]))
    if not (lengths and kappas and etas):
        raise ConfigurationError("sweep grid is empty")
    points, reports = [], []
    for T in lengths:
        data = dataset if T == dataset.timepoints else resegment(dataset, T)
        plans = loocv_folds(data, config.seed)
        cache = {}
        for plan in plans:
            try:
                cache[plan.test_subject] = fold_features(data, plan, config)
            except LeakageError:
                raise
            except Exception as exc:
                cache[plan.test_subject] = exc
        for k in kappas:
            for e in etas:
                cfg = replace(config, decode=replace(config.decode, kappa=int(k), eta=float(e)))
                cfg.validate()
                rows, preds = [], []
                for plan in plans:
                    ff = cache[plan.test_subject]
                    if isinstance(ff, Exception):
                        rows += _failed_rows(data, plan, ff)
                        continue
                    try:
                        r, p = decode_features(data, ff, cfg, timing_repeats)
                    except LeakageError:
                        raise
                    except Exception as exc:
                        r, p = _failed_rows(data, plan, exc), []
                    rows += r
                    preds += p
                points.append({"timepoints": int(T), "kappa": int(k), "eta": float(e)})
                reports.append(EvalReport(rows, _meta(data, cfg), preds))
    return SweepResult(points, reports)


def feature_source_names() -> list[str]:
    return list(FEATURES) + [v.replace("_", "-") for v in VARIANTS]


def parse_feature_source(features: str, variant: str | None = None) -> tuple[str, str | None]:
    """Map CLI feature/variant flags to (feature source, variant)."""
    if features in FEATURES:
        return features, normalize_variant(variant) if variant else None
    return "fusenet", normalize_variant(features)
