"""Corpus handling: preprocessing, segmentation, labels, storage, synthetic EEG."""

from __future__ import annotations

import csv
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import signal

from .autodiff.io import load_tensor, save_tensor
from .errors import ConfigurationError, ContractError, IntegrityError, ManifestError


# -- preprocessing ---------------------------------------------------------------


@dataclass
class PreprocConfig:
    """Every stage can be switched off; ``None`` disables a stage."""

    bandpass: tuple[float, float] | None = (4.0, 45.0)
    notch: float | None = None
    reref: bool = True
    target_rate: float | None = None
    segment_seconds: float = 1.0
    filter_order: int = 4

    def validate(self, rate: float) -> None:
        nyq = rate / 2.0
        if self.bandpass is not None:
            lo, hi = self.bandpass
            if not 0 < lo < hi:
                raise ConfigurationError(f"band-pass edges must satisfy 0 < low < high, got {self.bandpass}")
            if hi >= nyq:
                raise ConfigurationError(f"band-pass high edge {hi} Hz is not below Nyquist {nyq} Hz")
        if self.notch is not None and not 0 < self.notch < nyq:
            raise ConfigurationError(f"notch {self.notch} Hz outside (0, {nyq})")
        if self.segment_seconds <= 0:
            raise ConfigurationError("segment length must be positive")
        if self.target_rate is not None and self.target_rate <= 0:
            raise ConfigurationError("target rate must be positive")

    @classmethod
    def identity(cls) -> "PreprocConfig":
        return cls(bandpass=None, notch=None, reref=False, target_rate=None)


def _safe_filtfilt(sos, x):
    padlen = min(3 * (2 * len(sos) + 1), x.shape[-1] - 1)
    return signal.sosfiltfilt(sos, x, axis=-1, padlen=max(padlen, 0))


def bandpass(x: np.ndarray, rate: float, low: float, high: float, order: int = 4) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    if high >= rate / 2:
        raise ConfigurationError(f"band {low}-{high} Hz above Nyquist {rate / 2} Hz")
    sos = signal.butter(order, [low, high], btype="bandpass", fs=rate, output="sos")
    return _safe_filtfilt(sos, x)


def preprocess(raw: np.ndarray, rate: float, config: PreprocConfig | None = None) -> tuple[np.ndarray, float]:
    """Common-average reference, zero-phase band-pass, optional notch, resample.

    Returns the processed ``[C, N']`` trial and its sampling rate.
    """
    config = config or PreprocConfig()
    config.validate(rate)
    x = np.asarray(raw, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"expected a [channels, samples] trial, got shape {x.shape}")
    if config.reref:
        x = x - x.mean(axis=0, keepdims=True)
    if config.bandpass is not None:
        x = bandpass(x, rate, *config.bandpass, order=config.filter_order)
    if config.notch is not None:
        b, a = signal.iirnotch(config.notch, Q=30.0, fs=rate)
        x = signal.filtfilt(b, a, x, axis=-1)
    out_rate = rate
    if config.target_rate is not None and config.target_rate != rate:
        from fractions import Fraction

        frac = Fraction(config.target_rate / rate).limit_denominator(1000)
        x = signal.resample_poly(x, frac.numerator, frac.denominator, axis=-1)
        out_rate = float(config.target_rate)
    return x, out_rate


# -- segments --------------------------------------------------------------------


@dataclass
class EegSegment:
    subject: str
    trial: str
    index: int
    samples: np.ndarray


def segment_trial(trial: np.ndarray, rate: float, seconds: float = 1.0, subject: str = "", trial_id: str = "") -> list[EegSegment]:
    """Cut consecutive non-overlapping windows; the trailing remainder is dropped."""
    trial = np.asarray(trial)
    width = int(round(rate * seconds))
    if width < 1:
        raise ContractError("window shorter than one sample")
    count = trial.shape[-1] // width
    if count < 1:
        raise ContractError(f"trial of {trial.shape[-1]} samples is shorter than one {width}-sample window")
    return [
        EegSegment(subject, trial_id, i, trial[:, i * width : (i + 1) * width].copy()) for i in range(count)
    ]


def binarize_label(score: float, threshold: float = 5.0) -> int:
    """1 ("high") iff ``score > threshold``; scores live on the 1-9 rating scale."""
    if not (1.0 <= score <= 9.0):
        raise ContractError(f"rating {score} outside [1, 9]")
    return int(score > threshold)


@dataclass
class SegmentSet:
    """Flat, array-backed view of many segments.

    ``trial`` holds keys that are unique across subjects (``subject/trial``).
    """

    X: np.ndarray
    subject: np.ndarray
    trial: np.ndarray
    index: np.ndarray
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    sampling_rate: float = 0.0

    def __post_init__(self):
        n = len(self.X)
        for name in ("subject", "trial", "index"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"SegmentSet.{name} has {len(getattr(self, name))} entries, expected {n}")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def channels(self) -> int:
        return self.X.shape[1]

    @property
    def timepoints(self) -> int:
        return self.X.shape[2]

    def subset(self, mask) -> "SegmentSet":
        mask = np.asarray(mask)
        return SegmentSet(
            self.X[mask],
            self.subject[mask],
            self.trial[mask],
            self.index[mask],
            {k: v[mask] for k, v in self.labels.items()},
            self.sampling_rate,
        )

    def subjects(self) -> list[str]:
        return sorted(set(self.subject.tolist()))

    def trials(self) -> list[str]:
        return sorted(set(self.trial.tolist()))

    def with_labels(self, labels: Mapping[str, np.ndarray]) -> "SegmentSet":
        return SegmentSet(self.X, self.subject, self.trial, self.index, dict(labels), self.sampling_rate)


# -- manifest -----------------------------------------------------------------------


@dataclass
class TrialRecord:
    id: str
    segments: int
    labels: dict[str, dict]
    path: str


@dataclass
class SubjectRecord:
    id: str
    trials: list[TrialRecord]


@dataclass
class DatasetManifest:
    name: str
    sampling_rate: float
    channels: int
    timepoints: int
    dimensions: list[str]
    n_classes: int
    subjects: list[SubjectRecord]
    root: Path | None = None

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("root")
        return out

    def segment_count(self) -> int:
        return sum(t.segments for s in self.subjects for t in s.trials)

    def subject_ids(self) -> list[str]:
        return [s.id for s in self.subjects]


def _require(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ManifestError(f"manifest field {where}.{key} is missing")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ManifestError(f"manifest field {where}.{key} has type {type(value).__name__}")
    return value


def parse_manifest(text: str, root: Path | None = None) -> DatasetManifest:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    subjects = []
    seen = set()
    for si, s in enumerate(_require(raw, "subjects", list, "")):
        sid = str(_require(s, "id", (str, int), f"subjects[{si}]"))
        if sid in seen:
            raise ManifestError(f"manifest field subjects[{si}].id duplicates subject {sid!r}")
        seen.add(sid)
        trials = []
        trial_list = _require(s, "trials", list, f"subjects[{si}]")
        if not trial_list:
            raise ManifestError(f"manifest field subjects[{si}].trials is empty")
        for ti, t in enumerate(trial_list):
            where = f"subjects[{si}].trials[{ti}]"
            count = _require(t, "segments", int, where)
            if count < 1:
                raise ManifestError(f"manifest field {where}.segments must be >= 1")
            trials.append(
                TrialRecord(
                    str(_require(t, "id", (str, int), where)),
                    count,
                    dict(_require(t, "labels", dict, where)),
                    _require(t, "path", str, where),
                )
            )
        subjects.append(SubjectRecord(sid, trials))
    if not subjects:
        raise ManifestError("manifest field subjects is empty")
    return DatasetManifest(
        name=_require(raw, "name", str, ""),
        sampling_rate=float(_require(raw, "sampling_rate", (int, float), "")),
        channels=_require(raw, "channels", int, ""),
        timepoints=_require(raw, "timepoints", int, ""),
        dimensions=list(_require(raw, "dimensions", list, "")),
        n_classes=_require(raw, "n_classes", int, ""),
        subjects=subjects,
        root=root,
    )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise IntegrityError(f"manifest {path} not found")
    manifest = parse_manifest(path.read_text(), root=path.parent)
    for s in manifest.subjects:
        for t in s.trials:
            if not (manifest.root / t.path).exists():
                raise IntegrityError(f"blob {t.path} for subject {s.id} trial {t.id} is missing")
    return manifest


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", text)


def save_store(manifest: DatasetManifest, segments: Mapping[tuple[str, str], np.ndarray], path) -> Path:
    """Write ``manifest.json`` and one ``[S, C, T]`` float32 blob per trial."""
    root = Path(path)
    (root / "blobs").mkdir(parents=True, exist_ok=True)
    for s in manifest.subjects:
        for t in s.trials:
            arr = np.asarray(segments[(s.id, t.id)], dtype="<f4")
            if arr.shape != (t.segments, manifest.channels, manifest.timepoints):
                raise IntegrityError(f"trial {s.id}/{t.id}: array shape {arr.shape} disagrees with manifest")
            if not t.path:
                t.path = f"blobs/{_slug(s.id)}__{_slug(t.id)}.eft"
            save_tensor(root / t.path, arr)
    manifest.root = root
    (root / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=1))
    return root


def load_store(manifest: DatasetManifest) -> dict[tuple[str, str], np.ndarray]:
    out = {}
    for s in manifest.subjects:
        for t in s.trials:
            arr = load_tensor(manifest.root / t.path)
            if arr.shape != (t.segments, manifest.channels, manifest.timepoints):
                raise IntegrityError(f"blob {t.path}: shape {arr.shape} disagrees with manifest")
            out[(s.id, t.id)] = arr
    return out


def trial_label(trial: TrialRecord, dimension: str) -> int:
    entry = trial.labels.get(dimension)
    if entry is None:
        raise ManifestError(f"trial {trial.id} has no label for dimension {dimension!r}")
    if entry.get("label") is not None:
        return int(entry["label"])
    return binarize_label(float(entry["score"]))


def load_segments(manifest: DatasetManifest) -> SegmentSet:
    return segments_from_store(manifest, load_store(manifest))


def import_csv(index_path, out_dir, rate: float, dimensions: Sequence[str], config: PreprocConfig | None = None,
               name: str = "imported", n_classes: int = 2) -> DatasetManifest:
    """Build a store from an index CSV with columns ``subject,trial,path,<dimension>...``.

    Each referenced CSV holds one trial with one row per channel.  Dimension
    columns hold ratings on the 1-9 scale (binarized at 5) or, for
    ``n_classes > 2``, integer class labels.
    """
    index_path = Path(index_path)
    rows = list(csv.DictReader(index_path.open()))
    if not rows:
        raise ManifestError(f"{index_path} lists no trials")
    config = config or PreprocConfig(bandpass=None, reref=False)
    by_subject: dict[str, list[TrialRecord]] = {}
    store = {}
    channels = width = out_rate = None
    for line, row in enumerate(rows, start=2):
        for key in ("subject", "trial", "path"):
            if not row.get(key):
                raise ManifestError(f"{index_path}: line {line} lacks field {key!r}")
        trial_path = (index_path.parent / row["path"]).resolve()
        if not trial_path.exists():
            raise IntegrityError(f"{index_path}: line {line} references missing file {row['path']}")
        raw = np.loadtxt(trial_path, delimiter=",", ndmin=2)
        x, out_rate = preprocess(raw, rate, config)
        segs = segment_trial(x, out_rate, config.segment_seconds)
        arr = np.stack([s.samples for s in segs])
        if channels is None:
            channels, width = arr.shape[1], arr.shape[2]
        elif arr.shape[1] != channels:
            raise IntegrityError(f"{row['path']}: {arr.shape[1]} channels, expected {channels}")
        labels = {}
        for d in dimensions:
            value = row.get(d)
            if value in (None, ""):
                raise ManifestError(f"{index_path}: line {line} lacks dimension {d!r}")
            if n_classes > 2:
                labels[d] = {"score": None, "label": int(value)}
            else:
                score = float(value)
                labels[d] = {"score": score, "label": binarize_label(score)}
        rec = TrialRecord(str(row["trial"]), len(segs), labels, "")
        by_subject.setdefault(str(row["subject"]), []).append(rec)
        store[(str(row["subject"]), rec.id)] = arr
    manifest = DatasetManifest(
        name, float(out_rate), int(channels), int(width), list(dimensions), n_classes,
        [SubjectRecord(s, t) for s, t in by_subject.items()],
    )
    save_store(manifest, store, out_dir)
    return manifest


# -- synthetic corpus ------------------------------------------------------------


@dataclass
class SynthSpec:
    subjects: int = 6
    trials: int = 10
    classes: int = 2
    channels: int = 8
    rate: float = 64.0
    segments_per_trial: int = 30
    seconds_per_segment: float = 1.0
    dimensions: tuple[str, ...] = ("valence",)
    amplitude: float = 1.5
    subject_jitter: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        for name in ("subjects", "trials", "classes", "channels", "segments_per_trial"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"synthetic {name} must be positive")
        if self.classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.rate <= 0 or self.seconds_per_segment <= 0:
            raise ConfigurationError("rate and segment length must be positive")


def class_frequencies(classes: int, rate: float, dimension: int = 0) -> np.ndarray:
    """Planted oscillation frequency of each class, kept inside (0.08, 0.4)·rate."""
    lo, hi = 0.09 * rate, 0.36 * rate
    grid = np.linspace(lo, hi, classes)
    return grid + dimension * (hi - lo) / (2 * classes + 1)


def _pink_noise(rng: np.random.Generator, channels: int, n: int) -> np.ndarray:
    white = rng.standard_normal((channels, n))
    spec = np.fft.rfft(white, axis=-1)
    f = np.arange(spec.shape[-1], dtype=float)
    f[0] = 1.0
    spec /= np.sqrt(f)
    out = np.fft.irfft(spec, n=n, axis=-1)
    return out / out.std(axis=-1, keepdims=True)


def synth_dataset(spec: SynthSpec) -> tuple[DatasetManifest, dict[tuple[str, str], np.ndarray]]:
    """Planted-signal corpus: each class adds an oscillation at its own frequency
    with its own spatial pattern on top of 1/f background noise."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    width = int(round(spec.rate * spec.seconds_per_segment))
    n = width * spec.segments_per_trial
    t = np.arange(n) / spec.rate
    ndim = len(spec.dimensions)
    freqs = [class_frequencies(spec.classes, spec.rate, d) for d in range(ndim)]
    patterns = rng.standard_normal((ndim, spec.classes, spec.channels))
    patterns /= np.linalg.norm(patterns, axis=-1, keepdims=True) / np.sqrt(spec.channels)

    subjects, store = [], {}
    for si in range(spec.subjects):
        sid = f"s{si + 1:02d}"
        gain = 1.0 + spec.subject_jitter * rng.uniform(-1, 1)
        warp = patterns + spec.subject_jitter * rng.standard_normal(patterns.shape)
        assign = [np.resize(np.arange(spec.classes), spec.trials) for _ in range(ndim)]
        for a in assign:
            rng.shuffle(a)
        trials = []
        for ti in range(spec.trials):
            tid = f"t{ti + 1:02d}"
            x = _pink_noise(rng, spec.channels, n)
            labels = {}
            for d, dim in enumerate(spec.dimensions):
                k = int(assign[d][ti])
                phase = rng.uniform(0, 2 * np.pi)
                wave = np.sin(2 * np.pi * freqs[d][k] * t + phase)
                x = x + spec.amplitude * gain * warp[d, k][:, None] * wave[None, :]
                if spec.classes == 2:
                    score = float(rng.uniform(5.5, 9.0) if k == 1 else rng.uniform(1.0, 5.0))
                    labels[dim] = {"score": round(score, 3), "label": binarize_label(round(score, 3))}
                else:
                    labels[dim] = {"score": None, "label": k}
            segs = np.stack([s.samples for s in segment_trial(x, spec.rate, spec.seconds_per_segment)])
            store[(sid, tid)] = segs.astype(np.float32)
            trials.append(TrialRecord(tid, len(segs), labels, ""))
        subjects.append(SubjectRecord(sid, trials))
    manifest = DatasetManifest(
        f"synthetic-{spec.subjects}x{spec.trials}x{spec.segments_per_trial}",
        float(spec.rate), spec.channels, width, list(spec.dimensions), spec.classes, subjects,
    )
    return manifest, store


def segments_from_store(manifest: DatasetManifest, store: Mapping[tuple[str, str], np.ndarray]) -> SegmentSet:
    xs, subj, trial, idx = [], [], [], []
    labels: dict[str, list] = {d: [] for d in manifest.dimensions}
    for s in manifest.subjects:
        for t in s.trials:
            arr = store[(s.id, t.id)]
            xs.append(arr)
            subj += [s.id] * len(arr)
            trial += [f"{s.id}/{t.id}"] * len(arr)
            idx += list(range(len(arr)))
            for d in manifest.dimensions:
                labels[d] += [trial_label(t, d)] * len(arr)
    return SegmentSet(
        np.concatenate(xs, axis=0), np.array(subj), np.array(trial), np.array(idx),
        {d: np.array(v, dtype=np.int64) for d, v in labels.items()}, manifest.sampling_rate,
    )


def synth_segments(spec: SynthSpec) -> SegmentSet:
    manifest, store = synth_dataset(spec)
    return segments_from_store(manifest, store)
