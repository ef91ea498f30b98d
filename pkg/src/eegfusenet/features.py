"""Hand-crafted EEG features and two simple decoders used as comparison arms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal, stats
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, ContractError, DimensionError
from .hypergraph import (
    ClusterResult,
    DecodeConfig,
    _joint,
    decode_laplacian,
    graph_laplacian,
    kmeans,
    majority_map,
    mean_pairwise_distance,
)

FAMILIES = ("time_domain", "band_power", "differential_entropy", "eegfusenet")
BANDS = {"theta": (4.0, 8.0), "alpha": (8.0, 13.0), "beta": (13.0, 30.0), "gamma": (30.0, 45.0)}
DE_FLOOR = 1e-12
DE_ORDER = 4
TIME_STATS = ("mean", "std", "diff1", "diff2", "activity", "mobility", "complexity", "skewness", "kurtosis")


@dataclass
class FeatureVector:
    family: str
    values: np.ndarray
    subject: str | None = None
    trial: str | None = None
    index: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown feature family {self.family!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ContractError(f"{self.family} feature vector contains non-finite values")


def _segment(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2:
        raise DimensionError(f"segment must be [C, T], got shape {x.shape}")
    return x


def _batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise DimensionError(f"segments must be [N, C, T], got shape {X.shape}")
    return X


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def hjorth(x) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Activity, mobility and complexity along the last axis (zero ratios on flat input)."""
    x = np.asarray(x, dtype=np.float64)
    d1 = np.diff(x, axis=-1)
    d2 = np.diff(d1, axis=-1)
    v0, v1, v2 = x.var(axis=-1), d1.var(axis=-1), d2.var(axis=-1)
    mobility = _ratio(np.sqrt(v1), np.sqrt(v0))
    complexity = _ratio(_ratio(np.sqrt(v2), np.sqrt(v1)), mobility)
    return v0, mobility, complexity


def _time_domain(X: np.ndarray) -> np.ndarray:
    if X.shape[-1] < 3:
        raise ContractError(f"time-domain features need T >= 3, got {X.shape[-1]}")
    d1 = np.diff(X, axis=-1)
    d2 = np.diff(d1, axis=-1)
    activity, mobility, complexity = hjorth(X)
    live = np.ptp(X, axis=-1) > 0
    skew, kurt = np.zeros(X.shape[:-1]), np.zeros(X.shape[:-1])
    if live.any():
        skew[live] = stats.skew(X[live], axis=-1)
        kurt[live] = stats.kurtosis(X[live], axis=-1)
    cols = [X.mean(axis=-1), X.std(axis=-1), np.abs(d1).mean(axis=-1), np.abs(d2).mean(axis=-1),
            activity, mobility, complexity, skew, kurt]
    return np.stack(cols, axis=-1).reshape(len(X), -1)


def time_domain_features(segment, **identity) -> FeatureVector:
    """Nine statistics per channel, channel-major: see ``TIME_STATS``."""
    return FeatureVector("time_domain", _time_domain(_segment(segment)[None])[0], **identity)


def _check_bands(bands, rate: float, T: int):
    bands = dict(BANDS if bands is None else bands)
    if T < 2:
        raise ContractError(f"spectral features need T >= 2, got {T}")
    nyq = rate / 2.0
    for name, (lo, hi) in bands.items():
        if not 0 <= lo < hi:
            raise ConfigurationError(f"band {name} has invalid edges ({lo}, {hi})")
        if hi > nyq:
            raise ConfigurationError(f"band {name} upper edge {hi} Hz exceeds Nyquist {nyq} Hz")
        if hi - lo < rate / T:
            raise ConfigurationError(f"band {name} is narrower than the {rate / T:.3g} Hz resolution of {T} samples")
    return bands


def usable_bands(rate: float, bands=None) -> dict[str, tuple[float, float]]:
    """The standard bands with upper edges clipped at Nyquist; bands starting beyond it are dropped."""
    nyq = rate / 2.0
    out = {}
    for name, (lo, hi) in dict(BANDS if bands is None else bands).items():
        if lo < nyq:
            out[name] = (lo, min(hi, nyq))
    if not out:
        raise ConfigurationError(f"no frequency band lies below Nyquist {nyq} Hz")
    return out


def periodogram(x, rate: float) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed one-sided power spectral density of each mean-removed row."""
    x = np.asarray(x, dtype=np.float64)
    return signal.periodogram(x, fs=rate, window="hann", detrend="constant", scaling="density", axis=-1)


def _band_power(X: np.ndarray, rate: float, bands) -> np.ndarray:
    bands = _check_bands(bands, rate, X.shape[-1])
    f, p = periodogram(X, rate)
    df = f[1] - f[0]
    cols = [p[..., (f >= lo) & (f < hi)].sum(axis=-1) * df for lo, hi in bands.values()]
    return np.stack(cols, axis=-1).reshape(len(X), -1)


def band_power(segment, rate: float, bands=None, **identity) -> FeatureVector:
    """Spectral power integrated over each band, channel-major."""
    return FeatureVector("band_power", _band_power(_segment(segment)[None], rate, bands)[0], **identity)


def gaussian_de(variance) -> np.ndarray:
    """``0.5 * log(2 pi e var)`` with variance floored at ``DE_FLOOR``."""
    return 0.5 * np.log(2 * np.pi * np.e * np.maximum(np.asarray(variance, dtype=np.float64), DE_FLOOR))


def _differential_entropy(X: np.ndarray, rate: float, bands) -> np.ndarray:
    bands = _check_bands(bands, rate, X.shape[-1])
    X = X - X.mean(axis=-1, keepdims=True)
    padlen = min(X.shape[-1] - 1, 3 * (2 * DE_ORDER + 1))
    nyq = rate / 2.0
    cols = []
    for lo, hi in bands.values():
        if hi >= nyq:
            sos = signal.butter(DE_ORDER, lo, btype="highpass", fs=rate, output="sos")
        else:
            sos = signal.butter(DE_ORDER, [lo, hi], btype="bandpass", fs=rate, output="sos")
        y = signal.sosfiltfilt(sos, X, axis=-1, padlen=padlen)
        cols.append(gaussian_de(y.var(axis=-1)))
    return np.stack(cols, axis=-1).reshape(len(X), -1)


def differential_entropy(segment, rate: float, bands=None, **identity) -> FeatureVector:
    """Gaussian differential entropy of each band-filtered channel, channel-major."""
    return FeatureVector(
        "differential_entropy", _differential_entropy(_segment(segment)[None], rate, bands)[0], **identity
    )


def extract_matrix(X: np.ndarray, family: str, rate: float, bands=None) -> np.ndarray:
    """One family's features for a batch of segments ``[N, C, T]`` -> ``[N, dim]``."""
    X = _batch(X)
    if family == "time_domain":
        F = _time_domain(X)
    elif family == "band_power":
        F = _band_power(X, rate, bands)
    elif family == "differential_entropy":
        F = _differential_entropy(X, rate, bands)
    else:
        raise ConfigurationError(f"{family!r} is not a hand-crafted feature family")
    if not np.all(np.isfinite(F)):
        raise ContractError(f"{family} features contain non-finite values")
    return F


# -- dimensionality mapping -----------------------------------------------------------


@dataclass
class PcaMap:
    mean: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    dim: int

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.mean):
            raise DimensionError(f"expected [N, {len(self.mean)}] features, got {X.shape}")
        Z = (X - self.mean) @ self.components.T
        if Z.shape[1] < self.dim:
            Z = np.concatenate([Z, np.zeros((len(Z), self.dim - Z.shape[1]))], axis=1)
        return Z

    def inverse(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64)[:, : len(self.components)]
        return Z @ self.components + self.mean


def fit_pca(fit_set, dim: int) -> PcaMap:
    """Principal axes of ``fit_set`` (rows are samples), at most ``dim`` of them."""
    F = np.asarray(fit_set, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0:
        raise ContractError("PCA needs a nonempty [N, dim] fit set")
    if dim < 1:
        raise ConfigurationError("target dimension must be positive")
    mean = F.mean(axis=0)
    _, s, vt = np.linalg.svd(F - mean, full_matrices=False)
    keep = min(dim, F.shape[1], vt.shape[0])
    comps = vt[:keep]
    # deterministic orientation: largest-magnitude loading positive
    pivot = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(keep), pivot])[:, None]
    variances = s[:keep] ** 2 / max(len(F) - 1, 1)
    return PcaMap(mean, comps, variances, dim)


def map_to_dim(features, dim: int, fit_set) -> np.ndarray:
    """Project onto ``dim`` principal axes fitted on ``fit_set``; zero-pad short inputs."""
    return fit_pca(fit_set, dim).transform(features)


# -- simple decoders -----------------------------------------------------------------


def pca_kmeans_baseline(train, test, config: DecodeConfig | None = None) -> ClusterResult:
    """PCA (fitted on the joint fold) to ``latent`` dims, k-means, majority mapping."""
    config = config or DecodeConfig()
    config.validate()
    X, y = _joint(train, test)
    Z = map_to_dim(X, config.latent, X)
    clusters = kmeans(Z, config.n_classes, config.seed, config.restarts)
    mapping = majority_map(clusters[: len(y)], y, config.n_classes, config.n_classes)
    return ClusterResult(clusters, mapping, mapping[clusters[len(y):]], len(y))


def gaussian_affinity(X, sigma: float | None = None) -> np.ndarray:
    """Dense ``exp(-d^2 / sigma^2)`` affinity with a zero diagonal."""
    X = np.asarray(X, dtype=np.float64)
    if sigma is None:
        sigma = mean_pairwise_distance(X)
    scale = sigma * sigma if sigma > 0 else 1.0
    A = np.exp(-cdist(X, X, "sqeuclidean") / scale)
    np.fill_diagonal(A, 0.0)
    return np.maximum(A, np.finfo(float).tiny * (1 - np.eye(len(X))))


def simple_graph_baseline(train, test, config: DecodeConfig | None = None) -> ClusterResult:
    """Pairwise Gaussian graph through the same embed, partition and map path."""
    config = config or DecodeConfig()
    config.validate()
    X, y = _joint(train, test)
    return decode_laplacian(graph_laplacian(gaussian_affinity(X)), y, config.n_classes, config.seed, config.restarts)
