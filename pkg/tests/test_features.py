import math

import numpy as np
import pytest

from _oracles import planted_blobs
from eegfusenet.errors import ConfigurationError, ContractError, DimensionError
from eegfusenet.features import (
    BANDS,
    TIME_STATS,
    FeatureVector,
    band_power,
    differential_entropy,
    extract_matrix,
    fit_pca,
    gaussian_affinity,
    gaussian_de,
    hjorth,
    map_to_dim,
    pca_kmeans_baseline,
    periodogram,
    simple_graph_baseline,
    time_domain_features,
    usable_bands,
)
from eegfusenet.hypergraph import DecodeConfig, Hypergraph, LabeledFeatures, graph_laplacian, laplacian

RATE = 128.0


def sine(freq, seconds=4.0, rate=RATE, amp=1.0):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


# -- time domain -----------------------------------------------------------------------


def test_sinusoid_mobility():
    f = 5.0
    _, mobility, _ = hjorth(sine(f, seconds=20))
    # the first difference scales a sampled sinusoid by 2 sin(pi f / rate)
    assert mobility == pytest.approx(2 * math.sin(math.pi * f / RATE), rel=1e-3)
    assert mobility == pytest.approx(2 * math.pi * f / RATE, rel=5e-3)


def test_noise_std_oracle():
    x = np.random.default_rng(0).standard_normal(10_000)
    v = time_domain_features(x).values
    se = 1 / math.sqrt(2 * (len(x) - 1))
    assert abs(v[TIME_STATS.index("std")] - 1.0) < 3 * se


def test_time_domain_layout_and_flat_channel():
    x = np.vstack([np.random.default_rng(1).normal(size=50), np.full(50, 3.0)])
    v = time_domain_features(x, subject="s1").values
    assert v.shape == (2 * len(TIME_STATS),)
    flat = v[len(TIME_STATS):]
    assert flat[TIME_STATS.index("mean")] == 3.0
    assert np.all(flat[1:] == 0.0)


def test_short_segment_rejected():
    with pytest.raises(ContractError):
        time_domain_features(np.zeros((1, 2)))


# -- band power -----------------------------------------------------------------------


def test_alpha_dominates_for_10hz():
    v = band_power(sine(10.0)[None], RATE).values
    alpha = v[list(BANDS).index("alpha")]
    others = np.delete(v, list(BANDS).index("alpha"))
    assert alpha > 10 * others.max()


def test_parseval():
    # bin-centred tones more than two bins apart stay orthogonal under the Hann weighting
    x = sine(5.0) + 0.5 * sine(20.0) + 0.3 * sine(33.0)
    f, p = periodogram(x, RATE)
    total = p.sum() * (f[1] - f[0])
    assert total == pytest.approx(x.var(), rel=0.01)


def test_dc_offset_invariance():
    x = np.random.default_rng(3).normal(size=(3, 256))
    np.testing.assert_allclose(band_power(x, RATE).values, band_power(x + 40.0, RATE).values, atol=1e-10)
    np.testing.assert_allclose(differential_entropy(x, RATE).values, differential_entropy(x + 40.0, RATE).values,
                               atol=1e-9)


def test_band_checks():
    with pytest.raises(ConfigurationError, match="Nyquist"):
        band_power(np.zeros((1, 64)), 64.0)
    with pytest.raises(ConfigurationError, match="resolution"):
        band_power(np.zeros((1, 16)), RATE, {"narrow": (8.0, 9.0)})
    assert usable_bands(64.0)["gamma"] == (30.0, 32.0)
    assert "gamma" not in usable_bands(50.0)
    with pytest.raises(ConfigurationError):
        usable_bands(6.0)


# -- differential entropy -------------------------------------------------------------


def test_gaussian_de_constants():
    assert gaussian_de(1 / (2 * math.pi * math.e)) == pytest.approx(0.0, abs=1e-15)
    assert gaussian_de(1.0) == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=1e-15)
    assert gaussian_de(1.0) == pytest.approx(1.41894, abs=1e-5)
    assert np.isfinite(gaussian_de(0.0))


def test_doubling_amplitude_adds_log_two():
    x = np.random.default_rng(4).normal(size=(2, 512))
    a, b = differential_entropy(x, RATE).values, differential_entropy(2 * x, RATE).values
    np.testing.assert_allclose(b - a, math.log(2), atol=1e-12)


def test_extract_matrix_agrees_with_per_segment():
    X = np.random.default_rng(5).normal(size=(4, 3, 128))
    bands = usable_bands(64.0)
    for family, fn in [("time_domain", lambda s: time_domain_features(s)),
                       ("band_power", lambda s: band_power(s, 64.0, bands)),
                       ("differential_entropy", lambda s: differential_entropy(s, 64.0, bands))]:
        M = extract_matrix(X, family, 64.0, bands if family != "time_domain" else None)
        for i in range(4):
            np.testing.assert_allclose(M[i], fn(X[i]).values, atol=1e-12)
    with pytest.raises(ConfigurationError):
        extract_matrix(X, "eegfusenet", 64.0)
    with pytest.raises(DimensionError):
        extract_matrix(X[0], "time_domain", 64.0)


def test_feature_vector_guards():
    with pytest.raises(ConfigurationError):
        FeatureVector("wavelet", np.zeros(3))
    with pytest.raises(ContractError):
        FeatureVector("band_power", np.array([np.inf]))


# -- PCA -------------------------------------------------------------------------------


def test_pca_full_rank_is_rotation():
    X = np.random.default_rng(6).normal(size=(50, 4))
    Z = map_to_dim(X, 4, X)
    np.testing.assert_allclose(np.linalg.norm(Z, axis=1), np.linalg.norm(X - X.mean(0), axis=1), atol=1e-12)


def test_pca_ordering_and_tail_identity():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(200, 6)) * np.array([5, 4, 3, 2, 1, 0.5])
    full = fit_pca(X, 6)
    assert np.all(np.diff(full.variances) <= 0)
    pca = fit_pca(X, 3)
    recon = pca.inverse(pca.transform(X))
    err = np.sum((X - recon) ** 2) / (len(X) - 1)
    assert err == pytest.approx(full.variances[3:].sum(), rel=1e-10)


def test_pca_zero_pads_short_inputs():
    X = np.random.default_rng(8).normal(size=(20, 3))
    assert map_to_dim(X, 8, X).shape == (20, 8)
    assert np.all(map_to_dim(X, 8, X)[:, 3:] == 0)
    with pytest.raises(DimensionError):
        fit_pca(X, 2).transform(np.zeros((1, 4)))


# -- simple decoders ---------------------------------------------------------------------


@pytest.mark.parametrize("decoder", [pca_kmeans_baseline, simple_graph_baseline])
def test_baselines_recover_planted_blobs(decoder):
    X, y = planted_blobs(0, n=200, k=2, dim=16, separation=12.0)
    cfg = DecodeConfig(latent=8)
    res = decoder(LabeledFeatures(X[:50], y[:50]), X[50:], cfg)
    assert np.all(res.predictions == y[50:])
    again = decoder(LabeledFeatures(X[:50], y[:50]), X[50:], cfg)
    np.testing.assert_array_equal(res.clusters, again.clusters)


def test_simple_graph_matches_clique_expansion():
    X = np.random.default_rng(9).normal(size=(3, 2))
    A = gaussian_affinity(X)
    pairs = [(0, 1), (0, 2), (1, 2)]
    hyper = laplacian(Hypergraph.from_edges(3, pairs, [A[i, j] for i, j in pairs]))
    np.testing.assert_allclose(graph_laplacian(A), 2 * hyper, atol=1e-12)
