import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse
from scipy.spatial.distance import cdist

from _oracles import jacobi_eigenvalues, planted_blobs
from eegfusenet.autodiff import load_tensors
from eegfusenet.errors import ConfigurationError, ContractError, DimensionError
from eegfusenet.evaluation import nmi
from eegfusenet.hypergraph import (
    DecodeConfig,
    Hypergraph,
    LabeledFeatures,
    bottom_eigenpairs,
    decode_fold,
    dump_hypergraph,
    graph_laplacian,
    kmeans,
    kmeans_fit,
    knn_hyperedges,
    laplacian,
    majority_map,
    mean_pairwise_distance,
    spectral_embed,
    subsample_size,
    subsample_training,
)


def random_hypergraph(rng, n, n_edges, max_size=4):
    edges = [rng.choice(n, size=rng.integers(1, max_size + 1), replace=False) for _ in range(n_edges)]
    edges += [[v] for v in range(n)]  # nobody is isolated
    return Hypergraph.from_edges(n, edges, rng.uniform(0.1, 3.0, len(edges)))


def components(n, edges):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for e in edges:
        for v in e[1:]:
            parent[find(v)] = find(e[0])
    return len({find(v) for v in range(n)})


# -- construction ------------------------------------------------------------------


def test_knn_matches_exhaustive_scan():
    X = np.random.default_rng(0).normal(size=(10, 3))
    hg = knn_hyperedges(X, 3)
    for c in range(10):
        dists = sorted((float(np.sum((X[c] - X[u]) ** 2)), u) for u in range(10) if u != c)
        assert hg.members(c) == sorted([c] + [u for _, u in dists[:3]])


def test_knn_ties_prefer_lower_index():
    X = np.array([[0.0], [1.0], [-1.0], [2.0]])
    hg = knn_hyperedges(X, 1)
    assert hg.members(0) == [0, 1]


def test_knn_weights():
    X = np.random.default_rng(1).normal(size=(7, 2))
    hg = knn_hyperedges(X, 2)
    sigma = cdist(X, X).sum() / (7 * 6)
    assert hg.sigma == pytest.approx(sigma)
    for c in range(7):
        others = [u for u in hg.members(c) if u != c]
        expect = sum(np.exp(-np.sum((X[c] - X[u]) ** 2) / sigma**2) for u in others)
        assert hg.w[c] == pytest.approx(expect, rel=1e-12)
    assert mean_pairwise_distance(X[:1]) == 0.0


def test_knn_errors():
    with pytest.raises(ContractError, match="kappa"):
        knn_hyperedges(np.zeros((3, 2)), 3)
    with pytest.raises(ConfigurationError):
        knn_hyperedges(np.zeros((3, 2)), 0)
    with pytest.raises(ContractError, match="non-finite"):
        knn_hyperedges(np.array([[np.nan], [0.0], [1.0]]), 1)


def test_laplacian_is_scale_covariant():
    # sigma tracks the data scale, so the whole construction is scale-free
    X = np.random.default_rng(2).normal(size=(20, 4))
    a, b = laplacian(knn_hyperedges(X, 3)), laplacian(knn_hyperedges(X * 250.0, 3))
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- Laplacian -------------------------------------------------------------------


def test_single_edge_example():
    delta = laplacian(Hypergraph.from_edges(3, [[0, 1, 2]]))
    np.testing.assert_allclose(delta, np.eye(3) - np.ones((3, 3)) / 3, atol=1e-15)
    np.testing.assert_allclose(np.linalg.eigvalsh(delta), [0, 1, 1], atol=1e-10)
    np.testing.assert_allclose(jacobi_eigenvalues(delta), [0, 1, 1], atol=1e-10)


def test_disconnected_copies():
    delta = laplacian(Hypergraph.from_edges(6, [[0, 1, 2], [3, 4, 5]]))
    vals = np.linalg.eigvalsh(delta)
    assert np.sum(np.abs(vals) < 1e-10) == 2


def test_null_vector_is_sqrt_degree():
    hg = random_hypergraph(np.random.default_rng(3), 12, 15)
    delta = laplacian(hg)
    v = np.sqrt(hg.vertex_degrees)
    np.testing.assert_allclose(delta @ v, 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(2, 15), n_edges=st.integers(0, 10))
def test_spectrum_properties(seed, n, n_edges):
    rng = np.random.default_rng(seed)
    edges = [list(rng.choice(n, size=rng.integers(1, min(n, 4) + 1), replace=False)) for _ in range(n_edges)]
    edges += [[v] for v in range(n)]
    delta = laplacian(Hypergraph.from_edges(n, edges, rng.uniform(0.1, 3.0, len(edges))))
    assert np.max(np.abs(delta - delta.T)) <= 1e-10
    vals = np.linalg.eigvalsh(delta)
    assert vals.min() >= -1e-10 and vals.max() <= 2 + 1e-10
    assert np.sum(np.abs(vals) < 1e-9) == components(n, edges)


def test_sparse_and_dense_agree():
    hg = knn_hyperedges(np.random.default_rng(4).normal(size=(60, 3)), 4)
    dense, sp = laplacian(hg, dense=True), laplacian(hg, dense=False)
    assert sparse.issparse(sp)
    np.testing.assert_allclose(sp.toarray(), dense, atol=1e-15)
    va, _ = bottom_eigenpairs(dense, 3)
    vb, _ = bottom_eigenpairs(sp, 3)
    np.testing.assert_allclose(va, vb, atol=1e-9)


def test_pairwise_hyperedges_halve_graph_laplacian():
    rng = np.random.default_rng(5)
    n = 6
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    w = rng.uniform(0.5, 2.0, len(pairs))
    A = np.zeros((n, n))
    for (i, j), wij in zip(pairs, w):
        A[i, j] = A[j, i] = wij
    delta = laplacian(Hypergraph.from_edges(n, pairs, w))
    np.testing.assert_allclose(delta, 0.5 * graph_laplacian(A), atol=1e-12)


def test_graph_laplacian_errors():
    with pytest.raises(ContractError, match="symmetric"):
        graph_laplacian(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ContractError, match="zero degree"):
        graph_laplacian(np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        graph_laplacian(np.zeros((2, 3)))


def test_hypergraph_validation():
    with pytest.raises(ContractError, match="zero degree"):
        laplacian(Hypergraph.from_edges(3, [[0, 1]]))
    with pytest.raises(DimensionError):
        Hypergraph(sparse.csr_matrix(np.ones((2, 2))), np.ones(3))
    with pytest.raises(ContractError, match="positive"):
        Hypergraph.from_edges(2, [[0, 1]], [-1.0]).validate()


# -- eigenpairs and embedding ----------------------------------------------------------------


def test_eigenpair_residuals():
    delta = laplacian(random_hypergraph(np.random.default_rng(6), 25, 30))
    vals, vecs = bottom_eigenpairs(delta, 4)
    assert np.all(np.diff(vals) >= 0)
    for lam, v in zip(vals, vecs.T):
        assert np.linalg.norm(delta @ v - lam * v) < 1e-8
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(4), atol=1e-10)


def test_eigen_errors():
    with pytest.raises(ContractError, match="symmetric"):
        bottom_eigenpairs(np.array([[1.0, 0.5], [0.0, 1.0]]), 1)
    with pytest.raises(ContractError):
        bottom_eigenpairs(np.eye(3), 4)


def test_block_embedding_separates_blocks():
    hg = Hypergraph.from_edges(8, [[0, 1, 2], [1, 2, 3], [4, 5, 6, 7], [5, 6]])
    emb = spectral_embed(laplacian(hg), 2)
    assert np.allclose(emb[:4], emb[0], atol=1e-10)
    assert np.allclose(emb[4:], emb[4], atol=1e-10)
    labels = kmeans(emb, 2)
    assert len(set(labels[:4])) == 1 and len(set(labels[4:])) == 1 and labels[0] != labels[4]


# -- k-means ------------------------------------------------------------------------


def test_kmeans_one_point_per_cluster():
    X = np.random.default_rng(7).normal(size=(6, 2))
    res = kmeans_fit(X, 6)
    assert sorted(res.labels) == list(range(6)) and res.inertia == pytest.approx(0.0, abs=1e-20)


def test_kmeans_planted_blobs_and_determinism():
    X, y = planted_blobs(0, n=120, k=2, dim=5, separation=10.0)
    labels = kmeans(X, 2, seed=3)
    assert nmi(labels, y) == 1.0
    np.testing.assert_array_equal(labels, kmeans(X, 2, seed=3))
    assert labels[0] == 0  # canonical naming by first appearance


def test_kmeans_handles_duplicates():
    X = np.zeros((5, 2))
    labels = kmeans(X, 3)
    assert len(set(labels.tolist())) == 3


def test_kmeans_errors():
    with pytest.raises(ContractError):
        kmeans(np.zeros((2, 2)), 3)


# -- mapping and decoding ----------------------------------------------------------------


def test_majority_map_rules():
    clusters = np.array([0, 0, 1, 1, 2])
    labels = np.array([1, 1, 0, 1, 0])
    # cluster 1 ties and takes the smaller class; cluster 3 is unlabelled and takes the overall majority
    np.testing.assert_array_equal(majority_map(clusters, labels, 4, 2), [1, 0, 0, 1])
    with pytest.raises(ContractError):
        majority_map(clusters, labels + 5, 3, 2)


def test_decode_planted_blobs():
    X, y = planted_blobs(1, n=200, k=2, dim=16, separation=12.0)
    res = decode_fold(LabeledFeatures(X[:40], y[:40]), X[40:], DecodeConfig(kappa=5))
    assert np.mean(res.predictions == y[40:]) == 1.0


def test_decode_duplicated_training_points():
    X, y = planted_blobs(2, n=60, k=2, dim=8, separation=12.0)
    # each vertex spends one neighbour slot on its copy, so kappa must leave room to stay connected
    res = decode_fold(LabeledFeatures(X, y), X.copy(), DecodeConfig(kappa=10))
    np.testing.assert_array_equal(res.predictions, y)


def test_decode_errors():
    X, y = planted_blobs(3, n=20, k=2, dim=3)
    with pytest.raises(DimensionError):
        decode_fold(LabeledFeatures(X, y), X[:, :2])
    with pytest.raises(ContractError, match="empty"):
        decode_fold(LabeledFeatures(X, y), X[:0])
    with pytest.raises(ConfigurationError):
        decode_fold(LabeledFeatures(X, y), X, DecodeConfig(eta=0))


# -- subsampling --------------------------------------------------------------------


def test_subsample_sizes():
    assert subsample_size(74400, 10) == 7440
    assert subsample_size(74400, 1) == 744
    assert subsample_size(5, 10) == 1  # 0.5 rounds up


def test_subsample_draw():
    cands = LabeledFeatures(np.arange(40.0)[:, None], np.arange(40) % 2)
    sub, idx = subsample_training(cands, 25, seed=4)
    assert len(idx) == 10 and np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(sub.X[:, 0], idx)
    _, again = subsample_training(cands, 25, seed=4)
    np.testing.assert_array_equal(idx, again)
    with pytest.raises(ContractError, match="selects nothing"):
        subsample_training(cands, 1, seed=0)


def test_dump_hypergraph(tmp_path):
    hg = knn_hyperedges(np.random.default_rng(8).normal(size=(8, 2)), 2)
    delta = laplacian(hg)
    dump_hypergraph(tmp_path / "hg.eft", hg, delta, spectral_embed(delta, 2))
    back = load_tensors(tmp_path / "hg.eft")
    np.testing.assert_array_equal(back["H"], hg.H.toarray())
    np.testing.assert_array_equal(back["laplacian"], delta)
    assert back["embedding"].shape == (8, 2)
