"""kNN hypergraph construction, normalized hypergraph Laplacian, spectral
embedding, k-means partitioning and the transductive fold decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import eigsh
from scipy.spatial.distance import cdist

from .autodiff import save_tensors
from .errors import ConfigurationError, ContractError, DimensionError

# above this many vertices the bottom eigenspace comes from a sparse Lanczos solve
DENSE_LIMIT = 2000
SYMMETRY_TOL = 1e-8
_CHUNK = 1024


@dataclass
class DecodeConfig:
    kappa: int = 5
    eta: float = 10.0
    n_classes: int = 2
    latent: int = 64
    bandwidth: str = "mean"
    seed: int = 0
    restarts: int = 20

    def validate(self) -> None:
        if self.kappa < 1:
            raise ConfigurationError(f"kappa must be >= 1, got {self.kappa}")
        if not 0 < self.eta <= 100:
            raise ConfigurationError(f"eta must lie in (0, 100], got {self.eta}")
        if self.n_classes < 2:
            raise ConfigurationError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.bandwidth != "mean":
            raise ConfigurationError(f"unknown bandwidth rule {self.bandwidth!r}")
        if self.restarts < 1:
            raise ConfigurationError("restarts must be >= 1")


@dataclass
class Hypergraph:
    """Incidence ``H`` (|V|x|E|, sparse 0/1) and positive hyperedge weights ``w``."""

    H: sparse.csr_matrix
    w: np.ndarray
    sigma: float = 1.0

    def __post_init__(self):
        self.H = sparse.csr_matrix(self.H, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.H.shape[1] != len(self.w):
            raise DimensionError(f"incidence has {self.H.shape[1]} edges but {len(self.w)} weights")

    @property
    def n_vertices(self) -> int:
        return self.H.shape[0]

    @property
    def n_edges(self) -> int:
        return self.H.shape[1]

    @property
    def vertex_degrees(self) -> np.ndarray:
        return np.asarray(self.H @ self.w).ravel()

    @property
    def edge_degrees(self) -> np.ndarray:
        return np.asarray(self.H.sum(axis=0)).ravel()

    def members(self, e: int) -> list[int]:
        return sorted(self.H[:, e].nonzero()[0].tolist())

    def validate(self) -> None:
        if np.any(self.edge_degrees < 1):
            raise ContractError("every hyperedge must be nonempty")
        if np.any(np.asarray(self.H.sum(axis=1)).ravel() < 1):
            raise ContractError("every vertex must lie in at least one hyperedge")
        if np.any(self.w <= 0) or not np.all(np.isfinite(self.w)):
            raise ContractError("hyperedge weights must be positive and finite")

    @classmethod
    def from_edges(cls, n_vertices: int, edges, weights=None) -> "Hypergraph":
        edges = [sorted(set(e)) for e in edges]
        rows = [v for e in edges for v in e]
        cols = [j for j, e in enumerate(edges) for _ in e]
        H = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, len(edges)))
        w = np.ones(len(edges)) if weights is None else weights
        return cls(H, w)


@dataclass
class ClusterResult:
    clusters: np.ndarray
    cluster_to_class: np.ndarray
    predictions: np.ndarray
    n_train: int

    @property
    def test_clusters(self) -> np.ndarray:
        return self.clusters[self.n_train :]


@dataclass
class LabeledFeatures:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2:
            raise DimensionError(f"features must be [N, dim], got shape {self.X.shape}")
        if len(self.X) != len(self.y):
            raise DimensionError(f"{len(self.X)} feature rows but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.X)


# -- subsampling -------------------------------------------------------------------


def subsample_size(n: int, eta: float) -> int:
    """``round(eta/100 * n)`` with halves rounded up."""
    return int(np.floor(n * eta / 100.0 + 0.5))


def subsample_training(candidates: LabeledFeatures, eta: float, seed: int) -> tuple[LabeledFeatures, np.ndarray]:
    """Uniform draw without replacement of eta percent of the candidates.

    Returns the subset and the chosen candidate indices (sorted).
    """
    n = len(candidates)
    if n == 0:
        raise ContractError("no training candidates")
    if not 0 < eta <= 100:
        raise ConfigurationError(f"eta must lie in (0, 100], got {eta}")
    m = subsample_size(n, eta)
    if m == 0:
        raise ContractError(f"eta={eta}% of {n} candidates selects nothing")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    return LabeledFeatures(candidates.X[idx], candidates.y[idx]), idx


# -- construction ------------------------------------------------------------------


def _as_features(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"features must be [N, dim], got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ContractError("features contain non-finite values")
    return X


def mean_pairwise_distance(X) -> float:
    """Mean Euclidean distance over unordered pairs of distinct vertices."""
    X = _as_features(X)
    n = len(X)
    if n < 2:
        return 0.0
    total = 0.0
    for i in range(0, n, _CHUNK):
        total += cdist(X[i : i + _CHUNK], X).sum()
    return total / (n * (n - 1))


def knn_hyperedges(X, kappa: int) -> Hypergraph:
    """One hyperedge per vertex: the vertex plus its ``kappa`` nearest others.

    Distances are Euclidean; equal distances go to the lower vertex index.
    ``w(e) = sum_u exp(-|x_c - x_u|^2 / sigma^2)`` over non-centroid members,
    with ``sigma`` the mean pairwise distance.
    """
    X = _as_features(X)
    n = len(X)
    if kappa < 1:
        raise ConfigurationError(f"kappa must be >= 1, got {kappa}")
    if n < kappa + 1:
        raise ContractError(f"need at least kappa+1={kappa + 1} vertices, got {n}")
    sigma = mean_pairwise_distance(X)
    scale = sigma * sigma if sigma > 0 else 1.0
    nbrs = np.empty((n, kappa), dtype=np.int64)
    weights = np.empty(n)
    for i in range(0, n, _CHUNK):
        d2 = cdist(X[i : i + _CHUNK], X, "sqeuclidean")
        rows = np.arange(len(d2))
        d2[rows, i + rows] = np.inf
        # stable sort keeps lower indices first among equal distances
        order = np.argsort(d2, axis=1, kind="stable")[:, :kappa]
        nbrs[i : i + len(d2)] = order
        weights[i : i + len(d2)] = np.exp(-np.take_along_axis(d2, order, axis=1) / scale).sum(axis=1)
    rows = np.concatenate([np.arange(n), nbrs.ravel()])
    cols = np.concatenate([np.arange(n), np.repeat(np.arange(n), kappa)])
    H = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    # exp underflow for far neighbours would leave a zero weight
    return Hypergraph(H, np.maximum(weights, np.finfo(float).tiny), sigma)


def _theta(hg: Hypergraph) -> sparse.csr_matrix:
    dv = hg.vertex_degrees
    if np.any(dv <= 0):
        bad = int(np.flatnonzero(dv <= 0)[0])
        raise ContractError(f"vertex {bad} has zero degree")
    de = hg.edge_degrees
    if np.any(de <= 0):
        raise ContractError("empty hyperedge")
    s = sparse.diags(1.0 / np.sqrt(dv))
    core = hg.H @ sparse.diags(hg.w / de) @ hg.H.T
    theta = (s @ core @ s).tocsr()
    return ((theta + theta.T) * 0.5).tocsr()


def laplacian(hg: Hypergraph, dense: bool | None = None):
    """``I - Dv^-1/2 H W De^-1 H^T Dv^-1/2``; dense below ``DENSE_LIMIT`` vertices."""
    theta = _theta(hg)
    n = hg.n_vertices
    if dense is None:
        dense = n <= DENSE_LIMIT
    if dense:
        return np.eye(n) - theta.toarray()
    return (sparse.identity(n, format="csr") - theta).tocsr()


def graph_laplacian(A) -> np.ndarray:
    """Normalized graph Laplacian ``I - D^-1/2 A D^-1/2`` of a symmetric affinity."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"affinity must be square, got {A.shape}")
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_TOL:
        raise ContractError("affinity matrix is not symmetric")
    d = A.sum(axis=1)
    if np.any(d <= 0):
        raise ContractError(f"vertex {int(np.flatnonzero(d <= 0)[0])} has zero degree")
    s = 1.0 / np.sqrt(d)
    L = np.eye(len(A)) - s[:, None] * A * s[None, :]
    return (L + L.T) * 0.5


# -- spectral embedding ------------------------------------------------------------


def bottom_eigenpairs(delta, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` smallest eigenvalues (ascending) and orthonormal eigenvectors."""
    n = delta.shape[0]
    if delta.ndim != 2 or delta.shape[1] != n:
        raise DimensionError(f"Laplacian must be square, got {delta.shape}")
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    if sparse.issparse(delta):
        asym = abs(delta - delta.T).max() if delta.nnz else 0.0
    else:
        asym = np.max(np.abs(delta - delta.T), initial=0.0)
    if asym > SYMMETRY_TOL:
        raise ContractError(f"Laplacian is not symmetric (max asymmetry {asym:.3g})")
    if sparse.issparse(delta) and k < n - 1:
        # largest eigenpairs of 2I - delta are the smallest of delta, and Lanczos converges
        # fastest on the well-separated top of the spectrum
        shifted = (2.0 * sparse.identity(n) - delta).tocsr()
        v0 = np.random.default_rng(0).standard_normal(n)
        vals, vecs = eigsh(shifted, k=k, which="LA", v0=v0, tol=1e-12)
        vals = 2.0 - vals
    else:
        dense = delta.toarray() if sparse.issparse(delta) else np.asarray(delta, dtype=np.float64)
        vals, vecs = np.linalg.eigh(dense)
    order = np.argsort(vals, kind="stable")[:k]
    vals, vecs = vals[order], vecs[:, order]
    # fix signs so the largest-magnitude entry of each vector is positive
    pivot = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(k)])
    return vals, vecs


def normalize_rows(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    return np.divide(V, norms, out=np.zeros_like(V), where=norms > 0)


def spectral_embed(delta, k: int, normalize: bool = True) -> np.ndarray:
    """Rows of the bottom-``k`` eigenvector matrix, unit-normalized by default."""
    _, vecs = bottom_eigenpairs(delta, k)
    return normalize_rows(vecs) if normalize else vecs


# -- k-means ------------------------------------------------------------------------


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _assign(X: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = cdist(X, centers, "sqeuclidean")
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(X)), labels]


def _repair_empty(X, labels, dist, centers, k):
    """Move each empty cluster onto the worst-fit point of the largest cluster."""
    for c in range(k):
        if np.any(labels == c):
            continue
        largest = int(np.argmax(np.bincount(labels, minlength=k)))
        members = np.flatnonzero(labels == largest)
        far = members[int(np.argmax(dist[members]))]
        centers[c] = X[far]
        labels[far] = c
        dist[far] = 0.0
    return labels, dist


def _lloyd(X, centers, k, max_iter, tol):
    labels, dist = _assign(X, centers)
    for _ in range(max_iter):
        labels, dist = _repair_empty(X, labels, dist, centers, k)
        new = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
        shift = float(((new - centers) ** 2).sum())
        centers = new
        labels, dist = _assign(X, centers)
        if shift <= tol:
            break
    labels, dist = _repair_empty(X, labels, dist, centers, k)
    return labels, centers, float(dist.sum())


def _canonical(labels: np.ndarray, centers: np.ndarray, k: int):
    """Relabel clusters in order of first appearance."""
    first = {}
    for lab in labels:
        if lab not in first:
            first[lab] = len(first)
    for c in range(k):
        first.setdefault(c, len(first))
    perm = np.array([first[c] for c in range(k)])
    out = np.empty_like(centers)
    out[perm] = centers
    return perm[labels], out


def kmeans_fit(points, k: int, seed: int = 0, restarts: int = 20, max_iter: int = 300,
               tol: float = 1e-12) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best inertia over ``restarts``."""
    X = _as_features(points)
    n = len(X)
    if k < 1 or k > n:
        raise ContractError(f"cannot form k={k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, centers, inertia = _lloyd(X, _kmeanspp(X, k, rng), k, max_iter, tol)
        if best is None or inertia < best.inertia - 1e-12:
            best = KMeansResult(labels, centers, inertia)
    labels, centers = _canonical(best.labels, best.centers, k)
    return KMeansResult(labels, centers, best.inertia)


def kmeans(points, k: int, seed: int = 0, restarts: int = 20) -> np.ndarray:
    return kmeans_fit(points, k, seed, restarts).labels


# -- decoding -----------------------------------------------------------------------


def majority_map(clusters: np.ndarray, labels: np.ndarray, n_clusters: int, n_classes: int) -> np.ndarray:
    """Class of each cluster by majority vote of its labelled members.

    Ties go to the smaller class; clusters without labelled members take the
    overall majority class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ContractError("no labelled vertices to map clusters")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(f"labels must lie in [0, {n_classes})")
    overall = int(np.argmax(np.bincount(labels, minlength=n_classes)))
    out = np.full(n_clusters, overall, dtype=np.int64)
    for c in range(n_clusters):
        votes = labels[clusters == c]
        if len(votes):
            out[c] = int(np.argmax(np.bincount(votes, minlength=n_classes)))
    return out


def decode_laplacian(delta, train_y: np.ndarray, n_classes: int, seed: int = 0, restarts: int = 20) -> ClusterResult:
    """Shared embed, partition and map path; the first ``len(train_y)`` vertices are labelled."""
    n_train = len(train_y)
    emb = spectral_embed(delta, n_classes)
    clusters = kmeans(emb, n_classes, seed, restarts)
    mapping = majority_map(clusters[:n_train], train_y, n_classes, n_classes)
    return ClusterResult(clusters, mapping, mapping[clusters[n_train:]], n_train)


def _joint(train, test) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(train, LabeledFeatures):
        train = LabeledFeatures(*train)
    if len(train) == 0:
        raise ContractError("training set is empty")
    test = _as_features(test)
    if len(test) == 0:
        raise ContractError("test set is empty")
    if test.shape[1] != train.X.shape[1]:
        raise DimensionError(f"train features have {train.X.shape[1]} columns, test {test.shape[1]}")
    return np.concatenate([train.X, test], axis=0), train.y


def decode_fold(train, test, config: DecodeConfig | None = None) -> ClusterResult:
    """Transductive decode: one hypergraph over train and test vertices.

    ``train`` carries labels (used only to name clusters); ``test`` is a bare
    feature matrix.
    """
    config = config or DecodeConfig()
    config.validate()
    X, y = _joint(train, test)
    hg = knn_hyperedges(X, config.kappa)
    return decode_laplacian(laplacian(hg), y, config.n_classes, config.seed, config.restarts)


def dump_hypergraph(path, hg: Hypergraph, delta=None, embedding=None) -> None:
    """Write ``H``, ``w`` and optionally the Laplacian and embedding as tensors."""
    named = {"H": hg.H.toarray(), "w": hg.w}
    if delta is not None:
        named["laplacian"] = delta.toarray() if sparse.issparse(delta) else np.asarray(delta)
    if embedding is not None:
        named["embedding"] = np.asarray(embedding)
    save_tensors(path, named)
