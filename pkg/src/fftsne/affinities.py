"""Sparse symmetric input affinities from high-dimensional data.

Pipeline: neighbor search (exact scan or a randomized-projection forest),
per-point Gaussian bandwidth calibration so each conditional distribution
hits a target perplexity, then symmetrization into p_ij = (p_i|j + p_j|i)/2N
whose total mass over ordered pairs is exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

__all__ = [
    "NeighborGraph",
    "BandwidthResult",
    "SparseAffinities",
    "knn_exact",
    "knn_approx",
    "subsample_neighbors",
    "perplexity_search",
    "calibrate_bandwidths",
    "symmetrize",
    "affinities_from_data",
]

PERPLEXITY_TOL = 1e-4
MAX_BISECTION_ITERS = 200
_SIGMA_LO = 1e-20
_SIGMA_HI = 1e20


@dataclass
class NeighborGraph:
    """k nearest (or near) neighbors per point.

    Rows are sorted by ascending squared distance, contain no self loops, and
    index into the originating point set.
    """

    indices: np.ndarray            # (N, k) int64
    squared_distances: np.ndarray  # (N, k) float64

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.squared_distances = np.asarray(self.squared_distances, dtype=float)
        if self.indices.shape != self.squared_distances.shape or self.indices.ndim != 2:
            raise ValueError("indices and squared_distances must share an (N, k) shape")
        n = self.indices.shape[0]
        if np.any(self.indices == np.arange(n)[:, None]):
            raise ValueError("neighbor graph contains self loops")
        if np.any((self.indices < 0) | (self.indices >= n)):
            raise ValueError("neighbor index out of range")
        if np.any(np.diff(self.squared_distances, axis=1) < 0):
            raise ValueError("squared distances must be ascending per row")

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass
class BandwidthResult:
    """Per-point bandwidths with the conditional rows they induce."""

    sigma: np.ndarray                # (N,)
    achieved_perplexity: np.ndarray  # (N,)
    conditional: np.ndarray          # (N, k) rows summing to 1
    converged: np.ndarray            # (N,) bool


@dataclass
class SparseAffinities:
    """Symmetric affinities stored once per unordered pair (i < j).

    Each stored value applies to both ordered pairs, so the total mass over
    ordered pairs is 2 * values.sum() and equals 1 by construction.
    """

    n: int
    rows: np.ndarray    # (nnz,) int64, rows < cols
    cols: np.ndarray    # (nnz,) int64
    values: np.ndarray  # (nnz,) float64, nonnegative

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if not (self.rows.shape == self.cols.shape == self.values.shape):
            raise ValueError("rows, cols, values must share a shape")
        if np.any(self.rows >= self.cols):
            raise ValueError("entries must be stored with row < col")
        if np.any(self.values < 0):
            raise ValueError("affinities must be nonnegative")

    @property
    def ordered_total(self) -> float:
        return 2.0 * float(self.values.sum())


def _pairwise_sq_dists(block: np.ndarray, data: np.ndarray) -> np.ndarray:
    d2 = (
        (block * block).sum(axis=1)[:, None]
        + (data * data).sum(axis=1)[None, :]
        - 2.0 * (block @ data.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def knn_exact(data, k: int, block: int = 1024) -> NeighborGraph:
    """Exact k nearest neighbors under Euclidean distance by blocked scan."""
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be (N, d)")
    n = x.shape[0]
    if not 0 < k < n:
        raise ValueError("k must satisfy 0 < k < N")
    idx = np.empty((n, k), dtype=np.int64)
    d2s = np.empty((n, k))
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        d2 = _pairwise_sq_dists(x[lo:hi], x)
        d2[np.arange(hi - lo), np.arange(lo, hi)] = np.inf
        # stable sort on distance; index order breaks ties toward smaller ids
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[lo:hi] = order
        d2s[lo:hi] = np.take_along_axis(d2, order, axis=1)
    return NeighborGraph(indices=idx, squared_distances=d2s)


def _build_projection_tree(data: np.ndarray, rng: np.random.Generator,
                           leaf_cap: int) -> list[np.ndarray]:
    """One randomized-projection tree; returns its leaves as index arrays."""
    n, d = data.shape
    leaves: list[np.ndarray] = []
    stack = [np.arange(n, dtype=np.int64)]
    while stack:
        idx = stack.pop()
        if idx.size <= leaf_cap:
            leaves.append(idx)
            continue
        a, b = rng.choice(idx.size, size=2, replace=False)
        pa, pb = data[idx[a]], data[idx[b]]
        normal = pa - pb
        if not np.any(normal):
            normal = rng.standard_normal(d)
        mid = 0.5 * (pa + pb)
        side = data[idx] @ normal - mid @ normal
        left = idx[side <= 0.0]
        right = idx[side > 0.0]
        if left.size == 0 or right.size == 0:
            perm = rng.permutation(idx.size)
            half = idx.size // 2
            left, right = idx[perm[:half]], idx[perm[half:]]
        stack.append(left)
        stack.append(right)
    return leaves


def knn_approx(data, k: int, n_trees: int = 50, seed: int = 0) -> NeighborGraph:
    """Approximate k nearest neighbors from a randomized-projection forest.

    Each tree splits on the hyperplane through the midpoint of two sampled
    points until leaves hold at most max(k, 32) items; candidates are the
    union of each point's leaf mates across trees, re-ranked by true distance.
    Deterministic for a fixed seed.
    """
    x = np.asarray(data, dtype=float)
    if x.ndim != 2:
        raise ValueError("data must be (N, d)")
    n = x.shape[0]
    if not 0 < k < n:
        raise ValueError("k must satisfy 0 < k < N")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    leaf_cap = max(k, 32)
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    membership: list[list[np.ndarray]] = [[] for _ in range(n)]
    for t in range(n_trees):
        rng = np.random.default_rng(seeds[t])
        for leaf in _build_projection_tree(x, rng, leaf_cap):
            for i in leaf:
                membership[i].append(leaf)
    idx = np.empty((n, k), dtype=np.int64)
    d2s = np.empty((n, k))
    all_ids = np.arange(n, dtype=np.int64)
    for i in range(n):
        cands = np.unique(np.concatenate(membership[i]))
        cands = cands[cands != i]
        if cands.size < k:
            extra = np.setdiff1d(all_ids, np.append(cands, i), assume_unique=True)
            cands = np.concatenate([cands, extra[: k - cands.size]])
            cands.sort()
        diff = x[cands] - x[i]
        d2 = (diff * diff).sum(axis=1)
        sel = np.argsort(d2, kind="stable")[:k]  # cands ascending => ties by id
        idx[i] = cands[sel]
        d2s[i] = d2[sel]
    return NeighborGraph(indices=idx, squared_distances=d2s)


def subsample_neighbors(graph: NeighborGraph, m: int, seed: int = 0) -> NeighborGraph:
    """Keep m neighbors per row, sampled uniformly without replacement."""
    if not 1 <= m <= graph.k:
        raise ValueError("m must satisfy 1 <= m <= k")
    if m == graph.k:
        return NeighborGraph(graph.indices.copy(), graph.squared_distances.copy())
    rng = np.random.default_rng(seed)
    pick = np.argsort(rng.random((graph.n, graph.k)), axis=1)[:, :m]
    idx = np.take_along_axis(graph.indices, pick, axis=1)
    d2 = np.take_along_axis(graph.squared_distances, pick, axis=1)
    # sort by distance with index tiebreak (stable two-pass)
    by_id = np.argsort(idx, axis=1, kind="stable")
    idx = np.take_along_axis(idx, by_id, axis=1)
    d2 = np.take_along_axis(d2, by_id, axis=1)
    by_d = np.argsort(d2, axis=1, kind="stable")
    return NeighborGraph(
        indices=np.take_along_axis(idx, by_d, axis=1),
        squared_distances=np.take_along_axis(d2, by_d, axis=1),
    )


def _perplexities(d2: np.ndarray, sigma: np.ndarray):
    """Perplexity exp(H) and conditional rows for per-row bandwidths."""
    t = d2 / (2.0 * sigma[:, None] ** 2)
    t -= t.min(axis=1, keepdims=True)
    e = np.exp(-t)
    s = e.sum(axis=1)
    cond = e / s[:, None]
    entropy = np.log(s) + (t * e).sum(axis=1) / s
    return np.exp(entropy), cond


def calibrate_bandwidths(
    squared_distances,
    target_perplexity: float,
    tol: float = PERPLEXITY_TOL,
    max_iters: int = MAX_BISECTION_ITERS,
) -> BandwidthResult:
    """Bisection on log sigma per row until the perplexity matches the target.

    Perplexity is monotone nondecreasing in sigma, so plain bisection on an
    (expanded-if-needed) bracket converges; rows that cannot reach the target
    are flagged unconverged and carry the closest boundary bandwidth.
    """
    d2 = np.atleast_2d(np.asarray(squared_distances, dtype=float))
    n, k = d2.shape
    if not 0 < target_perplexity < k:
        raise ValueError("target perplexity must lie in (0, k)")
    if np.any(d2 < 0):
        raise ValueError("squared distances must be nonnegative")
    if np.any(d2.max(axis=1) == 0):
        raise ValueError("each row needs at least one positive distance")
    lo = np.full(n, _SIGMA_LO)
    hi = np.full(n, _SIGMA_HI)
    for _ in range(60):  # geometric bracket expansion, rarely triggered
        p_hi, _ = _perplexities(d2, hi)
        p_lo, _ = _perplexities(d2, lo)
        grow = p_hi < target_perplexity
        shrink = p_lo > target_perplexity
        if not (grow.any() or shrink.any()):
            break
        hi[grow] *= 10.0
        lo[shrink] *= 0.1
    sigma = np.sqrt(lo * hi)
    for _ in range(max_iters):
        perp, cond = _perplexities(d2, sigma)
        err = perp - target_perplexity
        if np.all(np.abs(err) <= tol):
            break
        hi = np.where(err > 0, sigma, hi)
        lo = np.where(err < 0, sigma, lo)
        sigma = np.sqrt(lo * hi)
    perp, cond = _perplexities(d2, sigma)
    converged = np.abs(perp - target_perplexity) <= tol
    return BandwidthResult(
        sigma=sigma, achieved_perplexity=perp, conditional=cond, converged=converged
    )


def perplexity_search(squared_distances, target_perplexity: float) -> BandwidthResult:
    """Single-row convenience wrapper around calibrate_bandwidths."""
    return calibrate_bandwidths(np.asarray(squared_distances)[None, :],
                                target_perplexity)


def symmetrize(conditional, graph: NeighborGraph, n: int) -> SparseAffinities:
    """p_ij = (p_i|j + p_j|i) / 2N over the union of directed neighbor edges."""
    cond = np.asarray(conditional, dtype=float)
    if cond.shape != graph.indices.shape:
        raise ValueError("conditional rows must match the neighbor graph shape")
    row_sums = cond.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-9):
        raise ValueError("conditional rows must each sum to 1 (within 1e-9)")
    if n != graph.n:
        raise ValueError("N does not match the neighbor graph")
    i = np.repeat(np.arange(n, dtype=np.int64), graph.k)
    j = graph.indices.ravel()
    directed = scipy.sparse.coo_matrix(
        (cond.ravel(), (i, j)), shape=(n, n)
    ).tocsr()
    sym = (directed + directed.T).tocoo()
    mask = sym.row < sym.col
    return SparseAffinities(
        n=n,
        rows=sym.row[mask].astype(np.int64),
        cols=sym.col[mask].astype(np.int64),
        values=sym.data[mask] / (2.0 * n),
    )


@dataclass
class AffinityConfig:
    """Knobs of the data -> affinities pipeline."""

    perplexity: float = 30.0
    n_neighbors: int | None = None       # default 3 * perplexity
    method: str = "auto"                 # auto | exact | approx
    n_trees: int = 50
    subsample: int | None = None         # keep m of k neighbors, off by default
    seed: int = 0
    exact_max_n: int = 20_000            # auto switches to the forest above this


def affinities_from_data(data, config: AffinityConfig | None = None):
    """Full affinity pipeline; returns (SparseAffinities, BandwidthResult)."""
    cfg = config or AffinityConfig()
    x = np.asarray(data, dtype=float)
    n = x.shape[0]
    k = cfg.n_neighbors or int(round(3 * cfg.perplexity))
    k = min(k, n - 1)
    if cfg.perplexity >= k:
        raise ValueError(
            f"perplexity {cfg.perplexity} needs more neighbors than k={k}"
        )
    method = cfg.method
    if method == "auto":
        method = "exact" if n <= cfg.exact_max_n else "approx"
    if method == "exact":
        graph = knn_exact(x, k)
    elif method == "approx":
        graph = knn_approx(x, k, n_trees=cfg.n_trees, seed=cfg.seed)
    else:
        raise ValueError(f"unknown neighbor method: {cfg.method!r}")
    if cfg.subsample is not None:
        graph = subsample_neighbors(graph, cfg.subsample, seed=cfg.seed)
        target = min(cfg.perplexity, graph.k - PERPLEXITY_TOL)
    else:
        target = cfg.perplexity
    bw = calibrate_bandwidths(graph.squared_distances, target)
    return symmetrize(bw.conditional, graph, n), bw
