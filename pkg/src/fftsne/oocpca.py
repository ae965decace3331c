"""Out-of-core randomized PCA over row-major on-disk matrices.

The range finder applies the matrix to a thin random block, re-conditions
with pivoted-LU between power iterations (no renormalization between the
A and A^T halves of an iteration), finishes with QR, and reads off the
singular triplets from the small projected matrix.  The big matrix is only
touched through block-streamed products, so peak memory attributable to it
is one row block.  Optional preprocessing (log1p, row/column centering) is
applied on the fly; centering folds into the products as rank-one
corrections, so no transformed copy of the matrix ever exists.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

__all__ = [
    "OnDiskMatrix",
    "PcaConfig",
    "PcaResult",
    "PreprocessSpec",
    "ReadStats",
    "compute_block_rows",
    "csv_to_binary",
    "lu_renormalize",
    "oocpca",
    "power_iteration",
    "randomized_pca_dense",
    "read_binary_matrix",
    "stream_matmul_left_transpose",
    "stream_matmul_right",
    "write_binary_matrix",
]

_HEADER = struct.Struct("<qq")  # rows, cols as little-endian signed 64-bit
HEADER_BYTES = _HEADER.size
_FLOAT = np.dtype("<f8")


@dataclass
class ReadStats:
    """Instrumentation for the block reader (passes, bytes, peak footprint)."""

    passes: int = 0
    blocks: int = 0
    total_bytes: int = 0
    peak_block_bytes: int = 0


@dataclass
class PreprocessSpec:
    """On-the-fly block transforms: x -> log(1+x), then row/column centering."""

    log_transform: bool = False
    center_rows: bool = False
    center_cols: bool = False


@dataclass
class PcaConfig:
    k: int
    l: int | None = None            # oversampled width, defaults to k + 2
    its: int = 2                    # power iterations
    mem_budget_bytes: int | None = None
    block_rows: int | None = None
    seed: int = 0

    def resolved_l(self) -> int:
        return self.k + 2 if self.l is None else self.l


@dataclass
class PcaResult:
    U: np.ndarray            # (m, k) orthonormal columns
    S: np.ndarray            # (k,) nonincreasing, nonnegative
    V: np.ndarray            # (n, k) orthonormal columns
    read_stats: ReadStats | None = None


class OnDiskMatrix:
    """Header-described row-major float64 matrix streamed in row blocks.

    Layout: 16-byte header of two little-endian int64 (rows, cols) followed
    by rows*cols little-endian float64 values, row-major, bit-exact.
    """

    def __init__(self, path, m: int, n: int):
        self.path = Path(path)
        self.m = int(m)
        self.n = int(n)

    @classmethod
    def open(cls, path) -> "OnDiskMatrix":
        path = Path(path)
        size = path.stat().st_size
        with open(path, "rb") as fh:
            m, n = _HEADER.unpack(fh.read(HEADER_BYTES))
        if m <= 0 or n <= 0:
            raise ValueError(f"invalid matrix header in {path}: {m} x {n}")
        expected = HEADER_BYTES + 8 * m * n
        if size != expected:
            raise ValueError(
                f"header mismatch in {path}: {m} x {n} needs {expected} bytes, "
                f"file has {size}"
            )
        return cls(path, m, n)

    def iter_blocks(self, block_rows: int, stats: ReadStats | None = None):
        """Yield (row_offset, block_view) with a single reused buffer.

        At most one block is live at a time; callers must not retain the
        yielded view across iterations.
        """
        b = max(1, min(int(block_rows), self.m))
        buf = np.empty((b, self.n), dtype=_FLOAT)
        if stats is not None:
            stats.passes += 1
            stats.peak_block_bytes = max(stats.peak_block_bytes, buf.nbytes)
        with open(self.path, "rb") as fh:
            fh.seek(HEADER_BYTES)
            for lo in range(0, self.m, b):
                rows = min(b, self.m - lo)
                view = buf[:rows]
                read = fh.readinto(memoryview(view).cast("B"))
                if read != rows * self.n * 8:
                    raise IOError(f"short read in {self.path} at row {lo}")
                if stats is not None:
                    stats.blocks += 1
                    stats.total_bytes += read
                yield lo, view


def write_binary_matrix(path, array) -> OnDiskMatrix:
    arr = np.ascontiguousarray(array, dtype=_FLOAT)
    if arr.ndim != 2:
        raise ValueError("only 2D matrices can be written")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(arr.shape[0], arr.shape[1]))
        arr.tofile(fh)
    return OnDiskMatrix(path, arr.shape[0], arr.shape[1])


def read_binary_matrix(path) -> np.ndarray:
    mat = OnDiskMatrix.open(path)
    with open(mat.path, "rb") as fh:
        fh.seek(HEADER_BYTES)
        data = np.fromfile(fh, dtype=_FLOAT, count=mat.m * mat.n)
    return data.reshape(mat.m, mat.n)


def csv_to_binary(csv_path, bin_path, has_header: bool = False,
                  delimiter: str = ",") -> OnDiskMatrix:
    """Convert a CSV of floats to the binary format, one line at a time."""
    n = None
    m = 0
    with open(csv_path) as src, open(bin_path, "wb") as dst:
        dst.write(_HEADER.pack(0, 0))  # patched once the shape is known
        for lineno, line in enumerate(src):
            if has_header and lineno == 0:
                continue
            line = line.strip()
            if not line:
                continue
            row = np.array(line.split(delimiter), dtype=_FLOAT)
            if n is None:
                n = row.size
            elif row.size != n:
                raise ValueError(
                    f"ragged CSV row at line {lineno + 1}: {row.size} != {n}"
                )
            row.tofile(dst)
            m += 1
        if n is None:
            raise ValueError(f"no data rows in {csv_path}")
        dst.seek(0)
        dst.write(_HEADER.pack(m, n))
    return OnDiskMatrix(bin_path, m, n)


def compute_block_rows(mem_budget_bytes: int, n_cols: int,
                       m_rows: int | None = None) -> int:
    """Rows per block fitting the byte budget: floor(M / 8n), at least one row."""
    if mem_budget_bytes < 8 * n_cols:
        raise ValueError("memory budget is below one row of the matrix")
    b = mem_budget_bytes // (8 * n_cols)
    if m_rows is not None:
        b = min(b, m_rows)
    return max(1, int(b))


# -- preprocessing -----------------------------------------------------------

@dataclass
class _PrepStats:
    """Column means of the (log, row-centered) matrix for the rank-1 fold."""

    col_means: np.ndarray | None


def _log_block(block: np.ndarray, pre: PreprocessSpec) -> np.ndarray:
    return np.log1p(block) if pre.log_transform else block


def compute_preprocess_stats(A: OnDiskMatrix, pre: PreprocessSpec, block_rows: int,
                             stats: ReadStats | None = None) -> _PrepStats:
    """One dedicated pass for the column means when column centering is on."""
    if not pre.center_cols:
        return _PrepStats(col_means=None)
    acc = np.zeros(A.n)
    row_mean_total = 0.0
    for _, block in A.iter_blocks(block_rows, stats):
        lb = _log_block(block, pre)
        acc += lb.sum(axis=0)
        if pre.center_rows:
            row_mean_total += lb.mean(axis=1).sum()
    # column means of the row-centered data: every column drops the same total
    return _PrepStats(col_means=(acc - row_mean_total) / A.m)


def _dense_preprocess(arr: np.ndarray, pre: PreprocessSpec) -> np.ndarray:
    out = np.log1p(arr) if pre.log_transform else arr.astype(float, copy=True)
    if pre.center_rows:
        out = out - out.mean(axis=1, keepdims=True)
    if pre.center_cols:
        out = out - out.mean(axis=0, keepdims=True)
    return out


def stream_matmul_right(
    A: OnDiskMatrix,
    B: np.ndarray,
    pre: PreprocessSpec | None = None,
    block_rows: int = 1024,
    stats: ReadStats | None = None,
    prep: _PrepStats | None = None,
) -> np.ndarray:
    """Compute (preprocessed A) @ B one row block at a time."""
    pre = pre or PreprocessSpec()
    if B.shape[0] != A.n:
        raise ValueError("B row count must equal the matrix column count")
    if prep is None:
        prep = compute_preprocess_stats(A, pre, block_rows, stats)
    out = np.empty((A.m, B.shape[1]))
    b_colsum = B.sum(axis=0) if pre.center_rows else None
    c_times_b = prep.col_means @ B if pre.center_cols else None
    for lo, block in A.iter_blocks(block_rows, stats):
        lb = _log_block(block, pre)
        rows = lb @ B
        if pre.center_rows:
            rows -= np.outer(lb.mean(axis=1), b_colsum)
        if pre.center_cols:
            rows -= c_times_b
        out[lo:lo + lb.shape[0]] = rows
    return out


def stream_matmul_left_transpose(
    A: OnDiskMatrix,
    L: np.ndarray,
    pre: PreprocessSpec | None = None,
    block_rows: int = 1024,
    stats: ReadStats | None = None,
    prep: _PrepStats | None = None,
) -> np.ndarray:
    """Compute (preprocessed A)^T @ L in a single streamed pass."""
    pre = pre or PreprocessSpec()
    if L.shape[0] != A.m:
        raise ValueError("L row count must equal the matrix row count")
    if prep is None:
        prep = compute_preprocess_stats(A, pre, block_rows, stats)
    out = np.zeros((A.n, L.shape[1]))
    r_dot_l = np.zeros(L.shape[1])
    l_colsum = np.zeros(L.shape[1])
    for lo, block in A.iter_blocks(block_rows, stats):
        lb = _log_block(block, pre)
        lrows = L[lo:lo + lb.shape[0]]
        out += lb.T @ lrows
        if pre.center_rows:
            r_dot_l += lb.mean(axis=1) @ lrows
        if pre.center_cols:
            l_colsum += lrows.sum(axis=0)
    if pre.center_rows:
        out -= np.ones((A.n, 1)) * r_dot_l[None, :]
    if pre.center_cols:
        out -= np.outer(prep.col_means, l_colsum)
    return out


def power_iteration(
    A: OnDiskMatrix,
    L_prev: np.ndarray,
    pre: PreprocessSpec | None = None,
    block_rows: int = 1024,
    stats: ReadStats | None = None,
    prep: _PrepStats | None = None,
) -> np.ndarray:
    """Apply A A^T to the block in two streamed passes, no renormalization between."""
    z = stream_matmul_left_transpose(A, L_prev, pre, block_rows, stats, prep)
    return stream_matmul_right(A, z, pre, block_rows, stats, prep)


def lu_renormalize(Y: np.ndarray) -> np.ndarray:
    """Re-condition a tall block: the permuted L factor of a pivoted LU of Y.

    Returns F with Y = F @ U so the next pass works on well-scaled columns.
    Rank deficiency falls back to a diagonal jitter (1e-12 of the magnitude
    scale) with a warning.
    """
    y = np.asarray(Y, dtype=float)
    if y.ndim != 2:
        raise ValueError("expected a 2D block")
    pl, u = scipy.linalg.lu(y, permute_l=True)
    d = np.abs(np.diag(u))
    if d.size and d.min() <= 1e-12 * max(d.max(), 1e-300):
        warnings.warn(
            "rank-deficient block in LU renormalization; applying diagonal jitter",
            RuntimeWarning,
        )
        scale = max(float(np.abs(y).max()), 1e-300)
        jittered = y.copy()
        ell = min(y.shape)
        jittered[np.arange(ell), np.arange(ell)] += 1e-12 * scale
        pl, _ = scipy.linalg.lu(jittered, permute_l=True)
    return pl


def _core_pca(apply_right, apply_left_t, n: int, config: PcaConfig):
    """Shared skeleton of the streamed and in-memory paths.

    apply_right(B) = E @ B and apply_left_t(L) = E^T @ L for the
    (preprocessed) matrix E; everything else is small dense algebra.
    """
    k = config.k
    ell = config.resolved_l()
    its = config.its
    rng = np.random.default_rng(config.seed)
    omega = rng.uniform(-1.0, 1.0, size=(n, ell))
    y = apply_right(omega)
    lblock = lu_renormalize(y)
    for i in range(1, its + 1):
        y = apply_right(apply_left_t(lblock))
        if i < its:
            lblock = lu_renormalize(y)
    q, _ = np.linalg.qr(y)
    b = apply_left_t(q).T  # (l, n) projected matrix
    u_small, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ u_small[:, :k]
    return u, s[:k], vt[:k].T


def _validate_config(config: PcaConfig, m: int, n: int) -> None:
    ell = config.resolved_l()
    if not 0 < config.k <= ell < min(m, n):
        raise ValueError(
            f"need 0 < k <= l < min(m, n); got k={config.k}, l={ell}, "
            f"min(m, n)={min(m, n)}"
        )
    if config.its < 0:
        raise ValueError("its must be nonnegative")


def _resolve_block_rows(config: PcaConfig, m: int, n: int) -> int:
    if config.block_rows is not None:
        if config.block_rows < 1:
            raise ValueError("block_rows must be >= 1")
        return min(config.block_rows, m)
    if config.mem_budget_bytes is not None:
        return compute_block_rows(config.mem_budget_bytes, n, m)
    return compute_block_rows(64 << 20, n, m)  # default: 64 MB of rows


def oocpca(A: OnDiskMatrix, config: PcaConfig,
           pre: PreprocessSpec | None = None) -> PcaResult:
    """Top-k singular triplets of an on-disk matrix via streamed passes.

    Pass budget over A: one optional stats pass (column centering), one for
    the sketch, two per power iteration, and one for the final projection;
    the counts land in PcaResult.read_stats.
    """
    pre = pre or PreprocessSpec()
    _validate_config(config, A.m, A.n)
    b = _resolve_block_rows(config, A.m, A.n)
    stats = ReadStats()
    prep = compute_preprocess_stats(A, pre, b, stats)

    def apply_right(mat):
        return stream_matmul_right(A, mat, pre, b, stats, prep)

    def apply_left_t(mat):
        return stream_matmul_left_transpose(A, mat, pre, b, stats, prep)

    u, s, v = _core_pca(apply_right, apply_left_t, A.n, config)
    return PcaResult(U=u, S=s, V=v, read_stats=stats)


def randomized_pca_dense(arr, config: PcaConfig,
                         pre: PreprocessSpec | None = None) -> PcaResult:
    """The same algorithm run fully in memory (twin of oocpca)."""
    pre = pre or PreprocessSpec()
    a = np.asarray(arr, dtype=float)
    if a.ndim != 2:
        raise ValueError("expected a 2D matrix")
    _validate_config(config, a.shape[0], a.shape[1])
    e = _dense_preprocess(a, pre)
    u, s, v = _core_pca(lambda mat: e @ mat, lambda mat: e.T @ mat,
                        a.shape[1], config)
    return PcaResult(U=u, S=s, V=v, read_stats=None)
