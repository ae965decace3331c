"""Fast evaluation of Cauchy-kernel n-body sums on 1D/2D point sets.

The expensive half of a t-SNE gradient is a family of sums
``phi(y_i) = sum_j K(y_i, y_j) q_j`` over all point pairs, with K a smooth
translation-invariant kernel.  Direct evaluation is O(N^2).  Here the charges
are spread onto an equispaced grid with piecewise Lagrange interpolation, the
node-to-node kernel application (a Toeplitz / block-Toeplitz matrix-vector
product) is carried out with FFTs after circulant embedding, and the node
potentials are interpolated back to the points.  Total cost is
O(N * p^dims + G log G) for G grid nodes, independent of N pairings.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
import scipy.linalg

__all__ = [
    "Kernel",
    "InterpGrid",
    "kernel_eval",
    "make_grid",
    "lagrange_weights",
    "spread_charges",
    "kernel_matvec_fft",
    "kernel_matvec_direct",
    "gather_potentials",
    "evaluate_nbody",
    "brute_force_nbody",
]


class Kernel(enum.Enum):
    """Translation-invariant kernels of the embedding-space interactions."""

    CAUCHY = "cauchy"                    # 1 / (1 + d^2)
    CAUCHY_SQUARED = "cauchy_squared"    # 1 / (1 + d^2)^2


def kernel_eval(kernel: Kernel, squared_distance):
    """Evaluate the kernel on squared distances (scalar or array).

    Total function on nonnegative input: values lie in (0, 1] and
    kernel_eval(kernel, 0) == 1 exactly.
    """
    d2 = np.asarray(squared_distance, dtype=float)
    base = 1.0 / (1.0 + d2)
    if kernel is Kernel.CAUCHY:
        out = base
    elif kernel is Kernel.CAUCHY_SQUARED:
        out = base * base
    else:
        raise ValueError(f"unknown kernel: {kernel!r}")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class InterpGrid:
    """Equispaced interpolation grid shared by spread, convolve and gather.

    In dimension d the nodes sit at ``lo[d] + (i + 1/2) * spacing[d]`` for
    i = 0 .. n_intervals*points_per_interval - 1: points_per_interval nodes in
    each of n_intervals equal cells, globally equispaced over [lo, hi].
    """

    dims: int
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    n_intervals: int
    points_per_interval: int

    def __post_init__(self):
        if self.dims not in (1, 2):
            raise ValueError("only 1D and 2D grids are supported")
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        if self.points_per_interval < 2:
            raise ValueError("points_per_interval must be >= 2")
        if len(self.lo) != self.dims or len(self.hi) != self.dims:
            raise ValueError("bounds do not match dims")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("grid bounds must satisfy hi > lo")

    @property
    def nodes_per_dim(self) -> int:
        return self.n_intervals * self.points_per_interval

    @property
    def total_nodes(self) -> int:
        return self.nodes_per_dim ** self.dims

    @property
    def spacing(self) -> np.ndarray:
        return (np.asarray(self.hi) - np.asarray(self.lo)) / self.nodes_per_dim

    def nodes(self, dim: int = 0) -> np.ndarray:
        """Node coordinates along one dimension."""
        h = self.spacing[dim]
        return self.lo[dim] + (np.arange(self.nodes_per_dim) + 0.5) * h


def _as_points(points, dims: int | None = None) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("points must be a non-empty (N,) or (N, dims) array")
    if dims is not None and arr.shape[1] != dims:
        raise ValueError(f"expected {dims}-dimensional points, got {arr.shape[1]}")
    return arr


def make_grid(points, min_intervals: int = 20, points_per_interval: int = 3) -> InterpGrid:
    """Build the interpolation grid covering ``points``.

    The interval count is max(min_intervals, ceil(largest coordinate span)),
    shared by every dimension.  Bounds are padded by 1e-6 of the span so that
    boundary points are strictly interior; a dimension whose span is below 1
    is widened symmetrically to width 1 so the spacing never degenerates.
    """
    arr = _as_points(points)
    if not np.all(np.isfinite(arr)):
        raise ValueError("points must be finite")
    if min_intervals < 1:
        raise ValueError("min_intervals must be >= 1")
    lo = arr.min(axis=0)
    hi = arr.max(axis=0)
    span = hi - lo
    n_intervals = max(min_intervals, int(math.ceil(float(span.max()))))
    for d in range(arr.shape[1]):
        if span[d] < 1.0:
            center = 0.5 * (lo[d] + hi[d])
            lo[d] = center - 0.5
            hi[d] = center + 0.5
        else:
            pad = 1e-6 * span[d]
            lo[d] -= pad
            hi[d] += pad
    return InterpGrid(
        dims=arr.shape[1],
        lo=tuple(float(v) for v in lo),
        hi=tuple(float(v) for v in hi),
        n_intervals=n_intervals,
        points_per_interval=points_per_interval,
    )


def lagrange_weights(nodes, x):
    """Lagrange basis weights at ``x`` for the given interpolation nodes.

    weight[l] = prod_{j != l} (x - nodes[j]) / (nodes[l] - nodes[j]); the
    weights sum to 1 for any x.  ``x`` may be a scalar or an array; the node
    axis is appended last.
    """
    nd = np.asarray(nodes, dtype=float)
    if nd.ndim != 1 or nd.size < 1:
        raise ValueError("nodes must be a 1D array")
    p = nd.size
    if np.unique(nd).size != p:
        raise ValueError("interpolation nodes must be pairwise distinct")
    xa = np.asarray(x, dtype=float)
    diffs = xa[..., None] - nd
    out = np.empty(xa.shape + (p,))
    for ell in range(p):
        others = [j for j in range(p) if j != ell]
        denom = np.prod(nd[ell] - nd[others])
        out[..., ell] = np.prod(diffs[..., others], axis=-1) / denom
    return out


def _unit_denominators(p: int) -> np.ndarray:
    # prod_{i != j} (j - i) for equispaced nodes in step units
    return np.array(
        [np.prod([j - i for i in range(p) if i != j]) for j in range(p)], dtype=float
    )


def _unit_weights(u: np.ndarray, p: int, denom: np.ndarray) -> np.ndarray:
    # Lagrange weights for nodes at 0, 1, ..., p-1 evaluated at u (in step units).
    d = u[:, None] - np.arange(p)[None, :]
    out = np.empty((u.size, p))
    for j in range(p):
        others = [i for i in range(p) if i != j]
        out[:, j] = np.prod(d[:, others], axis=1) / denom[j]
    return out


@dataclass
class _PointInterp:
    """Precomputed node indices/weights of each point (shared across charges)."""

    node_index: np.ndarray  # (N, p**dims) int
    weights: np.ndarray     # (N, p**dims)


def _point_interp(grid: InterpGrid, points) -> _PointInterp:
    arr = _as_points(points, grid.dims)
    p = grid.points_per_interval
    n_int = grid.n_intervals
    denom = _unit_denominators(p)
    per_dim_base = []
    per_dim_w = []
    for d in range(grid.dims):
        x = arr[:, d]
        if np.any(x < grid.lo[d]) or np.any(x > grid.hi[d]):
            raise ValueError("point outside grid bounds")
        h = grid.spacing[d]
        t = (x - grid.lo[d]) / h  # node units; node i sits at t = i + 1/2
        cell = np.clip((t // p).astype(np.int64), 0, n_int - 1)
        u = t - cell * p - 0.5    # offset from the cell's first node
        per_dim_base.append(cell * p)
        per_dim_w.append(_unit_weights(u, p, denom))
    offs = np.arange(p, dtype=np.int64)
    if grid.dims == 1:
        idx = per_dim_base[0][:, None] + offs[None, :]
        w = per_dim_w[0]
    else:
        n = grid.nodes_per_dim
        ix = per_dim_base[0][:, None, None] + offs[None, :, None]
        iy = per_dim_base[1][:, None, None] + offs[None, None, :]
        idx = (ix * n + iy).reshape(arr.shape[0], p * p)
        w = (per_dim_w[0][:, :, None] * per_dim_w[1][:, None, :]).reshape(
            arr.shape[0], p * p
        )
    return _PointInterp(node_index=idx, weights=w)


def _spread(interp: _PointInterp, charges: np.ndarray, grid: InterpGrid) -> np.ndarray:
    vals = interp.weights * charges[:, None]
    return np.bincount(
        interp.node_index.ravel(), weights=vals.ravel(), minlength=grid.total_nodes
    )


def spread_charges(points, charges, grid: InterpGrid) -> np.ndarray:
    """Project point charges onto grid-node coefficients (step 1 of 3).

    Coefficient w[m] accumulates L_m(y_j) * q_j over the points y_j lying in
    node m's cell (tensor-product weights in 2D).  The coefficient total
    equals the charge total because Lagrange weights sum to 1 per point.
    """
    q = np.asarray(charges, dtype=float)
    arr = _as_points(points, grid.dims)
    if q.shape != (arr.shape[0],):
        raise ValueError("need exactly one charge per point")
    return _spread(_point_interp(grid, arr), q, grid)


@dataclass
class _KernelSpectrum:
    """rfft of the kernel's circulant embedding, reusable across charge vectors."""

    rfft: np.ndarray
    fft_shape: tuple[int, ...]


def _kernel_spectrum(kernel: Kernel, grid: InterpGrid, workers: int = 1) -> _KernelSpectrum:
    n = grid.nodes_per_dim
    if grid.dims == 1:
        h = grid.spacing[0]
        first = kernel_eval(kernel, (np.arange(n) * h) ** 2)
        size = sfft.next_fast_len(2 * n - 1)
        circ = np.zeros(size)
        circ[:n] = first
        circ[size - n + 1:] = first[n - 1:0:-1]
        return _KernelSpectrum(sfft.rfft(circ), (size,))
    hx, hy = grid.spacing
    dx2 = (np.arange(n) * hx) ** 2
    dy2 = (np.arange(n) * hy) ** 2
    first = kernel_eval(kernel, dx2[:, None] + dy2[None, :])
    size = sfft.next_fast_len(2 * n - 1)
    circ = np.zeros((size, size))
    circ[:n, :n] = first
    circ[size - n + 1:, :n] = first[n - 1:0:-1, :]
    circ[:n, size - n + 1:] = first[:, n - 1:0:-1]
    circ[size - n + 1:, size - n + 1:] = first[n - 1:0:-1, n - 1:0:-1]
    return _KernelSpectrum(sfft.rfft2(circ, workers=workers), (size, size))


def _apply_spectrum(
    coeffs: np.ndarray, spectrum: _KernelSpectrum, grid: InterpGrid, workers: int = 1
) -> np.ndarray:
    n = grid.nodes_per_dim
    if grid.dims == 1:
        (size,) = spectrum.fft_shape
        f = sfft.rfft(coeffs, n=size, workers=workers)
        f *= spectrum.rfft
        return sfft.irfft(f, n=size, workers=workers)[:n]
    size = spectrum.fft_shape[0]
    f = sfft.rfft2(coeffs.reshape(n, n), s=(size, size), workers=workers)
    f *= spectrum.rfft
    return sfft.irfft2(f, s=(size, size), workers=workers)[:n, :n].ravel()


def kernel_matvec_fft(coeffs, kernel: Kernel, grid: InterpGrid, workers: int = 1) -> np.ndarray:
    """Apply the node-kernel matrix K[i, j] = K(node_i, node_j) to coefficients.

    Equispaced nodes plus translation invariance make the matrix Toeplitz
    (block Toeplitz with Toeplitz blocks in 2D); it is embedded into a
    circulant of at least twice the size per dimension and applied with real
    FFTs.  Agrees with the dense product to ~1e-15 relative.
    """
    w = np.asarray(coeffs, dtype=float).ravel()
    if w.size != grid.total_nodes:
        raise ValueError("coefficient length does not match the grid")
    return _apply_spectrum(w, _kernel_spectrum(kernel, grid, workers), grid, workers)


def kernel_matvec_direct(coeffs, kernel: Kernel, grid: InterpGrid) -> np.ndarray:
    """Reference node-kernel matvec by direct summation (no FFT).

    1D builds the dense Toeplitz matrix; 2D accumulates one dense Toeplitz
    block per x-offset through BLAS products.  O(G^2) work, used as the
    oracle for kernel_matvec_fft.
    """
    w = np.asarray(coeffs, dtype=float).ravel()
    if w.size != grid.total_nodes:
        raise ValueError("coefficient length does not match the grid")
    n = grid.nodes_per_dim
    if grid.dims == 1:
        h = grid.spacing[0]
        first = kernel_eval(kernel, (np.arange(n) * h) ** 2)
        return scipy.linalg.toeplitz(first) @ w
    hx, hy = grid.spacing
    dy2 = (np.arange(n) * hy) ** 2
    W = w.reshape(n, n)
    V = np.zeros_like(W)
    for d in range(n):
        row = kernel_eval(kernel, (d * hx) ** 2 + dy2)
        block = scipy.linalg.toeplitz(row)
        if d == 0:
            V += W @ block
        else:
            V[d:] += W[:-d] @ block
            V[:-d] += W[d:] @ block
    return V.ravel()


def gather_potentials(points, values, grid: InterpGrid) -> np.ndarray:
    """Interpolate grid-node values back to the points (step 3 of 3)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size != grid.total_nodes:
        raise ValueError("value length does not match the grid")
    interp = _point_interp(grid, points)
    return (v[interp.node_index] * interp.weights).sum(axis=1)


def _evaluate_on_grid(
    arr: np.ndarray,
    charges: np.ndarray,
    kernel: Kernel,
    grid: InterpGrid,
    include_self: bool,
    workers: int = 1,
) -> np.ndarray:
    """Spread/convolve/gather for one or more charge vectors on a fixed grid.

    ``charges`` has shape (N,) or (N, C); the kernel spectrum and the point
    interpolation weights are computed once and reused for every column.
    """
    interp = _point_interp(grid, arr)
    spectrum = _kernel_spectrum(kernel, grid, workers)
    cols = charges if charges.ndim == 2 else charges[:, None]
    out = np.empty_like(cols)
    for c in range(cols.shape[1]):
        coeffs = _spread(interp, cols[:, c], grid)
        node_vals = _apply_spectrum(coeffs, spectrum, grid, workers)
        out[:, c] = (node_vals[interp.node_index] * interp.weights).sum(axis=1)
    if not include_self:
        out -= cols  # K(y, y) = 1 exactly, so the self term is the charge itself
    return out if charges.ndim == 2 else out[:, 0]


def evaluate_nbody(
    points,
    charges,
    kernel: Kernel,
    min_intervals: int = 20,
    points_per_interval: int = 3,
    include_self: bool = True,
    workers: int = 1,
) -> np.ndarray:
    """Approximate phi(y_i) = sum_j K(y_i, y_j) q_j via the grid pipeline.

    ``charges`` may be (N,) or (N, C) to evaluate several charge vectors on
    the same grid with one kernel transform.  With include_self=False the
    j = i term is removed exactly by subtracting q_i (K(y, y) = 1).
    """
    arr = _as_points(points)
    q = np.asarray(charges, dtype=float)
    if q.shape[0] != arr.shape[0]:
        raise ValueError("charges must match point count")
    grid = make_grid(arr, min_intervals, points_per_interval)
    return _evaluate_on_grid(arr, q, kernel, grid, include_self, workers)


def brute_force_nbody(points, charges, kernel: Kernel, include_self: bool = True,
                      block: int = 512) -> np.ndarray:
    """Exact O(N^2) evaluation of the same sums, as a test oracle."""
    arr = _as_points(points)
    q = np.asarray(charges, dtype=float)
    if q.shape[0] != arr.shape[0]:
        raise ValueError("charges must match point count")
    n = arr.shape[0]
    cols = q if q.ndim == 2 else q[:, None]
    out = np.empty_like(cols)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        diff = arr[lo:hi, None, :] - arr[None, :, :]
        d2 = (diff * diff).sum(axis=-1)
        out[lo:hi] = kernel_eval(kernel, d2) @ cols
    if not include_self:
        out -= cols
    return out if q.ndim == 2 else out[:, 0]
