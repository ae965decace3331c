"""t-SNE gradient descent.

The gradient splits into an attractive part over the sparse affinity pairs
and a repulsive part assembled from s + 2 kernel sums: a unit-charge Cauchy
sum (whose total is the global normalization Z) plus squared-Cauchy sums with
unit and per-coordinate charges.  Repulsion is evaluated exactly for small N
and through the FFT grid pipeline above that.  Updates use the standard
momentum + per-component gain scheme with an early/late exaggeration
schedule on the attractive term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from fftsne import nbody
from fftsne.affinities import AffinityConfig, SparseAffinities, affinities_from_data
from fftsne.nbody import Kernel, make_grid

__all__ = [
    "ExaggerationSchedule",
    "TsneConfig",
    "OptimizerState",
    "Repulsion",
    "TsneResult",
    "compute_attractive",
    "compute_repulsive",
    "gradient",
    "kl_divergence",
    "step",
    "run_tsne",
]

EXACT_REPULSION_MAX_N = 1000
EXACT_KL_MAX_N = 10_000


@dataclass
class ExaggerationSchedule:
    """Attractive-force multiplier over the iteration count.

    alpha = early_coeff up to early_until_iter, then 1, then late_coeff from
    late_from_iter (late phase disabled while late_coeff == 1).
    """

    early_coeff: float = 12.0
    early_until_iter: int = 250
    late_coeff: float = 1.0
    late_from_iter: int | None = None

    def validate(self, n_iter: int) -> None:
        if self.early_coeff < 1.0 or self.late_coeff < 1.0:
            raise ValueError("exaggeration coefficients must be >= 1")
        late_from = self.resolved_late_from(n_iter)
        if not 0 <= self.early_until_iter <= late_from <= n_iter:
            raise ValueError(
                "need 0 <= early_until_iter <= late_from_iter <= n_iter"
            )

    def resolved_late_from(self, n_iter: int) -> int:
        if self.late_from_iter is not None:
            return self.late_from_iter
        return max(self.early_until_iter, n_iter - 250)

    def alpha(self, iteration: int, n_iter: int) -> float:
        if iteration < self.early_until_iter:
            return self.early_coeff
        if self.late_coeff != 1.0 and iteration >= self.resolved_late_from(n_iter):
            return self.late_coeff
        return 1.0


@dataclass
class TsneConfig:
    """Everything run_tsne needs beyond the data itself."""

    dims: int = 2
    perplexity: float = 30.0
    n_iter: int = 1000
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch_iter: int = 250
    exaggeration: ExaggerationSchedule = field(default_factory=ExaggerationSchedule)
    seed: int = 0
    knn_method: str = "auto"
    n_neighbors: int | None = None
    n_trees: int = 50
    subsample: int | None = None
    min_intervals: int = 20
    points_per_interval: int = 3
    repulsion_method: str = "auto"   # auto | exact | fft
    pca_dims: int | None = 50        # None disables the PCA front end
    workers: int = 1

    def validate(self) -> None:
        if self.dims not in (1, 2):
            raise ValueError("embedding dims must be 1 or 2")
        if self.n_iter < 1:
            raise ValueError("n_iter must be positive")
        if self.perplexity <= 0:
            raise ValueError("perplexity must be positive")
        self.exaggeration.validate(self.n_iter)


@dataclass
class OptimizerState:
    """Mutable descent state: velocity, per-component gains, iteration count."""

    iteration: int
    velocity: np.ndarray
    gains: np.ndarray
    learning_rate: float

    @classmethod
    def fresh(cls, n: int, dims: int, learning_rate: float = 200.0) -> "OptimizerState":
        return cls(
            iteration=0,
            velocity=np.zeros((n, dims)),
            gains=np.ones((n, dims)),
            learning_rate=learning_rate,
        )


@dataclass
class Repulsion:
    """Assembled repulsive forces plus the component sums behind them.

    z is the global normalization (total of the unit-charge Cauchy
    potentials); k2_potentials stacks the squared-Cauchy sums with the
    coordinate charges first and the unit charge last, all self-excluded.
    """

    forces: np.ndarray        # (N, s)
    z: float
    k1_potential: np.ndarray  # (N,)
    k2_potentials: np.ndarray  # (N, s + 1)


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl_log: np.ndarray
    affinities: SparseAffinities


def compute_attractive(P: SparseAffinities, Y) -> np.ndarray:
    """Attractive force sum over stored pairs: p_ij * (1 + d^2)^-1 * (y_i - y_j).

    q_ij * Z collapses to the unnormalized Cauchy weight, so Z never enters.
    Accumulation uses fixed-order bincount and is deterministic.
    """
    y = np.asarray(Y, dtype=float)
    if y.ndim != 2 or y.shape[0] != P.n:
        raise ValueError("embedding shape does not match the affinities")
    diff = y[P.rows] - y[P.cols]
    w = P.values / (1.0 + (diff * diff).sum(axis=1))
    forces = np.empty_like(y)
    for c in range(y.shape[1]):
        wd = w * diff[:, c]
        forces[:, c] = np.bincount(P.rows, weights=wd, minlength=P.n)
        forces[:, c] -= np.bincount(P.cols, weights=wd, minlength=P.n)
    return forces


@njit(parallel=True, fastmath=True, cache=True)
def _exact_repulsion_sums(y):  # pragma: no cover - exercised via wrappers
    n, s = y.shape
    k1 = np.zeros(n)
    k2 = np.zeros((n, s + 1))
    for i in prange(n):
        acc1 = 0.0
        for j in range(n):
            if j == i:
                continue
            d2 = 0.0
            for c in range(s):
                d = y[i, c] - y[j, c]
                d2 += d * d
            a = 1.0 / (1.0 + d2)
            b = a * a
            acc1 += a
            for c in range(s):
                k2[i, c] += b * y[j, c]
            k2[i, s] += b
        k1[i] = acc1
    return k1, k2


def _fft_repulsion_sums(y: np.ndarray, min_intervals: int, points_per_interval: int,
                        workers: int):
    grid = make_grid(y, min_intervals, points_per_interval)
    interp = nbody._point_interp(grid, y)
    spec1 = nbody._kernel_spectrum(Kernel.CAUCHY, grid, workers)
    spec2 = nbody._kernel_spectrum(Kernel.CAUCHY_SQUARED, grid, workers)

    def convolve(charges, spectrum):
        coeffs = nbody._spread(interp, charges, grid)
        vals = nbody._apply_spectrum(coeffs, spectrum, grid, workers)
        return (vals[interp.node_index] * interp.weights).sum(axis=1)

    n, s = y.shape
    k1 = convolve(np.ones(n), spec1) - 1.0
    k2 = np.empty((n, s + 1))
    for c in range(s):
        k2[:, c] = convolve(y[:, c], spec2) - y[:, c]
    k2[:, s] = convolve(np.ones(n), spec2) - 1.0
    return k1, k2


def compute_repulsive(
    Y,
    min_intervals: int = 20,
    points_per_interval: int = 3,
    method: str = "auto",
    workers: int = 1,
) -> Repulsion:
    """Repulsive forces F_i(m) = (y_i(m) * S_unit,i - S_coord_m,i) / Z.

    S_* are the self-excluded squared-Cauchy sums and Z the total of the
    unit-charge Cauchy sums.  method="exact" runs the O(N^2) double loop,
    "fft" the grid pipeline, "auto" picks exact up to N=1000.
    """
    y = np.ascontiguousarray(Y, dtype=float)
    if y.ndim != 2 or y.shape[1] not in (1, 2):
        raise ValueError("embedding must be (N, 1) or (N, 2)")
    n = y.shape[0]
    if n < 2:
        raise ValueError("repulsion needs at least two points")
    if method == "auto":
        method = "exact" if n <= EXACT_REPULSION_MAX_N else "fft"
    if method == "exact":
        k1, k2 = _exact_repulsion_sums(y)
    elif method == "fft":
        k1, k2 = _fft_repulsion_sums(y, min_intervals, points_per_interval, workers)
    else:
        raise ValueError(f"unknown repulsion method: {method!r}")
    z = float(k1.sum())
    if not z > 0:
        raise ValueError("normalization Z must be positive")
    forces = (y * k2[:, -1:] - k2[:, :-1]) / z
    return Repulsion(forces=forces, z=z, k1_potential=k1, k2_potentials=k2)


def gradient(
    P: SparseAffinities,
    Y,
    alpha: float = 1.0,
    min_intervals: int = 20,
    points_per_interval: int = 3,
    method: str = "auto",
    workers: int = 1,
) -> np.ndarray:
    """Full KL gradient 4 * (alpha * F_attr - F_rep)."""
    if alpha < 1.0:
        raise ValueError("exaggeration alpha must be >= 1")
    attr = compute_attractive(P, Y)
    rep = compute_repulsive(Y, min_intervals, points_per_interval, method, workers)
    return 4.0 * (alpha * attr - rep.forces)


def _kl_terms(P: SparseAffinities, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    diff = Y[P.rows] - Y[P.cols]
    d2 = (diff * diff).sum(axis=1)
    mask = P.values > 0
    return P.values[mask], d2[mask]


def _kl_given_z(P: SparseAffinities, Y: np.ndarray, z: float) -> float:
    p, d2 = _kl_terms(P, Y)
    q = 1.0 / ((1.0 + d2) * z)
    return 2.0 * float(np.sum(p * (np.log(p) - np.log(q))))


def kl_divergence(P: SparseAffinities, Y, method: str = "auto") -> float:
    """KL(P || Q) over the stored pairs; zero-mass entries contribute nothing.

    The normalization Z is computed exactly up to N = 10^4 and through the
    FFT unit-charge Cauchy sum above that.
    """
    y = np.ascontiguousarray(Y, dtype=float)
    if y.shape[0] < 2:
        raise ValueError("KL needs at least two points")
    if method == "auto":
        method = "exact" if y.shape[0] <= EXACT_KL_MAX_N else "fft"
    if method == "exact":
        k1, _ = _exact_repulsion_sums(y)
        z = float(k1.sum())
    else:
        k1 = nbody.evaluate_nbody(y, np.ones(y.shape[0]), Kernel.CAUCHY,
                                  include_self=False)
        z = float(k1.sum())
    return _kl_given_z(P, y, z)


def step(state: OptimizerState, Y, grad, momentum: float | None = None) -> np.ndarray:
    """One momentum + gains update; returns the moved embedding.

    The velocity update uses the gains as they stand; gains are then adapted
    for the next call (x0.8 where gradient and velocity agreed in sign, +0.2
    otherwise, floored at 0.01).
    """
    g = np.asarray(grad, dtype=float)
    y = np.asarray(Y, dtype=float)
    if g.shape != y.shape or g.shape != state.velocity.shape:
        raise ValueError("gradient, embedding and state shapes must agree")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError(
            f"non-finite gradient at iteration {state.iteration}"
        )
    if momentum is None:
        momentum = 0.5 if state.iteration < 250 else 0.8
    old_velocity = state.velocity
    agree = np.sign(g) == np.sign(old_velocity)
    state.velocity = momentum * old_velocity - state.learning_rate * state.gains * g
    new_y = y + state.velocity
    state.gains = np.where(agree, state.gains * 0.8, state.gains + 0.2)
    np.maximum(state.gains, 0.01, out=state.gains)
    state.iteration += 1
    return new_y


def _validate_affinities(P: SparseAffinities) -> None:
    if abs(P.ordered_total - 1.0) > 1e-9:
        raise ValueError("affinity mass over ordered pairs must be 1 (within 1e-9)")


def run_tsne(
    data=None,
    affinities: SparseAffinities | None = None,
    config: TsneConfig | None = None,
    callback=None,
) -> TsneResult:
    """Run the full pipeline: (PCA ->) affinities -> seeded init -> descent.

    Exactly one of ``data`` and ``affinities`` must be provided.  ``callback``
    (if given) is invoked each iteration with (iteration, embedding, info)
    where info carries the attractive/repulsive forces, alpha, Z and the KL
    value of the pre-step embedding.  Returns the final embedding plus the
    per-iteration KL log; fully deterministic for a fixed seed.
    """
    cfg = config or TsneConfig()
    cfg.validate()
    if (data is None) == (affinities is None):
        raise ValueError("provide exactly one of data or affinities")

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    if data is not None:
        x = np.asarray(data, dtype=float)
        if x.ndim != 2:
            raise ValueError("data must be (N, d)")
        if cfg.pca_dims is not None and x.shape[1] > cfg.pca_dims:
            from fftsne.oocpca import PcaConfig, PreprocessSpec, randomized_pca_dense

            pca = randomized_pca_dense(
                x,
                PcaConfig(k=cfg.pca_dims, seed=int(seeds[2].generate_state(1)[0])),
                PreprocessSpec(center_cols=True),
            )
            x = pca.U * pca.S
        aff_cfg = AffinityConfig(
            perplexity=cfg.perplexity,
            n_neighbors=cfg.n_neighbors,
            method=cfg.knn_method,
            n_trees=cfg.n_trees,
            subsample=cfg.subsample,
            seed=int(seeds[0].generate_state(1)[0]),
        )
        P, _ = affinities_from_data(x, aff_cfg)
    else:
        P = affinities
        _validate_affinities(P)

    n = P.n
    rng = np.random.default_rng(seeds[1])
    y = rng.normal(0.0, 1e-4, size=(n, cfg.dims))
    state = OptimizerState.fresh(n, cfg.dims, cfg.learning_rate)
    kl_log = np.empty(cfg.n_iter)

    for it in range(cfg.n_iter):
        alpha = cfg.exaggeration.alpha(it, cfg.n_iter)
        attr = compute_attractive(P, y)
        rep = compute_repulsive(
            y,
            cfg.min_intervals,
            cfg.points_per_interval,
            cfg.repulsion_method,
            cfg.workers,
        )
        grad = 4.0 * (alpha * attr - rep.forces)
        kl_log[it] = _kl_given_z(P, y, rep.z)
        if callback is not None:
            callback(
                it,
                y,
                {
                    "attractive": attr,
                    "repulsion": rep,
                    "alpha": alpha,
                    "kl": kl_log[it],
                },
            )
        momentum = (
            cfg.momentum_early
            if it < cfg.momentum_switch_iter
            else cfg.momentum_late
        )
        y = step(state, y, grad, momentum)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"embedding diverged at iteration {it}")

    return TsneResult(embedding=y, kl_log=kl_log, affinities=P)
