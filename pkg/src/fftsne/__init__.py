"""FFT-accelerated t-SNE toolkit.

Library surface: fast Cauchy-kernel n-body sums (nbody), sparse perplexity-
calibrated affinities (affinities), the gradient-descent optimizer
(optimizer), out-of-core randomized PCA (oocpca), and 1D-embedding heatmaps
(heatmap).  The command line lives in fftsne.cli.
"""

from fftsne.nbody import (
    InterpGrid,
    Kernel,
    brute_force_nbody,
    evaluate_nbody,
    gather_potentials,
    kernel_eval,
    kernel_matvec_direct,
    kernel_matvec_fft,
    lagrange_weights,
    make_grid,
    spread_charges,
)

__version__ = "0.1.0"

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
    "__version__",
]
