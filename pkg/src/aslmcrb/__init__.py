"""Misspecification-aware Cramer-Rao analysis for ASL parameter mapping.

Library + CLI that fits the Buxton kinetic model to multi-PLD ASL data,
computes empirical sandwich covariance bounds next to the classical
Cramer-Rao bound, and summarizes the mismatch between them through the
eigenvalues of the CRB-whitened sandwich bound.
"""

__version__ = "0.1.0"

from .bounds import (  # noqa: F401
    BoundsReport,
    congruence_metric,
    crb_theoretical,
    empirical_A,
    empirical_B,
    mcrb_sandwich,
    voxel_bounds_report,
)
from .dataset import VoxelDataset, read_dataset, write_dataset  # noqa: F401
from .fitting import (  # noqa: F401
    BoundsBox,
    FitOptions,
    FitResult,
    VoxelSeries,
    fit_map,
    grid_initialize,
    mle_fit,
    negative_log_likelihood,
)
from .kinetic import (  # noqa: F401
    KineticParams,
    Protocol,
    buxton_signal,
    buxton_signal_oracle,
    default_plds,
    jacobian,
    model_hessians,
    sample_times,
    signal_curve,
)
from .noise import NoiseSpec, add_noise, estimate_sigma_background  # noqa: F401
from .phantom import PhantomSpec, generate_phantom, sigma_for_snr  # noqa: F401
