"""Particle flows that push a parameter distribution onto observed data.

Evolves an ensemble of parameter vectors u_j so that the push-forward of
their empirical law through a forward map G matches a reference data
distribution, by explicit-Euler steps of Wasserstein gradient flows
(KL, chi-squared/Hellinger, 1-D quadratic Wasserstein) with adjoint-based
gradient actions, plus sampling baselines and well-posedness diagnostics
for linear maps.
"""

from ._kernels import HAS_NUMBA, USE_NUMBA
from .divergence import (
    AnalyticGaussian,
    KdeFromSamples,
    chi2_rate,
    kl_estimate,
    kl_xi,
    w2_potential_grad_1d,
)
from .ensemble import (
    KdeConfig,
    ParticleEnsemble,
    kde_density,
    kde_log_density,
    kde_score,
    load_csv,
    resolve_bandwidth,
    sample_gaussian,
    sample_uniform,
    save_csv,
    silverman_bandwidth,
)
from .errors import ConfigError, NumericsError
from .flow import (
    FlowConfig,
    FlowTrajectory,
    deterministic_gd,
    deterministic_gd_limit,
    hellinger_chi2_step,
    projected_langevin_step,
    run_flow,
    wgf_step,
)
from .forward import (
    Elliptic1D,
    Elliptic2D,
    EllipticGrid2D,
    ForwardMap,
    LinearMap,
    augment,
    elliptic1d_solve,
    elliptic2d_solve,
)
from .theory import (
    TheoryReport,
    energy_decay_check,
    ks_statistic_1d,
    over_determined_check,
    project_data,
    under_determined_check,
    w2_1d,
)

__version__ = "0.1.0"
