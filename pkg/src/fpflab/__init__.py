"""Linear-Gaussian filtering laboratory.

Kalman-Bucy reference filter, finite-N stochastic and deterministic feedback
particle filters with their mean-field coupled copies, Riccati machinery
(ODE, ARE, closed forms), and a Monte-Carlo error-analysis harness.
"""

from .analysis import (
    ErrorReport,
    FitResult,
    PocReport,
    bound_curves,
    fit_rate,
    mse_vs_N,
    mse_vs_time,
    poc_sweep,
)
from .fpf import (
    EmpiricalMoments,
    Ensemble,
    FpfRun,
    MeanFieldRun,
    empirical_moments,
    explicit_deterministic_scalar,
    gain_G,
    initial_particles,
    omega_solve,
    run_fpf,
    run_meanfield_copies,
    step_deterministic,
    step_stochastic,
)
from .kalman import FilterState, KalmanRun, kalman_step, run_kalman
from .model import (
    LinearGaussianModel,
    ObservationPath,
    RngStream,
    ValidationReport,
    replica_seed,
    simulate_truth,
    validate_model,
)
from .riccati import (
    ScalarConstants,
    SteadyState,
    integrate_riccati,
    riccati_rhs,
    scalar_constants,
    scalar_explicit,
    solve_are,
    vector_explicit,
)

__version__ = "0.1.0"
