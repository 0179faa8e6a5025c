"""Mean-field interacting diffusions with vanishing noise.

Simulates N-particle systems whose drift and diffusion depend on the
empirical measure, solves the deterministic hydrodynamic limit, evaluates
stochastic currents in truncated negative Sobolev norms, computes the
quadratic-control rate function of the joint (measure, current) deviation
principle, and tests the variational Laplace bounds by Monte Carlo.
"""

__version__ = "0.1.0"

from .models import (
    CoefficientModel,
    EmpiricalMeasure,
    GradientPotential,
    InitialEnsemble,
    LinearInteraction,
    ModelValidationError,
    diffusion_eval,
    drift_eval,
    validate_model,
)
from .wasserstein import wasserstein1, wasserstein1_detailed
from .simulate import (
    AffineControl,
    OpenLoopControl,
    PathEnsemble,
    SimConfig,
    SimulationDivergedError,
    moment_diagnostics,
    simulate,
    simulate_controlled,
    time_marginal,
)
from .currents import (
    CurrentCoefficients,
    ModeGrid,
    SobolevIndex,
    current_distance,
    current_fourier_coefficients,
    current_pairing_ito_corrected,
    current_pairing_stratonovich,
    dual_pseudo_norm,
    test_function_sobolev_norm,
)
from .vlasov import (
    AffineField,
    GriddedField,
    LimitFlow,
    limit_current_coefficients,
    solve_controlled_continuity,
    solve_limit_flow,
    vlasov_residual,
)
from .rate import (
    ControlledEnsemble,
    RateResult,
    TerminalMeanTarget,
    TerminalPairingTarget,
    control_energy_cost,
    ensemble_current_pairing,
    optimize_rate,
    velocity_field_cost,
)
from .laplace import (
    LaplaceFunctional,
    McEstimate,
    ScanSchedule,
    TanhOfCurrentPairing,
    TanhOfMean,
    laplace_naive,
    ldp_scaling_scan,
    variational_bound,
)
