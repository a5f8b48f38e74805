"""Extended Kalman filtering for chemical reaction networks with CLE process noise."""

from .crn import (CRN, Complement, Reaction, SpeciesValue, build_crn, crn_from_dict, diffusion, drift,
                  load_model, propensities, propensity_jacobian, spectral_norm)
from .ekf import FilterState, StepRecord, correct, predict, process_noise_cov, run
from .errors import CleEkfError, ConfigError, NotContractiveError, NumericalError
from .harness import (EnsembleMetrics, ExperimentConfig, GeneExpressionParams, gene_expression_model,
                      innovation_whiteness, run_experiment)
from .sim import MeasurementModel, MeasurementSeries, Trajectory, measure, simulate
from .stability import (StabilityParams, check_exponential_bound, delta_max, derive_constants,
                        estimate_bounds, gamma, polynomial_coefficients, stability_report)

__version__ = "0.1.0"
