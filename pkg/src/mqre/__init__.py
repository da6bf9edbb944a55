"""M-quantile random-effects regression for two-level survey data.

Robust quantile-like estimation of fixed effects and variance components
under informative sampling, with sandwich inference, weight-scaling
utilities and a design-based Monte Carlo harness.
"""

__version__ = "0.1.0"

from .design import ClusterBlock, FitResult, GroupedDesign, VarianceComponents
from .exceptions import (
    DegenerateDesignError,
    InferenceUnavailableError,
    InputError,
    MqreError,
    NumericalError,
    SimulationError,
    SingularDesignError,
    StepSingularError,
)
from .influence import (
    InfluenceFamily,
    InfluenceSpec,
    asymmetric_psi,
    asymmetric_psi_derivative,
    huber_psi,
    huber_rho,
    k2q,
)
from .core import (
    build_cluster_covariance,
    fit_mqre,
    fixed_point_variance,
    newton_step_beta,
    weighted_score,
)
from .inference import SandwichParts, estimate_G, per_cluster_scores, sandwich
from .mq import MqFit, fit_mq
from .dataio import DatasetSchema, read_dataset, write_design_csv
from .sim import (
    Population,
    SimConfig,
    SimReport,
    SimRow,
    census_target,
    consistency_study,
    generate_population,
    informative_sample,
    run_monte_carlo,
)
from .weights import WeightScaling, scale_design, scale_weights

__all__ = [
    "__version__",
    "ClusterBlock",
    "GroupedDesign",
    "VarianceComponents",
    "FitResult",
    "InfluenceFamily",
    "InfluenceSpec",
    "huber_rho",
    "huber_psi",
    "asymmetric_psi",
    "asymmetric_psi_derivative",
    "k2q",
    "MqFit",
    "fit_mq",
    "build_cluster_covariance",
    "weighted_score",
    "newton_step_beta",
    "fixed_point_variance",
    "fit_mqre",
    "SandwichParts",
    "per_cluster_scores",
    "estimate_G",
    "sandwich",
    "WeightScaling",
    "scale_weights",
    "scale_design",
    "DatasetSchema",
    "read_dataset",
    "write_design_csv",
    "SimConfig",
    "SimReport",
    "SimRow",
    "Population",
    "generate_population",
    "informative_sample",
    "census_target",
    "run_monte_carlo",
    "consistency_study",
    "MqreError",
    "SingularDesignError",
    "StepSingularError",
    "DegenerateDesignError",
    "NumericalError",
    "InferenceUnavailableError",
    "SimulationError",
    "InputError",
]
