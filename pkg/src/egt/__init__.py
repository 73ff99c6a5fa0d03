"""Grid-based fairness diagnostics for generative models.

The package measures how a generative model treats sub-populations of a
discretized 1-D domain: f-divergences between per-group conditionals,
matched/equal group-odds checks, an equal-treatment gap, constructions
showing the odds criteria can hide arbitrarily unequal treatment, and
trainers that close the gap.  Orchestration lives in ``egt.runner`` and
the CLI in ``egt.cli``; both are imported on demand, not here.
"""

__version__ = "0.1.0"

from .divergence import (
    FGenerator,
    builtin_generator,
    decomposition_check,
    f_divergence,
    support_precision_recall,
)
from .errors import EgtError, NumericalError, PropertyViolation, ValidationError
from .fairness import (
    ClosureFamily,
    check_ego,
    check_egt,
    check_mgo,
    closure_optimum,
    fairness_report,
    verify_lower_bound,
)
from .grid import (
    AttributePartition,
    GriddedDensity,
    GridSpec,
    GroupedDistribution,
    decompose,
    halfline_partition,
    recombine,
    truncated_gaussian,
    warmup_target,
)
from .counterexample import (
    CounterexampleSpec,
    build_counterexample,
    build_q_alpha_beta,
    invert_phi,
    phi,
)
from .levelset import SweepGrid, extract_level_set, imbalance_extremes, sweep
from .sampling import (
    SampleBatch,
    empirical_density,
    make_rejection_plan,
    rejection_filter,
    sample,
)
from .storage import load_distribution, save_distribution
from .training import (
    EmaTracker,
    HistogramModel,
    TrainConfig,
    conditional_train,
    exact_objective,
    gradient,
    train,
)
from .diffusion import (
    DiffusionToy,
    bayes_optimal_affine,
    default_noise_levels,
    diffusion_minmax_train,
    diffusion_train,
    expected_group_losses,
    loss_gap,
)

__all__ = [
    "__version__",
    "EgtError", "ValidationError", "NumericalError", "PropertyViolation",
    "GridSpec", "GriddedDensity", "AttributePartition", "GroupedDistribution",
    "decompose", "recombine", "truncated_gaussian", "halfline_partition",
    "warmup_target",
    "FGenerator", "builtin_generator", "f_divergence",
    "support_precision_recall", "decomposition_check",
    "check_mgo", "check_ego", "check_egt", "fairness_report",
    "ClosureFamily", "closure_optimum", "verify_lower_bound",
    "phi", "invert_phi", "build_q_alpha_beta",
    "CounterexampleSpec", "build_counterexample",
    "SweepGrid", "sweep", "extract_level_set", "imbalance_extremes",
    "TrainConfig", "HistogramModel", "EmaTracker", "exact_objective",
    "gradient", "train", "conditional_train",
    "DiffusionToy", "default_noise_levels", "bayes_optimal_affine",
    "expected_group_losses", "loss_gap", "diffusion_train",
    "diffusion_minmax_train",
    "SampleBatch", "sample", "make_rejection_plan", "rejection_filter",
    "empirical_density",
    "save_distribution", "load_distribution",
]
