"""Age-period-cohort designs, penalized and REML fits, and the constraint
diagnostics of random-effect APC models."""

__version__ = "0.1.0"

from .design import (
    APCGrid,
    DesignBundle,
    apc_model,
    build_grid,
    fe_design,
    intercept_redundancy_check,
    null_space_basis,
    rank_deficiency,
    re_design,
)
from .effects import EffectDecomposition, decompose_effect
from .orthopoly import (
    OrthoBasis,
    ReparamResult,
    holford_linear_columns,
    orthonormal_poly_basis,
    reparameterize_fe,
    reparameterize_re,
)
from .penalized import (
    EffectEstimate,
    PenaltySpec,
    constraint_transfer,
    influence_matrix,
    penalized_rss,
    solve_penalized,
)
from .reml import (
    FittedModel,
    RLSurface,
    VarianceComponents,
    fit_re_apc,
    maximize_reml,
    profiled_rl,
    restricted_loglik,
    scan_rl_surface,
)
from .constraints import quadratic_decomposition, transfer_property_check, verify_1re_sweep
from .simulation import SimSpec, Table5Row, classify_shrinkage, generate_dataset, run_table5
from .report import CellData, sensitivity_table
