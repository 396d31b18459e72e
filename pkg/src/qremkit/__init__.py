"""Quantile regression by EM: fixed and mixed effects, selection, diagnostics."""

from .diagnostics import categorical_balance, flat_qq, ks_check, qq_pairs, sign_residuals
from .errors import *  # noqa: F401,F403
from .mixed import BootstrapCI, MixedFit, MixedSpec, bootstrap_ci, fit_eqrem
from .numkit import RngStream, kde_at_zero, sample, solve_wls
from .qrem import (
    AsymptoticCov,
    QremOptions,
    QuantileFit,
    ald_logdensity,
    asymptotic_cov,
    check_loss,
    fit_qrem,
    goodness_of_fit,
)
from .select import (
    InitStrategy,
    MixtureParams,
    QuantileGraph,
    SelectionState,
    SelectOptions,
    fit_select,
    init_candidates,
    neighborhood_graph,
    semms_step,
)
from .simlab import SCENARIOS, Scenario, generate, get_scenario, load_scenario, run_replications

__version__ = "0.1.0"
