"""Bias of matched difference-in-differences and data-driven matching advice."""

__version__ = "0.1.0"

from .errors import MatchDidError, NumericalError, ValidationError  # noqa: E402
from .model import (  # noqa: E402
    ModelParams,
    PanelDataset,
    derive,
    two_period_base,
    sample_population,
    scalar_params,
    validate,
)
from .oracle import (  # noqa: E402
    bias_did,
    bias_did_match_x,
    bias_did_match_xy,
    bias_did_match_y_only,
    bias_dim,
    bias_report,
    match_decision,
    reliability,
)
from .estimators import MatchSpec, did_matched, did_naive, did_twoway_fe, difference_in_means  # noqa: E402
from .guidelines import (  # noqa: E402
    bootstrap_guidelines,
    estimate_guideline_x,
    estimate_guideline_xy,
    sensitivity_t1,
    staggered_analysis,
)
from .dataio import PanelSchema, emit_report, load_panel, write_panel  # noqa: E402

__all__ = [
    "MatchDidError", "NumericalError", "ValidationError",
    "ModelParams", "PanelDataset", "derive", "two_period_base", "sample_population", "scalar_params", "validate",
    "bias_did", "bias_did_match_x", "bias_did_match_xy", "bias_did_match_y_only", "bias_dim",
    "bias_report", "match_decision", "reliability",
    "MatchSpec", "did_matched", "did_naive", "did_twoway_fe", "difference_in_means",
    "bootstrap_guidelines", "estimate_guideline_x", "estimate_guideline_xy", "sensitivity_t1",
    "staggered_analysis",
    "PanelSchema", "emit_report", "load_panel", "write_panel",
]
