"""Low-rank visual projector with an analytic inference cost model."""
from .config import ProjectorConfig, config_for_budget, token_count
from .cost import CostReport, LlmConfig, Workload, cost_report, flops_decode, flops_prefill, flops_projector, flops_vision
from .delta import DeltaFamily, DeltaLinear, delta_apply, delta_init, delta_materialize, update_rank
from .errors import (
    ConfigError,
    DeltaProjError,
    DimensionError,
    EvaluationError,
    FormatError,
    NumericError,
    StateError,
)
from .pipeline import Projector, VisionFeatures, VisualTokens, build_queries, kv_pathway, project, projector_backward

__version__ = "0.1.0"
