"""Hierarchical time-series forecasting with exact reconciliation.

The pieces, bottom to top: tree and summing matrix (`hierarchy`), panel
ingestion and blocked folds (`dataset`), per-series AR base forecasts
(`forecasting`), the classical linear and top-down reconcilers
(`baselines`), the trainable encoder-decoder reconciler (`neural`), and
scoring plus the fold-based validation protocol (`evaluation`). The
`hiercast` command wires them into a file pipeline.
"""

from .baselines import (
    MappingMatrix,
    bu_matrix,
    error_covariance,
    middle_out_reconcile,
    oc_matrix,
    reconcile_linear,
    tdfp_reconcile,
    tdhp_matrix,
    tm_matrix,
)
from .dataset import (
    Fold,
    FoldSpec,
    SeriesPanel,
    blocked_folds,
    ingest,
    load_panel,
    naive_scale,
    panel_from_values,
    save_panel,
)
from .errors import ContractError, HiercastError, InputError, NumericError
from .evaluation import (
    EvalReport,
    HyperGrid,
    build_report,
    cv_evaluate,
    mase_score,
    mlae_score,
    paired_t_test,
    per_level_scores,
    random_search,
)
from .forecasting import (
    ARModel,
    ForecastSet,
    build_forecasters,
    fit_ar,
    forecast_panel,
    import_forecasts,
    one_step_forecasts,
    select_lag,
)
from .hierarchy import (
    Hierarchy,
    SummingMatrix,
    aggregate,
    ancestors,
    build_hierarchy,
    is_coherent,
    load_hierarchy,
    summing_matrix,
    trivial_hierarchy,
)
from .neural import (
    ARCH_FC,
    ARCH_SHRUNK,
    AdamState,
    Encoder,
    EncoderConfig,
    Ensemble,
    GradientSet,
    LOSS_MASE,
    LOSS_MLAE,
    LOSS_REG_MASE,
    build_encoder,
    encode,
    gradients,
    init_adam,
    load_model,
    loss,
    optimizer_step,
    reconcile,
    save_model,
    scale_factors,
    train,
    train_ensemble,
)

__version__ = "0.1.0"

__all__ = [
    "ARCH_FC",
    "ARCH_SHRUNK",
    "ARModel",
    "AdamState",
    "ContractError",
    "Encoder",
    "EncoderConfig",
    "Ensemble",
    "EvalReport",
    "Fold",
    "FoldSpec",
    "ForecastSet",
    "GradientSet",
    "Hierarchy",
    "HiercastError",
    "HyperGrid",
    "InputError",
    "LOSS_MASE",
    "LOSS_MLAE",
    "LOSS_REG_MASE",
    "MappingMatrix",
    "NumericError",
    "SeriesPanel",
    "SummingMatrix",
    "aggregate",
    "ancestors",
    "blocked_folds",
    "bu_matrix",
    "build_encoder",
    "build_forecasters",
    "build_hierarchy",
    "build_report",
    "cv_evaluate",
    "encode",
    "error_covariance",
    "fit_ar",
    "forecast_panel",
    "gradients",
    "import_forecasts",
    "ingest",
    "init_adam",
    "is_coherent",
    "load_hierarchy",
    "load_model",
    "load_panel",
    "loss",
    "mase_score",
    "middle_out_reconcile",
    "mlae_score",
    "naive_scale",
    "oc_matrix",
    "one_step_forecasts",
    "optimizer_step",
    "paired_t_test",
    "panel_from_values",
    "save_panel",
    "per_level_scores",
    "random_search",
    "reconcile",
    "reconcile_linear",
    "save_model",
    "scale_factors",
    "select_lag",
    "summing_matrix",
    "tdfp_reconcile",
    "tdhp_matrix",
    "tm_matrix",
    "train",
    "train_ensemble",
    "trivial_hierarchy",
]
