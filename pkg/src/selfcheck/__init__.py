"""Self-checking toolkit for deployed neural classifiers.

Fits per-(layer, class) kernel density estimates from training activations,
searches for class-specific layer combinations on validation data, and emits
per-instance alarms (predicted misclassification) plus advice (alternative
class) at deployment time.
"""

from .advice_selection import AdviceConfig, select_advice_layers, subset_vote_classes
from .alarm_selection import (
    AlarmConfig,
    SearchOptions,
    VoteResult,
    majority_vote,
    select_alarm_layers,
)
from .deployment_checker import (
    CheckBatchResult,
    Verdict,
    check,
    check_batch,
    verdict_from_inferred,
)
from .feature_store import (
    DumpError,
    FeatureTensorSet,
    LayerMatrix,
    load_feature_dump,
    mean_pool,
    save_feature_dump,
)
from .kde_engine import (
    InferenceResult,
    KdeBundle,
    KdeCell,
    LayerInference,
    fit_kde,
    infer_layers,
    load_inference,
    load_kde_bundle,
    log_density,
    save_inference,
    save_kde_bundle,
)
from .metrics_eval import (
    ConfusionCounts,
    RateReport,
    advice_accuracy,
    confusion,
    rates,
    spearman_consistency,
)
from .regression_adapter import (
    GammaParams,
    binarize,
    binarize_layers,
    fit_gamma,
    fit_layer_gammas,
)
from .cli import PipelineConfig
from .synth import SynthBench, save_synth_bench, synth_bench

__version__ = "0.1.0"

__all__ = [
    "AdviceConfig",
    "AlarmConfig",
    "CheckBatchResult",
    "ConfusionCounts",
    "DumpError",
    "FeatureTensorSet",
    "GammaParams",
    "InferenceResult",
    "KdeBundle",
    "KdeCell",
    "LayerInference",
    "LayerMatrix",
    "PipelineConfig",
    "RateReport",
    "SearchOptions",
    "SynthBench",
    "Verdict",
    "VoteResult",
    "advice_accuracy",
    "binarize",
    "binarize_layers",
    "check",
    "check_batch",
    "confusion",
    "fit_gamma",
    "fit_kde",
    "fit_layer_gammas",
    "infer_layers",
    "load_feature_dump",
    "load_inference",
    "load_kde_bundle",
    "log_density",
    "majority_vote",
    "mean_pool",
    "rates",
    "save_feature_dump",
    "save_inference",
    "save_kde_bundle",
    "save_synth_bench",
    "select_advice_layers",
    "select_alarm_layers",
    "spearman_consistency",
    "subset_vote_classes",
    "synth_bench",
    "verdict_from_inferred",
]
