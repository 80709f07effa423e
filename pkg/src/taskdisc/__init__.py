"""Agreement-score measurement, high-agreement task discovery and adversarial splits."""
from .agreement import (
    ASResult,
    StochasticityConfig,
    TrainConfig,
    agreement_score,
    differentiable_as,
    early_stop_monitor,
    majority_vote_extension,
    prop1_bounds_check,
    proxy_agreement,
    stochasticity_ablation,
    train_classifier,
)
from .data import (
    Dataset,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_features,
    load_tds,
    save_tds,
    split_dataset,
)
from .discovery import (
    DiscoveryConfig,
    DiscoveryState,
    HeadBank,
    discover,
    init_head_bank,
    lambda_sweep,
    meta_step,
    nearest_discovered_task,
    uniformity_loss,
)
from .reports import emit_report
from .splits import (
    ClassPartition,
    SplitReport,
    adversarial_split,
    adversarial_split_multiclass,
    as_difference_experiment,
    evaluate_split,
    matched_random_split,
)
from .tasks import (
    Task,
    TaskNetwork,
    materialize,
    naive_random_discovery,
    pixel_threshold_task,
    planted_task,
    random_network_task,
    random_task,
    similarity,
    similarity_matrix,
)

__version__ = "0.1.0"
