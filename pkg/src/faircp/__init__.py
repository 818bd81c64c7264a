"""Fair conformal prediction toolkit.

Calibrates classification prediction sets with marginal coverage, learns
unfairly treated latent groups with a variational encoder-decoder, builds
union prediction sets with adaptive equalized coverage, and audits
conditional coverage with linear and quadratic worst-slab metrics.
"""

from .conformal import (
    CalibratedPredictor,
    aps_score,
    calibrate,
    marginal_cp,
    partial_cp,
    predict_set,
    union_sets,
)
from .datasets import (
    Dataset,
    SplitSpec,
    corrupt_group,
    gen_eight_subgroup,
    gen_metric_eval,
    gen_synthetic_xnor,
    load_dataset,
    load_nursery,
    save_dataset,
    split,
)
from .groups import (
    GroupModel,
    TrainConfig,
    attribute_features,
    coverage_loss,
    latent_cp,
    predict_union_sets,
    project_min_mass,
    sample_groups,
    train_group_model,
)
from .metrics import (
    SlabProbe,
    SlabResult,
    average_coverage,
    average_size,
    group_coverage,
    worst_slab,
    wsc_audit,
)
from .nnet import Adam, Mlp, RngStream, gaussian_kl, grad_check, reparam_sample

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CalibratedPredictor",
    "Dataset",
    "GroupModel",
    "Mlp",
    "RngStream",
    "SlabProbe",
    "SlabResult",
    "SplitSpec",
    "TrainConfig",
    "aps_score",
    "attribute_features",
    "average_coverage",
    "average_size",
    "calibrate",
    "corrupt_group",
    "coverage_loss",
    "gaussian_kl",
    "gen_eight_subgroup",
    "gen_metric_eval",
    "gen_synthetic_xnor",
    "grad_check",
    "group_coverage",
    "latent_cp",
    "load_dataset",
    "load_nursery",
    "marginal_cp",
    "partial_cp",
    "predict_set",
    "predict_union_sets",
    "project_min_mass",
    "reparam_sample",
    "sample_groups",
    "save_dataset",
    "split",
    "train_group_model",
    "union_sets",
    "worst_slab",
    "wsc_audit",
]
