"""Out-of-distribution detection from layer-wise feature trajectories."""

from .baselines import (
    BASELINE_KINDS,
    KnnIndex,
    MahalanobisState,
    TrajectoryStats,
    energy,
    fit_knn_index,
    fit_mahalanobis_penultimate,
    fit_trajectory_stats,
    knn_score,
    mahalanobis_penultimate_score,
    max_logit,
    msp,
    scaled_trajectories,
    traj_euclidean_score,
    traj_mahalanobis_score,
)
from .diagnostics import (
    DepthEstimate,
    approx_halfspace_depth,
    approx_halfspace_depths,
    layer_score_correlation,
    mean_median_gap,
)
from .feature_store import (
    UNLABELED,
    FeatureSet,
    FormatError,
    global_max_pool,
    load_feature_set,
    read_feature_set,
    save_feature_set,
    validate_feature_set,
    write_feature_set,
)
from .metrics import DetectionReport, auroc, tnr_at_tpr
from .model_io import load_reference_model, read_reference_model, save_reference_model, write_reference_model
from .synthgen import OOD_MODES, SynthConfig, generate, generate_to_files
from .trajectory import (
    KINDS,
    PrototypeBank,
    ReferenceModel,
    decide,
    fit_prototypes,
    fit_reference,
    fit_shared_covariance_inverses,
    layer_score,
    layer_score_mahalanobis,
    make_trajectory,
    score,
    score_set,
    smooth_trajectory,
    softmax,
    threshold_at_tpr,
    trajectories,
)

__version__ = "0.1.0"
