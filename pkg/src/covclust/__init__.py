"""covclust: covariate-class clustering of sparse binary usage matrices.

Pipeline: ingest usage triplets into a sparse 0/1 matrix, sample training
rows that preserve its margins, estimate per-row category importance by
L1-penalized distance regression, group the importance supports into
covariate classes, project every user onto class loadings, cluster in that
space, and score per-user category recommendations within clusters.
"""

__version__ = "0.1.0"

from .classes import (
    ClassQuality,
    ClassSet,
    class_entropy_difference,
    class_impurity,
    class_objective,
    derive_classes,
    group_importance_rows,
    select_classes,
)
from .clustering import (
    ClusterModel,
    ClusterQuality,
    assign_user,
    cluster_entropy_change,
    cluster_impurity,
    compute_quality,
    cooccurrence_histogram,
    kmeans_fit,
    select_cluster_count,
    similarity_stats,
)
from .errors import CovClustError
from .importance import (
    CrossValidatedLambda,
    FixedLambda,
    ImportanceMatrix,
    LassoSolution,
    RegressionInstance,
    build_regression_instance,
    estimate_importance,
    lasso_fit,
    select_lambda,
    verify_kkt,
)
from .pipeline import (
    PipelineConfig,
    RunManifest,
    baseline_kmeans_raw,
    export_diagnostics,
    load_config,
    run_pipeline,
)
from .recommend import (
    CategoryPrior,
    RecommendationList,
    SimilarityVector,
    category_prior,
    recommend,
    score_categories,
    similarity_vector,
)
from .sampler import SamplePlan, sample_training_rows
from .sparse import (
    EntityCatalog,
    SparseBinaryMatrix,
    SparsityReport,
    hamming_distance,
    ingest_triplets,
    iter_triplets,
    load_matrix,
    parse_triplet_lines,
    save_matrix,
    sparsity_report,
)
from .transform import FeatureMatrix, transform, transform_single
