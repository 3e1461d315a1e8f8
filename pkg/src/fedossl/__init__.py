"""Federated open-world semi-supervised learning, simulated at desk scale.

Clients hold partially labeled data in which some classes never carry labels.
They train a shared MLP with a pairwise clustering objective, an
uncertainty-weighted confidence term and a calibration loss towards global
centroids, which the server obtains by re-clustering equal-size local clusters.
"""
from .clustering import (
    CentroidSet,
    ClusterResult,
    TransportPlan,
    aggregate_global_centroids,
    anonymity_parameter,
    balanced_cluster,
    kmeans_cluster,
    sinkhorn_plan,
)
from .config import PRESETS, ExperimentConfig, apply_preset, from_dict, load_config
from .data import (
    ClassTaxonomy,
    ClientShard,
    Dataset,
    IngestionError,
    derive_taxonomy,
    generate_synthetic,
    ingest_csv,
    partition_open_world,
)
from .evaluation import MetricsReport, confusion, gap_report, hungarian_match, metrics
from .federation import (
    ExperimentResult,
    ProtocolError,
    aggregate_models,
    client_update,
    run_centralized,
    run_experiment,
    run_round,
    sample_clients,
)
from .numerics import (
    ConfigurationError,
    Model,
    OptimizerState,
    backward,
    finite_difference_check,
    forward,
    init_model,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .objective import LossWeights, ObjectiveOptions, PseudoClassCounts, build_pairs, total_objective

__version__ = "0.1.0"
