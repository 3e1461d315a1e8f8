"""Round orchestration: sample, local training, model averaging, centroid aggregation.

Everything is a deterministic function of the config seed. Client work runs
sequentially in ascending id order, and every reduction uses that order.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import clustering
from .clustering import CentroidSet
from .config import ExperimentConfig, participation_count
from .data import ClassTaxonomy, ClientShard, Dataset, TrainingView, generate_synthetic, ingest_csv, \
    partition_open_world
from .evaluation import MetricsReport, confusion, metrics
from .numerics import ConfigurationError, Model, OptimizerState, forward, init_model, log_softmax, sgd_step
from .objective import (
    BREAKDOWN_KEYS,
    LossWeights,
    ObjectiveOptions,
    PseudoClassCounts,
    total_objective,
    update_pseudo_counts,
)

# stream tags for np.random.default_rng([seed, tag, ...])
_DATA, _PARTITION, _INIT, _SAMPLE, _CLIENT = 11, 12, 13, 14, 15


class ProtocolError(RuntimeError):
    pass


@dataclass
class ClientState:
    client_id: int
    model: Model
    optimizer: OptimizerState
    pseudo_counts: PseudoClassCounts
    shard: TrainingView
    last_local_centroids: CentroidSet | None = None


@dataclass
class ServerState:
    global_model: Model
    global_centroids: CentroidSet | None = None
    round_index: int = 0


@dataclass
class RoundRecord:
    round_index: int
    sampled: list[int]
    losses: dict[int, dict[str, float]]
    metrics: MetricsReport | None = None
    duration: float = 0.0
    anonymity: dict[int, float] = field(default_factory=dict)
    local_centroids: list[CentroidSet] = field(default_factory=list, repr=False)
    global_centroids: CentroidSet | None = field(default=None, repr=False)
    train_log: list[dict] = field(default_factory=list, repr=False)


def sample_clients(total: int, participation: float, round_seed) -> list[int]:
    """Uniform sample without replacement of ceil(participation * total) ids, sorted."""
    if not 0 < participation <= 1:
        raise ConfigurationError("participation must be in (0, 1]")
    k = participation_count(total, participation)
    if k == total:
        return list(range(total))
    rng = np.random.default_rng(round_seed)
    return sorted(int(i) for i in rng.choice(total, size=k, replace=False))


def aggregate_models(uploads: Sequence[tuple[int, Model, int]]) -> Model:
    """Data-size weighted parameter average.

    Computed as ``ref + sum_i w_i (theta_i - ref)`` with the lowest-id upload as
    ``ref``: equal to ``sum_i w_i theta_i`` since the weights sum to one, and
    exact when all uploads coincide.
    """
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    uploads = sorted(uploads, key=lambda u: u[0])
    sizes = np.array([u[2] for u in uploads], dtype=np.float64)
    if np.any(sizes <= 0):
        raise ProtocolError("client sizes must be positive")
    weights = sizes / sizes.sum()
    ref = uploads[0][1]
    ref_params = ref.parameters()
    shapes = [p.shape for p in ref_params]
    acc = [np.zeros_like(p) for p in ref_params]
    for (cid, model, _), w in zip(uploads, weights):
        params = model.parameters()
        if [p.shape for p in params] != shapes:
            raise ProtocolError(f"client {cid} uploaded a model of the wrong shape")
        for a, p, r in zip(acc, params, ref_params):
            a += w * (p - r)
    return ref.with_parameters([r + a for r, a in zip(ref_params, acc)])


def align_centroids(centroids: CentroidSet, model: Model) -> CentroidSet:
    """Reorder global centroids so row k is the centroid the classifier most
    plausibly calls class k (max total log-probability assignment)."""
    m = centroids.centroids
    w, b = model.classifier
    logp = log_softmax(m @ w + b)
    rows, cols = linear_sum_assignment(logp, maximize=True)
    order = np.empty(len(cols), dtype=int)
    order[cols] = rows
    return CentroidSet(m[order], centroids.origin, centroids.client_id)


def _frozen_mask(model: Model, freeze_below: int) -> list[bool] | None:
    if freeze_below <= 0:
        return None
    mask = []
    for k in range(len(model.extractor)):
        mask += [k < freeze_below] * 2
    return mask + [False, False]


def _weights(cfg: ExperimentConfig) -> LossWeights:
    o = cfg.objective
    return LossWeights(o.alpha, o.beta, o.gamma, o.tau)


def _options(cfg: ExperimentConfig) -> ObjectiveOptions:
    o = cfg.objective
    return ObjectiveOptions(o.temperature, o.rho_inverse, o.stop_gradient_on_target,
                            o.calibration_ce, o.calibration_cluster)


def local_centroids(model: Model, view: TrainingView, cfg: ExperimentConfig) -> CentroidSet:
    c = cfg.clustering
    feats, _ = forward(model, np.concatenate([view.labeled_x, view.unlabeled_x]))
    if c.kmeans_fallback:
        res = clustering.kmeans_cluster(feats, c.local_centroids, c.lloyd_rounds, client_id=view.client_id)
    else:
        res = clustering.balanced_cluster(feats, c.local_centroids, c.epsilon, c.lloyd_rounds,
                                          c.sinkhorn_iters, c.tolerance, c.normalize_features,
                                          client_id=view.client_id)
    return res.centroids


def client_update(state: ClientState, global_model: Model, global_centroids: CentroidSet | None,
                  cfg: ExperimentConfig, round_index: int) -> tuple[ClientState, CentroidSet, list[dict]]:
    """E epochs of mini-batch SGD on the client objective, then local centroids.

    The momentum buffers restart from zero each round since the starting point
    is a fresh global model.
    """
    f = cfg.federation
    view = state.shard
    rng = np.random.default_rng([cfg.seed, _CLIENT, round_index, state.client_id])
    opt = replace(state.optimizer, buffers=None)
    counts = state.pseudo_counts
    model = global_model
    frozen = _frozen_mask(model, cfg.model.freeze_extractor_below)
    weights, options = _weights(cfg), _options(cfg)
    cents = None if global_centroids is None else global_centroids.centroids
    nl = view.labeled_x.shape[0]
    n = view.n
    if n < 2:
        raise ConfigurationError(f"client {state.client_id} holds fewer than two examples")
    n_batches = max(1, -(-n // f.batch_size))
    log = []
    for epoch in range(f.local_epochs):
        perm = rng.permutation(n)
        for b, idx in enumerate(np.array_split(perm, n_batches)):
            li = np.sort(idx[idx < nl])
            ui = np.sort(idx[idx >= nl]) - nl
            res = total_objective(model, view.labeled_x[li], view.labeled_y[li], view.unlabeled_x[ui],
                                  counts, cents, weights, options, rng=rng)
            counts = update_pseudo_counts(counts, res.logits[li.size:])
            model = sgd_step(model, res.grads, opt, frozen)
            log.append({"round": round_index, "client": state.client_id, "epoch": epoch, "batch": b,
                        **res.breakdown})
    centroids = local_centroids(model, view, cfg)
    new_state = ClientState(state.client_id, model, opt, counts, view, centroids)
    return new_state, centroids, log


def _mean_breakdown(log: list[dict]) -> dict[str, float]:
    if not log:
        return dict.fromkeys(BREAKDOWN_KEYS, 0.0)
    return {k: float(np.mean([row[k] for row in log])) for k in BREAKDOWN_KEYS}


def server_centroids(local_sets: list[CentroidSet], model: Model, cfg: ExperimentConfig) -> CentroidSet:
    c = cfg.clustering
    G = c.global_centroids or model.num_classes
    if G != model.num_classes:
        raise ConfigurationError(f"{G} global centroids but classifier has {model.num_classes} outputs")
    total = sum(s.count for s in local_sets)
    if total < G:
        raise ConfigurationError(f"only {total} local centroids uploaded, need at least {G}")
    glob = clustering.aggregate_global_centroids(local_sets, G, c.epsilon, c.lloyd_rounds,
                                                 use_kmeans=c.kmeans_fallback,
                                                 max_iters=c.sinkhorn_iters, tolerance=c.tolerance)
    return align_centroids(glob, model) if c.align_to_classifier else glob


def run_round(server: ServerState, clients: list[ClientState], cfg: ExperimentConfig,
              test: Dataset | None = None, taxonomy: ClassTaxonomy | None = None
              ) -> tuple[ServerState, list[ClientState], RoundRecord]:
    """One communication round. Unsampled clients are returned untouched; any
    client failure propagates and nothing is aggregated."""
    start = time.perf_counter()
    rnd = server.round_index + 1
    sampled = sample_clients(len(clients), cfg.federation.participation, [cfg.seed, _SAMPLE, rnd])
    by_id = {c.client_id: c for c in clients}
    updated, uploads, local_sets, losses, log = {}, [], [], {}, []
    for cid in sampled:
        st, cents, clog = client_update(by_id[cid], server.global_model, server.global_centroids, cfg, rnd)
        updated[cid] = st
        uploads.append((cid, st.model, st.shard.n))
        local_sets.append(cents)
        losses[cid] = _mean_breakdown(clog)
        log += clog
    model = aggregate_models(uploads)
    glob = server_centroids(local_sets, model, cfg)
    new_server = ServerState(model, glob, rnd)
    new_clients = [updated.get(c.client_id, c) for c in clients]
    report = None
    if test is not None and taxonomy is not None:
        report = metrics(confusion(model, test), taxonomy, cfg.evaluation.match_all_labels)
    record = RoundRecord(
        rnd, sampled, losses, report, time.perf_counter() - start,
        {cid: clustering.anonymity_parameter(updated[cid].shard.n, cfg.clustering.local_centroids)
         for cid in sampled},
        local_sets, glob, log,
    )
    return new_server, new_clients, record


@dataclass
class Setup:
    taxonomy: ClassTaxonomy
    shards: list[ClientShard]
    test: Dataset
    initial_model: Model


def build_setup(cfg: ExperimentConfig) -> Setup:
    d = cfg.data
    if d.csv_path:
        dataset = ingest_csv(d.csv_path)
    else:
        dataset = generate_synthetic(d.classes, d.dims, d.per_class, d.separation,
                                     np.random.default_rng([cfg.seed, _DATA]).integers(2**63))
    taxonomy, shards, test = partition_open_world(
        dataset, d.seen_fraction, d.labeled_fraction, d.clients, d.gu_per_client, d.lu_per_client,
        int(np.random.default_rng([cfg.seed, _PARTITION]).integers(2**63)),
        gu_clients=d.gu_clients, test_fraction=d.test_fraction, dirichlet_alpha=d.dirichlet_alpha)
    n_classes = len(dataset.classes)
    model = init_model(dataset.features.shape[1], cfg.model.hidden, cfg.model.feature_dim, n_classes,
                       np.random.default_rng([cfg.seed, _INIT]), cfg.model.activation)
    return Setup(taxonomy, shards, test, model)


def initial_clients(setup: Setup, cfg: ExperimentConfig) -> list[ClientState]:
    f = cfg.federation
    return [
        ClientState(s.client_id, setup.initial_model,
                    OptimizerState(f.learning_rate, f.momentum, f.weight_decay),
                    PseudoClassCounts(setup.initial_model.num_classes, cfg.objective.decay),
                    s.training_view())
        for s in setup.shards
    ]


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    final_model: Model
    initial_model: Model
    taxonomy: ClassTaxonomy
    best_index: int | None

    @property
    def reports(self) -> list[MetricsReport]:
        return [r.metrics for r in self.records]

    @property
    def best(self) -> MetricsReport | None:
        return None if self.best_index is None else self.records[self.best_index].metrics

    @property
    def final(self) -> MetricsReport | None:
        return self.records[-1].metrics if self.records else None


def run_experiment(cfg: ExperimentConfig, callback=None) -> ExperimentResult:
    """Run ``cfg.federation.rounds`` rounds, evaluating the global model after each."""
    setup = build_setup(cfg)
    server = ServerState(setup.initial_model)
    clients = initial_clients(setup, cfg)
    records = []
    for _ in range(cfg.federation.rounds):
        server, clients, rec = run_round(server, clients, cfg, setup.test, setup.taxonomy)
        records.append(rec)
        if callback is not None:
            callback(rec)
    best = None
    if records:
        best = int(np.argmax([r.metrics.acc_all for r in records]))
    return ExperimentResult(records, server.global_model, setup.initial_model, setup.taxonomy, best)


def run_centralized(cfg: ExperimentConfig, shard: ClientShard | None = None,
                    rounds: int | None = None) -> list[Model]:
    """Train one shard without any aggregation step; returns the model after each round.

    Used as the reference trajectory for single-client federation.
    """
    setup = build_setup(cfg)
    shard = shard if shard is not None else setup.shards[0]
    state = initial_clients(setup, cfg)[shard.client_id]
    model, glob = setup.initial_model, None
    path = []
    for rnd in range(1, (cfg.federation.rounds if rounds is None else rounds) + 1):
        state, cents, _ = client_update(state, model, glob, cfg, rnd)
        model = state.model
        glob = server_centroids([cents], model, cfg)
        path.append(model)
    return path
