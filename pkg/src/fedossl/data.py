"""Synthetic open-world datasets, client sharding, and the seen / LU / GU taxonomy.

A class is *locally unseen* (LU) for a client when its unlabeled examples also
live on at least one other client, and *globally unseen* (GU) when the client is
its sole owner. Multiplicity is counted across clients' unlabeled sets.
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .numerics import ConfigurationError


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, dims)
    labels: np.ndarray  # (n,) int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ConfigurationError("features must be (n, dims) and labels (n,)")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.labels))


@dataclass(frozen=True)
class ClassTaxonomy:
    seen: frozenset[int]
    locally_unseen: dict[int, frozenset[int]]
    globally_unseen: dict[int, frozenset[int]]

    @property
    def unseen(self) -> frozenset[int]:
        out: set[int] = set()
        for s in self.locally_unseen.values():
            out |= s
        for s in self.globally_unseen.values():
            out |= s
        return frozenset(out)

    @property
    def lu_classes(self) -> frozenset[int]:
        return frozenset().union(*self.locally_unseen.values()) if self.locally_unseen else frozenset()

    @property
    def gu_classes(self) -> frozenset[int]:
        return frozenset().union(*self.globally_unseen.values()) if self.globally_unseen else frozenset()

    def to_dict(self) -> dict:
        return {
            "seen": sorted(self.seen),
            "clients": {
                str(i): {
                    "locally_unseen": sorted(self.locally_unseen[i]),
                    "globally_unseen": sorted(self.globally_unseen[i]),
                }
                for i in sorted(self.locally_unseen)
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassTaxonomy":
        clients = {int(k): v for k, v in d["clients"].items()}
        return cls(
            frozenset(d["seen"]),
            {i: frozenset(v["locally_unseen"]) for i, v in clients.items()},
            {i: frozenset(v["globally_unseen"]) for i, v in clients.items()},
        )


@dataclass(frozen=True)
class TrainingView:
    """What training code may see of a shard: no ground truth for unlabeled rows."""

    client_id: int
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray

    @property
    def n(self) -> int:
        return self.labeled_x.shape[0] + self.unlabeled_x.shape[0]


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    _unlabeled_truth: np.ndarray = field(repr=False)

    @property
    def n_labeled(self) -> int:
        return self.labeled_x.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled_x.shape[0]

    @property
    def n(self) -> int:
        return self.n_labeled + self.n_unlabeled

    def training_view(self) -> TrainingView:
        return TrainingView(self.client_id, self.labeled_x, self.labeled_y, self.unlabeled_x)

    def unlabeled_ground_truth(self) -> np.ndarray:
        """Evaluation and taxonomy audit only."""
        return self._unlabeled_truth


def generate_synthetic(classes: int, dims: int, per_class: int, separation: float,
                       seed: int) -> Dataset:
    """Unit-covariance Gaussian blobs whose closest pair of means is exactly ``separation`` apart."""
    if classes < 2 or dims < 2 or per_class < 1:
        raise ConfigurationError(f"need classes >= 2, dims >= 2, per_class >= 1 "
                                 f"(got {classes}, {dims}, {per_class})")
    if not separation > 0 or not np.isfinite(separation):
        raise ConfigurationError(f"separation must be a positive finite number, got {separation}")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dims))
    closest = pdist(means).min()
    if closest < 1e-9:
        raise ConfigurationError("degenerate class means; choose another seed")
    means *= separation / closest
    x = np.concatenate([m + rng.standard_normal((per_class, dims)) for m in means])
    y = np.repeat(np.arange(classes), per_class)
    return Dataset(x, y)


def derive_taxonomy(shards: Sequence[ClientShard]) -> ClassTaxonomy:
    """Seen = any labeled class; unseen classes split by multiplicity across unlabeled sets."""
    if not shards:
        raise ConfigurationError("no shards")
    seen: set[int] = set()
    for s in shards:
        seen |= {int(c) for c in np.unique(s.labeled_y)}
    owned = {
        s.client_id: {int(c) for c in np.unique(s.unlabeled_ground_truth())} - seen
        for s in shards
    }
    multiplicity = Counter(c for cs in owned.values() for c in cs)
    lu = {i: frozenset(c for c in cs if multiplicity[c] >= 2) for i, cs in owned.items()}
    gu = {i: frozenset(c for c in cs if multiplicity[c] == 1) for i, cs in owned.items()}
    return ClassTaxonomy(frozenset(seen), lu, gu)


def _split_evenly(idx: np.ndarray, parts: int) -> list[np.ndarray]:
    return np.array_split(idx, parts)


def partition_open_world(
    dataset: Dataset,
    seen_fraction: float = 0.6,
    labeled_fraction: float = 0.5,
    clients: int = 4,
    gu_per_client: int = 1,
    lu_per_client: int = 1,
    seed: int = 0,
    *,
    gu_clients: Sequence[int] | None = None,
    test_fraction: float = 1 / 6,
    dirichlet_alpha: float | None = None,
) -> tuple[ClassTaxonomy, list[ClientShard], Dataset]:
    """Split classes into seen/unseen and shard the data across clients.

    Classes are ordered by id: the first ``round(seen_fraction * C)`` are seen.
    Each client in ``gu_clients`` (default: all) gets ``gu_per_client`` private
    unseen classes; the remaining unseen classes are locally unseen and are
    dealt round-robin, ``lu_per_client`` per client, so each lands on >= 2 clients.
    Seen-class data is IID across clients unless ``dirichlet_alpha`` is given.
    """
    classes = dataset.classes
    n_classes = len(classes)
    n_seen = int(round(seen_fraction * n_classes))
    if not 0 < n_seen < n_classes:
        raise ConfigurationError(f"seen_fraction {seen_fraction} gives {n_seen} of {n_classes} classes seen")
    if not 0 < labeled_fraction < 1:
        raise ConfigurationError("labeled_fraction must be in (0, 1)")
    if clients < 1:
        raise ConfigurationError("need at least one client")
    seen, unseen = classes[:n_seen], classes[n_seen:]
    owners = list(range(clients)) if gu_clients is None else sorted(set(gu_clients))
    if any(not 0 <= i < clients for i in owners):
        raise ConfigurationError(f"gu_clients {list(owners)} out of range for {clients} clients")
    n_gu = len(owners) * gu_per_client
    n_lu = len(unseen) - n_gu
    if n_gu < 0 or n_lu < 0:
        raise ConfigurationError(
            f"{len(unseen)} unseen classes cannot cover {len(owners)} GU owners x {gu_per_client} each")
    if lu_per_client > 0:
        if n_lu == 0:
            raise ConfigurationError(
                f"no locally unseen classes left: {len(unseen)} unseen, {n_gu} taken as globally unseen")
        if lu_per_client > n_lu:
            raise ConfigurationError(f"lu_per_client={lu_per_client} exceeds {n_lu} LU classes")
        if clients * lu_per_client < 2 * n_lu:
            raise ConfigurationError(
                f"{clients} clients x {lu_per_client} LU slots cannot place each of {n_lu} LU classes twice")
    elif n_lu > 0:
        raise ConfigurationError(f"{n_lu} unseen classes left unassigned with lu_per_client=0")

    gu_assign = {i: [] for i in range(clients)}
    for k, owner in enumerate(owners):
        gu_assign[owner] = unseen[k * gu_per_client:(k + 1) * gu_per_client]
    lu_pool = unseen[n_gu:]
    lu_assign = {i: [] for i in range(clients)}
    slot = 0
    for i in range(clients):
        for _ in range(lu_per_client):
            lu_assign[i].append(lu_pool[slot % n_lu])
            slot += 1
    for i in range(clients):
        if len(set(lu_assign[i])) != len(lu_assign[i]):
            raise ConfigurationError(f"client {i} would receive a duplicate LU class; adjust lu_per_client")

    rng = np.random.default_rng(seed)
    test_idx, per_class_train = [], {}
    for c in classes:
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        n_test = max(1, int(round(test_fraction * idx.size)))
        test_idx.append(idx[:n_test])
        per_class_train[c] = idx[n_test:]
    test_idx = np.sort(np.concatenate(test_idx))
    test = Dataset(dataset.features[test_idx], dataset.labels[test_idx])

    lab = {i: [] for i in range(clients)}
    unl = {i: [] for i in range(clients)}
    for c in seen:
        idx = per_class_train[c]
        if dirichlet_alpha is None:
            chunks = _split_evenly(idx, clients)
        else:
            props = rng.dirichlet(np.full(clients, dirichlet_alpha))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(int)
            chunks = np.split(idx, cuts)
        for i, chunk in enumerate(chunks):
            n_lab = int(round(labeled_fraction * chunk.size))
            lab[i].append(chunk[:n_lab])
            unl[i].append(chunk[n_lab:])
    holders = {c: [i for i in range(clients) if c in gu_assign[i] or c in lu_assign[i]] for c in unseen}
    for c in unseen:
        for i, chunk in zip(holders[c], _split_evenly(per_class_train[c], len(holders[c]))):
            unl[i].append(chunk)

    shards = []
    for i in range(clients):
        li = np.sort(np.concatenate(lab[i])) if lab[i] else np.zeros(0, int)
        ui = np.sort(np.concatenate(unl[i])) if unl[i] else np.zeros(0, int)
        shards.append(ClientShard(
            i, dataset.features[li], dataset.labels[li], dataset.features[ui], dataset.labels[ui]))
    taxonomy = ClassTaxonomy(
        frozenset(seen),
        {i: frozenset(lu_assign[i]) for i in range(clients)},
        {i: frozenset(gu_assign[i]) for i in range(clients)},
    )
    return taxonomy, shards, test


# --- files -----------------------------------------------------------------

def export_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def ingest_csv(path, dims: int | None = None) -> Dataset:
    """Headerless CSV: feature columns then an integer class id.

    ``dims`` pins the expected feature count; otherwise the first row decides.
    """
    rows, labels = [], []
    width = None if dims is None else dims + 1
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not f.strip() for f in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise IngestionError(f"{path}:{lineno}: need at least one feature and a label")
            if len(row) != width:
                raise IngestionError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                feats = [float(f) for f in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(feats)):
                raise IngestionError(f"{path}:{lineno}: non-finite feature value")
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise IngestionError(f"{path}: empty file")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels, dtype=int))


def write_taxonomy(taxonomy: ClassTaxonomy, path) -> None:
    Path(path).write_text(json.dumps(taxonomy.to_dict(), indent=2) + "\n")


def read_taxonomy(path) -> ClassTaxonomy:
    return ClassTaxonomy.from_dict(json.loads(Path(path).read_text()))


def iter_classes(shards: Iterable[ClientShard]) -> dict[int, set[int]]:
    """Client id -> every class present in its data (labeled or not)."""
    return {
        s.client_id: {int(c) for c in np.unique(np.concatenate([s.labeled_y, s.unlabeled_ground_truth()]))}
        for s in shards
    }
