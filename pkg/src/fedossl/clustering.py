"""Equal-size clustering through entropic optimal transport, plus plain k-means.

Local centroids come from :func:`balanced_cluster` on a client's features;
the server re-clusters every uploaded centroid with the same routine.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from .numerics import ConfigurationError

EPSILON_SCALE = 0.05


@dataclass(frozen=True)
class CentroidSet:
    centroids: np.ndarray  # (count, dim)
    origin: str = "local"  # "local" | "global"
    client_id: int | None = None

    def __post_init__(self):
        if self.origin not in ("local", "global"):
            raise ConfigurationError(f"bad centroid origin {self.origin!r}")
        if self.centroids.ndim != 2:
            raise ConfigurationError("centroids must be a 2-d array")
        if not np.all(np.isfinite(self.centroids)):
            raise ConfigurationError("non-finite centroid")

    @property
    def count(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def to_dict(self, round_index: int | None = None) -> dict:
        return {
            "origin": self.origin,
            "client_id": self.client_id,
            "round": round_index,
            "count": self.count,
            "dim": self.dim,
            "values": [float(v) for v in self.centroids.reshape(-1)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CentroidSet":
        values = np.array(d["values"], dtype=np.float64).reshape(d["count"], d["dim"])
        return cls(values, d["origin"], d.get("client_id"))


@dataclass
class TransportPlan:
    plan: np.ndarray
    epsilon: float
    iterations_used: int
    converged: bool
    row_error: float
    col_error: float
    log_plan: np.ndarray = field(repr=False)
    col_potential: np.ndarray | None = field(default=None, repr=False)

    def entropic_cost(self, cost: np.ndarray) -> float:
        """<P, C> + eps * sum P log P, the quantity Sinkhorn minimizes."""
        p = self.plan
        mask = p > 0
        return float((p * cost).sum() + self.epsilon * (p[mask] * self.log_plan[mask]).sum())


def _lse(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn_plan(cost, epsilon: float, max_iters: int = 500, tolerance: float = 1e-6,
                  init_g: np.ndarray | None = None, absorb_every: int = 20,
                  pure_log: bool = False) -> TransportPlan:
    """Entropic OT between uniform marginals (1/n rows, 1/L columns).

    Potentials ``f, g`` live in log space. Each cycle does one exact log-sum-exp
    half-step pair, folds the potentials into a kernel whose entries are plan
    values (<= 1), and then runs up to ``absorb_every`` cheap multiplicative
    updates on it before folding again. ``pure_log`` runs log-sum-exp updates
    throughout (slower, same fixed point).

    Iteration stops once both marginal errors are below ``tolerance``;
    otherwise the last iterate comes back with ``converged=False``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or not np.all(np.isfinite(c)):
        raise ConfigurationError("cost must be a finite 2-d matrix")
    if not epsilon > 0:
        raise ConfigurationError("epsilon must be positive")
    n, L = c.shape
    a, b = 1.0 / n, 1.0 / L
    log_k = -c / epsilon
    g = np.zeros(L) if init_g is None else np.array(init_g, dtype=np.float64)
    f = np.zeros(n)
    it = 0
    done = False
    while it < max_iters and not done:
        it += 1
        f = np.log(a) - _lse(log_k + g[None, :], axis=1)
        g = np.log(b) - _lse(log_k + f[:, None], axis=0)
        kt = np.exp(log_k + f[:, None] + g[None, :])
        if np.abs(kt.sum(axis=1) - a).max() < tolerance:
            break
        if pure_log:
            continue
        u = np.ones(n)
        v = np.ones(L)
        for _ in range(absorb_every):
            if it >= max_iters:
                break
            kv = kt @ v
            if not np.all(kv > 0):
                break
            u_new = a / kv
            ktu = kt.T @ u_new
            if not np.all(ktu > 0):
                break
            it += 1
            u, v = u_new, b / ktu
            if np.abs(u * (kt @ v) - a).max() < tolerance:
                done = True
                break
            if max(u.max(), v.max(), 1 / u.min(), 1 / v.min()) > 1e50:
                break
        f += np.log(u)
        g += np.log(v)
    log_p = log_k + f[:, None] + g[None, :]
    plan = np.exp(log_p)
    row_err = float(np.abs(plan.sum(axis=1) - a).max())
    col_err = float(np.abs(plan.sum(axis=0) - b).max())
    return TransportPlan(plan, float(epsilon), it, row_err < tolerance and col_err < tolerance,
                         row_err, col_err, log_p, g)


def squared_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * x @ c.T
    return np.maximum(d, 0.0)


def default_epsilon(vectors: np.ndarray) -> float:
    """EPSILON_SCALE x median pairwise squared distance (1.0 if the points coincide)."""
    if vectors.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(vectors, "sqeuclidean")))
    return EPSILON_SCALE * med if med > 0 else 1.0


def farthest_point_init(vectors: np.ndarray, k: int) -> np.ndarray:
    """Start at the point farthest from the mean, then repeatedly add the farthest point.

    Data-defined (no RNG), so the result does not depend on row order except
    through exact ties.
    """
    d0 = ((vectors - vectors.mean(0)) ** 2).sum(1)
    chosen = [int(d0.argmax())]
    dmin = ((vectors - vectors[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        nxt = int(dmin.argmax())
        chosen.append(nxt)
        dmin = np.minimum(dmin, ((vectors - vectors[nxt]) ** 2).sum(1))
    return vectors[chosen].copy()


def balanced_assignment(scores: np.ndarray) -> np.ndarray:
    """Greedy argmax under capacities so sizes are floor(n/L) or ceil(n/L).

    ``scores`` is (n, L), larger is better (e.g. the log transport plan).
    """
    n, L = scores.shape
    base, extra = divmod(n, L)
    order = np.argsort(-scores, axis=None, kind="stable")
    assign = np.full(n, -1)
    size = np.zeros(L, dtype=int)
    bonus = 0
    done = 0
    for flat in order:
        i, k = divmod(int(flat), L)
        if assign[i] >= 0:
            continue
        if size[k] < base:
            pass
        elif size[k] == base and bonus < extra:
            bonus += 1
        else:
            continue
        assign[i] = k
        size[k] += 1
        done += 1
        if done == n:
            break
    return assign


def _hard_means(vectors, assign, k):
    return np.stack([vectors[assign == j].mean(0) for j in range(k)])


@dataclass
class ClusterResult:
    centroids: CentroidSet
    assignments: np.ndarray
    epsilon: float
    objective_history: list[float]
    converged: bool


def balanced_cluster(vectors, L: int, epsilon: float | None = None, lloyd_rounds: int = 10,
                     max_iters: int = 500, tolerance: float = 1e-6, normalize: bool = False,
                     origin: str = "local", client_id: int | None = None) -> ClusterResult:
    """Lloyd-style alternation with Sinkhorn assignments; equal-size hard clusters at the end.

    Returned centroids are the means of the hard clusters.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if normalize:
        x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    n = x.shape[0]
    if L < 1 or n < L:
        raise ConfigurationError(f"cannot form {L} clusters from {n} vectors")
    eps = default_epsilon(x) if epsilon is None else float(epsilon)
    cent = farthest_point_init(x, L)
    history = []
    converged = True
    g = None
    for _ in range(lloyd_rounds):
        cost = squared_distances(x, cent)
        tp = sinkhorn_plan(cost, eps, max_iters, tolerance, init_g=g)
        g = tp.col_potential
        converged &= tp.converged
        history.append(tp.entropic_cost(cost))
        cent = (tp.plan.T @ x) / tp.plan.sum(0)[:, None]
    cost = squared_distances(x, cent)
    tp = sinkhorn_plan(cost, eps, max_iters, tolerance, init_g=g)
    converged &= tp.converged
    history.append(tp.entropic_cost(cost))
    assign = balanced_assignment(tp.log_plan)
    return ClusterResult(CentroidSet(_hard_means(x, assign, L), origin, client_id), assign, eps,
                         history, bool(converged))


def kmeans_cluster(vectors, L: int, lloyd_rounds: int = 10, origin: str = "local",
                   client_id: int | None = None) -> ClusterResult:
    """Unconstrained Lloyd iterations. An emptied cluster is reseeded at the point
    lying farthest from its current centroid."""
    x = np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if L < 1 or n < L:
        raise ConfigurationError(f"cannot form {L} clusters from {n} vectors")
    cent = farthest_point_init(x, L)
    history = []
    assign = np.zeros(n, dtype=int)
    for _ in range(max(lloyd_rounds, 1)):
        d = squared_distances(x, cent)
        assign = d.argmin(1)
        own = d[np.arange(n), assign]
        for j in range(L):
            if not np.any(assign == j):
                far = int(own.argmax())
                assign[far] = j
                own[far] = -np.inf  # one reseed per point
        history.append(float(squared_distances(x, cent)[np.arange(n), assign].sum()))
        cent = _hard_means(x, assign, L)
    return ClusterResult(CentroidSet(cent, origin, client_id), assign, 0.0, history, True)


def aggregate_global_centroids(local_sets: list[CentroidSet], G: int, epsilon: float | None = None,
                               lloyd_rounds: int = 10, use_kmeans: bool = False, **kwargs) -> CentroidSet:
    """Re-cluster all uploaded local centroids (ascending client id) into G global ones."""
    if not local_sets:
        raise ConfigurationError("no local centroid sets to aggregate")
    dims = {s.dim for s in local_sets}
    if len(dims) != 1:
        raise ConfigurationError(f"local centroid sets disagree on dimension: {sorted(dims)}")
    ordered = sorted(local_sets, key=lambda s: -1 if s.client_id is None else s.client_id)
    stacked = np.concatenate([s.centroids for s in ordered])
    if use_kmeans:
        res = kmeans_cluster(stacked, G, lloyd_rounds, origin="global")
    else:
        res = balanced_cluster(stacked, G, epsilon, lloyd_rounds, origin="global", **kwargs)
    return res.centroids


def anonymity_parameter(n: int, L: int) -> float:
    """Each equal-size cluster mean hides n/L samples."""
    if L < 1:
        raise ConfigurationError("L must be >= 1")
    return n / L


def dump_centroids(sets: list[CentroidSet], path, round_index: int) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps([s.to_dict(round_index) for s in sets]) + "\n")
    tmp.replace(path)


def load_centroids(path) -> list[CentroidSet]:
    return [CentroidSet.from_dict(d) for d in json.loads(Path(path).read_text())]
