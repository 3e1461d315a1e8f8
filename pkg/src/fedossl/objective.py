"""Client loss terms and their gradients.

Every term is computed from the batch's ``(features, logits)`` and returns a
:class:`Term` carrying the value plus ``dL/dfeatures`` and ``dL/dlogits``;
:func:`numerics.backward` turns those into parameter gradients. Stop-gradient
targets can be passed in frozen so finite differences see the same surrogate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ConfigurationError,
    Gradient,
    Model,
    backward,
    ce_rows_from_logits,
    forward_cached,
    softmax,
    softmax_backward,
)

_NORM_EPS = 1e-12

SOURCE_SAME_CLASS = "same-class"
SOURCE_NEIGHBOR = "nearest-neighbor"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    tau: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError(f"tau must lie in (0, 1], got {self.tau}")


@dataclass(frozen=True)
class ObjectiveOptions:
    temperature: float = 0.1
    rho_inverse: bool = False
    stop_gradient_on_target: bool = False
    calibration_ce: bool = True
    calibration_cluster: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be positive")


@dataclass
class PseudoClassCounts:
    """Exponentially averaged histogram of predicted classes."""

    num_classes: int
    decay: float = 0.9
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ConfigurationError("decay must lie in [0, 1)")
        if self.counts is None:
            self.counts = np.zeros(self.num_classes)

    @property
    def n_max(self) -> float:
        return float(self.counts.max()) if self.counts.size else 0.0

    def copy(self) -> "PseudoClassCounts":
        return PseudoClassCounts(self.num_classes, self.decay, self.counts.copy())


def update_pseudo_counts(state: PseudoClassCounts, logits_batch) -> PseudoClassCounts:
    logits = np.asarray(logits_batch, dtype=np.float64)
    if logits.size == 0:
        return state.copy()
    hist = np.bincount(logits.argmax(axis=1), minlength=state.num_classes).astype(np.float64)
    counts = state.decay * state.counts + (1.0 - state.decay) * hist
    return PseudoClassCounts(state.num_classes, state.decay, counts)


@dataclass(frozen=True)
class PairAssignment:
    partner: np.ndarray  # partner[j] = index of j's pair
    source: tuple[str, ...]

    def __post_init__(self):
        n = self.partner.shape[0]
        if np.any(self.partner == np.arange(n)) or np.any((self.partner < 0) | (self.partner >= n)):
            raise ConfigurationError("invalid pair indices")


@dataclass
class Term:
    value: float
    d_features: np.ndarray
    d_logits: np.ndarray


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _NORM_EPS)


def build_pairs(features, labels=None, rng: np.random.Generator | None = None) -> PairAssignment:
    """Pair each row with a partner for the pairwise loss.

    ``labels[j] < 0`` marks row j as unlabeled. Labeled rows take a random
    same-class labeled partner when one exists; everything else takes its
    cosine-nearest other row (lowest index on ties).
    """
    z = np.asarray(features, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise ConfigurationError("pairing needs at least two rows")
    zn = _normalize_rows(z)
    sim = zn @ zn.T
    np.fill_diagonal(sim, -np.inf)
    partner = sim.argmax(axis=1)
    source = [SOURCE_NEIGHBOR] * n
    if labels is not None:
        labels = np.asarray(labels)
        rng = rng if rng is not None else np.random.default_rng(0)
        for j in np.flatnonzero(labels >= 0):
            mates = np.flatnonzero(labels == labels[j])
            mates = mates[mates != j]
            if mates.size:
                partner[j] = mates[rng.integers(mates.size)] if mates.size > 1 else mates[0]
                source[j] = SOURCE_SAME_CLASS
    return PairAssignment(partner, tuple(source))


# --- terms on (features, logits) -------------------------------------------

def supervised_term(features, logits, labels) -> Term:
    n, c = logits.shape
    labels = np.asarray(labels)
    if np.any((labels < 0) | (labels >= c)):
        raise DataError(f"label outside [0, {c})")
    dz = np.zeros_like(features)
    if n == 0:
        return Term(0.0, dz, np.zeros_like(logits))
    onehot = np.zeros_like(logits)
    onehot[np.arange(n), labels] = 1.0
    vals, _, dl = ce_rows_from_logits(onehot, logits)
    return Term(float(vals.mean()), dz, dl / n)


def pairwise_term(features, logits, pairs: PairAssignment, *, stop_gradient_on_target=False,
                  frozen_targets=None) -> Term:
    """mean_j H(p_j, p_partner(j)). The target side p_j gets gradient unless stopped."""
    n = logits.shape[0]
    probs = softmax(logits)
    target = probs if frozen_targets is None else frozen_targets
    vals, d_t, dl_pred = ce_rows_from_logits(target, logits[pairs.partner])
    dl = np.zeros_like(logits)
    np.add.at(dl, pairs.partner, dl_pred / n)
    if not stop_gradient_on_target and frozen_targets is None:
        dl += softmax_backward(probs, d_t / n)
    return Term(float(vals.mean()), np.zeros_like(features), dl)


def rho(counts: PseudoClassCounts, classes: np.ndarray, tau: float, inverse=False) -> np.ndarray:
    """rho(n^c) = -tau^(1 - n^c/n_max); ``inverse`` uses exponent n^c/n_max instead."""
    ratio = counts.counts[classes] / counts.n_max
    expo = ratio if inverse else 1.0 - ratio
    return -(tau ** expo)


def uncertainty_term(features, logits, counts: PseudoClassCounts, tau: float, *,
                     rho_inverse=False) -> Term:
    """mean_j |rho(n^argmax)| * (1 - max p_j); rho is a constant weight."""
    n = logits.shape[0]
    dz = np.zeros_like(features)
    if n == 0 or counts.n_max <= 0:
        return Term(0.0, dz, np.zeros_like(logits))
    probs = softmax(logits)
    top = probs.argmax(axis=1)
    pmax = probs[np.arange(n), top]
    weight = np.abs(rho(counts, top, tau, rho_inverse))
    value = float((weight * (1.0 - pmax)).mean())
    d_probs = np.zeros_like(probs)
    d_probs[np.arange(n), top] = -weight / n
    return Term(value, dz, softmax_backward(probs, d_probs))


def _cosine(features: np.ndarray, centroids: np.ndarray):
    norms = np.maximum(np.linalg.norm(features, axis=1, keepdims=True), _NORM_EPS)
    mhat = _normalize_rows(centroids)
    sims = (features @ mhat.T) / norms
    return sims, norms, mhat


def _cosine_backward(features, sims, norms, mhat, d_sims) -> np.ndarray:
    # d s_k / d z = mhat_k/|z| - s_k z/|z|^2
    return (d_sims @ mhat) / norms - (d_sims * sims).sum(axis=1, keepdims=True) * features / norms ** 2


def assignment_to_global(features, centroids, temperature: float = 0.1) -> np.ndarray:
    """q(z; m): softmax over centroids of cosine similarity / temperature."""
    z = np.asarray(features, dtype=np.float64)
    m = np.asarray(centroids, dtype=np.float64)
    if z.ndim != 2 or m.ndim != 2 or z.shape[1] != m.shape[1]:
        raise ConfigurationError(f"feature dim {z.shape[-1]} != centroid dim {m.shape[-1]}")
    sims, _, _ = _cosine(z, m)
    return softmax(sims / temperature)


def _check_centroids(centroids, logits):
    if centroids.shape[0] != logits.shape[1]:
        raise ConfigurationError(
            f"{centroids.shape[0]} global centroids but classifier has {logits.shape[1]} outputs")


def calibration_ce_term(features, logits, centroids, temperature=0.1, frozen_targets=None) -> Term:
    """mean_j H(q(z_j; m), p_j) with q held constant."""
    centroids = np.asarray(centroids, dtype=np.float64)
    _check_centroids(centroids, logits)
    n = logits.shape[0]
    if n == 0:
        return Term(0.0, np.zeros_like(features), np.zeros_like(logits))
    q = assignment_to_global(features, centroids, temperature) if frozen_targets is None else frozen_targets
    vals, _, dl = ce_rows_from_logits(q, logits)
    return Term(float(vals.mean()), np.zeros_like(features), dl / n)


def calibration_cluster_term(features, logits, pairs: PairAssignment, centroids, temperature=0.1,
                             frozen_targets=None) -> Term:
    """mean_j H(q(z_j; m), q(z_partner; m)); gradient through the partner's q only."""
    centroids = np.asarray(centroids, dtype=np.float64)
    _check_centroids(centroids, logits)
    n = features.shape[0]
    if n == 0:
        return Term(0.0, np.zeros_like(features), np.zeros_like(logits))
    sims, norms, mhat = _cosine(features, centroids)
    scaled = sims / temperature
    target = softmax(scaled) if frozen_targets is None else frozen_targets
    vals, _, d_scaled_pred = ce_rows_from_logits(target, scaled[pairs.partner])
    d_sims = np.zeros_like(sims)
    np.add.at(d_sims, pairs.partner, d_scaled_pred / (n * temperature))
    dz = _cosine_backward(features, sims, norms, mhat, d_sims)
    return Term(float(vals.mean()), dz, np.zeros_like(logits))


# --- model-level wrappers ---------------------------------------------------

def _grads(model, cache, *terms: Term) -> Gradient:
    dz = sum(t.d_features for t in terms)
    dl = sum(t.d_logits for t in terms)
    return backward(model, cache, dz, dl)


def supervised_loss(model: Model, x, y) -> tuple[float, Gradient]:
    cache = forward_cached(model, x)
    t = supervised_term(cache.features, cache.logits, y)
    return t.value, _grads(model, cache, t)


def pairwise_loss(model: Model, x, pairs: PairAssignment, *, stop_gradient_on_target=False,
                  frozen_targets=None) -> tuple[float, Gradient]:
    cache = forward_cached(model, x)
    t = pairwise_term(cache.features, cache.logits, pairs,
                      stop_gradient_on_target=stop_gradient_on_target, frozen_targets=frozen_targets)
    return t.value, _grads(model, cache, t)


def uncertainty_loss(model: Model, x, counts: PseudoClassCounts, tau: float, *,
                     rho_inverse=False) -> tuple[float, Gradient]:
    cache = forward_cached(model, x)
    t = uncertainty_term(cache.features, cache.logits, counts, tau, rho_inverse=rho_inverse)
    return t.value, _grads(model, cache, t)


def calibration_ce_loss(model: Model, x, centroids, temperature=0.1,
                        frozen_targets=None) -> tuple[float, Gradient]:
    cache = forward_cached(model, x)
    t = calibration_ce_term(cache.features, cache.logits, centroids, temperature, frozen_targets)
    return t.value, _grads(model, cache, t)


def calibration_cluster_loss(model: Model, x, pairs: PairAssignment, centroids, temperature=0.1,
                             frozen_targets=None) -> tuple[float, Gradient]:
    cache = forward_cached(model, x)
    t = calibration_cluster_term(cache.features, cache.logits, pairs, centroids, temperature,
                                 frozen_targets)
    return t.value, _grads(model, cache, t)


@dataclass
class ObjectiveResult:
    total: float
    breakdown: dict[str, float]
    grads: Gradient
    logits: np.ndarray  # full batch, labeled rows first
    pairs: PairAssignment


BREAKDOWN_KEYS = ("L_s", "L_u", "R", "L_ce", "L_cluster", "total")


def total_objective(
    model: Model,
    labeled_x,
    labeled_y,
    unlabeled_x,
    counts: PseudoClassCounts | None,
    global_centroids=None,
    weights: LossWeights = LossWeights(),
    options: ObjectiveOptions = ObjectiveOptions(),
    *,
    rng: np.random.Generator | None = None,
    pairs: PairAssignment | None = None,
    unlabeled_pairs: PairAssignment | None = None,
    frozen: dict | None = None,
) -> ObjectiveResult:
    """L* = (L_s + a L_u) + b R + g (L_ce + L_cluster) on one labeled+unlabeled batch.

    The pairwise loss runs over the concatenated batch (labeled rows first);
    R and the calibration terms see only the unlabeled rows. Without global
    centroids the calibration part is zero.

    ``frozen`` may hold fixed stop-gradient targets under the keys
    ``"pairwise"``, ``"ce"`` and ``"cluster"`` (see :func:`stop_gradient_targets`).
    """
    frozen = frozen or {}
    lx = np.asarray(labeled_x, dtype=np.float64).reshape(-1, model.input_dim)
    ux = np.asarray(unlabeled_x, dtype=np.float64).reshape(-1, model.input_dim)
    ly = np.asarray(labeled_y, dtype=int).reshape(-1)
    nl = lx.shape[0]
    cache = forward_cached(model, np.concatenate([lx, ux]))
    z, logits = cache.features, cache.logits
    n = z.shape[0]
    dz = np.zeros_like(z)
    dl = np.zeros_like(logits)
    parts = dict.fromkeys(BREAKDOWN_KEYS, 0.0)

    t = supervised_term(z[:nl], logits[:nl], ly)
    parts["L_s"] = t.value
    dl[:nl] += t.d_logits

    if pairs is None and n >= 2:
        pairs = build_pairs(z, np.concatenate([ly, np.full(n - nl, -1)]), rng)
    if pairs is not None and weights.alpha > 0:
        t = pairwise_term(z, logits, pairs, stop_gradient_on_target=options.stop_gradient_on_target,
                          frozen_targets=frozen.get("pairwise"))
        parts["L_u"] = t.value
        dl += weights.alpha * t.d_logits
    elif pairs is not None:
        parts["L_u"] = pairwise_term(z, logits, pairs).value

    zu, lu = z[nl:], logits[nl:]
    if counts is not None:
        t = uncertainty_term(zu, lu, counts, weights.tau, rho_inverse=options.rho_inverse)
        parts["R"] = t.value
        dl[nl:] += weights.beta * t.d_logits

    if global_centroids is not None and zu.shape[0] > 0:
        m = np.asarray(global_centroids, dtype=np.float64)
        if options.calibration_ce:
            t = calibration_ce_term(zu, lu, m, options.temperature, frozen.get("ce"))
            parts["L_ce"] = t.value
            dl[nl:] += weights.gamma * t.d_logits
        if options.calibration_cluster and zu.shape[0] >= 2:
            upairs = unlabeled_pairs if unlabeled_pairs is not None else build_pairs(zu)
            t = calibration_cluster_term(zu, lu, upairs, m, options.temperature, frozen.get("cluster"))
            parts["L_cluster"] = t.value
            dz[nl:] += weights.gamma * t.d_features

    parts["total"] = (parts["L_s"] + weights.alpha * parts["L_u"] + weights.beta * parts["R"]
                      + weights.gamma * (parts["L_ce"] + parts["L_cluster"]))
    grads = backward(model, cache, dz, dl)
    return ObjectiveResult(parts["total"], parts, grads, logits, pairs)


def stop_gradient_targets(model: Model, labeled_x, unlabeled_x, global_centroids=None,
                          options: ObjectiveOptions = ObjectiveOptions()) -> dict:
    """Snapshot the constant targets the objective uses at ``model``."""
    lx = np.asarray(labeled_x, dtype=np.float64).reshape(-1, model.input_dim)
    ux = np.asarray(unlabeled_x, dtype=np.float64).reshape(-1, model.input_dim)
    cache = forward_cached(model, np.concatenate([lx, ux]))
    out = {}
    if options.stop_gradient_on_target:
        out["pairwise"] = softmax(cache.logits)
    if global_centroids is not None:
        q = assignment_to_global(cache.features[lx.shape[0]:], global_centroids, options.temperature)
        out["ce"] = q
        out["cluster"] = q
    return out
