"""Independent reference computations and random instances shared by the test modules."""
from dataclasses import dataclass
from itertools import permutations

import mpmath
import numpy as np

from fedossl.numerics import Model, init_model
from fedossl.objective import PseudoClassCounts, build_pairs

mpmath.mp.dps = 40


def mp(v):
    return mpmath.mpf(float(v))


def mp_softmax(row):
    e = [mpmath.exp(mp(v)) for v in row]
    s = sum(e)
    return [v / s for v in e]


def mp_ce(target, pred):
    return -sum(mp(t) * mpmath.log(max(p, mpmath.mpf("1e-12"))) for t, p in zip(target, pred))


def mp_cosine_softmax(z, centroids, temperature):
    zn = mpmath.sqrt(sum(mp(v) ** 2 for v in z))
    sims = []
    for m in centroids:
        mn = mpmath.sqrt(sum(mp(v) ** 2 for v in m))
        sims.append(sum(mp(a) * mp(b) for a, b in zip(z, m)) / (zn * mn) / mp(temperature))
    e = [mpmath.exp(s) for s in sims]
    tot = sum(e)
    return [v / tot for v in e]


def brute_force_best(sub):
    """Max total over injective row->column assignments (rows <= cols or not)."""
    sub = np.asarray(sub)
    r, c = sub.shape
    best = 0
    if r <= c:
        for cols in permutations(range(c), r):
            best = max(best, sum(sub[i, cols[i]] for i in range(r)))
    else:
        for rows in permutations(range(r), c):
            best = max(best, sum(sub[rows[j], j] for j in range(c)))
    return best


@dataclass
class Instance:
    model: Model
    lx: np.ndarray
    ly: np.ndarray
    ux: np.ndarray
    counts: PseudoClassCounts
    centroids: np.ndarray
    pairs: object
    upairs: object


def random_instance(seed: int, n_labeled=5, n_unlabeled=7, classes=6, d=5, dims=4) -> Instance:
    rng = np.random.default_rng(seed)
    model = init_model(dims, [6], d, classes, rng)
    # stretch the classifier so probabilities are not all near uniform
    w, b = model.classifier
    model = Model(model.extractor, (2.0 * w, rng.normal(scale=0.3, size=classes)))
    lx = rng.normal(size=(n_labeled, dims))
    ly = rng.integers(0, classes, n_labeled)
    ux = rng.normal(size=(n_unlabeled, dims))
    counts = PseudoClassCounts(classes, 0.9, rng.uniform(0.5, 5.0, classes))
    centroids = rng.normal(size=(classes, d))
    from fedossl.numerics import forward
    z, _ = forward(model, np.concatenate([lx, ux]))
    pairs = build_pairs(z, np.concatenate([ly, np.full(n_unlabeled, -1)]), rng)
    upairs = build_pairs(z[n_labeled:])
    return Instance(model, lx, ly, ux, counts, centroids, pairs, upairs)


def tiny_config(**overrides):
    """A configuration small enough for a full run in about a second."""
    from fedossl.config import ExperimentConfig
    base = {
        "data.classes": 5, "data.dims": 4, "data.per_class": 30, "data.clients": 2,
        "data.gu_clients": [0], "data.gu_per_client": 1, "data.lu_per_client": 1,
        "model.hidden": [8], "model.feature_dim": 4,
        "clustering.local_centroids": 6,
        "federation.rounds": 2, "federation.local_epochs": 1, "federation.batch_size": 16,
    }
    base.update(overrides)
    return ExperimentConfig().replace(**base)


def single_client_config(**overrides):
    return tiny_config(**{"data.clients": 1, "data.gu_per_client": 2, "data.lu_per_client": 0, **overrides})
