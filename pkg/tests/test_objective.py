import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedossl.numerics import Model, finite_difference_check, forward, softmax
from fedossl.objective import (
    BREAKDOWN_KEYS,
    DataError,
    LossWeights,
    ObjectiveOptions,
    PairAssignment,
    PseudoClassCounts,
    SOURCE_NEIGHBOR,
    SOURCE_SAME_CLASS,
    assignment_to_global,
    build_pairs,
    calibration_ce_loss,
    calibration_ce_term,
    calibration_cluster_loss,
    calibration_cluster_term,
    pairwise_loss,
    pairwise_term,
    stop_gradient_targets,
    supervised_loss,
    total_objective,
    uncertainty_loss,
    uncertainty_term,
    update_pseudo_counts,
)
from fedossl.numerics import ConfigurationError
from oracles import mp, mp_ce, mp_cosine_softmax, mp_softmax, random_instance


def linear_model(w, b=None):
    w = np.asarray(w, dtype=np.float64)
    return Model((), (w, np.zeros(w.shape[1]) if b is None else np.asarray(b, dtype=np.float64)))


# --- supervised ---------------------------------------------------------------------

def test_supervised_confident_and_uniform():
    model = linear_model(np.eye(3) * 60.0)
    val, _ = supervised_loss(model, np.eye(3), [0, 1, 2])
    assert val < 1e-12
    uniform = linear_model(np.zeros((2, 10)))
    val, _ = supervised_loss(uniform, np.ones((4, 2)), [0, 3, 9, 5])
    assert val == pytest.approx(np.log(10), abs=1e-14)


def test_supervised_matches_extended_precision():
    model = linear_model([[0.5, -1.0, 0.25], [1.5, 0.5, -0.75]], [0.1, 0.0, -0.2])
    x = np.array([[1.0, 2.0], [-0.5, 0.3]])
    y = [2, 0]
    val, _ = supervised_loss(model, x, y)
    _, logits = forward(model, x)
    ref = sum(-mpmath.log(mp_softmax(row)[t]) for row, t in zip(logits, y)) / 2
    assert val == pytest.approx(float(ref), abs=1e-15)


def test_supervised_rejects_out_of_range_label():
    with pytest.raises(DataError):
        supervised_loss(linear_model(np.zeros((2, 3))), np.ones((1, 2)), [3])


# --- pairs ----------------------------------------------------------------------------

def test_identical_rows_are_mutual_neighbors():
    z = np.array([[1.0, 0.0], [0.3, 0.9], [0.3, 0.9], [-1.0, 0.2]])
    pairs = build_pairs(z)
    assert pairs.partner[1] == 2 and pairs.partner[2] == 1


def test_pairs_match_brute_force_cosine():
    angles = np.array([0.0, 0.4, 1.9, 2.1])
    z = np.stack([np.cos(angles), np.sin(angles)], 1) * np.array([[1.0], [3.0], [0.5], [2.0]])
    pairs = build_pairs(z)
    for j in range(4):
        best, best_sim = None, -np.inf
        for k in range(4):
            if k == j:
                continue
            s = float(z[j] @ z[k] / np.linalg.norm(z[j]) / np.linalg.norm(z[k]))
            if s > best_sim:
                best, best_sim = k, s
        assert pairs.partner[j] == best
    assert pairs.source == (SOURCE_NEIGHBOR,) * 4


def test_labeled_same_class_pairs_ignore_geometry():
    z = np.array([[1.0, 0.0], [1.0, 0.01], [-1.0, 0.0], [0.0, 1.0]])
    pairs = build_pairs(z, np.array([3, -1, 3, -1]))
    assert pairs.partner[0] == 2 and pairs.partner[2] == 0
    assert pairs.source[0] == SOURCE_SAME_CLASS and pairs.source[1] == SOURCE_NEIGHBOR


def test_ties_go_to_lowest_index():
    z = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    assert build_pairs(z).partner[0] == 1
    assert build_pairs(z).partner[2] == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_pairs_are_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    base = build_pairs(z).partner
    moved = build_pairs(z[perm]).partner
    inv = np.argsort(perm)
    # row perm[i] of the original becomes row i; its partner maps through inv
    assert np.array_equal(moved, inv[base[perm]])


def test_pair_assignment_rejects_self_pairs():
    with pytest.raises(ConfigurationError):
        PairAssignment(np.array([0, 0]), ("x", "x"))


# --- pairwise ----------------------------------------------------------------------------

def test_pairwise_agreement_and_uniform():
    confident = linear_model(np.array([[80.0, 0.0, 0.0], [80.0, 0.0, 0.0]]))
    x = np.array([[1.0, 0.0], [0.9, 0.1]])
    val, _ = pairwise_loss(confident, x, build_pairs(x))
    assert val < 1e-12
    uniform = linear_model(np.zeros((2, 5)))
    val, _ = pairwise_loss(uniform, x, build_pairs(x))
    assert val == pytest.approx(np.log(5), abs=1e-14)


def test_pairwise_matches_extended_precision():
    model = linear_model([[0.4, -0.3, 1.1], [0.2, 0.9, -0.5]])
    x = np.array([[1.0, 0.5], [0.8, 0.7], [-1.0, 0.2], [-0.7, -0.4]])
    pairs = PairAssignment(np.array([1, 0, 3, 2]), (SOURCE_NEIGHBOR,) * 4)
    val, _ = pairwise_loss(model, x, pairs)
    _, logits = forward(model, x)
    probs = [mp_softmax(r) for r in logits]
    ref = sum(mp_ce([float(v) for v in probs[j]], probs[pairs.partner[j]]) for j in range(4)) / 4
    assert val == pytest.approx(float(ref), abs=1e-14)


# --- pseudo counts and uncertainty --------------------------------------------------------

def test_pseudo_counts_examples():
    s = PseudoClassCounts(3, decay=0.0)
    s = update_pseudo_counts(s, np.array([[2.0, 0, 0], [1.0, 0, 0], [0, 3.0, 0]]))
    assert s.counts.tolist() == [2.0, 1.0, 0.0] and s.n_max == 2.0
    same = update_pseudo_counts(s, np.zeros((0, 3)))
    assert np.array_equal(same.counts, s.counts)


def test_pseudo_counts_ema_unrolled():
    s = PseudoClassCounts(2, decay=0.5)
    b1 = np.array([[1.0, 0.0], [1.0, 0.0]])
    b2 = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 2.0]])
    s = update_pseudo_counts(update_pseudo_counts(s, b1), b2)
    c = np.zeros(2)
    c = 0.5 * c + 0.5 * np.array([2.0, 0.0])
    c = 0.5 * c + 0.5 * np.array([1.0, 2.0])
    assert np.array_equal(s.counts, c)
    assert s.n_max == c.max()


def _logits_with_max(p_top, classes=3):
    rest = (1.0 - p_top) / (classes - 1)
    return np.log(np.array([[p_top] + [rest] * (classes - 1)]))


@pytest.mark.parametrize("count_top, expected", [(4.0, 0.4), (0.0, 0.2)])
def test_uncertainty_values(count_top, expected):
    counts = PseudoClassCounts(3, 0.9, np.array([count_top, 4.0, 1.0]))
    t = uncertainty_term(np.zeros((1, 2)), _logits_with_max(0.6), counts, tau=0.5)
    assert t.value == pytest.approx(expected, abs=1e-14)


def test_uncertainty_confident_prediction_contributes_nothing():
    counts = PseudoClassCounts(2, 0.9, np.array([1.0, 1.0]))
    t = uncertainty_term(np.zeros((1, 2)), np.array([[800.0, 0.0]]), counts, tau=0.5)
    assert t.value == 0.0


def test_uncertainty_is_zero_before_any_counts():
    t = uncertainty_term(np.zeros((2, 2)), np.zeros((2, 3)), PseudoClassCounts(3), tau=0.5)
    assert t.value == 0.0 and np.all(t.d_logits == 0)


def test_uncertainty_inverse_weighting():
    counts = PseudoClassCounts(3, 0.9, np.array([4.0, 4.0, 1.0]))
    t = uncertainty_term(np.zeros((1, 2)), _logits_with_max(0.6), counts, tau=0.5, rho_inverse=True)
    assert t.value == pytest.approx(0.5 * 0.4, abs=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0), st.integers(2, 10))
def test_uncertainty_bounds(seed, tau, classes):
    rng = np.random.default_rng(seed)
    counts = PseudoClassCounts(classes, 0.9, rng.uniform(0, 3, classes) + 1e-3)
    logits = rng.normal(scale=3, size=(8, classes))
    t = uncertainty_term(np.zeros((8, 2)), logits, counts, tau)
    assert 0.0 <= t.value <= 1.0 - 1.0 / classes + 1e-12


# --- calibration ---------------------------------------------------------------------------

def test_assignment_limits():
    m = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    q = assignment_to_global(np.array([[2.0, 0.0]]), m, temperature=1e-3)
    assert q[0, 0] == pytest.approx(1.0) and q[0, 1:].max() < 1e-100
    same = np.tile([[0.3, 0.7]], (4, 1))
    np.testing.assert_allclose(assignment_to_global(np.array([[1.0, -2.0]]), same), 0.25, atol=1e-15)


def test_assignment_matches_extended_precision():
    theta = np.array([0.3, 1.4])
    m = np.stack([np.cos(theta), np.sin(theta)], 1) * np.array([[2.0], [0.7]])
    z = np.array([[0.9, 0.2], [-0.1, 1.0]])
    q = assignment_to_global(z, m, 0.1)
    for row, ref in zip(q, (mp_cosine_softmax(r, m, 0.1) for r in z)):
        np.testing.assert_allclose(row, [float(v) for v in ref], rtol=1e-14, atol=1e-16)


def test_assignment_rejects_dimension_mismatch():
    with pytest.raises(ConfigurationError):
        assignment_to_global(np.zeros((1, 3)), np.zeros((2, 2)))


def test_calibration_ce_examples():
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    z = np.array([[1.0, 0.2], [0.1, 1.0]])
    q = assignment_to_global(z, m, 0.1)
    t = calibration_ce_term(z, np.log(q), m, 0.1)
    entropy = float(-(q * np.log(q)).sum(1).mean())
    assert t.value == pytest.approx(entropy, abs=1e-13)
    sharp = assignment_to_global(np.array([[1.0, 0.0]]), m, 1e-3)
    t = calibration_ce_term(np.array([[1.0, 0.0]]), np.array([[700.0, 0.0]]), m, 1e-3)
    assert sharp[0, 0] == pytest.approx(1.0) and t.value < 1e-10


def test_calibration_ce_matches_extended_precision():
    m = np.array([[1.0, 0.5], [-0.2, 1.0], [0.4, -1.0]])
    z = np.array([[0.6, 0.3], [-0.5, 0.8]])
    logits = np.array([[0.2, -0.4, 1.0], [1.5, 0.1, -0.3]])
    t = calibration_ce_term(z, logits, m, 0.1)
    ref = sum(mp_ce([float(v) for v in mp_cosine_softmax(z[j], m, 0.1)], mp_softmax(logits[j]))
              for j in range(2)) / 2
    assert t.value == pytest.approx(float(ref), abs=1e-14)


def test_calibration_rejects_wrong_centroid_count():
    with pytest.raises(ConfigurationError, match="3 global centroids but classifier has 4"):
        calibration_ce_term(np.ones((2, 2)), np.zeros((2, 4)), np.ones((3, 2)))


def test_calibration_cluster_examples():
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    z = np.array([[1.0, 0.3], [1.0, 0.3], [0.2, 1.0], [0.2, 1.0]])
    pairs = PairAssignment(np.array([1, 0, 3, 2]), (SOURCE_NEIGHBOR,) * 4)
    q = assignment_to_global(z, m, 0.1)
    t = calibration_cluster_term(z, np.zeros((4, 2)), pairs, m, 0.1)
    assert t.value == pytest.approx(float(-(q * np.log(q)).sum(1).mean()), abs=1e-13)
    t = calibration_cluster_term(np.array([[1.0, 0.0], [2.0, 0.0]]), np.zeros((2, 2)),
                                 PairAssignment(np.array([1, 0]), ("n", "n")), m, 1e-3)
    assert t.value < 1e-10


def test_calibration_cluster_matches_extended_precision():
    m = np.array([[1.0, 0.5], [-0.2, 1.0]])
    z = np.array([[0.6, 0.3], [0.5, 0.6], [-0.5, 0.8], [-0.3, 0.9]])
    pairs = PairAssignment(np.array([1, 0, 3, 2]), (SOURCE_NEIGHBOR,) * 4)
    t = calibration_cluster_term(z, np.zeros((4, 2)), pairs, m, 0.1)
    qs = [mp_cosine_softmax(r, m, 0.1) for r in z]
    ref = sum(mp_ce([float(v) for v in qs[j]], qs[pairs.partner[j]]) for j in range(4)) / 4
    assert t.value == pytest.approx(float(ref), abs=1e-14)


# --- gradients -------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_every_term_passes_finite_differences(seed):
    inst = random_instance(seed)
    x = np.concatenate([inst.lx, inst.ux])
    frozen = stop_gradient_targets(inst.model, inst.lx, inst.ux, inst.centroids,
                                   ObjectiveOptions(stop_gradient_on_target=True))
    checks = [
        lambda m: supervised_loss(m, inst.lx, inst.ly),
        lambda m: pairwise_loss(m, x, inst.pairs),
        lambda m: pairwise_loss(m, x, inst.pairs, frozen_targets=frozen["pairwise"]),
        lambda m: uncertainty_loss(m, inst.ux, inst.counts, 0.5),
        lambda m: uncertainty_loss(m, inst.ux, inst.counts, 0.5, rho_inverse=True),
        lambda m: calibration_ce_loss(m, inst.ux, inst.centroids, 0.1, frozen["ce"]),
        lambda m: calibration_cluster_loss(m, inst.ux, inst.upairs, inst.centroids, 0.1, frozen["cluster"]),
    ]
    for fn in checks:
        assert finite_difference_check(inst.model, fn, 1e-5) < 1e-4


def test_stop_gradient_switch_changes_only_the_target_side():
    inst = random_instance(11)
    x = np.concatenate([inst.lx, inst.ux])
    v1, g1 = pairwise_loss(inst.model, x, inst.pairs)
    v2, g2 = pairwise_loss(inst.model, x, inst.pairs, stop_gradient_on_target=True)
    assert v1 == v2
    assert any(not np.allclose(a, b) for a, b in zip(g1, g2))


# --- composite ---------------------------------------------------------------------------------

def _total(inst, weights, options=ObjectiveOptions(), centroids="default"):
    cents = inst.centroids if isinstance(centroids, str) else centroids
    return total_objective(inst.model, inst.lx, inst.ly, inst.ux, inst.counts, cents, weights, options,
                           pairs=inst.pairs, unlabeled_pairs=inst.upairs)


def test_breakdown_sums_to_total():
    inst = random_instance(3)
    w = LossWeights(0.7, 1.3, 0.4, 0.5)
    res = _total(inst, w)
    b = res.breakdown
    recomposed = b["L_s"] + w.alpha * b["L_u"] + w.beta * b["R"] + w.gamma * (b["L_ce"] + b["L_cluster"])
    assert abs(recomposed - res.total) <= 1e-12
    assert set(b) == set(BREAKDOWN_KEYS)


def test_unit_weights_equal_sum_of_independent_terms():
    inst = random_instance(4)
    res = _total(inst, LossWeights(1, 1, 1, 0.5))
    x = np.concatenate([inst.lx, inst.ux])
    parts = [
        supervised_loss(inst.model, inst.lx, inst.ly)[0],
        pairwise_loss(inst.model, x, inst.pairs)[0],
        uncertainty_loss(inst.model, inst.ux, inst.counts, 0.5)[0],
        calibration_ce_loss(inst.model, inst.ux, inst.centroids)[0],
        calibration_cluster_loss(inst.model, inst.ux, inst.upairs, inst.centroids)[0],
    ]
    assert abs(res.total - sum(parts)) <= 1e-12


def test_reductions_to_base_and_supervised():
    inst = random_instance(5)
    x = np.concatenate([inst.lx, inst.ux])
    base = _total(inst, LossWeights(1, 0, 0, 0.5)).total
    assert base == supervised_loss(inst.model, inst.lx, inst.ly)[0] + pairwise_loss(inst.model, x, inst.pairs)[0]
    sup = _total(inst, LossWeights(0, 0, 0, 0.5)).total
    assert sup == supervised_loss(inst.model, inst.lx, inst.ly)[0]


def test_no_centroids_means_no_calibration():
    inst = random_instance(6)
    res = _total(inst, LossWeights(), centroids=None)
    assert res.breakdown["L_ce"] == 0.0 and res.breakdown["L_cluster"] == 0.0


@pytest.mark.parametrize("seed", range(3))
def test_composite_passes_finite_differences(seed):
    inst = random_instance(100 + seed)
    opts = ObjectiveOptions()
    frozen = stop_gradient_targets(inst.model, inst.lx, inst.ux, inst.centroids, opts)

    def loss(m):
        r = total_objective(m, inst.lx, inst.ly, inst.ux, inst.counts, inst.centroids, LossWeights(),
                            opts, pairs=inst.pairs, unlabeled_pairs=inst.upairs, frozen=frozen)
        return r.total, r.grads

    assert finite_difference_check(inst.model, loss, 1e-5) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["alpha", "beta", "gamma"]), st.floats(0, 3), st.floats(0, 3))
def test_terms_nonnegative_and_total_monotone_in_weights(seed, name, a, b):
    inst = random_instance(seed % 10_000)
    lo, hi = sorted((a, b))
    w_lo = LossWeights(**{**dict(alpha=1.0, beta=1.0, gamma=1.0, tau=0.5), name: lo})
    w_hi = LossWeights(**{**dict(alpha=1.0, beta=1.0, gamma=1.0, tau=0.5), name: hi})
    r_lo, r_hi = _total(inst, w_lo), _total(inst, w_hi)
    assert all(v >= 0 for v in r_lo.breakdown.values())
    assert r_hi.total >= r_lo.total - 1e-12
