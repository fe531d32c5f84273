"""Tests for metrics: group accuracies, Cramér's V, closed-form oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disclab.metrics import (
    GroupMetrics,
    closed_form_least_squares,
    contingency_table,
    cramers_v,
    cumulative_sensitivity,
    group_metrics,
    norm_comparison,
    theoretical_test_error,
    write_contingency_csv,
)
from disclab.model import full_gradient, make_theory_classifier, sgd_step, theory_params
from disclab.rng import substream
from disclab.synthdata import (
    DataConfig,
    LabeledDataset,
    generate_test,
    generate_train,
    make_gamma_patterns,
)


def toy_dataset(labels, envs, features=None):
    labels = np.asarray(labels)
    envs = np.asarray(envs)
    if features is None:
        features = np.zeros((len(labels), 2))
    return LabeledDataset(
        features=features,
        labels=labels,
        env_ids=envs,
        group_ids=np.column_stack([labels, envs]),
    )


# --- group metrics ----------------------------------------------------------------


def test_all_correct_scores_one_everywhere():
    clf = make_theory_classifier(2, weights=np.array([1.0, 0.0]))
    labels = np.array([1, 1, -1, -1])
    features = np.column_stack([labels.astype(float), np.zeros(4)])
    metrics = group_metrics(clf, toy_dataset(labels, [1, 2, 1, 2], features))
    assert metrics.avg_acc == 1.0 and metrics.worst_acc == 1.0
    assert set(metrics.per_group_acc) == {(1, 1), (1, 2), (-1, 1), (-1, 2)}


def test_one_dead_group_zeroes_worst():
    clf = make_theory_classifier(2, weights=np.array([1.0, 0.0]))
    labels = np.array([1] * 8 + [-1] * 2)
    features = np.column_stack([np.ones(10), np.zeros(10)])  # always predicts +1
    metrics = group_metrics(clf, toy_dataset(labels, [1] * 10, features))
    assert metrics.worst_acc == 0.0
    assert metrics.avg_acc == 0.8


def test_four_group_arithmetic():
    clf = make_theory_classifier(2, weights=np.array([1.0, 0.0]))
    # group sizes 4, 2, 4, 4 with accuracies 1, .5, .75, .25
    rows = []
    labels = []
    envs = []

    def add_group(label, env, n, n_correct):
        for i in range(n):
            sign = 1 if i < n_correct else -1
            rows.append([sign * label, 0.0])
            labels.append(label)
            envs.append(env)

    add_group(1, 1, 4, 4)
    add_group(1, 2, 2, 1)
    add_group(-1, 1, 4, 3)
    add_group(-1, 2, 4, 1)
    metrics = group_metrics(clf, toy_dataset(labels, envs, np.array(rows)))
    assert metrics.per_group_acc[(1, 1)] == 1.0
    assert metrics.per_group_acc[(1, 2)] == 0.5
    assert metrics.per_group_acc[(-1, 1)] == 0.75
    assert metrics.per_group_acc[(-1, 2)] == 0.25
    assert metrics.worst_acc == 0.25
    assert metrics.avg_acc == pytest.approx((4 + 1 + 3 + 1) / 14)


def test_empty_dataset_rejected():
    clf = make_theory_classifier(2, weights=np.array([1.0, 0.0]))
    empty = LabeledDataset(
        features=np.zeros((0, 2)),
        labels=np.zeros(0, dtype=int),
        env_ids=np.zeros(0, dtype=int),
        group_ids=np.zeros((0, 2), dtype=int),
    )
    with pytest.raises(ValueError):
        group_metrics(clf, empty)


def test_group_metrics_validation_catches_bad_worst():
    with pytest.raises(ValueError):
        GroupMetrics(
            per_group_acc={(1, 1): 0.5, (-1, 1): 1.0},
            avg_acc=0.75,
            worst_acc=1.0,
            n_per_group={(1, 1): 2, (-1, 1): 2},
        )


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_worst_never_exceeds_average(seed):
    rng = substream(seed, "gm")
    n = int(rng.integers(4, 40))
    labels = np.where(rng.random(n) < 0.5, 1, -1)
    if (labels == 1).all() or (labels == -1).all():
        labels[0] = -labels[0]
    envs = rng.integers(1, 4, size=n)
    features = rng.standard_normal((n, 2))
    clf = make_theory_classifier(2, weights=rng.standard_normal(2))
    metrics = group_metrics(clf, toy_dataset(labels, envs, features))
    assert metrics.worst_acc <= metrics.avg_acc + 1e-12


# --- Cramér's V -------------------------------------------------------------------


def test_product_table_scores_zero():
    attribute = np.array([0] * 20 + [1] * 20)
    label = np.array(([0] * 10 + [1] * 10) * 2)
    assert cramers_v(attribute, label) == pytest.approx(0.0, abs=1e-12)


def test_identical_vectors_score_one():
    v = np.array([0, 1, 1, 0, 1, 0, 0, 1])
    assert cramers_v(v, v) == pytest.approx(1.0)


def test_pinned_association_table():
    # counts [[30, 10], [10, 30]]: chi2 = 20, n = 80, V = sqrt(20/80) = 0.5
    attribute = np.array([0] * 40 + [1] * 40)
    label = np.array([0] * 30 + [1] * 10 + [0] * 10 + [1] * 30)
    assert cramers_v(attribute, label) == pytest.approx(0.5, abs=1e-12)


def test_constant_variable_rejected():
    with pytest.raises(ValueError):
        cramers_v(np.zeros(10), np.array([0, 1] * 5))
    with pytest.raises(ValueError):
        cramers_v(np.array([0, 1] * 5), np.ones(10))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_association_symmetric_and_relabel_invariant(seed):
    rng = substream(seed, "cv")
    n = int(rng.integers(8, 60))
    a = rng.integers(0, 2, size=n)
    b = rng.integers(0, 2, size=n)
    if len(np.unique(a)) < 2:
        a[0] = 1 - a[0]
    if len(np.unique(b)) < 2:
        b[0] = 1 - b[0]
    v = cramers_v(a, b)
    assert 0.0 <= v <= 1.0 + 1e-12
    assert v == pytest.approx(cramers_v(b, a), abs=1e-12)
    assert v == pytest.approx(cramers_v(1 - a, 7 * b + 3), abs=1e-12)


def test_contingency_csv_layout(tmp_path):
    attribute = np.array([0, 0, 1, 1, 1])
    label = np.array([0, 1, 0, 1, 1])
    path = tmp_path / "table.csv"
    write_contingency_csv(attribute, label, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "attribute,0,1"
    assert lines[1] == "0,1,1"
    assert lines[2] == "1,1,2"
    table, _, _ = contingency_table(attribute, label)
    assert table.sum() == 5


# --- theoretical test error --------------------------------------------------------


def phi(z):
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def test_aligned_estimator_matches_direct_substitution():
    mu = np.array([0.6, 0.8])
    err = theoretical_test_error(mu, np.zeros(2), mu, np.eye(2))
    assert err == pytest.approx(phi(-1.0), abs=1e-12)


def test_orthogonal_estimator_is_chance():
    mu = np.array([1.0, 0.0])
    mu_hat = np.array([0.0, 2.0])
    assert theoretical_test_error(mu_hat, np.zeros(2), mu, np.eye(2)) == pytest.approx(
        0.5
    )


def test_zero_estimator_is_chance():
    mu = np.array([1.0, 0.0])
    assert theoretical_test_error(np.zeros(2), np.zeros(2), mu, np.eye(2)) == 0.5


def test_non_positive_definite_sigma_rejected():
    with pytest.raises(ValueError):
        theoretical_test_error(
            np.ones(2), np.zeros(1), np.ones(2), np.array([[1.0, 0.0], [0.0, -1.0]])
        )


def test_strict_formula_assumes_identity_covariance():
    mu = np.array([0.5, 0.5])
    mu_hat = np.array([1.0, 1.0])
    gamma_hat = np.array([0.5])
    sigma1 = np.diag([4.0, 4.0])
    general = theoretical_test_error(mu_hat, gamma_hat, mu, sigma1)
    strict = theoretical_test_error(
        mu_hat, gamma_hat, mu, sigma1, strict_paper_formula=True
    )
    expected_strict = phi(-1.0 / math.sqrt(2.0 + 0.25))
    assert strict == pytest.approx(expected_strict, abs=1e-12)
    assert general == pytest.approx(phi(-1.0 / math.sqrt(8.0 + 0.25)), abs=1e-12)
    assert general != strict


def test_error_monotone_in_alignment_and_spurious_norm():
    mu = np.array([0.5, 0.5, 0.5])
    mu_hat = np.array([0.4, 0.3, 0.2])
    gamma_hat = np.array([0.3, 0.1])
    sigma1 = np.eye(3)
    base = theoretical_test_error(mu_hat, gamma_hat, mu, sigma1)
    better_aligned = theoretical_test_error(mu_hat + 0.05 * mu, gamma_hat, mu, sigma1)
    more_spurious = theoretical_test_error(mu_hat, 1.5 * gamma_hat, mu, sigma1)
    assert better_aligned < base < more_spurious


def test_formula_matches_monte_carlo():
    config = DataConfig(
        p1=4,
        p2=2,
        n=10,
        k=2,
        mu=np.array([0.5, 0.3, 0.2, 0.4]),
        sigma1=np.diag([1.0, 2.0, 0.5, 1.5]),
        spu_noise_scale=1.0,
        seed=0,
    )
    patterns = make_gamma_patterns(2, 2, config.k0, substream(0, "patterns"))
    theta = np.array([0.4, 0.1, 0.3, 0.2, 0.25, -0.15])
    test_set = generate_test(config, patterns, 1_000_000, substream(0, "mc"))
    clf = make_theory_classifier(6, weights=theta)
    from disclab.model import predict_labels

    mc = float((predict_labels(clf, test_set.features) != test_set.labels).mean())
    formula = theoretical_test_error(theta[:4], theta[4:], config.mu, config.sigma1)
    assert abs(formula - mc) < 0.002


# --- closed-form least squares -------------------------------------------------------


def test_orthonormal_design_reduces_to_projection():
    rng = substream(0, "ls")
    raw = rng.standard_normal((40, 3))
    q, _ = np.linalg.qr(raw)
    y = rng.standard_normal(40)
    theta = closed_form_least_squares(q, y)
    assert np.allclose(theta, q.T @ y, atol=1e-12)
    scaled = math.sqrt(40.0) * q
    theta_scaled = closed_form_least_squares(scaled, y)
    assert np.allclose(theta_scaled, scaled.T @ y / 40.0, atol=1e-12)


def test_residual_orthogonality():
    rng = substream(1, "ls")
    X = rng.standard_normal((60, 5))
    y = rng.standard_normal(60)
    theta = closed_form_least_squares(X, y)
    assert np.abs(X.T @ (y - X @ theta)).max() < 1e-8


def test_rank_deficiency_paths():
    X = np.zeros((10, 2))
    X[:, 0] = np.arange(10.0)
    X[:, 1] = 2.0 * np.arange(10.0)
    y = np.arange(10.0)
    with pytest.raises(np.linalg.LinAlgError):
        closed_form_least_squares(X, y, allow_ridge_fallback=False)
    with pytest.warns(RuntimeWarning):
        theta = closed_form_least_squares(X, y)
    assert np.isfinite(theta).all()


def test_agrees_with_gradient_descent():
    config = DataConfig(
        p1=4,
        p2=2,
        n=600,
        k=2,
        mu=np.full(4, 0.5),
        sigma1=np.eye(4),
        spu_noise_scale=0.5,
        seed=3,
    )
    patterns = make_gamma_patterns(2, 2, config.k0, substream(3, "patterns"))
    data = generate_train(config, patterns, substream(3, "train"))
    theta_exact = closed_form_least_squares(data.features, data.labels.astype(float))
    clf = make_theory_classifier(config.p)
    y = data.labels.astype(float)
    for _ in range(4000):
        grads = full_gradient(clf, data.features, y)
        clf = sgd_step(clf, grads, lr=0.5)
    assert np.abs(theory_params(clf) - theta_exact).max() < 1e-3


# --- norm comparison ---------------------------------------------------------------


def test_equal_blocks_not_ordered():
    theta = np.array([1.0, 2.0, 0.5, 0.5])
    report = norm_comparison(theta, theta.copy(), p1=2)
    assert report["ordered"] is False
    assert report["gamma_norm_erm"] == report["gamma_norm_disc"]


def test_halved_block_is_ordered():
    erm = np.array([1.0, 2.0, 0.6, 0.8])
    disc = np.array([1.0, 2.0, 0.3, 0.4])
    report = norm_comparison(erm, disc, p1=2)
    assert report["ordered"] is True
    assert report["gamma_norm_erm"] == pytest.approx(1.0)
    assert report["gamma_norm_disc"] == pytest.approx(0.5)
    assert report["ratio"] == pytest.approx(0.5)


def test_norm_comparison_validates_shapes():
    with pytest.raises(ValueError):
        norm_comparison(np.ones(3), np.ones(4), p1=2)
    with pytest.raises(ValueError):
        norm_comparison(np.ones(3), np.ones(3), p1=5)


# --- cumulative sensitivity ----------------------------------------------------------


def test_single_epoch_totals_equal_that_epoch():
    S = np.array([0.5, 0.1, 0.9])
    totals, ranking = cumulative_sensitivity([S])
    assert np.allclose(totals, S)
    assert ranking == [2, 0, 1]


def test_all_zero_trajectory():
    totals, ranking = cumulative_sensitivity([np.zeros(3), np.zeros(3)])
    assert (totals == 0).all()
    assert ranking == [0, 1, 2]


def test_summation_and_named_ranking():
    trajectory = {0: np.array([1.0, 0.0]), 1: np.array([2.0, 5.0])}
    totals, ranking = cumulative_sensitivity(
        trajectory, concept_names=["concept 1", "concept 2"]
    )
    assert np.allclose(totals, [3.0, 5.0])
    assert ranking == ["concept 2", "concept 1"]


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        cumulative_sensitivity([])
