"""Tests for concept-aware mixup interventions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disclab.conceptbank import Concept, ConceptBank, make_coordinate_bank
from disclab.cure import (
    MixupConfig,
    NoSpuriousConceptsError,
    build_intervened_batch,
    mixup,
    sample_concepts,
)
from disclab.rng import substream
from disclab.synthdata import DataConfig, generate_train, make_gamma_patterns


def two_concept_bank(noise_std=0.0):
    return ConceptBank(
        concepts=(
            Concept(id=0, name="c0", category="synthetic", coordinate=0),
            Concept(id=1, name="c1", category="synthetic", coordinate=1),
        ),
        input_dim=4,
        noise_std=noise_std,
    )


# --- MixupConfig ----------------------------------------------------------------


def test_mixup_config_defaults_and_validation():
    cfg = MixupConfig()
    assert cfg.beta1 == 2.0 and cfg.beta2 == 2.0
    for bad in ((0.0, 2.0), (2.0, 0.0), (-1.0, 2.0)):
        with pytest.raises(ValueError):
            MixupConfig(*bad)


# --- sample_concepts --------------------------------------------------------------


def test_degenerate_distribution_always_samples_same_concept():
    bank = two_concept_bank()
    images = sample_concepts(bank, np.array([0.0, 1.0]), 50, substream(0, "sc"))
    assert images.shape == (50, 4)
    assert (images == np.eye(4)[1]).all()


def test_sampling_frequencies_match_distribution():
    bank = two_concept_bank()
    images = sample_concepts(
        bank, np.array([0.75, 0.25]), 10_000, substream(1, "sc")
    )
    share_first = (images[:, 0] == 1.0).mean()
    assert abs(share_first - 0.75) <= 0.02


def test_zero_count_gives_empty_stack():
    bank = two_concept_bank()
    images = sample_concepts(bank, np.array([0.5, 0.5]), 0, substream(2, "sc"))
    assert images.shape == (0, 4)
    assert len(images) == 0


def test_missing_mass_raises_skip_signal():
    bank = two_concept_bank()
    with pytest.raises(NoSpuriousConceptsError):
        sample_concepts(bank, None, 3, substream(3, "sc"))
    with pytest.raises(NoSpuriousConceptsError):
        sample_concepts(bank, np.zeros(2), 3, substream(3, "sc"))


def test_bad_weights_raise():
    bank = two_concept_bank()
    with pytest.raises(ValueError):
        sample_concepts(bank, np.array([0.5, -0.5]), 3, substream(4, "sc"))
    with pytest.raises(ValueError):
        sample_concepts(bank, np.array([1.0]), 3, substream(4, "sc"))
    with pytest.raises(ValueError):
        sample_concepts(bank, np.array([0.5, 0.5]), -1, substream(4, "sc"))


def test_unnormalized_mass_is_renormalized():
    bank = two_concept_bank()
    images = sample_concepts(bank, np.array([3.0, 1.0]), 10_000, substream(5, "sc"))
    assert abs((images[:, 0] == 1.0).mean() - 0.75) <= 0.02


# --- mixup ------------------------------------------------------------------------


def test_lambda_one_returns_instances_unchanged():
    rng = substream(0, "mix")
    X = rng.standard_normal((6, 4))
    C = rng.standard_normal((6, 4))
    assert (mixup(X, C, MixupConfig(), rng, lam=1.0) == X).all()


def test_lambda_zero_returns_concept_images():
    rng = substream(1, "mix")
    X = rng.standard_normal((6, 4))
    C = rng.standard_normal((6, 4))
    assert (mixup(X, C, MixupConfig(), rng, lam=0.0) == C).all()


def test_default_beta_draws_average_one_half():
    rng = substream(2, "mix")
    n = 100_000
    X = np.zeros((n, 1))
    C = np.ones((n, 1))
    mixed = mixup(X, C, MixupConfig(), rng)
    lam_mean = 1.0 - mixed[:, 0].mean()
    assert abs(lam_mean - 0.5) <= 0.005


def test_shape_mismatch_and_bad_lambda_raise():
    rng = substream(3, "mix")
    with pytest.raises(ValueError):
        mixup(np.zeros((3, 2)), np.zeros((4, 2)), MixupConfig(), rng)
    with pytest.raises(ValueError):
        mixup(np.zeros((3, 2)), np.zeros((3, 2)), MixupConfig(), rng, lam=1.5)


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    rows=st.integers(1, 8),
    cols=st.integers(1, 5),
)
def test_mixing_stays_inside_coordinate_envelope(seed, rows, cols):
    rng = substream(seed, "hull")
    X = 10.0 * rng.standard_normal((rows, cols))
    C = 10.0 * rng.standard_normal((rows, cols))
    mixed = mixup(X, C, MixupConfig(), rng)
    lo = np.minimum(X, C)
    hi = np.maximum(X, C)
    assert (mixed >= lo - 1e-9).all() and (mixed <= hi + 1e-9).all()


# --- build_intervened_batch ---------------------------------------------------------


def planted_dataset(seed, n=800):
    config = DataConfig(
        p1=6,
        p2=2,
        n=n,
        k=2,
        mu=np.full(6, 0.5),
        sigma1=np.eye(6),
        spu_noise_scale=0.2,
        seed=seed,
    )
    patterns = make_gamma_patterns(2, 2, config.k0, substream(seed, "patterns"))
    dataset = generate_train(config, patterns, substream(seed, "train"))
    bank = make_coordinate_bank(6, 2)
    return dataset, bank, config


def test_batch_comes_from_complement_with_labels_preserved():
    dataset, bank, config = planted_dataset(0)
    P = np.zeros(bank.m)
    P[config.p1] = 1.0
    X_mixed, labels = build_intervened_batch(
        dataset, 1, bank, P, 64, MixupConfig(), substream(0, "batch")
    )
    assert X_mixed.shape == (64, config.p)
    assert labels.shape == (64,)
    assert (labels == -1).all()


def test_mixing_raises_planted_coordinate_mean_in_other_class():
    dataset, bank, config = planted_dataset(1)
    coord = config.p1  # first spurious coordinate
    P = np.zeros(bank.m)
    P[coord] = 1.0
    X_mixed, labels = build_intervened_batch(
        dataset, 1, bank, P, 512, MixupConfig(), substream(1, "batch")
    )
    raw_mean = dataset.features[dataset.labels == -1, coord].mean()
    assert X_mixed[:, coord].mean() > raw_mean + 0.1


def test_batch_stays_inside_global_envelope():
    dataset, bank, config = planted_dataset(2)
    P = np.full(bank.m, 1.0 / bank.m)
    X_mixed, _ = build_intervened_batch(
        dataset, -1, bank, P, 256, MixupConfig(), substream(2, "batch")
    )
    source = dataset.features[dataset.labels != -1]
    lo = np.minimum(source.min(axis=0), 0.0)
    hi = np.maximum(source.max(axis=0), 1.0)
    assert (X_mixed >= lo - 1e-9).all() and (X_mixed <= hi + 1e-9).all()


def test_small_complement_falls_back_to_replacement():
    dataset, bank, _ = planted_dataset(3, n=40)
    P = np.ones(bank.m)
    n_neg = int((dataset.labels == -1).sum())
    X_mixed, labels = build_intervened_batch(
        dataset, 1, bank, P, n_neg + 25, MixupConfig(), substream(3, "batch")
    )
    assert len(labels) == n_neg + 25
    assert (labels == -1).all()


def test_empty_mass_propagates_skip_signal():
    dataset, bank, _ = planted_dataset(4)
    with pytest.raises(NoSpuriousConceptsError):
        build_intervened_batch(
            dataset, 1, bank, None, 32, MixupConfig(), substream(4, "batch")
        )


def test_bad_batch_size_raises():
    dataset, bank, _ = planted_dataset(5)
    with pytest.raises(ValueError):
        build_intervened_batch(
            dataset, 1, bank, np.ones(bank.m), 0, MixupConfig(), substream(5, "batch")
        )


def test_same_stream_reproduces_batch():
    dataset, bank, _ = planted_dataset(6)
    P = np.ones(bank.m)
    a = build_intervened_batch(dataset, 1, bank, P, 64, MixupConfig(), substream(7, "b"))
    b = build_intervened_batch(dataset, 1, bank, P, 64, MixupConfig(), substream(7, "b"))
    assert (a[0] == b[0]).all() and (a[1] == b[1]).all()


def test_full_intervened_epoch_shrinks_spurious_mean_gaps():
    # One intervened pass: every instance is mixed once, in the batch built
    # for the opposite class. The class-conditional mean gap of each planted
    # spurious coordinate should shrink relative to the raw data in nearly
    # every seed (both classes move toward the same concept mixture).
    shrunk = 0
    seeds = range(10)
    for seed in seeds:
        dataset, bank, config = planted_dataset(seed)
        P = np.zeros(bank.m)
        P[config.p1 :] = 0.5
        parts = []
        for y in (-1, 1):
            count = int((dataset.labels != y).sum())
            X_mixed, labels = build_intervened_batch(
                dataset,
                y,
                bank,
                P,
                count,
                MixupConfig(),
                substream(seed, "epoch", (-1, 1).index(y)),
            )
            parts.append((X_mixed, labels))
        X_all = np.vstack([p[0] for p in parts])
        y_all = np.concatenate([p[1] for p in parts])
        assert len(y_all) == len(dataset.labels)
        all_coords_shrunk = True
        for coord in range(config.p1, config.p):
            raw_gap = abs(
                dataset.features[dataset.labels == 1, coord].mean()
                - dataset.features[dataset.labels == -1, coord].mean()
            )
            new_gap = abs(
                X_all[y_all == 1, coord].mean() - X_all[y_all == -1, coord].mean()
            )
            all_coords_shrunk &= new_gap < raw_gap
        shrunk += all_coords_shrunk
    assert shrunk >= 9, shrunk
