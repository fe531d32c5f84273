"""Concept-aware mixup: balancing spurious-concept presence across classes.

Once discovery has assigned each class a distribution over spurious concepts,
the cure step samples concept images from that distribution and mixes them
into minibatches drawn from the *other* classes. Labels pass through
untouched; only the inputs move toward the concept images, which evens out
how strongly each class co-occurs with the concept.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conceptbank import ConceptBank, synth_concept_image
from .synthdata import LabeledDataset


class NoSpuriousConceptsError(ValueError):
    """Raised when a class has no spurious-concept mass to sample from."""


@dataclass(frozen=True)
class MixupConfig:
    """Beta-distribution shape parameters for the per-instance mixing weight."""

    beta1: float = 2.0
    beta2: float = 2.0

    def __post_init__(self) -> None:
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("Beta shape parameters must be > 0")


def sample_concepts(
    bank: ConceptBank,
    probabilities: np.ndarray | None,
    count: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw ``count`` concept images i.i.d. from a categorical distribution.

    Parameters
    ----------
    probabilities : array or None
        One weight per concept, aligned with ``bank.ordered_ids()``. ``None``
        or zero total mass means the class has nothing to intervene with.

    Returns
    -------
    images : ndarray, shape (count, input_dim)

    Raises
    ------
    NoSpuriousConceptsError
        If there is no positive mass; callers skip the class in that case.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    ids = bank.ordered_ids()
    if probabilities is None:
        raise NoSpuriousConceptsError("no spurious concepts for class")
    weights = np.asarray(probabilities, dtype=float)
    if weights.shape != (len(ids),):
        raise ValueError(f"need one weight per concept, got shape {weights.shape}")
    if (weights < 0).any():
        raise ValueError("concept weights must be >= 0")
    total = weights.sum()
    if total <= 0:
        raise NoSpuriousConceptsError("no spurious concepts for class")
    if count == 0:
        return np.zeros((0, bank.input_dim))
    draws = rng.choice(len(ids), size=count, p=weights / total)
    return np.stack([synth_concept_image(bank, ids[j], rng) for j in draws])


def mixup(
    X: np.ndarray,
    X_concepts: np.ndarray,
    mixcfg: MixupConfig,
    rng: np.random.Generator,
    lam: np.ndarray | float | None = None,
) -> np.ndarray:
    """Rowwise convex combination lam*X + (1-lam)*X_concepts.

    One mixing weight is drawn per row. ``lam`` overrides the Beta draw with
    fixed weights (scalar or one per row); tests use it to pin the endpoints.
    Labels are not touched by mixing; callers keep their label array as is.
    """
    X = np.asarray(X, dtype=float)
    X_concepts = np.asarray(X_concepts, dtype=float)
    if X.shape != X_concepts.shape:
        raise ValueError(
            f"instances {X.shape} and concept images {X_concepts.shape} differ"
        )
    if lam is None:
        lam = rng.beta(mixcfg.beta1, mixcfg.beta2, size=X.shape[0])
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (X.shape[0],))
    if ((lam < 0) | (lam > 1)).any():
        raise ValueError("mixing weights must lie in [0, 1]")
    return lam[:, None] * X + (1.0 - lam)[:, None] * X_concepts


def build_intervened_batch(
    dataset: LabeledDataset,
    y: int,
    bank: ConceptBank,
    probabilities: np.ndarray | None,
    batch_size: int,
    mixcfg: MixupConfig,
    rng: np.random.Generator,
    return_rows: bool = False,
):
    """Minibatch from outside class ``y``, mixed with that class's concepts.

    Instances are drawn uniformly from the complement of class ``y``, without
    replacement when the complement is large enough, with replacement
    otherwise. Each row gets a concept image sampled from ``probabilities``.

    Returns
    -------
    X_mixed : ndarray, shape (batch_size, p)
    labels : ndarray, shape (batch_size,)
        The sampled rows' original labels, unchanged.
    rows : ndarray, shape (batch_size,)
        Dataset indices of the sampled rows; only with ``return_rows``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    complement = np.flatnonzero(dataset.labels != y)
    if complement.size == 0:
        raise ValueError(f"no instances outside class {y}")
    replace = complement.size < batch_size
    rows = rng.choice(complement, size=batch_size, replace=replace)
    concepts = sample_concepts(bank, probabilities, batch_size, rng)
    mixed = mixup(dataset.features[rows], concepts, mixcfg, rng)
    if return_rows:
        return mixed, dataset.labels[rows], rows
    return mixed, dataset.labels[rows]
