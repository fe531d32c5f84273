"""Spurious-concept discovery via environment-gradient sensitivity.

For each environment G_j an Environment Gradient Matrix M_j (the descent
direction of the mean batch loss with respect to the classifier head) is
estimated on a sampled mini-batch. Projecting a concept's CAV onto every M_j
gives per-class tendency scores; a concept's sensitivity is the variance of
those scores across environments at its dominant class, and normalizing the
masked sensitivities per class yields the intervention probabilities used by
the cure step.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .conceptbank import CavSet
from .envcluster import EnvironmentPartition
from .model import Classifier, last_layer_gradient
from .synthdata import TrainView

CLASSES = (-1, 1)
DEFAULT_EGM_BATCH = 128
EGM_DESCENT = "descent"
EGM_RAW = "raw"


@dataclass(frozen=True)
class SensitivityReport:
    """Per-epoch discovery result.

    cts[j, i] is concept i's tendency under environment j at the concept's
    dominant class; sensitivity[i] is the population variance of column i;
    probabilities maps each class to its normalized sensitivity vector, or to
    None when no concept with positive sensitivity is dominated by the class
    (the cure step then skips that class).
    """

    cts: np.ndarray  # (k, m)
    sensitivity: np.ndarray  # (m,)
    dominant: np.ndarray  # (m,) entries in {-1, +1}
    probabilities: dict[int, np.ndarray | None]
    epoch: int

    def __post_init__(self) -> None:
        k, m = self.cts.shape
        if self.sensitivity.shape != (m,) or self.dominant.shape != (m,):
            raise ValueError("sensitivity and dominant must have one entry per concept")
        if (self.sensitivity < 0).any():
            raise ValueError("sensitivities must be nonnegative")
        for y, p in self.probabilities.items():
            if p is None:
                continue
            if (p < 0).any():
                raise ValueError(f"P^({y}) must be nonnegative")
            if abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"P^({y}) must sum to 1")
            if (p[self.dominant != y] != 0).any():
                raise ValueError(f"P^({y}) has mass outside class-{y} concepts")


def environment_gradient(
    classifier: Classifier,
    environment: TrainView,
    egm_batch: int,
    rng: np.random.Generator,
    sign: str = EGM_DESCENT,
) -> np.ndarray:
    """Environment gradient matrix M_j, one row per classifier output.

    Computed on a uniform without-replacement sample of egm_batch instances
    (the whole environment when it is no larger). With the default "descent"
    sign this is minus the gradient of the mean batch loss with respect to
    the head weights; "raw" flips the sign. Single-output heads yield one
    row, read as the +1-class direction; the -1 row is its negation and is
    supplied downstream by concept_tendency.
    """
    if sign not in (EGM_DESCENT, EGM_RAW):
        raise ValueError(f"unknown EGM sign convention {sign!r}")
    n = len(environment.labels)
    if n == 0:
        raise ValueError("environment is empty")
    if egm_batch < 1:
        raise ValueError("egm_batch must be >= 1")
    if egm_batch < n:
        idx = rng.choice(n, size=egm_batch, replace=False)
        X, y = environment.features[idx], environment.labels[idx]
    else:
        X, y = environment.features, environment.labels
    grad = last_layer_gradient(classifier, X, y)
    return -grad if sign == EGM_DESCENT else grad.copy()


def concept_tendency(v_i: np.ndarray, M_j: np.ndarray) -> np.ndarray:
    """Per-class tendency of one concept under one environment.

    The literal product M_j v_i for a two-row matrix; a single-row matrix is
    expanded to (-s, +s) over the class order (-1, +1), where s is the row's
    projection onto v_i.
    """
    v_i = np.asarray(v_i, dtype=float)
    M_j = np.asarray(M_j, dtype=float)
    if M_j.ndim != 2 or M_j.shape[1] != v_i.shape[0]:
        raise ValueError(f"M_j columns ({M_j.shape}) must match dim(v_i) ({v_i.shape})")
    scores = M_j @ v_i
    if len(scores) == 1:
        return np.array([-scores[0], scores[0]])
    return scores


def dominant_class(v_i: np.ndarray, gradients: list[np.ndarray]) -> int:
    """Class with the largest tendency summed over environments.

    Ties go to the lowest class. Scaling v_i by any positive factor cannot
    change the answer.
    """
    total = sum(concept_tendency(v_i, M_j) for M_j in gradients)
    return CLASSES[int(np.argmax(total))]


def concept_sensitivity(v_i: np.ndarray, gradients: list[np.ndarray], y_prime: int) -> float:
    """Population variance (divide by k) of the concept's tendency at class
    y_prime across the k environments."""
    column = CLASSES.index(y_prime)
    values = [concept_tendency(v_i, M_j)[column] for M_j in gradients]
    return float(np.var(values))


def concept_probabilities(
    sensitivity: np.ndarray, dominant: np.ndarray
) -> dict[int, np.ndarray | None]:
    """Per-class intervention distribution P^(y): sensitivities masked to the
    class's dominant concepts and normalized; None when the masked sum is 0."""
    sensitivity = np.asarray(sensitivity, dtype=float)
    dominant = np.asarray(dominant)
    out: dict[int, np.ndarray | None] = {}
    for y in CLASSES:
        masked = np.where(dominant == y, sensitivity, 0.0)
        total = masked.sum()
        out[y] = masked / total if total > 0 else None
    return out


def discover(
    classifier: Classifier,
    dataset,
    partition: EnvironmentPartition,
    cavset: CavSet,
    egm_batch: int,
    rng: np.random.Generator,
    epoch: int = 0,
    sign: str = EGM_DESCENT,
) -> SensitivityReport:
    """One full discovery pass over the current environments.

    Every environment gets its own child RNG stream (gradients could be
    computed concurrently); the rest is the deterministic composition of
    concept_tendency, dominant_class, concept_sensitivity and
    concept_probabilities over the CAV rows.
    """
    view = dataset.train_view()
    streams = rng.spawn(len(partition.environments))
    gradients = []
    for env, stream in zip(partition.environments, streams):
        subset = TrainView(features=view.features[env], labels=view.labels[env])
        gradients.append(environment_gradient(classifier, subset, egm_batch, stream, sign))
    m = cavset.vectors.shape[0]
    dominant = np.empty(m, dtype=int)
    sensitivity = np.empty(m)
    cts = np.empty((len(gradients), m))
    for i in range(m):
        v_i = cavset.vectors[i]
        y_prime = dominant_class(v_i, gradients)
        dominant[i] = y_prime
        sensitivity[i] = concept_sensitivity(v_i, gradients, y_prime)
        column = CLASSES.index(y_prime)
        for j, M_j in enumerate(gradients):
            cts[j, i] = concept_tendency(v_i, M_j)[column]
    return SensitivityReport(
        cts=cts,
        sensitivity=sensitivity,
        dominant=dominant,
        probabilities=concept_probabilities(sensitivity, dominant),
        epoch=epoch,
    )


def report_to_dict(report: SensitivityReport, concept_ids=None) -> dict:
    payload = {
        "epoch": report.epoch,
        "sensitivity": [float(s) for s in report.sensitivity],
        "dominant": [int(y) for y in report.dominant],
        "probabilities": {
            str(y): None if p is None else [float(x) for x in p]
            for y, p in report.probabilities.items()
        },
        "cts": [[float(x) for x in row] for row in report.cts],
    }
    if concept_ids is not None:
        payload["concept_ids"] = [int(c) for c in concept_ids]
    return payload


def write_report_json(report: SensitivityReport, path: str, concept_ids=None) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report, concept_ids), fh, indent=2)
        fh.write("\n")


def write_sensitivity_csv(rows: list[tuple[int, int, float]], path: str) -> None:
    """Trajectory export: epoch,concept_id,sensitivity."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "concept_id", "sensitivity"])
        for epoch, concept_id, s in rows:
            writer.writerow([epoch, concept_id, repr(float(s))])
