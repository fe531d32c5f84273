"""Accuracy metrics, association measures, and closed-form oracles.

Groups are (class, environment) pairs; the robustness number of record is the
minimum accuracy over nonempty groups. The closed forms (normal-equation
solve, Gaussian test-error integral) exist so that iterative training has
something exact to be checked against.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .model import Classifier, predict_labels
from .synthdata import LabeledDataset

RIDGE_FALLBACK = 1e-8


@dataclass(frozen=True)
class GroupMetrics:
    """Per-group and aggregate accuracies; only nonempty groups appear."""

    per_group_acc: dict[tuple[int, int], float]
    avg_acc: float
    worst_acc: float
    n_per_group: dict[tuple[int, int], int] = field(repr=False)

    def __post_init__(self) -> None:
        if not self.per_group_acc:
            raise ValueError("need at least one nonempty group")
        if set(self.per_group_acc) != set(self.n_per_group):
            raise ValueError("per_group_acc and n_per_group key sets differ")
        if any(n < 1 for n in self.n_per_group.values()):
            raise ValueError("groups must be nonempty")
        if abs(self.worst_acc - min(self.per_group_acc.values())) > 1e-12:
            raise ValueError("worst_acc must be the minimum group accuracy")
        total = sum(self.n_per_group.values())
        weighted = (
            sum(self.per_group_acc[g] * self.n_per_group[g] for g in self.n_per_group)
            / total
        )
        if abs(self.avg_acc - weighted) > 1e-9:
            raise ValueError("avg_acc must be the instance-weighted mean")


def group_metrics(classifier: Classifier, dataset: LabeledDataset) -> GroupMetrics:
    """Evaluate hard predictions per (class, environment) group."""
    if dataset.n == 0:
        raise ValueError("empty dataset")
    correct = predict_labels(classifier, dataset.features) == dataset.labels
    per_group: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    keys = [tuple(row) for row in dataset.group_ids]
    for key in sorted(set(keys)):
        mask = np.array([k == key for k in keys])
        per_group[key] = float(correct[mask].mean())
        counts[key] = int(mask.sum())
    return GroupMetrics(
        per_group_acc=per_group,
        avg_acc=float(correct.mean()),
        worst_acc=min(per_group.values()),
        n_per_group=counts,
    )


# --- association -----------------------------------------------------------------


def contingency_table(
    attribute: np.ndarray, label: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts of (attribute value, label value) pairs plus the value orders."""
    attribute = np.asarray(attribute)
    label = np.asarray(label)
    if attribute.shape != label.shape or attribute.ndim != 1:
        raise ValueError("attribute and label must be equal-length vectors")
    if attribute.size == 0:
        raise ValueError("empty vectors")
    a_values, a_idx = np.unique(attribute, return_inverse=True)
    l_values, l_idx = np.unique(label, return_inverse=True)
    table = np.zeros((len(a_values), len(l_values)))
    np.add.at(table, (a_idx, l_idx), 1.0)
    return table, a_values, l_values


def cramers_v(attribute: np.ndarray, label: np.ndarray) -> float:
    """Chi-squared association sqrt(chi2 / (n * min(r-1, c-1))), in [0, 1].

    No continuity correction. Both inputs must be categorical with at least
    two observed values each; bin continuous attributes before calling.
    """
    table, a_values, l_values = contingency_table(attribute, label)
    if len(a_values) < 2 or len(l_values) < 2:
        raise ValueError("constant variable: need >= 2 observed values on each side")
    n = table.sum()
    expected = np.outer(table.sum(axis=1), table.sum(axis=0)) / n
    chi2 = float(((table - expected) ** 2 / expected).sum())
    dof = min(table.shape[0] - 1, table.shape[1] - 1)
    return math.sqrt(chi2 / (n * dof))


def write_contingency_csv(
    attribute: np.ndarray, label: np.ndarray, path: str
) -> None:
    """Contingency counts as CSV: one row per attribute value, one column per label."""
    table, a_values, l_values = contingency_table(attribute, label)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute"] + [str(v) for v in l_values])
        for value, row in zip(a_values, table):
            writer.writerow([str(value)] + [str(int(c)) for c in row])


# --- closed forms -----------------------------------------------------------------


def _phi(z: float) -> float:
    """Standard normal CDF via erfc (abs error well under 1e-12)."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def theoretical_test_error(
    mu_hat: np.ndarray,
    gamma_hat: np.ndarray,
    mu: np.ndarray,
    sigma1: np.ndarray,
    strict_paper_formula: bool = False,
) -> float:
    """Population misclassification of sign(theta . x) when the planted
    patterns are absent at test time.

    The test law draws x_inv = y*mu + eps1 with eps1 ~ N(0, sigma1) and
    spurious coordinates as unit-variance noise, so the error is
    Phi(-mu_hat.mu / sqrt(mu_hat' sigma1 mu_hat + ||gamma_hat||^2)).

    ``strict_paper_formula`` swaps the denominator for
    sqrt(||mu_hat||^2 + ||gamma_hat||^2), the simplified form that assumes
    sigma1 = I; the CLI exposes it as --strict-paper-error-formula.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    gamma_hat = np.asarray(gamma_hat, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma1 = np.asarray(sigma1, dtype=float)
    try:
        np.linalg.cholesky(sigma1)
    except np.linalg.LinAlgError:
        raise ValueError("sigma1 must be positive definite") from None
    if strict_paper_formula:
        variance = float(mu_hat @ mu_hat + gamma_hat @ gamma_hat)
    else:
        variance = float(mu_hat @ sigma1 @ mu_hat + gamma_hat @ gamma_hat)
    if variance == 0.0:
        return 0.5
    return _phi(-float(mu_hat @ mu) / math.sqrt(variance))


def closed_form_least_squares(
    X: np.ndarray, y: np.ndarray, allow_ridge_fallback: bool = True
) -> np.ndarray:
    """Exact normal-equation minimizer of sum (y_i - theta . x_i)^2.

    A rank-deficient Gram matrix either raises or, when the fallback is
    allowed, gets RIDGE_FALLBACK added to its diagonal (with a warning).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    gram = X.T @ X
    rhs = X.T @ y
    eigs = np.linalg.eigvalsh(gram)
    if eigs[0] <= eigs[-1] * 1e-10:
        if not allow_ridge_fallback:
            raise np.linalg.LinAlgError(
                "rank-deficient Gram matrix (fallback disabled)"
            )
        warnings.warn(
            f"rank-deficient Gram matrix, ridge {RIDGE_FALLBACK} applied",
            RuntimeWarning,
            stacklevel=2,
        )
        gram = gram + RIDGE_FALLBACK * np.eye(gram.shape[0])
    return np.linalg.solve(gram, rhs)


def norm_comparison(
    theta_erm: np.ndarray, theta_disc: np.ndarray, p1: int
) -> dict:
    """Spurious-block norms of two parameter vectors and their ordering."""
    theta_erm = np.asarray(theta_erm, dtype=float)
    theta_disc = np.asarray(theta_disc, dtype=float)
    if theta_erm.shape != theta_disc.shape or theta_erm.ndim != 1:
        raise ValueError("parameter vectors must share one flat shape")
    if not 0 <= p1 <= theta_erm.size:
        raise ValueError("p1 must split the parameter vector")
    gamma_erm = float(np.linalg.norm(theta_erm[p1:]))
    gamma_disc = float(np.linalg.norm(theta_disc[p1:]))
    return {
        "gamma_norm_erm": gamma_erm,
        "gamma_norm_disc": gamma_disc,
        "ordered": gamma_disc < gamma_erm,
        "ratio": gamma_disc / gamma_erm if gamma_erm > 0 else float("nan"),
    }


# --- sensitivity aggregation --------------------------------------------------------


def cumulative_sensitivity(
    trajectory: Mapping[int, np.ndarray] | Sequence[np.ndarray],
    concept_names: Sequence[str] | None = None,
) -> tuple[np.ndarray, list]:
    """Per-concept sensitivity totals across epochs plus a descending ranking.

    ``trajectory`` is either a mapping epoch -> sensitivity vector or a plain
    sequence of per-epoch vectors. Ties rank the lower concept index first.
    Returns (totals, ranking); the ranking holds concept names when given,
    otherwise concept indices.
    """
    if isinstance(trajectory, Mapping):
        epochs = [np.asarray(trajectory[e], dtype=float) for e in sorted(trajectory)]
    else:
        epochs = [np.asarray(s, dtype=float) for s in trajectory]
    if not epochs:
        raise ValueError("need at least one recorded epoch")
    stacked = np.vstack(epochs)
    totals = stacked.sum(axis=0)
    order = np.argsort(-totals, kind="stable")
    if concept_names is not None:
        if len(concept_names) != totals.size:
            raise ValueError("one name per concept required")
        return totals, [concept_names[i] for i in order]
    return totals, [int(i) for i in order]
