"""Synthetic concept bank and CAV learning.

In synthetic mode every input coordinate j is a concept whose "images" are
the basis vector e_j plus optional isotropic noise. A concept activation
vector (CAV) is the unit normal of an affine linear separator between a
concept's encoded images and encoded images of other concepts, fit by
subgradient descent on the soft-margin hinge objective with Polyak averaging.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import Classifier, encode


class InseparableConceptError(ValueError):
    """Positives and negatives encode to the same point set."""


@dataclass(frozen=True)
class Concept:
    id: int
    name: str
    category: str
    coordinate: int


@dataclass(frozen=True)
class SvmHyper:
    """Pegasos hyperparameters: hinge regularization and full passes."""

    lambda_svm: float = 1e-2
    epochs: int = 200

    def __post_init__(self) -> None:
        if self.lambda_svm <= 0 or self.epochs < 1:
            raise ValueError("need lambda_svm > 0 and epochs >= 1")


@dataclass(frozen=True)
class ConceptBank:
    """m >= 2 concepts over input space, each sampling e_coordinate + noise."""

    concepts: tuple[Concept, ...]
    input_dim: int
    noise_std: float = 0.0
    n_pos: int = 150
    n_neg: int = 150
    hyper: SvmHyper = field(default_factory=SvmHyper)

    def __post_init__(self) -> None:
        if len(self.concepts) < 2:
            raise ValueError("a bank needs >= 2 concepts (negatives come from others)")
        ids = [c.id for c in self.concepts]
        if len(set(ids)) != len(ids):
            raise ValueError("concept ids must be unique")
        if any(not 0 <= c.coordinate < self.input_dim for c in self.concepts):
            raise ValueError("concept coordinates must index the input")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.n_pos < 1 or self.n_neg < 1:
            raise ValueError("need positive sample counts")
        object.__setattr__(self, "concepts", tuple(self.concepts))

    @property
    def m(self) -> int:
        return len(self.concepts)

    def concept_by_id(self, concept_id: int) -> Concept:
        for c in self.concepts:
            if c.id == concept_id:
                return c
        raise KeyError(f"unknown concept id {concept_id}")

    def ordered_ids(self) -> list[int]:
        return sorted(c.id for c in self.concepts)


def make_coordinate_bank(
    p1: int,
    p2: int,
    noise_std: float = 0.0,
    n_pos: int = 150,
    n_neg: int = 150,
    allowlist: list[int] | None = None,
    hyper: SvmHyper | None = None,
) -> ConceptBank:
    """One concept per input coordinate; the first p1 are tagged invariant,
    the rest spurious (metadata for evaluation only, never read by training).

    allowlist, when given, keeps only those concept ids.
    """
    concepts = []
    for j in range(p1 + p2):
        category = "invariant" if j < p1 else "spurious"
        concepts.append(Concept(id=j, name=f"coord_{j}", category=category, coordinate=j))
    if allowlist is not None:
        keep = set(allowlist)
        concepts = [c for c in concepts if c.id in keep]
    return ConceptBank(
        concepts=tuple(concepts),
        input_dim=p1 + p2,
        noise_std=noise_std,
        n_pos=n_pos,
        n_neg=n_neg,
        hyper=hyper if hyper is not None else SvmHyper(),
    )


@dataclass(frozen=True)
class CavSet:
    """Unit-norm CAVs, row i for the i-th concept in id order."""

    vectors: np.ndarray  # (m, d)
    fit_margins: np.ndarray  # (m,) half-gap between positive and negative projections
    concept_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("every CAV row must have unit norm")
        if self.vectors.shape[0] != len(self.concept_ids):
            raise ValueError("one id per row required")


def synth_concept_image(
    bank: ConceptBank, concept_id: int, rng: np.random.Generator
) -> np.ndarray:
    """One input-space image of the concept: e_coordinate (+ optional noise)."""
    return synth_concept_images(bank, concept_id, 1, rng)[0]


def synth_concept_images(
    bank: ConceptBank, concept_id: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """count stacked images of the concept, shape (count, input_dim)."""
    concept = bank.concept_by_id(concept_id)
    images = np.zeros((count, bank.input_dim))
    images[:, concept.coordinate] = 1.0
    if bank.noise_std > 0:
        images += bank.noise_std * rng.standard_normal(images.shape)
    return images


_PEGASOS_BATCH = 16


def hinge_objective(w: np.ndarray, Z: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Soft-margin objective lam/2 ||w||^2 + mean hinge."""
    margins = y * (Z @ w)
    return 0.5 * lam * float(w @ w) + float(np.mean(np.maximum(0.0, 1.0 - margins)))


def learn_cav(
    encoder: Classifier,
    positives: np.ndarray,
    negatives: np.ndarray,
    hyper: SvmHyper = SvmHyper(),
    return_objective: bool = False,
):
    """Fit an affine max-margin direction between encoded point clouds.

    Encoded points are divided by their mean norm (so a global positive
    rescaling cannot move the answer) and augmented with a constant
    coordinate, letting the separating hyperplane carry an offset. Only the
    spatial part is regularized; penalizing the offset would tilt the
    direction toward whichever side has more weight near the boundary. The
    objective lam/2 ||w||^2 + mean hinge is minimized by Pegasos-style
    subgradient passes on shuffled mini-batches (a fixed internal shuffle
    seed keeps the fit deterministic for identical inputs). After a short
    burn-in the iterates are Polyak-averaged; each pass the averaged
    iterate is kept only when it improves the objective, so the reported
    trace is non-increasing and the returned separator is the best average
    seen.

    Returns (v, margin): v is the unit-norm spatial part of the kept
    separator, oriented so encoded positives score higher on average, and
    margin is half the gap between the lowest positive and highest negative
    projection onto v on the original encoding scale (negative if the clouds
    overlap along v). With return_objective set, also returns the per-pass
    objective values of the kept averaged iterate.
    """
    zp = encode(encoder, np.asarray(positives, dtype=float))
    zn = encode(encoder, np.asarray(negatives, dtype=float))
    if _same_point_set(zp, zn):
        raise InseparableConceptError("inseparable concept: identical encoded sets")
    Z = np.vstack([zp, zn])
    y = np.concatenate([np.ones(len(zp)), -np.ones(len(zn))])
    lam = hyper.lambda_svm
    scale = float(np.linalg.norm(Z, axis=1).mean())
    if scale == 0.0:
        raise InseparableConceptError("inseparable concept: all points at origin")
    yZ = y[:, None] * np.column_stack([Z / scale, np.ones(len(Z))])
    n = len(y)

    def objective(w: np.ndarray) -> float:
        hinge = np.maximum(0.0, 1.0 - yZ @ w).mean()
        return 0.5 * lam * float(w[:-1] @ w[:-1]) + float(hinge)

    shuffles = np.random.default_rng(0x5EED)
    batch = min(_PEGASOS_BATCH, n)
    steps = -(-n // batch)
    burn = hyper.epochs // 10
    w = np.zeros(yZ.shape[1])
    w_sum = np.zeros_like(w)
    n_sum = 0
    t = 0
    best_w = None
    best_f = np.inf
    objectives = []
    for p in range(hyper.epochs):
        order = shuffles.permutation(n)
        for s in range(steps):
            rows = yZ[order[s * batch : (s + 1) * batch]]
            t += 1
            eta = 1.0 / (lam * t)
            active = rows @ w < 1.0
            w[:-1] *= max(0.0, 1.0 - eta * lam)
            if active.any():
                w += eta * rows[active].sum(axis=0) / len(rows)
            if p >= burn:
                w_sum += w
                n_sum += 1
        if p >= burn:
            f_avg = objective(w_sum / n_sum)
            if f_avg <= best_f:
                best_f = f_avg
                best_w = w_sum / n_sum
            objectives.append(best_f)
    spatial = best_w[:-1]
    norm = np.linalg.norm(spatial)
    if norm < 1e-12:
        raise InseparableConceptError("inseparable concept: zero separator")
    v = spatial / norm
    if zp.mean(axis=0) @ v < zn.mean(axis=0) @ v:
        v = -v
    margin = 0.5 * float((zp @ v).min() - (zn @ v).max())
    if return_objective:
        return v, margin, objectives
    return v, margin


def _same_point_set(a: np.ndarray, b: np.ndarray) -> bool:
    if a.shape != b.shape:
        return False
    order_a = np.lexsort(a.T)
    order_b = np.lexsort(b.T)
    return np.array_equal(a[order_a], b[order_b])


def query_cavs(
    bank: ConceptBank, classifier: Classifier, rng: np.random.Generator
) -> CavSet:
    """Fit one CAV per concept, rows ordered by concept id.

    Positives are n_pos draws from the concept's own sampler; negatives are
    n_neg draws from uniformly chosen other concepts. Each concept consumes
    its own RNG substream so fits could run concurrently with identical
    output.
    """
    ids = bank.ordered_ids()
    streams = rng.spawn(len(ids))
    vectors, margins = [], []
    for concept_id, stream in zip(ids, streams):
        positives = synth_concept_images(bank, concept_id, bank.n_pos, stream)
        others = [c.id for c in bank.concepts if c.id != concept_id]
        neg_choices = stream.choice(others, size=bank.n_neg, replace=True)
        negatives = np.zeros((bank.n_neg, bank.input_dim))
        neg_coords = [bank.concept_by_id(int(c)).coordinate for c in neg_choices]
        negatives[np.arange(bank.n_neg), neg_coords] = 1.0
        if bank.noise_std > 0:
            negatives += bank.noise_std * stream.standard_normal(negatives.shape)
        try:
            v, margin = learn_cav(classifier, positives, negatives, bank.hyper)
        except InseparableConceptError as err:
            raise InseparableConceptError(f"concept {concept_id}: {err}") from err
        vectors.append(v)
        margins.append(margin)
    return CavSet(
        vectors=np.vstack(vectors),
        fit_margins=np.asarray(margins),
        concept_ids=tuple(ids),
    )


def write_cavset_csv(cavs: CavSet, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        d = cavs.vectors.shape[1]
        writer.writerow(["concept_id"] + [f"dim_{j}" for j in range(d)])
        for cid, row in zip(cavs.concept_ids, cavs.vectors):
            writer.writerow([cid] + [repr(float(v)) for v in row])


def bank_manifest(bank: ConceptBank) -> list[dict]:
    """JSON-ready listing of the bank's concepts."""
    return [
        {
            "id": c.id,
            "name": c.name,
            "category": c.category,
            "coordinate": c.coordinate,
        }
        for c in sorted(bank.concepts, key=lambda c: c.id)
    ]
