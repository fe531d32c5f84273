"""Training loops: plain SGD, group-upweighted SGD, and discover-then-cure.

All methods share one epoch engine (shuffled minibatches, early stopping on a
validation slice). The discover-then-cure family first fits a short plain-SGD
reference, clusters each class once on its features, then alternates
per-epoch sensitivity discovery with concept-aware intervention steps:

- disc: intervened minibatches mixed per the discovered distributions.
- disc_randint: intervention distribution replaced by uniform over the bank.
- disc_reweight: no mixing; instances are downweighted by their alignment
  with discovered concepts.
- disc_inadaptive: sensitivities computed once on the reference and frozen.

Group-blind methods receive a TrainView (features and labels only); the
upweighted baseline receives a GroupView. That split is what keeps
ground-truth group ids out of reach of the methods that must not use them.
"""

from __future__ import annotations

import csv
import math
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .conceptbank import CavSet, ConceptBank, query_cavs
from .cure import MixupConfig, NoSpuriousConceptsError, build_intervened_batch
from .discovery import (
    DEFAULT_EGM_BATCH,
    SensitivityReport,
    discover,
    report_to_dict as sensitivity_report_to_dict,
)
from .envcluster import EnvironmentPartition, build_environments, cluster_per_class
from .model import (
    Classifier,
    DivergenceError,
    batch_loss,
    encode,
    full_gradient,
    make_mlp_classifier,
    make_theory_classifier,
    predict_labels,
    sgd_step,
)
from .rng import substream
from .synthdata import GroupView, LabeledDataset, TrainView

METHODS = ("erm", "uw", "disc", "disc_randint", "disc_reweight", "disc_inadaptive")
DISC_METHODS = ("disc", "disc_randint", "disc_reweight", "disc_inadaptive")
MODELS = ("linear", "mlp")
VAL_FRACTION = 0.1
DEFAULT_PATIENCE = 10


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs besides the data and concept bank."""

    method: str
    lr: float
    batch_size: int
    max_epochs: int
    weight_decay: float = 0.0
    patience: int | None = DEFAULT_PATIENCE
    k: int = 2
    egm_batch: int = DEFAULT_EGM_BATCH
    mixcfg: MixupConfig = field(default_factory=MixupConfig)
    model: str = "linear"
    hidden: int = 32
    upweight_minority: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}, expected one of {MODELS}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be None or >= 1")
        if self.k < 1 or self.egm_batch < 1 or self.hidden < 1:
            raise ValueError("k, egm_batch and hidden must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class TrainReport:
    """Per-epoch trajectory plus the model a run settled on.

    Epoch records are contiguous from 0; when a run diverges, the broken
    epoch is not recorded and the report keeps the last finite model.
    """

    method: str
    seed: int
    losses: list[float]
    val_avg_acc: list[float]
    val_worst_acc: list[float]
    classifier: Classifier
    wall_clock: float
    sensitivities: list[SensitivityReport] | None = None
    diverged: bool = False
    best_epoch: int | None = None

    def __post_init__(self) -> None:
        n = len(self.losses)
        if len(self.val_avg_acc) != n or len(self.val_worst_acc) != n:
            raise ValueError("per-epoch lists must cover the same epochs")
        if self.sensitivities is not None and len(self.sensitivities) != n:
            raise ValueError("need one sensitivity report per recorded epoch")
        if not self.diverged and not all(math.isfinite(v) for v in self.losses):
            raise ValueError("non-finite loss in a run not marked diverged")

    @property
    def n_epochs(self) -> int:
        return len(self.losses)


# --- shared engine -----------------------------------------------------------------


def _init_classifier(config: TrainConfig, p: int, rng: np.random.Generator) -> Classifier:
    if config.model == "linear":
        return make_theory_classifier(p)
    return make_mlp_classifier(p, config.hidden, rng)


def _split_view(view, rng: np.random.Generator, patience):
    """90/10 train/validation split when early stopping is active.

    Returns (train_view, monitor_view, train_idx); train_idx is None when no
    split happens, so callers can realign any per-instance arrays.
    """
    if patience is None:
        return view, view, None
    n = view.n
    n_val = max(1, int(round(VAL_FRACTION * n)))
    if n_val >= n:
        raise ValueError("dataset too small for a validation split")
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])

    def take(idx):
        if isinstance(view, GroupView):
            return GroupView(
                features=view.features[idx],
                labels=view.labels[idx],
                group_ids=view.group_ids[idx],
            )
        return TrainView(features=view.features[idx], labels=view.labels[idx])

    return take(train_idx), take(val_idx), train_idx


def _accuracy_summary(clf: Classifier, view) -> tuple[float, float]:
    """Average accuracy plus the worst accuracy over the strata the view
    exposes: (class, env) groups for a GroupView, classes otherwise."""
    correct = predict_labels(clf, view.features) == view.labels
    if isinstance(view, GroupView):
        keys = np.unique(view.group_ids, axis=0)
        masks = [(view.group_ids == key).all(axis=1) for key in keys]
    else:
        masks = [view.labels == label for label in np.unique(view.labels)]
    worst = min(float(correct[m].mean()) for m in masks if m.any())
    return float(correct.mean()), worst


def _epoch_pass(
    clf: Classifier,
    view,
    config: TrainConfig,
    rng: np.random.Generator,
    weights: np.ndarray | None = None,
) -> Classifier:
    """One shuffled pass of minibatch steps."""
    perm = rng.permutation(view.n)
    rounds = math.ceil(view.n / config.batch_size)
    for r in range(rounds):
        idx = perm[r * config.batch_size : (r + 1) * config.batch_size]
        w = None if weights is None else weights[idx]
        grads = full_gradient(clf, view.features[idx], view.labels[idx], w)
        clf = sgd_step(clf, grads, config.lr, config.weight_decay)
    return clf


def _run_epochs(
    clf: Classifier,
    train_view,
    monitor_view,
    config: TrainConfig,
    epoch_fn: Callable[[Classifier, int], tuple[Classifier, SensitivityReport | None]],
    collect_sensitivities: bool,
) -> TrainReport:
    """Epoch loop with divergence capture and patience-based early stopping."""
    start = time.perf_counter()
    losses: list[float] = []
    avgs: list[float] = []
    worsts: list[float] = []
    senses: list[SensitivityReport] = []
    diverged = False
    last_good = clf
    best_worst = -math.inf
    best_clf: Classifier | None = None
    best_epoch: int | None = None
    streak = 0
    for epoch in range(config.max_epochs):
        try:
            clf, sense = epoch_fn(clf, epoch)
            loss = batch_loss(clf, train_view.features, train_view.labels)
        except DivergenceError:
            diverged = True
            break
        if not math.isfinite(loss):
            diverged = True
            break
        avg, worst = _accuracy_summary(clf, monitor_view)
        losses.append(loss)
        avgs.append(avg)
        worsts.append(worst)
        if collect_sensitivities:
            senses.append(sense)
        last_good = clf
        if config.patience is not None:
            if worst > best_worst:
                best_worst, best_clf, best_epoch = worst, clf, epoch
                streak = 0
            else:
                streak += 1
            if streak >= config.patience:
                break
    if config.patience is not None and best_clf is not None:
        final = best_clf
    else:
        final = last_good
        best_epoch = None
    return TrainReport(
        method=config.method,
        seed=config.seed,
        losses=losses,
        val_avg_acc=avgs,
        val_worst_acc=worsts,
        classifier=final,
        wall_clock=time.perf_counter() - start,
        sensitivities=senses if collect_sensitivities else None,
        diverged=diverged,
        best_epoch=best_epoch,
    )


# --- baselines -----------------------------------------------------------------------


def train_erm(data: TrainView, config: TrainConfig) -> TrainReport:
    """Plain minibatch SGD on the average loss."""
    if config.method != "erm":
        raise ValueError(f"config.method is {config.method!r}, expected 'erm'")
    train_view, monitor_view, _ = _split_view(
        data, substream(config.seed, "split"), config.patience
    )
    clf = _init_classifier(config, data.features.shape[1], substream(config.seed, "init"))
    epoch_rng = substream(config.seed, "epochs")

    def epoch_fn(model, _epoch):
        return _epoch_pass(model, train_view, config, epoch_rng), None

    return _run_epochs(clf, train_view, monitor_view, config, epoch_fn, False)


def inverse_size_group_weights(group_ids: np.ndarray) -> dict[tuple[int, int], float]:
    """w_g = N / (G * n_g): inverse group size, unit mean over instances."""
    keys = [tuple(row) for row in np.asarray(group_ids)]
    counts = Counter(keys)
    n_total = len(keys)
    n_groups = len(counts)
    return {g: n_total / (n_groups * c) for g, c in counts.items()}


def train_uw(
    data: GroupView,
    config: TrainConfig,
    group_weights: dict[tuple[int, int], float] | None = None,
) -> TrainReport:
    """Weighted SGD with per-group weights proportional to 1/group size."""
    if config.method != "uw":
        raise ValueError(f"config.method is {config.method!r}, expected 'uw'")
    train_view, monitor_view, _ = _split_view(
        data, substream(config.seed, "split"), config.patience
    )
    table = (
        group_weights
        if group_weights is not None
        else inverse_size_group_weights(train_view.group_ids)
    )
    weights = np.array([table[tuple(row)] for row in train_view.group_ids])
    clf = _init_classifier(config, data.features.shape[1], substream(config.seed, "init"))
    epoch_rng = substream(config.seed, "epochs")

    def epoch_fn(model, _epoch):
        return _epoch_pass(model, train_view, config, epoch_rng, weights), None

    return _run_epochs(clf, train_view, monitor_view, config, epoch_fn, False)


# --- discover-then-cure ----------------------------------------------------------------


def reference_epochs(max_epochs: int) -> int:
    """Budget of the plain-SGD reference stage before clustering."""
    return max(5, max_epochs // 4)


def _fit_reference(train_view, config: TrainConfig) -> Classifier:
    clf = _init_classifier(
        config, train_view.features.shape[1], substream(config.seed, "init")
    )
    rng = substream(config.seed, "reference-epochs")
    for _ in range(reference_epochs(config.max_epochs)):
        clf = _epoch_pass(clf, train_view, config, rng)
    return clf


def _reweight_instance_weights(
    clf: Classifier, view, cavs: CavSet, report: SensitivityReport
) -> np.ndarray:
    """exp(-sum_i P^(y)_i * max(0, cos(g(x), v_i))), one weight per instance."""
    Z = encode(clf, view.features)
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    unit = np.divide(Z, norms, out=np.zeros_like(Z), where=norms > 0)
    aligned = np.clip(unit @ cavs.vectors.T, 0.0, None)
    exponent = np.zeros(view.n)
    for y, P in report.probabilities.items():
        if P is None:
            continue
        mask = view.labels == y
        exponent[mask] = aligned[mask] @ P
    return np.exp(-exponent)


def _train_disc_variant(
    data: TrainView,
    bank: ConceptBank,
    config: TrainConfig,
    instance_weights: np.ndarray | None,
) -> TrainReport:
    if instance_weights is not None and len(instance_weights) != data.n:
        raise ValueError("instance_weights must align with the dataset")
    train_view, monitor_view, train_idx = _split_view(
        data, substream(config.seed, "split"), config.patience
    )
    train_weights = instance_weights
    if instance_weights is not None and train_idx is not None:
        train_weights = instance_weights[train_idx]

    reference = _fit_reference(train_view, config)
    clusters = cluster_per_class(
        train_view, reference, config.k, substream(config.seed, "cluster")
    )
    # The cured model trains from the same fresh init as a plain-SGD run.
    # Starting at the reference instead would put epoch-0 discovery at a
    # near-converged state, where the summed per-environment gradients cancel
    # and the dominant-class argmax turns into a coin flip.
    clf0 = _init_classifier(
        config, train_view.features.shape[1], substream(config.seed, "init")
    )
    cav_rng = substream(config.seed, "cav")
    pair_rng = substream(config.seed, "pair")
    egm_rng = substream(config.seed, "egm")
    cure_rng = substream(config.seed, "cure")
    step_rng = substream(config.seed, "epochs")

    fixed_cavs = query_cavs(bank, reference, cav_rng) if reference.identity_encoder else None

    frozen: SensitivityReport | None = None
    if config.method == "disc_inadaptive":
        partition = EnvironmentPartition(
            per_class_clusters=clusters,
            environments=build_environments(clusters, pair_rng),
            k=config.k,
        )
        cavs0 = fixed_cavs if fixed_cavs is not None else query_cavs(bank, reference, cav_rng)
        frozen = discover(
            reference, train_view, partition, cavs0, config.egm_batch, egm_rng, epoch=0
        )

    uniform = {y: np.full(bank.m, 1.0 / bank.m) for y in (-1, 1)}
    rounds = math.ceil(train_view.n / config.batch_size)
    class_order = tuple(int(v) for v in np.unique(train_view.labels))

    def epoch_fn(model, epoch):
        cavs = fixed_cavs if fixed_cavs is not None else query_cavs(bank, model, cav_rng)
        if config.method == "disc_inadaptive":
            report = frozen
        else:
            partition = EnvironmentPartition(
                per_class_clusters=clusters,
                environments=build_environments(clusters, pair_rng),
                k=config.k,
            )
            report = discover(
                model, train_view, partition, cavs, config.egm_batch, egm_rng, epoch=epoch
            )
        if config.method == "disc_reweight":
            weights = _reweight_instance_weights(model, train_view, cavs, report)
            if train_weights is not None:
                weights = weights * train_weights
            return _epoch_pass(model, train_view, config, step_rng, weights), report
        probabilities = uniform if config.method == "disc_randint" else report.probabilities
        # One epoch spends the same ceil(n/B) gradient steps a plain epoch
        # does, cycling the class masks round-robin, so the cured run and the
        # baseline stay comparable in step budget.
        for r in range(rounds):
            y = class_order[r % len(class_order)]
            P = probabilities.get(y)
            if P is None:
                continue
            try:
                X_mixed, y_batch, batch_rows = build_intervened_batch(
                    train_view,
                    y,
                    bank,
                    P,
                    config.batch_size,
                    config.mixcfg,
                    cure_rng,
                    return_rows=True,
                )
            except NoSpuriousConceptsError:
                continue
            w = None if train_weights is None else train_weights[batch_rows]
            grads = full_gradient(model, X_mixed, y_batch, w)
            model = sgd_step(model, grads, config.lr, config.weight_decay)
        return model, report

    return _run_epochs(clf0, train_view, monitor_view, config, epoch_fn, True)


def train_disc(
    data: TrainView,
    bank: ConceptBank,
    config: TrainConfig,
    instance_weights: np.ndarray | None = None,
) -> TrainReport:
    """Full discover-then-cure training (cluster once, per-epoch discovery,
    concept-aware mixup steps)."""
    if config.method != "disc":
        raise ValueError(f"config.method is {config.method!r}, expected 'disc'")
    return _train_disc_variant(data, bank, config, instance_weights)


def train_disc_randint(
    data: TrainView, bank: ConceptBank, config: TrainConfig
) -> TrainReport:
    """Ablation: intervention distribution replaced by uniform over the bank."""
    if config.method != "disc_randint":
        raise ValueError(
            f"config.method is {config.method!r}, expected 'disc_randint'"
        )
    return _train_disc_variant(data, bank, config, None)


def train_disc_reweight(
    data: TrainView, bank: ConceptBank, config: TrainConfig
) -> TrainReport:
    """Ablation: downweight concept-aligned instances instead of mixing."""
    if config.method != "disc_reweight":
        raise ValueError(
            f"config.method is {config.method!r}, expected 'disc_reweight'"
        )
    return _train_disc_variant(data, bank, config, None)


def train_disc_inadaptive(
    data: TrainView, bank: ConceptBank, config: TrainConfig
) -> TrainReport:
    """Ablation: sensitivities from the reference model, frozen for the run."""
    if config.method != "disc_inadaptive":
        raise ValueError(
            f"config.method is {config.method!r}, expected 'disc_inadaptive'"
        )
    return _train_disc_variant(data, bank, config, None)


# --- dispatch and artifacts -------------------------------------------------------------


def train(
    dataset: LabeledDataset, config: TrainConfig, bank: ConceptBank | None = None
) -> TrainReport:
    """Run one method on a dataset, handing each the view it is allowed."""
    if config.method == "erm":
        return train_erm(dataset.train_view(), config)
    if config.method == "uw":
        return train_uw(dataset.group_view(), config)
    if bank is None:
        raise ValueError(f"method {config.method!r} needs a concept bank")
    instance_weights = None
    if config.upweight_minority:
        table = inverse_size_group_weights(dataset.group_ids)
        instance_weights = np.array(
            [table[tuple(row)] for row in dataset.group_ids]
        )
    if config.method == "disc":
        return train_disc(dataset.train_view(), bank, config, instance_weights)
    if config.method == "disc_randint":
        return train_disc_randint(dataset.train_view(), bank, config)
    if config.method == "disc_reweight":
        return train_disc_reweight(dataset.train_view(), bank, config)
    return train_disc_inadaptive(dataset.train_view(), bank, config)


def report_to_dict(report: TrainReport) -> dict:
    """JSON-ready payload; the classifier itself is saved separately."""
    return {
        "method": report.method,
        "seed": report.seed,
        "diverged": report.diverged,
        "best_epoch": report.best_epoch,
        "wall_clock": report.wall_clock,
        "losses": [float(v) for v in report.losses],
        "val_avg_acc": [float(v) for v in report.val_avg_acc],
        "val_worst_acc": [float(v) for v in report.val_worst_acc],
        "sensitivities": (
            None
            if report.sensitivities is None
            else [sensitivity_report_to_dict(s) for s in report.sensitivities]
        ),
    }


def write_metrics_csv(report: TrainReport, path: str) -> None:
    """Per-epoch metrics; the sensitivity column is the mean over the bank
    and stays empty for methods that do not compute sensitivities."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "avg_acc", "worst_acc", "mean_spurious_sensitivity"])
        for epoch in range(report.n_epochs):
            if report.sensitivities is None:
                sense = ""
            else:
                sense = repr(float(report.sensitivities[epoch].sensitivity.mean()))
            writer.writerow(
                [
                    epoch,
                    repr(float(report.losses[epoch])),
                    repr(float(report.val_avg_acc[epoch])),
                    repr(float(report.val_worst_acc[epoch])),
                    sense,
                ]
            )
