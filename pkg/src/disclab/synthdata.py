"""Synthetic two-class data with environment-varying planted spurious coordinates.

Mechanism: each row is x = (x_inv, x_spu) with

    x_inv = y * mu + eps_inv,          eps_inv ~ N(0, sigma1)
    x_spu = gamma[y][env] + eps_spu,   eps_spu ~ N(0, spu_noise_scale^2 * I)

where y is a balanced(ish) +/-1 label, env is a uniform environment index in
1..k, and gamma[y][env] is a per-class, per-environment binary pattern over the
p2 spurious coordinates. Each class owns a disjoint half of the spurious
block, and every owned coordinate's pattern varies across environments. At
test time gamma is forced to zero, so weight a model puts on the spurious
block is pure liability there.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

# Sentinel env_id for test rows (train env ids are 1..k).
TEST_ENV = -1

_EIG_TOL = 1e-9


@dataclass(frozen=True)
class DataConfig:
    """Parameters of the generative mechanism.

    sigma1's eigenvalues must lie in [k1, k2] (checked at construction);
    k0 is the minimum cross-environment population variance each owned
    spurious coordinate's pattern must exceed.
    """

    p1: int
    p2: int
    n: int
    k: int
    mu: np.ndarray
    sigma1: np.ndarray
    spu_noise_scale: float = 1.0
    class_balance: float = 0.5
    k0: float = 0.2
    k1: float = 0.5
    k2: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.p1 < 1:
            raise ValueError("p1 must be >= 1")
        if self.p2 < 0:
            raise ValueError("p2 must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if not (0.0 < self.class_balance < 1.0):
            raise ValueError("class_balance must be in (0, 1)")
        if self.spu_noise_scale < 0:
            raise ValueError("spu_noise_scale must be >= 0")
        if self.k0 <= 0:
            raise ValueError("k0 must be positive")
        if self.k1 <= 0 or self.k2 < self.k1:
            raise ValueError("need 0 < k1 <= k2")
        mu = np.asarray(self.mu, dtype=float)
        if mu.shape != (self.p1,):
            raise ValueError(f"mu must have shape ({self.p1},), got {mu.shape}")
        sigma1 = np.asarray(self.sigma1, dtype=float)
        if sigma1.shape != (self.p1, self.p1):
            raise ValueError("sigma1 must be p1 x p1")
        if not np.allclose(sigma1, sigma1.T, atol=1e-9):
            raise ValueError("sigma1 must be symmetric")
        eigs = np.linalg.eigvalsh(sigma1)
        if eigs.min() < self.k1 - _EIG_TOL or eigs.max() > self.k2 + _EIG_TOL:
            raise ValueError(
                f"sigma1 eigenvalues must lie in [{self.k1}, {self.k2}], "
                f"got range [{eigs.min()}, {eigs.max()}]"
            )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma1", sigma1)

    @property
    def p(self) -> int:
        return self.p1 + self.p2


@dataclass(frozen=True)
class GammaPatterns:
    """Binary spurious patterns, one (k, p2) array per class.

    Construction validates shape, binariness and the disjoint-support
    requirement. The variance-floor requirement (every owned coordinate's
    pattern has population variance > k0 across environments) is guaranteed
    for patterns emitted by make_gamma_patterns and checkable with
    patterns_variance_ok; it is not enforced here because diagnostic code may
    legitimately build constant patterns.
    """

    gamma: dict[int, np.ndarray]

    def __post_init__(self) -> None:
        if set(self.gamma.keys()) != {-1, +1}:
            raise ValueError("gamma must be keyed by classes -1 and +1")
        shapes = {y: np.asarray(g, dtype=float) for y, g in self.gamma.items()}
        if shapes[+1].shape != shapes[-1].shape or shapes[+1].ndim != 2:
            raise ValueError("per-class gamma arrays must share shape (k, p2)")
        for y, g in shapes.items():
            if not np.isin(g, (0.0, 1.0)).all():
                raise ValueError("gamma entries must be 0 or 1")
        sup_pos = shapes[+1].any(axis=0)
        sup_neg = shapes[-1].any(axis=0)
        if np.logical_and(sup_pos, sup_neg).any():
            raise ValueError("class supports must be disjoint")
        object.__setattr__(self, "gamma", {y: g for y, g in shapes.items()})

    @property
    def k(self) -> int:
        return self.gamma[+1].shape[0]

    @property
    def p2(self) -> int:
        return self.gamma[+1].shape[1]

    def support(self, y: int) -> np.ndarray:
        """Boolean mask of spurious coordinates owned by class y."""
        return self.gamma[y].any(axis=0)


def patterns_variance_ok(patterns: GammaPatterns, k0: float) -> bool:
    """True iff every owned coordinate's pattern varies enough across envs.

    Population variance (divide by k) of the owning class's column must
    strictly exceed k0 for every coordinate in that class's support.
    """
    for y in (+1, -1):
        g = patterns.gamma[y]
        sup = patterns.support(y)
        if sup.any() and (np.var(g[:, sup], axis=0) <= k0).any():
            return False
    return True


def _max_binary_variance(k: int) -> float:
    # Best achievable population variance of k values in {0,1}.
    ones = k // 2
    return ones * (k - ones) / k**2


def make_gamma_patterns(
    p2: int, k: int, k0: float, rng: np.random.Generator, max_retries: int = 1000
) -> GammaPatterns:
    """Sample per-class binary patterns satisfying both pattern invariants.

    Class +1 owns the first p2/2 spurious coordinates, class -1 the second
    half. Each owned coordinate's k-vector is i.i.d. Bernoulli(0.5), redrawn
    until its population variance exceeds k0 (bounded retries).

    Raises
    ------
    ValueError
        If p2 is odd, if p2 >= 1 with k = 1 (a single environment forces zero
        variance), if no {0,1} assignment can achieve variance > k0, or if
        the retry budget is exhausted.
    """
    if p2 < 0:
        raise ValueError("p2 must be >= 0")
    if p2 == 0:
        zero = np.zeros((k, 0))
        return GammaPatterns(gamma={+1: zero, -1: zero.copy()})
    if p2 % 2 != 0:
        raise ValueError("p2 must be even so the classes split it evenly")
    if k == 1:
        raise ValueError("p2 >= 1 requires k >= 2: one environment has zero variance")
    if k0 >= _max_binary_variance(k):
        raise ValueError(
            f"no binary pattern over k={k} environments has variance > {k0}"
        )
    half = p2 // 2
    out = {+1: np.zeros((k, p2)), -1: np.zeros((k, p2))}
    owned = {+1: range(0, half), -1: range(half, p2)}
    for y in (+1, -1):
        for j in owned[y]:
            for _ in range(max_retries):
                col = (rng.random(k) < 0.5).astype(float)
                if np.var(col) > k0:
                    out[y][:, j] = col
                    break
            else:
                raise ValueError("exhausted retries sampling a variable pattern")
    return GammaPatterns(gamma=out)


@dataclass(frozen=True)
class LabeledDataset:
    """Feature rows with labels and ground-truth group annotations.

    env_ids and group_ids exist for evaluation only; training methods that
    claim not to use group information receive a TrainView, which lacks them.
    """

    features: np.ndarray  # (N, p1+p2), invariant block first
    labels: np.ndarray  # (N,) values in {-1, +1}
    env_ids: np.ndarray  # (N,) 1..k, or TEST_ENV on test data
    group_ids: np.ndarray  # (N, 2) rows (class, env)

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=int)
        envs = np.asarray(self.env_ids, dtype=int)
        groups = np.asarray(self.group_ids, dtype=int)
        n = feats.shape[0]
        if feats.ndim != 2:
            raise ValueError("features must be 2-D")
        if labels.shape != (n,) or envs.shape != (n,) or groups.shape != (n, 2):
            raise ValueError("features, labels, env_ids, group_ids lengths differ")
        if not np.isin(labels, (-1, 1)).all():
            raise ValueError("labels must be -1 or +1")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "env_ids", envs)
        object.__setattr__(self, "group_ids", groups)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    def train_view(self) -> "TrainView":
        return TrainView(features=self.features, labels=self.labels)

    def group_view(self) -> "GroupView":
        return GroupView(
            features=self.features, labels=self.labels, group_ids=self.group_ids
        )


@dataclass(frozen=True)
class TrainView:
    """What group-blind training methods are allowed to see."""

    features: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def train_view(self) -> "TrainView":
        return self


@dataclass(frozen=True)
class GroupView:
    """TrainView plus group ids, for the explicitly group-supervised baseline."""

    features: np.ndarray
    labels: np.ndarray
    group_ids: np.ndarray

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def train_view(self) -> TrainView:
        return TrainView(features=self.features, labels=self.labels)


def _check_patterns_match(config: DataConfig, patterns: GammaPatterns) -> None:
    if patterns.p2 != config.p2 or patterns.k != config.k:
        raise ValueError(
            f"patterns shaped (k={patterns.k}, p2={patterns.p2}) do not match "
            f"config (k={config.k}, p2={config.p2})"
        )


def generate_train(
    config: DataConfig, patterns: GammaPatterns, rng: np.random.Generator
) -> LabeledDataset:
    """Draw the training set: n rows from the train-time mechanism."""
    _check_patterns_match(config, patterns)
    n = config.n
    labels = np.where(rng.random(n) < config.class_balance, 1, -1)
    envs = rng.integers(1, config.k + 1, size=n)
    chol = np.linalg.cholesky(config.sigma1)
    x_inv = labels[:, None] * config.mu + rng.standard_normal((n, config.p1)) @ chol.T
    if config.p2 > 0:
        planted = np.where(
            (labels == 1)[:, None],
            patterns.gamma[+1][envs - 1],
            patterns.gamma[-1][envs - 1],
        )
        x_spu = planted + config.spu_noise_scale * rng.standard_normal((n, config.p2))
    else:
        x_spu = np.zeros((n, 0))
    return LabeledDataset(
        features=np.hstack([x_inv, x_spu]),
        labels=labels,
        env_ids=envs,
        group_ids=np.column_stack([labels, envs]),
    )


def generate_test(
    config: DataConfig,
    patterns: GammaPatterns,
    n_test: int,
    rng: np.random.Generator,
) -> LabeledDataset:
    """Draw a test set: identical mechanism except gamma is forced to zero."""
    _check_patterns_match(config, patterns)
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    labels = np.where(rng.random(n_test) < config.class_balance, 1, -1)
    chol = np.linalg.cholesky(config.sigma1)
    x_inv = (
        labels[:, None] * config.mu
        + rng.standard_normal((n_test, config.p1)) @ chol.T
    )
    x_spu = config.spu_noise_scale * rng.standard_normal((n_test, config.p2))
    envs = np.full(n_test, TEST_ENV, dtype=int)
    return LabeledDataset(
        features=np.hstack([x_inv, x_spu]),
        labels=labels,
        env_ids=envs,
        group_ids=np.column_stack([labels, envs]),
    )


# ---------------------------------------------------------------------------
# Serialization. Floats go through repr(float(x)) so CSV/JSON round-trips are
# bit-exact at full double precision.
# ---------------------------------------------------------------------------


def write_dataset_csv(dataset: LabeledDataset, path: str) -> None:
    p = dataset.p
    header = [f"feat_{i}" for i in range(p)] + ["label", "env_id"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(dataset.n):
            row = [repr(float(v)) for v in dataset.features[i]]
            row.append(str(int(dataset.labels[i])))
            row.append(str(int(dataset.env_ids[i])))
            writer.writerow(row)


def read_dataset_csv(path: str) -> LabeledDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "env_id"] or not header[0].startswith("feat_"):
            raise ValueError(f"unexpected dataset header in {path}")
        p = len(header) - 2
        feats, labels, envs = [], [], []
        for row in reader:
            feats.append([float(v) for v in row[:p]])
            labels.append(int(row[p]))
            envs.append(int(row[p + 1]))
    labels_arr = np.asarray(labels, dtype=int)
    envs_arr = np.asarray(envs, dtype=int)
    return LabeledDataset(
        features=np.asarray(feats, dtype=float).reshape(len(labels), p),
        labels=labels_arr,
        env_ids=envs_arr,
        group_ids=np.column_stack([labels_arr, envs_arr]),
    )


def config_to_dict(config: DataConfig) -> dict:
    return {
        "p1": config.p1,
        "p2": config.p2,
        "n": config.n,
        "k": config.k,
        "mu": [float(v) for v in config.mu],
        "sigma1": [[float(v) for v in row] for row in config.sigma1],
        "spu_noise_scale": float(config.spu_noise_scale),
        "class_balance": float(config.class_balance),
        "k0": float(config.k0),
        "k1": float(config.k1),
        "k2": float(config.k2),
        "seed": int(config.seed),
    }


def config_from_dict(payload: dict) -> DataConfig:
    return DataConfig(
        p1=payload["p1"],
        p2=payload["p2"],
        n=payload["n"],
        k=payload["k"],
        mu=np.asarray(payload["mu"], dtype=float),
        sigma1=np.asarray(payload["sigma1"], dtype=float),
        spu_noise_scale=payload["spu_noise_scale"],
        class_balance=payload["class_balance"],
        k0=payload["k0"],
        k1=payload["k1"],
        k2=payload["k2"],
        seed=payload["seed"],
    )


def write_config_json(config: DataConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_config_json(path: str) -> DataConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def patterns_to_dict(patterns: GammaPatterns) -> dict:
    return {
        "+1": [[float(v) for v in row] for row in patterns.gamma[+1]],
        "-1": [[float(v) for v in row] for row in patterns.gamma[-1]],
    }


def patterns_from_dict(payload: dict) -> GammaPatterns:
    return GammaPatterns(
        gamma={
            +1: np.asarray(payload["+1"], dtype=float),
            -1: np.asarray(payload["-1"], dtype=float),
        }
    )


def write_patterns_json(patterns: GammaPatterns, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(patterns_to_dict(patterns), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_patterns_json(path: str) -> GammaPatterns:
    with open(path) as fh:
        return patterns_from_dict(json.load(fh))
