"""Classifiers f = h(g(x)): identity or one-hidden-layer tanh encoder g, linear
head h, with analytic gradients for both the head alone and all parameters.

Two loss modes:
  - "squared": single real output with +/-1 targets, loss = mean of
    0.5 * (y - logit)^2. With the identity encoder this is exactly the linear
    estimator mu_hat^T x_inv + gamma_hat^T x_spu of the theory model, and the
    negated head gradient on a batch equals X^T (y - X theta) / B.
  - "cross_entropy": >= 2 outputs, mean softmax negative log-likelihood.
    Binary class order is (-1, +1) -> output rows (0, 1).

Classifier values are immutable snapshots; sgd_step returns a new one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a gradient contains non-finite entries."""


SQUARED = "squared"
CROSS_ENTROPY = "cross_entropy"


@dataclass(frozen=True)
class Classifier:
    head_w: np.ndarray  # (n_out, d)
    head_b: np.ndarray | None = None  # (n_out,), bias off by default
    enc_w: np.ndarray | None = None  # (hidden, p); None = identity encoder
    enc_b: np.ndarray | None = None  # (hidden,)
    loss_kind: str = SQUARED

    def __post_init__(self) -> None:
        head_w = np.asarray(self.head_w, dtype=float)
        if head_w.ndim != 2:
            raise ValueError("head_w must be 2-D (n_out, d)")
        object.__setattr__(self, "head_w", head_w)
        if self.head_b is not None:
            head_b = np.asarray(self.head_b, dtype=float)
            if head_b.shape != (head_w.shape[0],):
                raise ValueError("head_b shape must match n_out")
            object.__setattr__(self, "head_b", head_b)
        if (self.enc_w is None) != (self.enc_b is None):
            raise ValueError("enc_w and enc_b must be given together")
        if self.enc_w is not None:
            enc_w = np.asarray(self.enc_w, dtype=float)
            enc_b = np.asarray(self.enc_b, dtype=float)
            if enc_w.ndim != 2 or enc_b.shape != (enc_w.shape[0],):
                raise ValueError("encoder weights must be (hidden, p) and (hidden,)")
            if head_w.shape[1] != enc_w.shape[0]:
                raise ValueError("head width must equal encoder output width")
            object.__setattr__(self, "enc_w", enc_w)
            object.__setattr__(self, "enc_b", enc_b)
        if self.loss_kind == SQUARED:
            if head_w.shape[0] != 1:
                raise ValueError("squared loss uses a single +/-1 output")
        elif self.loss_kind == CROSS_ENTROPY:
            if head_w.shape[0] < 2:
                raise ValueError("cross-entropy needs >= 2 outputs")
        else:
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")

    @property
    def n_out(self) -> int:
        return self.head_w.shape[0]

    @property
    def d(self) -> int:
        return self.head_w.shape[1]

    @property
    def input_dim(self) -> int:
        return self.d if self.enc_w is None else self.enc_w.shape[1]

    @property
    def identity_encoder(self) -> bool:
        return self.enc_w is None


@dataclass(frozen=True)
class Gradients:
    """Per-parameter gradients; None where the parameter is absent."""

    head_w: np.ndarray
    head_b: np.ndarray | None = None
    enc_w: np.ndarray | None = None
    enc_b: np.ndarray | None = None


def make_theory_classifier(p: int, weights: np.ndarray | None = None) -> Classifier:
    """Single-output squared-loss linear model on p inputs (zeros by default)."""
    w = np.zeros((1, p)) if weights is None else np.asarray(weights, float).reshape(1, p)
    return Classifier(head_w=w, loss_kind=SQUARED)


def make_mlp_classifier(
    p: int,
    hidden: int,
    rng: np.random.Generator,
    n_out: int = 2,
    loss_kind: str = CROSS_ENTROPY,
    bias: bool = True,
) -> Classifier:
    """One-hidden-layer tanh network with small random init."""
    enc_w = rng.standard_normal((hidden, p)) / np.sqrt(p)
    head_w = rng.standard_normal((n_out, hidden)) / np.sqrt(hidden)
    return Classifier(
        head_w=head_w,
        head_b=np.zeros(n_out) if bias else None,
        enc_w=enc_w,
        enc_b=np.zeros(hidden),
        loss_kind=loss_kind,
    )


def encode(clf: Classifier, X: np.ndarray) -> np.ndarray:
    """g(X): identity, or tanh(X W1^T + b1)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != clf.input_dim:
        raise ValueError(f"X must be (N, {clf.input_dim})")
    if clf.enc_w is None:
        return X
    return np.tanh(X @ clf.enc_w.T + clf.enc_b)


def predict(clf: Classifier, X: np.ndarray) -> np.ndarray:
    """Logits h(g(X)) with shape (N, n_out). Pure."""
    logits = encode(clf, X) @ clf.head_w.T
    if clf.head_b is not None:
        logits = logits + clf.head_b
    return logits


def predict_labels(clf: Classifier, X: np.ndarray) -> np.ndarray:
    """Hard +/-1 predictions: sign of the single output, or argmax over the
    class order (-1, +1) with ties going to the lower class."""
    logits = predict(clf, X)
    if clf.n_out == 1:
        return np.where(logits[:, 0] > 0, 1, -1)
    return np.where(np.argmax(logits, axis=1) == 1, 1, -1)


def class_probabilities(clf: Classifier, X: np.ndarray) -> np.ndarray:
    """Softmax class probabilities, one column per class in the order (-1, +1).

    A single-output head is expanded to the two-class logit pair (-z, +z)
    before the softmax, so both head shapes report on the same scale.
    """
    logits = predict(clf, X)
    if clf.n_out == 1:
        logits = np.column_stack([-logits[:, 0], logits[:, 0]])
    return _softmax(logits)


def _label_indices(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (-1, 1)).all():
        raise ValueError("labels must be -1 or +1")
    return (y > 0).astype(int)


def _loss_coefficients(n: int, weights: np.ndarray | None) -> np.ndarray:
    """Per-row coefficients of the (weighted) mean."""
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError("weights must be one per row")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    return w / total


def _softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def batch_loss(
    clf: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
) -> float:
    """Mean loss over the batch; weighted variants use normalized weights."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    coef = _loss_coefficients(X.shape[0], weights)
    logits = predict(clf, X)
    if clf.loss_kind == SQUARED:
        z = logits[:, 0]
        return float(coef @ (0.5 * (np.asarray(y, float) - z) ** 2))
    idx = _label_indices(y)
    m = logits.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(logits - m).sum(axis=1)))
    nll = lse - logits[np.arange(len(idx)), idx]
    return float(coef @ nll)


def _dlogits(
    clf: Classifier, logits: np.ndarray, y: np.ndarray, coef: np.ndarray
) -> np.ndarray:
    """d(batch loss)/d(logits), shape (N, n_out)."""
    if clf.loss_kind == SQUARED:
        return (coef * (logits[:, 0] - np.asarray(y, float)))[:, None]
    idx = _label_indices(y)
    delta = _softmax(logits)
    delta[np.arange(len(idx)), idx] -= 1.0
    return coef[:, None] * delta


def last_layer_gradient(
    clf: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Analytic gradient of batch_loss with respect to the head weights only
    (encoder treated as constant), shape (n_out, d)."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    coef = _loss_coefficients(X.shape[0], weights)
    G = encode(clf, X)
    logits = G @ clf.head_w.T
    if clf.head_b is not None:
        logits = logits + clf.head_b
    return _dlogits(clf, logits, y, coef).T @ G


def full_gradient(
    clf: Classifier,
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
) -> Gradients:
    """Analytic gradient of batch_loss with respect to every trainable
    parameter (head, bias, and encoder when present)."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    coef = _loss_coefficients(X.shape[0], weights)
    G = encode(clf, X)
    logits = G @ clf.head_w.T
    if clf.head_b is not None:
        logits = logits + clf.head_b
    D = _dlogits(clf, logits, y, coef)  # (N, n_out)
    g_head_w = D.T @ G
    g_head_b = D.sum(axis=0) if clf.head_b is not None else None
    if clf.enc_w is None:
        return Gradients(head_w=g_head_w, head_b=g_head_b)
    dG = D @ clf.head_w  # (N, d)
    dpre = dG * (1.0 - G**2)  # tanh'
    return Gradients(
        head_w=g_head_w,
        head_b=g_head_b,
        enc_w=dpre.T @ X,
        enc_b=dpre.sum(axis=0),
    )


def sgd_step(
    clf: Classifier, grads: Gradients, lr: float, weight_decay: float = 0.0
) -> Classifier:
    """One decoupled step: param -= lr * (grad + weight_decay * param).

    Returns a new Classifier; the input is untouched. Non-finite gradient
    entries raise DivergenceError as a training-divergence signal.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if weight_decay < 0:
        raise ValueError("weight_decay must be nonnegative")
    for g in (grads.head_w, grads.head_b, grads.enc_w, grads.enc_b):
        if g is not None and not np.isfinite(g).all():
            raise DivergenceError("non-finite gradient entries")

    def step(param, grad):
        if grad is None:
            return param
        return param - lr * (grad + weight_decay * param)

    return replace(
        clf,
        head_w=step(clf.head_w, grads.head_w),
        head_b=step(clf.head_b, grads.head_b) if clf.head_b is not None else None,
        enc_w=step(clf.enc_w, grads.enc_w) if clf.enc_w is not None else None,
        enc_b=step(clf.enc_b, grads.enc_b) if clf.enc_b is not None else None,
    )


def theory_params(clf: Classifier) -> np.ndarray:
    """The flat parameter vector theta of a single-output linear model."""
    if clf.n_out != 1 or not clf.identity_encoder:
        raise ValueError("theory_params requires the single-output linear model")
    return clf.head_w[0].copy()


# --- checkpoint serialization ------------------------------------------------


def classifier_to_json(clf: Classifier, path: str) -> None:
    def pack(a):
        return None if a is None else {
            "shape": list(a.shape),
            "data": [float(v) for v in np.asarray(a).ravel()],
        }

    payload = {
        "loss_kind": clf.loss_kind,
        "head_w": pack(clf.head_w),
        "head_b": pack(clf.head_b),
        "enc_w": pack(clf.enc_w),
        "enc_b": pack(clf.enc_b),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def classifier_from_json(path: str) -> Classifier:
    with open(path) as fh:
        payload = json.load(fh)

    def unpack(entry):
        if entry is None:
            return None
        return np.asarray(entry["data"], dtype=float).reshape(entry["shape"])

    return Classifier(
        head_w=unpack(payload["head_w"]),
        head_b=unpack(payload["head_b"]),
        enc_w=unpack(payload["enc_w"]),
        enc_b=unpack(payload["enc_b"]),
        loss_kind=payload["loss_kind"],
    )
