"""Congestion (burst) detector over prediction chunks, and rare-event metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .nn.layers import sigmoid
from .nn.train import TrainConfig, adam_step


@dataclass
class BurstNetParams:
    """Two affine layers (chunk -> hidden -> 1) with dropout in between.

    Inputs are standardised with ``input_mean`` / ``input_scale`` before
    the first layer; the output passes through a sigmoid.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    dropout: float = 0.0
    threshold: float = 0.5

    def __post_init__(self):
        ch = self.W1.shape[1]
        hidden = self.W1.shape[0]
        if self.b1.shape != (hidden,) or self.W2.shape != (1, hidden) or self.b2.shape != (1,):
            raise ValueError("inconsistent burst net shapes")
        if self.input_mean.shape != (ch,) or self.input_scale.shape != (ch,):
            raise ValueError("input normalisation does not match the chunk size")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def chunk_size(self):
        return self.W1.shape[1]

    @property
    def hidden_size(self):
        return self.W1.shape[0]

    @classmethod
    def init(cls, chunk_size, hidden_size=None, dropout=0.0, threshold=0.5, rng=None):
        """Default hidden width equals the chunk size. ``rng=None`` gives zeros."""
        hidden = hidden_size or chunk_size
        if rng is None:
            W1, b1, W2, b2 = np.zeros((hidden, chunk_size)), np.zeros(hidden), np.zeros((1, hidden)), np.zeros(1)
        else:
            k1, k2 = 1 / np.sqrt(chunk_size), 1 / np.sqrt(hidden)
            W1 = rng.uniform(-k1, k1, (hidden, chunk_size))
            b1 = rng.uniform(-k1, k1, hidden)
            W2 = rng.uniform(-k2, k2, (1, hidden))
            b2 = rng.uniform(-k2, k2, 1)
        return cls(W1, b1, W2, b2, np.zeros(chunk_size), np.ones(chunk_size), dropout, threshold)

    def arrays(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def to_dict(self):
        d = {k: v.tolist() for k, v in self.arrays().items()}
        d.update(input_mean=self.input_mean.tolist(), input_scale=self.input_scale.tolist(),
                 dropout=self.dropout, threshold=self.threshold, format="rachpred-burstnet", version=1)
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "rachpred-burstnet":
            raise ValueError("not a burst-detector checkpoint")
        arr = {k: np.array(d[k], dtype=np.float64) for k in ("W1", "b1", "W2", "b2", "input_mean", "input_scale")}
        return cls(**arr, dropout=d["dropout"], threshold=d["threshold"])

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _forward(X, p: BurstNetParams, train_mode=False, rng=None):
    Z = (X - p.input_mean) / p.input_scale
    A = Z @ p.W1.T + p.b1
    H = np.maximum(A, 0.0)
    mask = None
    if train_mode and p.dropout > 0:
        mask = (rng.random(H.shape) >= p.dropout) / (1.0 - p.dropout)
        H = H * mask
    logit = (H @ p.W2.T + p.b2)[..., 0]
    return sigmoid(np.asarray(logit, dtype=np.float64)), (Z, A, H, mask, logit)


def burst_forward(chunk, params: BurstNetParams, train_mode=False, rng=None):
    """Congestion probability for one chunk (or a batch of chunks)."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape[-1] != params.chunk_size:
        raise ValueError(f"chunk has {chunk.shape[-1]} features, detector expects {params.chunk_size}")
    prob, _ = _forward(np.atleast_2d(chunk), params, train_mode, rng)
    return float(prob[0]) if chunk.ndim == 1 else prob


def decide(prob, params: BurstNetParams):
    return (np.asarray(prob) >= params.threshold).astype(np.int64)


def aggregate_step_labels(slot_labels, last_slots, l_f, rule="any"):
    """Per-step labels from per-slot expected-congestion labels.

    Step ``k`` covers the fresh slots ``last - l_f + 1 .. last``. With
    ``rule="any"`` a step is positive if any of those slots is; ``"majority"``
    needs more than half of them.
    """
    slot_labels = np.asarray(slot_labels)
    out = []
    for last in last_slots:
        window = slot_labels[..., last - l_f + 1:last + 1]
        if rule == "any":
            out.append(window.any(axis=-1))
        elif rule == "majority":
            out.append(window.sum(axis=-1) * 2 > l_f)
        else:
            raise ValueError(f"unknown aggregation rule {rule!r}")
    return np.array(out, dtype=np.int64)


@dataclass(frozen=True)
class BurstTrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 25
    dropout: float = 0.4
    hidden_size: int | None = None
    threshold: float = 0.5
    loss: str = "mse"  # or "xent"
    seed: int = 0

    def adam(self):
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, seed=self.seed)


def burst_loss_and_grads(X, y, p: BurstNetParams, loss="mse", train_mode=False, rng=None):
    prob, (Z, A, H, mask, logit) = _forward(X, p, train_mode, rng)
    n = len(y)
    if loss == "mse":
        value = float(np.mean((prob - y) ** 2))
        dlogit = 2.0 * (prob - y) / n * prob * (1.0 - prob)
    elif loss == "xent":
        eps = 1e-12
        value = float(-np.mean(y * np.log(prob + eps) + (1 - y) * np.log(1 - prob + eps)))
        dlogit = (prob - y) / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    grads = {"W2": dlogit[None, :] @ H, "b2": np.array([dlogit.sum()])}
    dH = dlogit[:, None] * p.W2
    if mask is not None:
        dH = dH * mask
    dA = dH * (A > 0)
    grads["W1"] = dA.T @ Z
    grads["b1"] = dA.sum(axis=0)
    return value, grads


def train_burst(X, y, cfg: BurstTrainConfig, log=None):
    """Fit the detector on chunk features ``X`` (n, ch) and binary labels ``y``.

    Returns ``(params, history)``; ``history`` holds per-epoch training
    loss and the metrics of thresholded decisions on the training set.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    p = BurstNetParams.init(X.shape[1], cfg.hidden_size, cfg.dropout, cfg.threshold, rng)
    p.input_mean = X.mean(axis=0)
    std = X.std(axis=0)
    p.input_scale = np.where(std > 1e-9, std, 1.0)
    blocks = p.arrays()
    moments = {}
    adam = cfg.adam()
    t = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for b0 in range(0, len(X), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            loss, grads = burst_loss_and_grads(X[idx], y[idx], p, cfg.loss, True, rng)
            t += 1
            adam_step(blocks, grads, moments, t, adam)
            total += loss * len(idx)
        prob = burst_forward(X, p)
        m = compute_metrics(decide(prob, p), y.astype(np.int64), prob)
        history.append({"epoch": epoch, "loss": total / max(len(X), 1), "precision": m.precision,
                        "recall": m.recall, "f1": m.f1})
        if log:
            log(history[-1])
    return p, history


@dataclass
class Metrics:
    true_positives: int
    false_positives: int
    false_negatives: int
    true_negatives: int
    precision: float
    recall: float
    f1: float
    mse: float
    degenerate: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def f1_score(precision, recall):
    """Harmonic mean; 0 when both inputs are 0."""
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def compute_metrics(decisions, labels, probabilities=None) -> Metrics:
    """Confusion counts, precision, recall and F1 for binary decisions.

    A ratio whose denominator is zero is reported as 0 and named in
    ``degenerate``. ``mse`` compares ``probabilities`` (or the decisions
    when none are given) with the labels.
    """
    d = np.asarray(decisions).astype(np.int64).ravel()
    l = np.asarray(labels).astype(np.int64).ravel()
    if d.shape != l.shape:
        raise ValueError(f"decisions ({d.size}) and labels ({l.size}) differ in length")
    tp = int(np.sum((d == 1) & (l == 1)))
    fp = int(np.sum((d == 1) & (l == 0)))
    fn = int(np.sum((d == 0) & (l == 1)))
    tn = int(np.sum((d == 0) & (l == 0)))
    degenerate = []
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision = 0.0
        degenerate.append("precision")
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall = 0.0
        degenerate.append("recall")
    f1 = f1_score(precision, recall)
    if precision + recall == 0:
        degenerate.append("f1")
    ref = d if probabilities is None else np.asarray(probabilities, dtype=np.float64).ravel()
    mse = float(np.mean((ref - l) ** 2)) if l.size else 0.0
    return Metrics(tp, fp, fn, tn, precision, recall, f1, mse, degenerate)


def expand_decisions_for_plot(decisions, l_f, scale=20):
    """Repeat each per-step decision over its ``l_f`` slots and scale it."""
    return np.repeat(np.asarray(decisions, dtype=np.float64), l_f) * scale
