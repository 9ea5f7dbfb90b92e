"""Backpropagation through time, Adam, and the training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import dense_head_backward, dense_head_forward, sequence_backward, sequence_forward
from .model import ModelParams, Normalizer, RecurrentState


class TrainingError(FloatingPointError):
    """Raised when training produces non-finite values."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 25
    epochs: int = 30
    dropout: float = 0.4
    window: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    # closed-loop steps appended to each window (0 = teacher forcing only)
    free_run: int = 0
    free_run_weight: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.window < 1 or self.epochs < 0:
            raise ValueError("batch_size and window must be >= 1, epochs >= 0")
        if self.free_run < 0 or self.free_run_weight < 0:
            raise ValueError("free_run and free_run_weight must be >= 0")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ValueError("learning rate and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


def mse_loss(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.size == 0:
        return 0.0
    return float(np.mean((pred - target) ** 2))


def forward_train(X, params: ModelParams, state: RecurrentState | None = None, train_mode=False, rng=None):
    """Time-major forward pass keeping caches. ``X`` is (T, B, d)."""
    if state is None:
        state = params.zero_state((X.shape[1],))
    caches, finals = [], []
    H = X
    for p, s in zip(params.layers, state.layers):
        H, fs, cache = sequence_forward(H, s, p)
        caches.append(cache)
        finals.append(fs)
    out, head_cache = dense_head_forward(H, params.head, train_mode, rng, return_cache=True)
    return out, RecurrentState(finals), (caches, head_cache)


def _add_grads(total, l, g):
    for k, v in g.items():
        key = f"rnn{l}.{k}"
        total[key] = total[key] + v if key in total else v


def bptt_gradients(X, Y, params: ModelParams, state=None, train_mode=False, rng=None, loss_scale=1.0,
                   free_targets=None, free_weight=1.0):
    """Exact gradients of ``loss_scale * mse(model(X), Y)`` over one window.

    With ``free_targets`` of shape (k, B, out) the model also runs k steps
    past the window on its own outputs, starting from the window's last
    output and final state, and ``free_weight * mse`` of that rollout is
    added to the loss. Gradients flow through the fed-back outputs.

    Returns ``(loss, grads, final_state)`` with ``grads`` keyed like
    :meth:`ModelParams.named_arrays`. The incoming state is treated as a
    constant (truncated BPTT); ``final_state`` is the teacher-forced one.
    """
    out, final, (caches, head_cache) = forward_train(X, params, state, train_mode, rng)
    loss = loss_scale * mse_loss(out, Y)
    dout = loss_scale * 2.0 * (out - Y) / out.size
    grads = {}
    dfinal = [None] * len(params.layers)
    gW = gb = None

    if free_targets is not None and len(free_targets):
        if params.output_size != X.shape[-1]:
            raise ValueError("closed-loop training needs output_size == input_size")
        steps = []
        u, states = out[-1], list(final.layers)
        outs = np.empty_like(free_targets, dtype=np.float64)
        for s in range(len(free_targets)):
            H, layer_caches = u[None], []
            for l, p in enumerate(params.layers):
                H, states[l], c = sequence_forward(H, states[l], p)
                layer_caches.append(c)
            o, hc = dense_head_forward(H, params.head, train_mode, rng, return_cache=True)
            steps.append((layer_caches, hc))
            outs[s] = u = o[0]
        loss += loss_scale * free_weight * mse_loss(outs, free_targets)
        dfree = loss_scale * free_weight * 2.0 * (outs - free_targets) / outs.size
        du = np.zeros_like(u)
        for s in range(len(steps) - 1, -1, -1):
            layer_caches, hc = steps[s]
            w, b, dH = dense_head_backward((dfree[s] + du)[None], hc, params.head)
            gW = w if gW is None else [a + c for a, c in zip(gW, w)]
            gb = b if gb is None else [a + c for a, c in zip(gb, b)]
            for l in range(len(params.layers) - 1, -1, -1):
                g, dH, dfinal[l] = sequence_backward(dH, layer_caches[l], params.layers[l], dfinal[l])
                _add_grads(grads, l, g)
            du = dH[0]
        dout = dout.copy()
        dout[-1] += du

    w, b, dH = dense_head_backward(dout, head_cache, params.head)
    gW = w if gW is None else [a + c for a, c in zip(gW, w)]
    gb = b if gb is None else [a + c for a, c in zip(gb, b)]
    for l in range(len(params.layers) - 1, -1, -1):
        g, dH, _ = sequence_backward(dH, caches[l], params.layers[l], dfinal[l])
        _add_grads(grads, l, g)
    for j in range(len(gW)):
        grads[f"dense{j}.W"] = gW[j]
        grads[f"dense{j}.b"] = gb[j]
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise TrainingError(f"non-finite gradient in {k}")
    return loss, grads, final


def adam_step(params: dict, grads: dict, moments: dict, t: int, cfg: TrainConfig):
    """In-place Adam update of every array in ``params`` (step count ``t`` >= 1)."""
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        m, v = moments.setdefault(k, (np.zeros_like(p), np.zeros_like(p)))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, moments


def clip_by_global_norm(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def make_streams(sequences, batch_size, min_length):
    """Split sequences into at most ``batch_size`` contiguous streams of similar length.

    Longer sequences are cut first, never below ``min_length`` slots.
    """
    streams = [np.asarray(s) for s in sequences]
    while len(streams) < batch_size:
        k = int(np.argmax([len(s) for s in streams]))
        if len(streams[k]) < 2 * min_length:
            break
        s = streams.pop(k)
        half = len(s) // 2
        streams[k:k] = [s[:half + 1], s[half:]]
    return streams


def train(sequences, cfg: TrainConfig, arch=None, params: ModelParams | None = None,
          normalizer: Normalizer | None = None, log=None):
    """Train the model on feature sequences (each (n_slots, d), raw units).

    The model learns to predict slot ``t + 1`` from slots ``<= t`` with
    teacher forcing. With ``cfg.free_run`` > 0 each window is followed by a
    closed-loop rollout on the model's own outputs whose error is trained
    as well. Batches hold up to ``batch_size`` streams; the
    recurrent state is carried across consecutive windows of a stream and
    reset at each epoch, so the model sees long contexts.
    Returns ``(params, loss_history)``.
    """
    rng = np.random.default_rng(cfg.seed)
    seqs = [np.asarray(s, dtype=np.float64) for s in sequences]
    if normalizer is None:
        normalizer = Normalizer.fit(np.concatenate(seqs))
    if params is None:
        arch = dict(arch or {})
        arch.setdefault("input_size", seqs[0].shape[1])
        arch["dropout"] = cfg.dropout
        params = ModelParams.init(rng=rng, **arch)
    params.normalizer = normalizer
    seqs = [normalizer.transform(s) for s in seqs]
    blocks = params.named_arrays()
    moments = {}
    t = 0
    history = []

    streams = make_streams(seqs, cfg.batch_size, 4 * cfg.window)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(streams))
        epoch_loss, n_windows = 0.0, 0
        for b0 in range(0, len(order), cfg.batch_size):
            group = [streams[i] for i in order[b0:b0 + cfg.batch_size]]
            offset = int(rng.integers(0, cfg.window))
            n = min(len(s) for s in group) - 1 - offset
            data = np.stack([s[offset:offset + n + 1] for s in group], axis=1)
            state = params.zero_state((len(group),))
            k = cfg.free_run
            for w0 in range(0, n - cfg.window - k + 1, cfg.window):
                end = w0 + cfg.window
                X = data[w0:end]
                Y = data[w0 + 1:end + 1, :, :params.output_size]
                free = data[end + 1:end + k + 1, :, :params.output_size] if k else None
                loss, grads, state = bptt_gradients(X, Y, params, state, train_mode=True, rng=rng,
                                                    free_targets=free, free_weight=cfg.free_run_weight)
                clip_by_global_norm(grads, cfg.clip_norm)
                t += 1
                adam_step(blocks, grads, moments, t, cfg)
                epoch_loss += loss
                n_windows += 1
        mean_loss = epoch_loss / max(n_windows, 1)
        if not np.isfinite(mean_loss):
            raise TrainingError(f"loss diverged at epoch {epoch}")
        history.append(mean_loss)
        if log:
            log(epoch, mean_loss)
    params.meta = {"train": {"epochs": cfg.epochs, "final_loss": history[-1] if history else None}}
    return params, history


def smoothed(history, width=5):
    """Trailing moving average used to judge the loss trend."""
    h = np.asarray(history, dtype=np.float64)
    if len(h) < width:
        return h
    return np.convolve(h, np.ones(width) / width, mode="valid")
