"""Recurrent + dense-head traffic model: parameters, inference, checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    DenseHeadParams, GruLayerParams, LayerState, LstmLayerParams, ShapeError,
    cell_forward, dense_head_forward, zero_state,
)

CHECKPOINT_FORMAT = "rachpred-checkpoint"
CHECKPOINT_VERSION = 1

LAYER_TYPES = {"lstm": LstmLayerParams, "gru": GruLayerParams}


@dataclass
class Normalizer:
    """Per-feature affine standardisation fitted on training data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data):
        data = np.asarray(data, dtype=np.float64).reshape(-1, np.shape(data)[-1])
        std = data.std(axis=0)
        return cls(data.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls, n):
        return cls(np.zeros(n), np.ones(n))

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean


@dataclass
class RecurrentState:
    """Per-layer (h, c) snapshot of the recurrent stack; copies are independent."""

    layers: list

    def copy(self):
        return RecurrentState([s.copy() for s in self.layers])

    def equals(self, other):
        return all(np.array_equal(a.h, b.h) and (a.c is None or np.array_equal(a.c, b.c))
                   for a, b in zip(self.layers, other.layers))


@dataclass
class ModelParams:
    kind: str
    layers: list
    head: DenseHeadParams
    normalizer: Normalizer = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_TYPES:
            raise ShapeError(f"unknown recurrent kind {self.kind!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.input_size != a.hidden_size:
                raise ShapeError("recurrent layer sizes do not chain")
        if self.head.source_size != self.layers[-1].hidden_size:
            raise ShapeError("dense head input does not match the last recurrent layer")
        if self.normalizer is None:
            self.normalizer = Normalizer.identity(self.input_size)

    @property
    def input_size(self):
        return self.layers[0].input_size

    @property
    def output_size(self):
        return self.head.sizes[-1]

    @property
    def hidden_sizes(self):
        return [p.hidden_size for p in self.layers]

    @classmethod
    def init(cls, kind="lstm", input_size=2, hidden_sizes=(64, 64), head_sizes=(64, 2),
             wiring=((0,), (0, 1)), dropout=0.0, rng=None, chrono_max=None):
        """Uniform(-1/sqrt(h), 1/sqrt(h)) initialisation; all zeros when ``rng`` is None.

        With ``chrono_max`` the bias of the gate that keeps the old state (LSTM
        forget gate, GRU update gate) is drawn as log(U[1, chrono_max - 1]),
        and the LSTM input gate gets the negated value, so units start with
        memory time constants spread up to about ``chrono_max`` steps.
        """
        layer_cls = LAYER_TYPES[kind]
        if chrono_max is not None and (rng is None or chrono_max <= 2):
            raise ValueError("chrono initialisation needs an rng and chrono_max > 2")
        layers = []
        d = input_size
        for h in hidden_sizes:
            layer = layer_cls.zeros(d, h) if rng is None else layer_cls.uniform(d, h, rng)
            if chrono_max is not None:
                keep = np.log(rng.uniform(1.0, chrono_max - 1.0, h))
                gates = {"f": keep, "i": -keep} if kind == "lstm" else {"z": keep}
                for g, value in gates.items():
                    layer.block(f"b_i{g}")[...] = value
                    layer.block(f"b_h{g}")[...] = 0.0
            layers.append(layer)
            d = h
        head = DenseHeadParams.build(d, list(head_sizes), [tuple(w) for w in wiring], dropout, rng)
        return cls(kind, layers, head)

    def arch(self):
        return {
            "kind": self.kind,
            "input_size": self.input_size,
            "hidden_sizes": self.hidden_sizes,
            "head_sizes": self.head.sizes,
            "wiring": [list(w) for w in self.head.wiring],
            "dropout": self.head.dropout,
        }

    def named_arrays(self):
        """Parameter blocks in checkpoint order (live references, not copies)."""
        out = {}
        for l, p in enumerate(self.layers):
            for k, v in p.arrays().items():
                out[f"rnn{l}.{k}"] = v
        for j, (W, b) in enumerate(zip(self.head.weights, self.head.biases)):
            out[f"dense{j}.W"] = W
            out[f"dense{j}.b"] = b
        return out

    def param_count(self):
        return sum(v.size for v in self.named_arrays().values())

    def step_flops(self):
        """FLOPs of one full evaluation (recurrent stack + head), tallied from weight shapes."""
        return sum(p.step_flops() for p in self.layers) + sum(2 * W.size for W in self.head.weights)

    def zero_state(self, batch_shape=()):
        return RecurrentState([zero_state(p, batch_shape) for p in self.layers])

    def copy(self):
        return from_checkpoint_dict(to_checkpoint_dict(self))


def model_step(x, params: ModelParams, state: RecurrentState):
    """One evaluation of the stack on a normalised input; returns (output, new state)."""
    new_layers = []
    for p, s in zip(params.layers, state.layers):
        x, ns = cell_forward(x, s, p)
        new_layers.append(ns)
    return dense_head_forward(x, params.head), RecurrentState(new_layers)


def model_forward(seq, params: ModelParams, state: RecurrentState | None = None):
    """Step through ``seq`` (normalised inputs, time first) carrying state.

    Returns the stacked outputs and the final state. Splitting a sequence and
    carrying the state across calls gives bit-identical results.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if state is None:
        state = params.zero_state(seq.shape[1:-1])
    outs = np.empty(seq.shape[:-1] + (params.output_size,))
    for t in range(len(seq)):
        outs[t], state = model_step(seq[t], params, state)
    return outs, state


# ----------------------------------------------------------------- checkpoints

def _encode(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.ravel(order="C").tolist()}


def _decode(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def to_checkpoint_dict(params: ModelParams):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": params.arch(),
        "normalization": {"mean": _encode(params.normalizer.mean), "std": _encode(params.normalizer.std)},
        "params": {k: _encode(v) for k, v in params.named_arrays().items()},
        "meta": params.meta,
    }


def from_checkpoint_dict(doc):
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a supported model checkpoint")
    arch = doc["arch"]
    params = ModelParams.init(arch["kind"], arch["input_size"], arch["hidden_sizes"],
                              arch["head_sizes"], arch["wiring"], arch["dropout"], rng=None)
    blocks = params.named_arrays()
    if set(blocks) != set(doc["params"]):
        raise ValueError("checkpoint parameter blocks do not match the architecture")
    for k, v in blocks.items():
        src = _decode(doc["params"][k])
        if src.shape != v.shape:
            raise ValueError(f"block {k}: shape {src.shape} != {v.shape}")
        v[...] = src
    norm = doc["normalization"]
    params.normalizer = Normalizer(_decode(norm["mean"]), _decode(norm["std"]))
    params.meta = dict(doc.get("meta", {}))
    return params


def save_checkpoint(params: ModelParams, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(to_checkpoint_dict(params), fh)
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        return from_checkpoint_dict(json.load(fh))
