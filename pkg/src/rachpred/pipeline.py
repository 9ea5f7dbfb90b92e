"""Experiment configuration, file formats and the end-to-end pipeline steps.

Everything random is derived from ``ExperimentConfig.seed`` through labelled
substreams, so the same config reproduces the same files byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .burst import (BurstNetParams, BurstTrainConfig, aggregate_step_labels, burst_forward,
                    compute_metrics, decide, expand_decisions_for_plot, train_burst)
from .nn.model import ModelParams, load_checkpoint
from .nn.train import TrainConfig, train
from .predict import (DRIVERS, FLSP, ROLLING, StreamingConfig, emitted_slots, evaluate_stream, make_chunks,
                      run_stream)
from .seeding import MAX_SEED, substream
from .sim import CellConfig, ConfigError, LabelConfig, RachConfig, Trace, label_congestion, congestion_flags, run_simulation

TRACE_HEADER = ["slot", "arrivals", "attempts", "detected", "collided", "dropped", "congested", "label"]
PREDICTION_HEADER = ["slot", "pred_detected", "pred_collided", "lead_slots"]
DECISION_HEADER = ["step", "probability", "decision", "label"]
FLOAT_DIGITS = 6


def _build(cls, d):
    if isinstance(d, cls):
        return d
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v)
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class ModelConfig:
    kind: str = "lstm"
    hidden_sizes: tuple = (64, 64)
    head_sizes: tuple = (64, 2)
    wiring: tuple = ((0,), (0, 1))
    # spread of initial memory time constants in slots (None = plain uniform init)
    chrono_max: float | None = None

    def arch(self):
        return {"kind": self.kind, "hidden_sizes": tuple(self.hidden_sizes),
                "head_sizes": tuple(self.head_sizes), "wiring": tuple(tuple(w) for w in self.wiring),
                "chrono_max": self.chrono_max}


@dataclass
class ExperimentConfig:
    """All knobs of one experiment. Sections mirror the component configs."""

    cell: CellConfig = field(default_factory=CellConfig)
    rach: RachConfig = field(default_factory=RachConfig)
    streaming: StreamingConfig = field(default_factory=StreamingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    burst: BurstTrainConfig = field(default_factory=BurstTrainConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    total_slots: int = 32000
    train_traces: int = 25
    test_traces: int = 20
    # length of the test pool traces; None uses total_slots
    test_slots: int | None = None
    # causal moving-average width applied to model features (1 = raw)
    smoothing: int = 1
    burst_driver: str = FLSP
    label_rule: str = "any"

    def __post_init__(self):
        self.validate()

    def validate(self, burst_chunk_size=None):
        if not 0 <= int(self.seed) <= MAX_SEED:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if min(self.total_slots, self.train_traces, self.test_traces, self.test_slots or 0) < 0:
            raise ConfigError("slot and trace counts must be >= 0")
        if self.smoothing < 1:
            raise ConfigError("smoothing must be >= 1")
        if self.burst_driver not in DRIVERS:
            raise ConfigError(f"unknown driver {self.burst_driver!r}")
        if self.label_rule not in ("any", "majority"):
            raise ConfigError(f"unknown label rule {self.label_rule!r}")
        if abs(self.rach.slot_period - self.streaming.slot_period) > 1e-15:
            raise ConfigError("RACH and streaming slot periods differ")
        head = tuple(self.model.head_sizes)
        if not head or head[-1] != 2:
            raise ConfigError("the forecaster head must end in 2 outputs (detected, collided)")
        if self.burst.hidden_size is not None and self.burst.hidden_size < 1:
            raise ConfigError("burst hidden size must be positive")
        if burst_chunk_size is not None and burst_chunk_size != self.streaming.chunk_size:
            raise ConfigError(f"burst detector expects chunks of {burst_chunk_size}, "
                              f"streaming config produces {self.streaming.chunk_size}")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "config" in d and "config_hash" in d:  # a run manifest
            d = dict(d["config"])
        sections = {"cell": CellConfig, "rach": RachConfig, "streaming": StreamingConfig,
                    "train": TrainConfig, "burst": BurstTrainConfig, "label": LabelConfig,
                    "model": ModelConfig}
        kwargs = {}
        for k, v in d.items():
            if k in sections:
                kwargs[k] = _build(sections[k], v)
            elif k in {f.name for f in dataclasses.fields(cls)}:
                kwargs[k] = v
            else:
                raise ConfigError(f"unknown config key {k!r}")
        return cls(**kwargs)

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "cell":
                v = v.to_dict()
            elif dataclasses.is_dataclass(v):
                v = dataclasses.asdict(v)
            out[f.name] = _jsonable(v)
        return out

    def replace(self, **sections):
        """Copy with section fields overridden, e.g. ``replace(streaming={"l_p": 400})``."""
        d = self.to_dict()
        for k, v in sections.items():
            if isinstance(v, dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
        return ExperimentConfig.from_dict(d)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_dict(doc)


# ------------------------------------------------------------- serialisation

def _jsonable(x, digits=None):
    if isinstance(x, dict):
        return {str(k): _jsonable(v, digits) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v, digits) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist(), digits)
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, Fraction):
        x = int(x) if x.denominator == 1 else float(x)
        return _jsonable(x, digits)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not np.isfinite(x):
            return None
        return round(x, digits) if digits is not None else x
    return x


def dumps(obj, digits=FLOAT_DIGITS):
    """Canonical JSON: sorted keys, floats rounded to a fixed number of digits."""
    return json.dumps(_jsonable(obj, digits), sort_keys=True, indent=2) + "\n"


def write_json(path, obj, digits=FLOAT_DIGITS):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj, digits))


def config_hash(config) -> str:
    """sha256 of the canonical config; independent of key order."""
    d = config.to_dict() if isinstance(config, ExperimentConfig) else config
    blob = json.dumps(_jsonable(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    seed: int
    command: str
    artifacts: dict = field(default_factory=dict)
    tool_version: str = __version__
    started: str = ""
    finished: str = ""

    @property
    def config_hash(self):
        return config_hash(self.config)

    def add(self, name, path):
        self.artifacts[name] = {"path": os.fspath(path), "sha256": file_sha256(path)}

    def write(self, path):
        self.finished = _now()
        doc = dataclasses.asdict(self)
        doc["config_hash"] = self.config_hash
        write_json(path, doc, digits=None)


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def start_manifest(cfg: ExperimentConfig, command):
    return RunManifest(cfg.to_dict(), int(cfg.seed), command, started=_now())


# ------------------------------------------------------------------ traces

def trace_seed(seed, role, index):
    """64-bit seed of trace ``index`` in a named pool ("train" or "test")."""
    return int(substream(seed, "trace", role, index).integers(0, 2**63))


def simulate(cfg: ExperimentConfig, seed=None, slots=None):
    seed = cfg.seed if seed is None else seed
    return run_simulation(cfg.cell, cfg.rach, cfg.total_slots if slots is None else slots, seed)


def pool_slots(cfg: ExperimentConfig, role):
    if role == "test" and cfg.test_slots is not None:
        return cfg.test_slots
    return cfg.total_slots


def simulate_pool(cfg: ExperimentConfig, role, count, slots=None):
    slots = pool_slots(cfg, role) if slots is None else slots
    return [simulate(cfg, trace_seed(cfg.seed, role, i), slots) for i in range(count)]


def trace_labels(trace: Trace, cfg: ExperimentConfig):
    """(congested flags, expected-congestion labels); empty for an empty trace."""
    if len(trace) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    k = cfg.rach.preamble_count
    return (congestion_flags(trace, cfg.label, k).astype(np.int64),
            label_congestion(trace, cfg.label, k).astype(np.int64))


def write_trace_csv(path, trace: Trace, cfg: ExperimentConfig):
    congested, label = trace_labels(trace, cfg)
    cols = np.column_stack([np.arange(len(trace)), trace.arrivals, trace.attempts, trace.detected,
                            trace.collided_preambles, trace.dropped, congested, label]).astype(np.int64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        if len(cols):
            np.savetxt(fh, cols, fmt="%d", delimiter=",", newline="\n")


def read_trace_csv(path, slot_period=0.005):
    """Returns ``(trace, congested, label)``."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header != TRACE_HEADER:
            raise ConfigError(f"{path}: unexpected trace header {header}")
        body = fh.read()
    if body.strip():
        data = np.loadtxt(io.StringIO(body), delimiter=",", dtype=np.int64, ndmin=2)
    else:
        data = np.zeros((0, len(TRACE_HEADER)), np.int64)
    tr = Trace(arrivals=data[:, 1], attempts=data[:, 2], detected=data[:, 3],
               collided_preambles=data[:, 4], dropped=data[:, 5], slot_period=slot_period)
    return tr, data[:, 6], data[:, 7]


def smooth_features(f, width):
    """Causal moving average over the last ``width`` slots (shorter at the start)."""
    f = np.asarray(f, dtype=np.float64)
    if width <= 1:
        return f
    c = np.concatenate([np.zeros((1,) + f.shape[1:]), np.cumsum(f, axis=0)])
    idx = np.arange(len(f))
    den = np.minimum(idx + 1, width).reshape((-1,) + (1,) * (f.ndim - 1))
    return (c[idx + 1] - c[np.maximum(idx + 1 - width, 0)]) / den


def features(trace: Trace, cfg: ExperimentConfig):
    return smooth_features(trace.features(), cfg.smoothing)


def stack_features(traces, cfg):
    """(n_slots, B, 2) array over equal-length traces."""
    return np.stack([features(t, cfg) for t in traces], axis=1)


# ------------------------------------------------------------- model steps

def train_forecaster(traces, cfg: ExperimentConfig, log=None):
    seqs = [features(t, cfg) for t in traces]
    return train(seqs, cfg.train, arch=cfg.model.arch(), log=log)


def write_loss_csv(path, history):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(history):
            fh.write(f"{e},{v:.{FLOAT_DIGITS}e}\n")


def streaming_for(cfg: ExperimentConfig, driver, l_buff=None):
    sc = cfg.streaming
    if driver == ROLLING and l_buff is not None:
        sc = dataclasses.replace(sc, l_buff=l_buff)
    return sc


def run_driver(model, traces, cfg: ExperimentConfig, driver, l_buff=None):
    """Run a driver on all traces at once (batch axis = trace)."""
    sc = streaming_for(cfg, driver, l_buff)
    return run_stream(model, stack_features(traces, cfg), sc, driver, float(cfg.rach.preamble_count))


def chunk_dataset(session, traces, cfg: ExperimentConfig):
    """Chunk features and per-step labels, flattened over the batch of traces.

    Returns ``X`` (steps * B, chunk), ``y`` and the per-step last real slots.
    """
    chunks = make_chunks(session)
    if not chunks:
        return np.zeros((0, session.config.chunk_size)), np.zeros(0, np.int64), np.zeros(0, np.int64)
    lasts = np.array([c.last_real_slot for c in chunks])
    labels = np.stack([trace_labels(t, cfg)[1] for t in traces])  # (B, n)
    y = aggregate_step_labels(labels, lasts, session.config.l_f, cfg.label_rule)  # (steps, B)
    X = np.stack([c.features for c in chunks])  # (steps, B, ch)
    return X.reshape(-1, X.shape[-1]), y.reshape(-1), lasts


def train_detector(model, traces, cfg: ExperimentConfig, log=None):
    session = run_driver(model, traces, cfg, cfg.burst_driver)
    X, y, _ = chunk_dataset(session, traces, cfg)
    bcfg = dataclasses.replace(cfg.burst, seed=int(substream(cfg.seed, "burst").integers(0, 2**32)))
    return train_burst(X, y, bcfg, log=log)


def detector_metrics(model, detector: BurstNetParams, traces, cfg, driver, l_buff=None):
    session = run_driver(model, traces, cfg, driver, l_buff)
    X, y, _ = chunk_dataset(session, traces, cfg)
    cfg.validate(detector.chunk_size)
    prob = burst_forward(X, detector) if len(X) else np.zeros(0)
    return compute_metrics(decide(prob, detector), y, prob)


def compare_drivers(model, traces, cfg: ExperimentConfig, buffers=(100, 200, 400, 800),
                    lead_times=(0.5, 1.0, 1.5, 2.0)):
    """Forecast MSE per lead time for FLSP and rolling at each buffer size."""
    truth = stack_features(traces, cfg)
    results = {"flsp": evaluate_stream(run_driver(model, traces, cfg, FLSP), truth, lead_times)}
    for b in buffers:
        results[f"rolling_{b}"] = evaluate_stream(run_driver(model, traces, cfg, ROLLING, b), truth, lead_times)
    return results


# --------------------------------------------------------- prediction files

def write_predictions_csv(path, session):
    slots, leads = emitted_slots(session)
    pred = session.output_sequence()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(PREDICTION_HEADER) + "\n")
        for s, row, lead in zip(slots, pred, leads):
            fh.write(f"{s},{row[0]:.{FLOAT_DIGITS}f},{row[1]:.{FLOAT_DIGITS}f},{lead}\n")


def read_predictions_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    slots = np.array([int(r["slot"]) for r in rows], dtype=np.int64)
    pred = np.array([[float(r["pred_detected"]), float(r["pred_collided"])] for r in rows]).reshape(-1, 2)
    return slots, pred


def write_chunks_csv(path, session):
    chunks = make_chunks(session)
    ch = session.config.chunk_size
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,last_slot," + ",".join(f"x{i}" for i in range(ch)) + "\n")
        for c in chunks:
            fh.write(f"{c.step},{c.last_real_slot}," + ",".join(repr(float(v)) for v in c.features) + "\n")


def read_chunks_csv(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    ch = len(header) - 2
    if data.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, ch))
    return data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2:]


def write_decisions_csv(path, prob, decisions, labels):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(DECISION_HEADER) + "\n")
        for k, (p, d, y) in enumerate(zip(prob, decisions, labels)):
            fh.write(f"{k},{p:.{FLOAT_DIGITS}f},{int(d)},{int(y)}\n")


def evaluate_files(chunks_path, trace_path, burst_path, predictions_path, cfg: ExperimentConfig, out_dir,
                   scale=20):
    """Score detector decisions on a chunk file; write metrics and plot data.

    Returns the metrics dict that was written.
    """
    out_dir = Path(out_dir)
    detector = BurstNetParams.load(burst_path)
    steps, lasts, X = read_chunks_csv(chunks_path)
    cfg.validate(detector.chunk_size)
    if X.shape[1] != detector.chunk_size:
        raise ConfigError(f"chunk file has width {X.shape[1]}, detector expects {detector.chunk_size}")
    trace, _, label = read_trace_csv(trace_path, cfg.rach.slot_period)
    l_f = cfg.streaming.l_f
    y = aggregate_step_labels(label, lasts, l_f, cfg.label_rule) if len(lasts) else np.zeros(0, np.int64)
    prob = burst_forward(X, detector) if len(X) else np.zeros(0)
    dec = decide(prob, detector)
    m = compute_metrics(dec, y, prob)
    write_decisions_csv(out_dir / "decisions.csv", prob, dec, y)

    # burst regions over the fresh slots of each step
    region_slots = np.concatenate([np.arange(s - l_f + 1, s + 1) for s in lasts]) if len(lasts) else np.zeros(0, int)
    with open(out_dir / "plot_bursts.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("slot,label_scaled,decision_scaled\n")
        lab = expand_decisions_for_plot(y, l_f, scale)
        det = expand_decisions_for_plot(dec, l_f, scale)
        for s, a, b in zip(region_slots, lab, det):
            fh.write(f"{s},{a:g},{b:g}\n")

    pslots, pred = read_predictions_csv(predictions_path) if predictions_path else (np.zeros(0, int), np.zeros((0, 2)))
    with open(out_dir / "plot_traffic.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("slot,detected,collided,pred_detected,pred_collided\n")
        lookup = dict(zip(pslots.tolist(), pred.tolist()))
        feats = features(trace, cfg)
        for s in range(len(trace)):
            p = lookup.get(s)
            tail = f"{p[0]:.{FLOAT_DIGITS}f},{p[1]:.{FLOAT_DIGITS}f}" if p else ","
            fh.write(f"{s},{feats[s, 0]:.{FLOAT_DIGITS}f},{feats[s, 1]:.{FLOAT_DIGITS}f},{tail}\n")

    doc = {"metrics": m.to_dict(), "steps": int(len(y)), "positives": int(np.sum(y)),
           "config": {"streaming": dataclasses.asdict(cfg.streaming), "label": dataclasses.asdict(cfg.label),
                      "label_rule": cfg.label_rule, "threshold": detector.threshold}}
    write_json(out_dir / "metrics.json", doc)
    return doc


def load_model(path) -> ModelParams:
    try:
        return load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from None
