"""Discrete-slot simulator of RACH traffic in a single mMTC cell.

Devices are organised in groups. Every group emits periodic packets at a
fixed per-device rate and, on random external events, a burst whose
intensity follows a Beta(alpha, beta) profile over the event duration.
Packets contend on Message 1 of the random-access handshake with multichannel
slotted ALOHA over ``K`` preambles, retrying after a uniform backoff until
``max_transmissions`` is exhausted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy import special

from .seeding import substream

MAX_DEVICES = 2**31 - 1


class ConfigError(ValueError):
    """Invalid simulator or experiment configuration."""


@dataclass(frozen=True)
class DeviceGroup:
    size: int
    event_probability: float
    periodic_rate: float = 1.0 / 60.0

    def __post_init__(self):
        if self.size < 0:
            raise ConfigError(f"group size must be >= 0, got {self.size}")
        if not 0.0 <= self.event_probability <= 1.0:
            raise ConfigError(f"event probability must be in [0, 1], got {self.event_probability}")
        if self.periodic_rate < 0:
            raise ConfigError(f"periodic rate must be >= 0, got {self.periodic_rate}")


@dataclass(frozen=True)
class BurstEvent:
    group: int
    start_time: float
    duration: float
    alpha: float = 3.0
    beta: float = 4.0

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("burst duration must be positive")
        if self.alpha <= 1 or self.beta <= 1:
            raise ConfigError("alpha and beta must both exceed 1")

    @property
    def end_time(self):
        return self.start_time + self.duration


@dataclass(frozen=True)
class RachConfig:
    preamble_count: int = 54
    slot_period: float = 0.005
    max_transmissions: int = 10
    backoff_value: int = 20  # milliseconds

    def __post_init__(self):
        if self.preamble_count < 1:
            raise ConfigError("preamble_count must be >= 1")
        if self.slot_period <= 0:
            raise ConfigError("slot_period must be positive")
        if self.max_transmissions < 1:
            raise ConfigError("max_transmissions must be >= 1")
        if self.backoff_value < 0:
            raise ConfigError("backoff_value must be >= 0")

    @property
    def max_backoff_slots(self):
        return backoff_slots(self.backoff_value, self)


# Group sizes and per-second event probabilities of the reference cell.
DEFAULT_GROUPS = (
    DeviceGroup(15000, 0.006),
    DeviceGroup(8000, 0.009),
    DeviceGroup(3000, 0.09),
    DeviceGroup(3000, 0.1),
    DeviceGroup(3000, 0.2),
    DeviceGroup(15000, 0.004),
    DeviceGroup(8000, 0.004),
    DeviceGroup(3000, 0.05),
    DeviceGroup(2000, 0.1),
    DeviceGroup(2000, 0.2),
)


@dataclass(frozen=True)
class CellConfig:
    groups: tuple = DEFAULT_GROUPS
    alpha: float = 3.0
    beta: float = 4.0
    min_duration: float = 8.0
    max_duration: float = 15.0
    # one Bernoulli event trial per group every `event_period` seconds
    event_period: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(
            g if isinstance(g, DeviceGroup) else DeviceGroup(**g) for g in self.groups))
        if not 0 < self.min_duration <= self.max_duration:
            raise ConfigError("need 0 < min_duration <= max_duration")
        if self.alpha <= 1 or self.beta <= 1:
            raise ConfigError("alpha and beta must both exceed 1")
        if self.event_period <= 0:
            raise ConfigError("event_period must be positive")
        if self.total_devices > MAX_DEVICES:
            raise ConfigError(f"total device count {self.total_devices} overflows the device counters")

    @property
    def total_devices(self):
        return sum(g.size for g in self.groups)

    def to_dict(self):
        d = asdict(self)
        d["groups"] = [asdict(g) for g in self.groups]
        return d


@dataclass(frozen=True)
class TraceRecord:
    slot: int
    arrivals: int
    attempts: int
    detected: int
    collided_preambles: int
    dropped: int


TRACE_FIELDS = ("arrivals", "attempts", "detected", "collided_preambles", "dropped")


@dataclass
class Trace:
    """Per-slot simulator output, stored column-wise.

    Iterating yields :class:`TraceRecord` objects; the columns are plain
    int64 arrays for numeric work.
    """

    arrivals: np.ndarray
    attempts: np.ndarray
    detected: np.ndarray
    collided_preambles: np.ndarray
    dropped: np.ndarray
    slot_period: float = 0.005
    events: list = field(default_factory=list)

    def __len__(self):
        return len(self.arrivals)

    def __iter__(self) -> Iterator[TraceRecord]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i):
        return TraceRecord(i, *(int(getattr(self, f)[i]) for f in TRACE_FIELDS))

    @property
    def collided_attempts(self):
        return self.attempts - self.detected

    def features(self):
        """(n_slots, 2) float array of detected and collided preambles."""
        return np.column_stack([self.detected, self.collided_preambles]).astype(np.float64)

    @classmethod
    def from_records(cls, records: Sequence[TraceRecord], slot_period=0.005):
        cols = {f: np.array([getattr(r, f) for r in records], dtype=np.int64) for f in TRACE_FIELDS}
        return cls(**cols, slot_period=slot_period)


def beta_intensity(t, ev: BurstEvent):
    """Access intensity (per second) at time ``t`` into a burst of length T."""
    T, a, b = ev.duration, ev.alpha, ev.beta
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError(f"t must lie in [0, {T}]")
    out = t ** (a - 1) * (T - t) ** (b - 1) / (T ** (a + b - 1) * special.beta(a, b))
    return float(out) if out.ndim == 0 else out


def expected_arrivals(slot, ev: BurstEvent, group: DeviceGroup, slot_period=0.005):
    """Expected number of new burst packets from ``group`` in ``slot``.

    ``slot`` may be an int or an integer array. Bounds are clamped to the
    event support, so slots outside the event give zero.
    """
    slot = np.asarray(slot)
    t0 = np.clip((slot * slot_period - ev.start_time) / ev.duration, 0.0, 1.0)
    t1 = np.clip(((slot + 1) * slot_period - ev.start_time) / ev.duration, 0.0, 1.0)
    mass = special.betainc(ev.alpha, ev.beta, t1) - special.betainc(ev.alpha, ev.beta, t0)
    out = group.size * mass
    return float(out) if out.ndim == 0 else out


class ContentionResult(NamedTuple):
    success: np.ndarray
    detected: int
    collided_preambles: int


def contend(devices, rach: RachConfig, rng) -> ContentionResult:
    """One RACH opportunity: every device picks a preamble uniformly at random.

    A preamble picked by exactly one device is detected; a preamble picked
    by two or more devices collides and all of its devices fail.
    """
    n = devices if isinstance(devices, (int, np.integer)) else len(devices)
    if n == 0:
        return ContentionResult(np.zeros(0, dtype=bool), 0, 0)
    picks = rng.integers(0, rach.preamble_count, size=n)
    load = np.bincount(picks, minlength=rach.preamble_count)
    return ContentionResult(load[picks] == 1, int(np.count_nonzero(load == 1)),
                            int(np.count_nonzero(load >= 2)))


def backoff_slots(backoff_ms, rach: RachConfig):
    """Slots from a failed attempt to the retry for a backoff of ``backoff_ms``."""
    slot_ms = rach.slot_period * 1000.0
    return 1 + np.floor(np.asarray(backoff_ms) / slot_ms + 1e-9).astype(np.int64)


def generate_events(cell: CellConfig, duration, rng) -> list:
    """Draw burst events: one Bernoulli trial per group per ``event_period``."""
    n_trials = int(math.ceil(duration / cell.event_period - 1e-9))
    events = []
    for k, g in enumerate(cell.groups):
        hits = rng.random(n_trials) < g.event_probability
        lengths = rng.uniform(cell.min_duration, cell.max_duration, size=n_trials)
        for j in np.flatnonzero(hits):
            events.append(BurstEvent(k, j * cell.event_period, float(lengths[j]), cell.alpha, cell.beta))
    events.sort(key=lambda e: (e.start_time, e.group))
    return events


def burst_mean(events, cell: CellConfig, total_slots, slot_period):
    """Expected burst arrivals per slot summed over all events."""
    mean = np.zeros(total_slots)
    for ev in events:
        first = max(0, int(ev.start_time / slot_period) - 1)
        last = min(total_slots, int(math.ceil(ev.end_time / slot_period)) + 1)
        if first >= last:
            continue
        mean[first:last] += expected_arrivals(np.arange(first, last), ev, cell.groups[ev.group], slot_period)
    return mean


def run_simulation(cell: CellConfig, rach: RachConfig, total_slots, seed, drain=False,
                   events=None) -> Trace:
    """Simulate ``total_slots`` RACH opportunities.

    With ``drain=True`` extra arrival-free slots are appended until every
    pending retransmission has been detected or dropped.
    """
    if total_slots < 0:
        raise ConfigError("total_slots must be >= 0")
    dt = rach.slot_period
    arrivals_rng = substream(seed, "sim", "arrivals")
    contend_rng = substream(seed, "sim", "contention")
    if events is None:
        events = generate_events(cell, total_slots * dt, substream(seed, "sim", "events"))

    periodic = np.zeros(total_slots, dtype=np.int64)
    for g in cell.groups:
        if g.size and g.periodic_rate:
            periodic += arrivals_rng.binomial(g.size, min(1.0, g.periodic_rate * dt), size=total_slots)
    bursts = arrivals_rng.poisson(burst_mean(events, cell, total_slots, dt))
    new = periodic + bursts

    max_tx = rach.max_transmissions
    horizon = int(rach.max_backoff_slots) + 1
    # pending[s % horizon, n] = devices due in slot s that have already sent n times
    pending = np.zeros((horizon, max_tx), dtype=np.int64)
    tx_index = np.arange(max_tx)
    cols = {f: [] for f in TRACE_FIELDS}

    s = 0
    while s < total_slots or (drain and pending.any()):
        row = pending[s % horizon]
        a = int(new[s]) if s < total_slots else 0
        row[0] += a
        attempts = int(row.sum())
        sent_before = np.repeat(tx_index, row)
        row[:] = 0
        res = contend(attempts, rach, contend_rng)
        sent = sent_before[~res.success] + 1
        exhausted = sent >= max_tx
        retry = sent[~exhausted]
        if retry.size:
            delay = backoff_slots(contend_rng.integers(0, rach.backoff_value + 1, size=retry.size), rach)
            np.add.at(pending, ((s + delay) % horizon, retry), 1)
        cols["arrivals"].append(a)
        cols["attempts"].append(attempts)
        cols["detected"].append(res.detected)
        cols["collided_preambles"].append(res.collided_preambles)
        cols["dropped"].append(int(exhausted.sum()))
        s += 1

    arrays = {f: np.asarray(v, dtype=np.int64) for f, v in cols.items()}
    return Trace(**arrays, slot_period=dt, events=list(events))


@dataclass(frozen=True)
class LabelConfig:
    window_seconds: float = 3.0
    collision_threshold: float = 7000.0
    t_pred: float = 1.0
    # "sum" or "mean" of collided attempts over the trailing window
    statistic: str = "sum"
    # "window" (collided-attempt statistic) or "overload" (attempts > K for a run of slots)
    mode: str = "window"
    overload_run: int = 250

    def __post_init__(self):
        if self.window_seconds <= 0:
            raise ConfigError("window_seconds must be positive")
        if self.collision_threshold < 0:
            raise ConfigError("collision_threshold must be >= 0")
        if self.t_pred < 0:
            raise ConfigError("t_pred must be >= 0")
        if self.statistic not in ("sum", "mean"):
            raise ConfigError(f"unknown statistic {self.statistic!r}")
        if self.mode not in ("window", "overload"):
            raise ConfigError(f"unknown labeling mode {self.mode!r}")


def _trailing_sum(x, w):
    c = np.concatenate([[0], np.cumsum(x)])
    idx = np.arange(len(x))
    return c[idx + 1] - c[np.maximum(idx + 1 - w, 0)]


def congestion_flags(trace: Trace, cfg: LabelConfig, preamble_count=54):
    """Per-slot flag: is the cell congested at this slot."""
    if len(trace) == 0:
        raise ValueError("cannot label an empty trace")
    dt = trace.slot_period
    if cfg.mode == "overload":
        over = (trace.attempts > preamble_count).astype(np.int64)
        run = _trailing_sum(over, cfg.overload_run)
        flag = run >= cfg.overload_run
        # mark the whole qualifying run, not just its last slot
        return _trailing_sum(flag[::-1].astype(np.int64), cfg.overload_run)[::-1] > 0
    w = max(1, int(round(cfg.window_seconds / dt)))
    stat = _trailing_sum(trace.collided_attempts.astype(np.float64), w)
    if cfg.statistic == "mean":
        stat = stat / np.minimum(np.arange(1, len(trace) + 1), w)
    return stat > cfg.collision_threshold


def label_congestion(trace: Trace, cfg: LabelConfig, preamble_count=54):
    """Expected-congestion labels: 1 at slot s iff congestion occurs in (s, s + t_pred]."""
    flags = congestion_flags(trace, cfg, preamble_count)
    lead = int(round(cfg.t_pred / trace.slot_period))
    return lookahead_any(flags, lead)


def lookahead_any(flags, lead):
    """out[s] = any(flags[s+1 : s+lead+1])."""
    flags = np.asarray(flags, dtype=np.int64)
    n = len(flags)
    if lead == 0:
        return np.zeros(n, dtype=np.int64)
    c = np.concatenate([[0], np.cumsum(flags)])
    idx = np.arange(n)
    hi = np.minimum(idx + lead + 1, n)
    lo = np.minimum(idx + 1, n)
    return (c[hi] - c[lo] > 0).astype(np.int64)
