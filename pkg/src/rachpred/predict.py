"""Streaming prediction drivers: FLSP (state checkpointing) and the rolling baseline.

Both drivers share one :class:`PredictorSession`. Every single-step
evaluation of the recurrent stack bumps ``session.evaluations`` so the
cost laws can be checked exactly.

Lead convention: after the last real slot ``s`` has been consumed, the
output of that evaluation is the lead-1 forecast. Recursive step ``j``
feeds the previous forecast back in and produces the forecast for slot
``s + j + 1``; a block of ``l_p`` recursive outputs therefore covers leads
``2 .. l_p + 1`` and a driver step emits leads ``l_p - l_f + 2 .. l_p + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.model import ModelParams, model_step
from .sim import ConfigError

FLSP = "flsp"
ROLLING = "rolling"
DRIVERS = (FLSP, ROLLING)


class SessionError(RuntimeError):
    pass


@dataclass(frozen=True)
class StreamingConfig:
    l_hist: int = 6000
    l_f: int = 100
    l_p: int = 200
    l_buff: int | None = 200  # None means an unbounded buffer
    slot_period: float = 0.005
    allow_equal: bool = False

    def __post_init__(self):
        if min(self.l_hist, self.l_f, self.l_p) < 1:
            raise ConfigError("l_hist, l_f and l_p must be positive")
        if self.l_buff is not None and self.l_buff < 0:
            raise ConfigError("l_buff must be >= 0")
        if self.l_f > self.l_p or (self.l_f == self.l_p and not self.allow_equal):
            raise ConfigError(f"need l_f < l_p (got l_f={self.l_f}, l_p={self.l_p}); "
                              "pass allow_equal for l_f == l_p")

    @property
    def chunk_size(self):
        return 2 * (self.l_f + self.l_p)

    def slots(self, seconds):
        return int(round(seconds / self.slot_period))


@dataclass
class ChunkSample:
    """Fresh real data followed by the forecasts made right after it.

    ``features`` is laid out as [fresh detected (l_f), fresh collided (l_f),
    predicted detected (l_p), predicted collided (l_p)], with a leading
    batch axis when the session runs several streams at once.
    """

    step: int
    last_real_slot: int
    features: np.ndarray


@dataclass
class PredictorSession:
    model: ModelParams
    config: StreamingConfig
    max_value: float | None = 54.0  # forecasts are clamped to [0, max_value] before feedback
    checkpoint: object = None
    live: object = None
    output: list = field(default_factory=list)
    evaluations: int = 0
    warmup_evaluations: int = 0
    position: int = 0  # real slots consumed so far
    steps: int = 0
    blocks: list = field(default_factory=list)
    fresh_log: list = field(default_factory=list)
    _buffer: np.ndarray | None = None
    _last_output: np.ndarray | None = None

    # -------------------------------------------------------------- helpers
    def _clamp(self, y):
        y = np.maximum(y, 0.0)
        return y if self.max_value is None else np.minimum(y, self.max_value)

    def _consume(self, data, state):
        norm = self.model.normalizer
        out = None
        for x in norm.transform(np.asarray(data, dtype=np.float64)):
            out, state = model_step(x, self.model, state)
            self.evaluations += 1
        return out, state

    def _check_len(self, data, n, what):
        if len(data) != n:
            raise ValueError(f"{what} must hold {n} slots, got {len(data)}")

    # ---------------------------------------------------------- operations
    def init_with_history(self, hist):
        """Warm the state on ``l_hist`` real slots from a zero state and checkpoint it."""
        hist = np.asarray(hist, dtype=np.float64)
        self._check_len(hist, self.config.l_hist, "history")
        state = self.model.zero_state(hist.shape[1:-1])
        self._last_output, state = self._consume(hist, state)
        self.checkpoint = state.copy()
        self.live = state
        self._buffer = hist.copy()
        self.position = len(hist)
        self.warmup_evaluations = self.evaluations
        return self

    def recursive_predict(self, steps):
        """Feed forecasts back as inputs for ``steps`` evaluations.

        Returns the forecasts in raw units, clamped to the physical range.
        Only the live state moves; the checkpoint is left alone.
        """
        if self.live is None:
            raise SessionError("session not initialised")
        norm = self.model.normalizer
        preds = []
        y = self._clamp(norm.inverse(self._last_output))
        for _ in range(steps):
            out, self.live = model_step(norm.transform(y), self.model, self.live)
            self.evaluations += 1
            y = self._clamp(norm.inverse(out))
            preds.append(y)
        if not preds:
            return np.zeros((0,) + np.shape(self._last_output))
        return np.stack(preds)

    def _emit(self, fresh):
        l_f, l_p = self.config.l_f, self.config.l_p
        block = self.recursive_predict(l_p)
        self.blocks.append((self.position - 1, block))
        self.fresh_log.append(fresh)
        emitted = block[l_p - l_f:]
        self.output.append(emitted)
        self.steps += 1
        return emitted

    def flsp_step(self, fresh):
        """Restore the checkpoint, absorb ``l_f`` fresh slots, re-checkpoint, forecast."""
        if self.checkpoint is None:
            raise SessionError("flsp_step before init_with_history")
        fresh = np.asarray(fresh, dtype=np.float64)
        self._check_len(fresh, self.config.l_f, "fresh data")
        self._last_output, state = self._consume(fresh, self.checkpoint.copy())
        self.checkpoint = state.copy()
        self.live = state
        self.position += len(fresh)
        return self._emit(fresh)

    def rolling_step(self, fresh):
        """Append fresh data to the buffer, re-warm from zero over it, forecast.

        The warm-up input is the last ``max(l_buff, l_f)`` real slots (all of
        them for an unbounded buffer, or while history is still short).
        """
        if self._buffer is None:
            raise SessionError("rolling_step before init_with_history")
        fresh = np.asarray(fresh, dtype=np.float64)
        self._check_len(fresh, self.config.l_f, "fresh data")
        buf = np.concatenate([self._buffer, fresh])
        if self.config.l_buff is not None:
            buf = buf[-max(self.config.l_buff, self.config.l_f):]
        self._buffer = buf
        state = self.model.zero_state(buf.shape[1:-1])
        self._last_output, state = self._consume(buf, state)
        self.live = state
        self.position += len(fresh)
        return self._emit(fresh)

    def step(self, fresh, driver):
        if driver == FLSP:
            return self.flsp_step(fresh)
        if driver == ROLLING:
            return self.rolling_step(fresh)
        raise ValueError(f"unknown driver {driver!r}")

    def clone(self):
        """Independent copy sharing only the (immutable) model."""
        c = PredictorSession(self.model, self.config, self.max_value)
        c.checkpoint = None if self.checkpoint is None else self.checkpoint.copy()
        c.live = None if self.live is None else self.live.copy()
        c.output = list(self.output)
        c.evaluations, c.position, c.steps = self.evaluations, self.position, self.steps
        c.warmup_evaluations = self.warmup_evaluations
        c.blocks, c.fresh_log = list(self.blocks), list(self.fresh_log)
        c._buffer = None if self._buffer is None else self._buffer.copy()
        c._last_output = None if self._last_output is None else self._last_output.copy()
        return c

    def output_sequence(self):
        if not self.output:
            return np.zeros((0,))
        return np.concatenate(self.output)


# Functional aliases mirroring the session methods.
def init_with_history(session, hist):
    return session.init_with_history(hist)


def recursive_predict(session, steps):
    return session.recursive_predict(steps)


def flsp_step(session, fresh):
    return session.flsp_step(fresh)


def rolling_step(session, fresh):
    return session.rolling_step(fresh)


def n_steps(stream_length, cfg: StreamingConfig):
    return max(0, (stream_length - cfg.l_hist) // cfg.l_f)


def run_stream(model, features, cfg: StreamingConfig, driver=FLSP, max_value=54.0):
    """Run one driver over a whole feature stream (time first)."""
    session = PredictorSession(model, cfg, max_value)
    session.init_with_history(features[:cfg.l_hist])
    for k in range(n_steps(len(features), cfg)):
        a = cfg.l_hist + k * cfg.l_f
        session.step(features[a:a + cfg.l_f], driver)
    return session


def make_chunks(session: PredictorSession):
    """One chunk per driver step: fresh real slots then the ``l_p`` forecasts."""
    return [ChunkSample(k, last, chunk_features(fresh, block))
            for k, ((last, block), fresh) in enumerate(zip(session.blocks, session.fresh_log))]


def chunk_features(fresh, block):
    """Feature-major layout; time is the first axis of ``fresh`` and ``block``."""
    def flat(a):
        a = np.moveaxis(np.asarray(a), 0, -1)
        return a.reshape(a.shape[:-2] + (-1,))
    return np.concatenate([flat(fresh), flat(block)], axis=-1)


def emitted_slots(session: PredictorSession):
    """Absolute slot index and lead of every emitted output row."""
    l_f, l_p = session.config.l_f, session.config.l_p
    leads = np.arange(l_p - l_f + 2, l_p + 2)
    slots = np.concatenate([last + leads for last, _ in session.blocks]) if session.blocks else np.zeros(0, int)
    return slots, np.tile(leads, len(session.blocks))


def lead_window(lead_time, cfg: StreamingConfig):
    """Block indices holding the forecasts a driver with ``l_p = lead_time`` would emit."""
    L = cfg.slots(lead_time)
    if L < cfg.l_f or L > cfg.l_p:
        raise ValueError(f"lead time {lead_time}s needs l_f <= {L} <= l_p")
    return slice(L - cfg.l_f, L)


def evaluate_stream(session: PredictorSession, truth, lead_times=(0.5, 1.0, 1.5, 2.0)):
    """MSE of forecasts against ``truth`` per lead time (seconds).

    For lead time ``T`` the compared forecasts are exactly the ones a driver
    run with ``l_p = T / slot_period`` would have emitted, i.e. the block
    positions ``L - l_f .. L - 1``. Forecasts past the end of ``truth`` are
    skipped.
    """
    truth = np.asarray(truth, dtype=np.float64)
    out = {}
    for T in lead_times:
        sl = lead_window(T, session.config)
        err, count = 0.0, 0
        for last, block in session.blocks:
            slots = last + 2 + np.arange(sl.start, sl.stop)
            keep = slots < len(truth)
            if not keep.any():
                continue
            diff = block[sl][keep] - truth[slots[keep]]
            err += float(np.sum(diff * diff))
            count += diff.size
        out[T] = err / count if count else float("nan")
    return out
