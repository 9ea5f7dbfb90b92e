"""Closed-form parameter and FLOP counts for the forecasting models.

FLOP counts follow the usual convention of 2 FLOPs per multiply-accumulate
plus a fixed per-unit element-wise cost for the gates (29 per LSTM unit,
22 per GRU unit). Per-output-slot costs multiply the per-evaluation cost by
the number of evaluations a driver spends for every ``l_f`` emitted slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from fractions import Fraction

from .predict import FLSP, ROLLING, StreamingConfig

LSTM_ELEMENTWISE = 29
GRU_ELEMENTWISE = 22


@dataclass(frozen=True)
class ArchDescriptor:
    """Layer geometry of a forecaster.

    For recurrent kinds ``hidden_sizes`` are h_1..h_L with ``input_size``
    as h_0; ``dense_sizes`` are the output widths m_l of the dense layers
    and ``dense_inputs`` their actual (concatenation-aware) input widths.
    For ``cnn1d``, ``window`` is W, ``channels`` is C_0..C_L, ``kernels``
    K_1..K_L, and the fully connected part reuses the dense fields.
    """

    kind: str
    input_size: int = 2
    hidden_sizes: tuple = ()
    dense_sizes: tuple = ()
    dense_inputs: tuple = ()
    window: int = 0
    channels: tuple = ()
    kernels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("lstm", "gru", "cnn1d"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.dense_sizes) != len(self.dense_inputs):
            raise ValueError("dense_sizes and dense_inputs differ in length")
        sizes = [self.input_size, *self.hidden_sizes, *self.dense_sizes, *self.dense_inputs,
                 *self.channels, *self.kernels]
        if any(int(s) <= 0 for s in sizes):
            raise ValueError("all layer sizes must be positive")
        if self.kind == "cnn1d":
            if len(self.channels) != len(self.kernels) + 1:
                raise ValueError("cnn1d needs C_0..C_L and K_1..K_L")
            if self.window <= 0:
                raise ValueError("cnn1d needs a positive window")
        elif not self.hidden_sizes:
            raise ValueError("recurrent models need at least one hidden layer")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("hidden_sizes", "dense_sizes", "dense_inputs", "channels", "kernels"):
            if k in d:
                d[k] = tuple(int(v) for v in d[k])
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def reference_arch(kind="lstm"):
    """Full-size geometry: two 2500-unit layers, dense 2500->2500 then concat 5000->2."""
    return ArchDescriptor(kind, 2, (2500, 2500), (2500, 2), (2500, 5000))


def arch_of(model) -> ArchDescriptor:
    """Descriptor of a live :class:`~rachpred.nn.ModelParams`."""
    return ArchDescriptor(model.kind, model.input_size, tuple(model.hidden_sizes),
                          tuple(model.head.sizes), tuple(model.head.input_sizes))


def _dense_params(arch):
    return sum(m * (x + 1) for m, x in zip(arch.dense_sizes, arch.dense_inputs))


def param_count(arch: ArchDescriptor) -> int:
    if arch.kind == "cnn1d":
        conv = sum(c * (c_prev * k + 1) for c_prev, c, k in zip(arch.channels, arch.channels[1:], arch.kernels))
        return conv + _dense_params(arch)
    gates = 4 if arch.kind == "lstm" else 3
    h_prev = [arch.input_size, *arch.hidden_sizes[:-1]]
    rec = sum(gates * h * (hp + h + 2) for hp, h in zip(h_prev, arch.hidden_sizes))
    return rec + _dense_params(arch)


def evaluation_flops(arch: ArchDescriptor) -> int:
    """FLOPs of one recurrent evaluation (all layers plus the dense head)."""
    if arch.kind == "cnn1d":
        raise ValueError("cnn1d has no per-step recurrent evaluation")
    mul, ew = (8, LSTM_ELEMENTWISE) if arch.kind == "lstm" else (6, GRU_ELEMENTWISE)
    h_prev = [arch.input_size, *arch.hidden_sizes[:-1]]
    rec = sum(mul * h * (hp + h) + ew * h for hp, h in zip(h_prev, arch.hidden_sizes))
    return rec + sum(2 * m * x for m, x in zip(arch.dense_sizes, arch.dense_inputs))


def evaluations_per_step(streaming: StreamingConfig, driver):
    """Recurrent evaluations spent per driver step (valid for l_buff >= l_f)."""
    if driver == FLSP:
        return streaming.l_f + streaming.l_p
    if driver == ROLLING:
        if streaming.l_buff is None:
            raise ValueError("an unbounded rolling buffer has no fixed per-step cost")
        return streaming.l_buff + streaming.l_p
    raise ValueError(f"unknown driver {driver!r}")


def flops_per_step(arch: ArchDescriptor, streaming: StreamingConfig, driver) -> Fraction:
    """FLOPs per emitted output slot, as an exact rational."""
    if arch.kind == "cnn1d":
        if driver != ROLLING:
            raise ValueError("cnn1d only supports the rolling driver")
        conv = sum(Fraction(arch.window, 2 ** l) * c * (2 * c_prev * k + Fraction(1, 2))
                   for l, (c_prev, c, k) in enumerate(zip(arch.channels, arch.channels[1:], arch.kernels), 1))
        fc = sum(2 * m * x + m for m, x in zip(arch.dense_sizes, arch.dense_inputs))
        last = arch.dense_sizes[-1] if arch.dense_sizes else 0
        return Fraction(1, streaming.l_f) * (conv + fc - last)
    return Fraction(evaluations_per_step(streaming, driver), streaming.l_f) * evaluation_flops(arch)


def complexity_ratio(l_f, l_p, l_buff) -> Fraction:
    """FLSP cost relative to rolling cost for the same model."""
    return Fraction(l_f + l_p, l_buff + l_p)


@dataclass
class CostReport:
    kind: str
    param_count: int
    flops_rolling: Fraction | None
    flops_flsp: Fraction | None
    ratio: Fraction | None
    streaming: dict = field(default_factory=dict)

    def to_dict(self):
        def num(x):
            return None if x is None else (int(x) if x.denominator == 1 else float(x))
        return {
            "kind": self.kind,
            "param_count": self.param_count,
            "flops_per_output_rolling": num(self.flops_rolling),
            "flops_per_output_flsp": num(self.flops_flsp),
            "flsp_to_rolling_ratio": num(self.ratio),
            "ratio_exact": None if self.ratio is None else f"{self.ratio.numerator}/{self.ratio.denominator}",
            "streaming": self.streaming,
        }

    def table(self):
        rows = [(k, "-" if v is None else (f"{v:,}" if isinstance(v, int) else f"{v:,.6g}" if isinstance(v, float) else str(v)))
                for k, v in self.to_dict().items() if k != "streaming"]
        rows += [(f"streaming.{k}", str(v)) for k, v in self.streaming.items()]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


def cost_report(arch: ArchDescriptor, streaming: StreamingConfig) -> CostReport:
    roll = flops_per_step(arch, streaming, ROLLING) if streaming.l_buff is not None else None
    flsp = None if arch.kind == "cnn1d" else flops_per_step(arch, streaming, FLSP)
    ratio = flsp / roll if (roll and flsp is not None) else None
    return CostReport(arch.kind, param_count(arch), roll, flsp, ratio,
                      {"l_f": streaming.l_f, "l_p": streaming.l_p, "l_buff": streaming.l_buff})


@dataclass
class EmpiricalCost:
    evaluations: int
    warmup_evaluations: int
    steps: int
    emitted_slots: int
    flops_per_evaluation: int

    @property
    def step_evaluations(self):
        return self.evaluations - self.warmup_evaluations

    @property
    def evaluations_per_step(self):
        return Fraction(self.step_evaluations, self.steps) if self.steps else Fraction(0)

    @property
    def flops_per_output(self):
        """Steady-state FLOPs per emitted slot (warm-up excluded)."""
        if not self.emitted_slots:
            return Fraction(0)
        return Fraction(self.step_evaluations * self.flops_per_evaluation, self.emitted_slots)


def empirical_cost(session) -> EmpiricalCost:
    """Measured evaluation tally of a finished :class:`PredictorSession`."""
    return EmpiricalCost(session.evaluations, session.warmup_evaluations, session.steps,
                         session.steps * session.config.l_f, session.model.step_flops())
