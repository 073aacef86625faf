"""SGLD and SGD update rules in full and low precision, and the chain runner.

Dataset models report ``grad_scale = N``: the energy gradient is N times a
per-example mean gradient. Steps therefore quantize the mean-scale gradient
``g / N`` and move by ``(alpha * N) * Q_G(g / N)``, which equals
``alpha * Q_G(g)`` up to the quantizer acting on a sensibly ranged value. For
``grad_scale = 1`` the two coincide exactly.

Each chain owns two random streams: ``noise`` feeds the Langevin term and
``quant`` feeds every stochastic quantizer. Keeping them apart gives a
full-precision chain and a low-precision chain with the same seed identical
Langevin noise, and makes every stepper reproduce full-precision SGLD bit for
bit when all quantizers are off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import _kernels
from .data import BatchIterator
from .quant import (
    NO_QUANT,
    FixedPointFormat,
    QuantizationDomainError,
    QuantizerSpec,
    VcStats,
    vc_quantize,
    vc_quantize_bf,
)
from .rng import RngStream

Accumulator = Literal["full", "low_naive", "low_vc"]
Schedule = Literal["constant", "cyclical"]


class ChainDivergence(RuntimeError):
    """Raised when a chain leaves the finite, bounded region."""

    def __init__(self, step: int, detail: str):
        super().__init__(f"chain aborted at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class ChainConfig:
    """Everything that determines a chain, apart from the model.

    ``batch_size=None`` evaluates the stochastic gradient without minibatching
    (the Gaussian target has no data). ``langevin=False`` drops the noise and
    gives the SGD baselines.
    """

    stepsize: float
    steps: int
    burn_in: int = 0
    thin: int = 1
    accumulator: Accumulator = "full"
    weight_quant: QuantizerSpec = NO_QUANT
    grad_quant: QuantizerSpec = NO_QUANT
    langevin: bool = True
    schedule: Schedule = "constant"
    cycles: int = 1
    batch_size: int | None = None
    stream: RngStream = field(default_factory=lambda: RngStream(0))
    record_accumulator: bool = False
    max_stepsize: float = math.inf
    divergence_bound: float = 1e6

    def __post_init__(self):
        if not (self.stepsize > 0 and math.isfinite(self.stepsize)):
            raise ValueError("stepsize must be positive and finite")
        if self.stepsize > self.max_stepsize:
            raise ValueError(f"stepsize {self.stepsize} exceeds the cap {self.max_stepsize}")
        if self.steps <= 0 or self.thin <= 0:
            raise ValueError("steps and thin must be positive")
        if not 0 <= self.burn_in < self.steps:
            raise ValueError("burn_in must satisfy 0 <= burn_in < steps")
        if self.accumulator not in ("full", "low_naive", "low_vc"):
            raise ValueError(f"unknown accumulator {self.accumulator!r}")
        if self.accumulator == "low_vc" and not self.langevin:
            raise ValueError("variance correction needs Langevin noise")
        if self.schedule not in ("constant", "cyclical"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.cycles <= 0:
            raise ValueError("cycles must be positive")
        if self.batch_size is not None and self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.record_accumulator and self.accumulator != "full":
            raise ValueError("only a full-precision accumulator can be recorded")

    @property
    def n_samples(self) -> int:
        return (self.steps - self.burn_in) // self.thin


@dataclass
class ChainState:
    theta: np.ndarray
    theta_fp: np.ndarray | None = None
    step: int = 0


@dataclass
class ChainRngs:
    noise: np.random.Generator
    quant: np.random.Generator

    @classmethod
    def from_stream(cls, stream: RngStream) -> ChainRngs:
        return cls(stream.child("noise").generator(), stream.child("quant").generator())


@dataclass
class SampleSet:
    samples: np.ndarray
    steps: np.ndarray
    config: ChainConfig
    final_state: ChainState
    diagnostics: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.samples.shape[0]


def stepsize_at(schedule: Schedule, k: int, steps: int, alpha0: float, cycles: int = 1) -> float:
    """Constant or cosine-cyclical stepsize at iteration ``k`` (0-based)."""
    if schedule == "constant":
        return alpha0
    if schedule == "cyclical":
        period = -(-steps // cycles)
        return 0.5 * alpha0 * (math.cos(math.pi * (k % period) / period) + 1.0)
    raise ValueError(f"unknown schedule {schedule!r}")


def _drift(model, theta, batch, rngs, alpha, grad_quant):
    """``alpha * grad`` with the gradient quantized on the mean-loss scale."""
    g = model.stoch_grad(theta, batch, rngs.quant)
    scale = model.grad_scale
    if scale != 1.0:
        g = g / scale
    g = grad_quant(g, rngs.quant)
    return (alpha * scale) * g


def _noise(rngs, alpha, dim):
    return math.sqrt(2.0 * alpha) * rngs.noise.standard_normal(dim)


def step_sgld_fp(state, model, batch, rngs, alpha):
    theta = state.theta - _drift(model, state.theta, batch, rngs, alpha, NO_QUANT) + _noise(rngs, alpha, state.theta.size)
    return ChainState(theta, None, state.step + 1)


def step_sgldlp_f(state, model, batch, rngs, alpha, *, weight_quant, grad_quant):
    theta_fp = state.theta_fp - _drift(model, state.theta, batch, rngs, alpha, grad_quant)
    theta_fp = theta_fp + _noise(rngs, alpha, theta_fp.size)
    return ChainState(weight_quant(theta_fp, rngs.quant), theta_fp, state.step + 1)


def step_sgldlp_l(state, model, batch, rngs, alpha, *, weight_quant, grad_quant):
    x = state.theta - _drift(model, state.theta, batch, rngs, alpha, grad_quant)
    x = x + _noise(rngs, alpha, x.size)
    return ChainState(weight_quant(x, rngs.quant), None, state.step + 1)


def step_vc_sgldlp_l(state, model, batch, rngs, alpha, *, weight_quant, grad_quant, stats=None):
    mu = state.theta - _drift(model, state.theta, batch, rngs, alpha, grad_quant)
    if not weight_quant.active:
        return ChainState(mu + _noise(rngs, alpha, mu.size), None, state.step + 1)
    vc = vc_quantize if isinstance(weight_quant.format, FixedPointFormat) else vc_quantize_bf
    theta = vc(mu, 2.0 * alpha, weight_quant.format, rngs.quant, noise_rng=rngs.noise, stats=stats)
    return ChainState(theta, None, state.step + 1)


def step_sgd(state, model, batch, rngs, alpha, accumulator="full", *, weight_quant=NO_QUANT, grad_quant=NO_QUANT):
    """SGDLP-F (``accumulator="full"``) or SGDLP-L (``"low_naive"``); plain SGD without quantizers."""
    drift = _drift(model, state.theta, batch, rngs, alpha, grad_quant)
    if accumulator == "full":
        base = state.theta if state.theta_fp is None else state.theta_fp
        theta_fp = base - drift
        return ChainState(weight_quant(theta_fp, rngs.quant), theta_fp, state.step + 1)
    if accumulator == "low_naive":
        return ChainState(weight_quant(state.theta - drift, rngs.quant), None, state.step + 1)
    raise ValueError(f"SGD supports full or low_naive accumulators, not {accumulator!r}")


def initial_state(config: ChainConfig, model, rngs: ChainRngs) -> ChainState:
    theta0 = np.asarray(model.initial_theta(config.stream.child("init").generator()), dtype=np.float64)
    theta = config.weight_quant(theta0, rngs.quant)
    return ChainState(theta, theta0 if config.accumulator == "full" else None, 0)


def _stepper(config: ChainConfig, stats: VcStats):
    wq, gq = config.weight_quant, config.grad_quant
    if not config.langevin:
        return lambda s, m, b, r, a: step_sgd(s, m, b, r, a, config.accumulator, weight_quant=wq, grad_quant=gq)
    if config.accumulator == "full":
        return lambda s, m, b, r, a: step_sgldlp_f(s, m, b, r, a, weight_quant=wq, grad_quant=gq)
    if config.accumulator == "low_naive":
        return lambda s, m, b, r, a: step_sgldlp_l(s, m, b, r, a, weight_quant=wq, grad_quant=gq)
    return lambda s, m, b, r, a: step_vc_sgldlp_l(s, m, b, r, a, weight_quant=wq, grad_quant=gq, stats=stats)


def run_chain(config: ChainConfig, model) -> SampleSet:
    """Run ``config.steps`` updates and keep every ``thin``-th state after burn-in.

    Sample ``j`` is the state after step ``burn_in + (j + 1) * thin``. Raises
    :class:`ChainDivergence` if the parameters become non-finite or their
    largest magnitude exceeds ``config.divergence_bound``.
    """
    rngs = ChainRngs.from_stream(config.stream)
    stats = VcStats()
    step = _stepper(config, stats)
    state = initial_state(config, model, rngs)
    batches = None
    if config.batch_size is not None and model.n_data > 0:
        batches = BatchIterator(model.n_data, config.batch_size, config.stream.child("batch"))

    n_samples = config.n_samples
    samples = np.empty((n_samples, model.dim))
    record_steps = config.burn_in + config.thin * np.arange(1, n_samples + 1)
    next_record, j = (record_steps[0] if n_samples else -1), 0
    bound = config.divergence_bound
    for k in range(config.steps):
        alpha = stepsize_at(config.schedule, k, config.steps, config.stepsize, config.cycles)
        batch = batches.next_batch() if batches is not None else None
        try:
            state = step(state, model, batch, rngs, alpha)
        except QuantizationDomainError as exc:
            raise ChainDivergence(k + 1, str(exc)) from exc
        peak = _kernels.max_abs(state.theta)
        if not peak <= bound:
            raise ChainDivergence(k + 1, f"max |theta| = {peak:.6g} exceeds {bound:g}")
        if k + 1 == next_record:
            samples[j] = state.theta_fp if config.record_accumulator else state.theta
            j += 1
            next_record = record_steps[j] if j < n_samples else -1
    diagnostics = {}
    if config.accumulator == "low_vc":
        diagnostics["vc"] = stats
    return SampleSet(samples, record_steps, config, state, diagnostics)
