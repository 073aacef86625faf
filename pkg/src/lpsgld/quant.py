"""Emulated low-precision number formats and quantizers.

Low-precision values are stored as float64 arrays whose entries lie on the
format's grid. Three formats are supported:

* :class:`FixedPointFormat`: ``W`` total bits, ``F`` of them fractional, gap
  ``2**-F`` and range ``[-2**(W-F-1), 2**(W-F-1) - 2**-F]``.
* :class:`BlockFloatFormat`: tensors are flattened and cut into blocks of
  ``block_len`` numbers sharing one exponent; gap ``2**(E - W + 2)``.
* :class:`FloatFormat`: one exponent per number; gap ``2**(E - W)``.

Quantizers round first and clip second. Stochastic rounding is unbiased only
strictly inside the representable range.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from . import _kernels

logger = logging.getLogger(__name__)

Mode = Literal["deterministic", "stochastic", "none"]
MODES = ("deterministic", "stochastic", "none")


class QuantizationDomainError(ValueError):
    """Input outside the domain of a quantization function."""


@dataclass(frozen=True)
class FixedPointFormat:
    word_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.word_bits < 1:
            raise ValueError(f"word_bits must be positive, got {self.word_bits}")
        if not 0 <= self.frac_bits <= self.word_bits - 1:
            raise ValueError(
                f"frac_bits must lie in [0, word_bits - 1], got F={self.frac_bits}, W={self.word_bits}"
            )

    @property
    def gap(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)

    @property
    def lower(self) -> float:
        return -math.ldexp(1.0, self.word_bits - self.frac_bits - 1)

    @property
    def upper(self) -> float:
        return math.ldexp(1.0, self.word_bits - self.frac_bits - 1) - self.gap

    def grid(self) -> np.ndarray:
        """All ``2**W`` representable values in increasing order."""
        half = 1 << (self.word_bits - 1)
        return self.decode(np.arange(-half, half, dtype=np.int64))

    def encode(self, x) -> np.ndarray:
        """Integer codes of on-grid values (two's-complement mantissas)."""
        x = np.asarray(x, dtype=np.float64)
        codes = np.ldexp(x, self.frac_bits)
        if not np.array_equal(codes, np.round(codes)):
            raise QuantizationDomainError("value is not on the fixed-point grid")
        half = 1 << (self.word_bits - 1)
        if np.any(codes < -half) or np.any(codes > half - 1):
            raise QuantizationDomainError("value outside the representable range")
        return codes.astype(np.int64)

    def decode(self, codes) -> np.ndarray:
        return np.ldexp(np.asarray(codes, dtype=np.float64), -self.frac_bits)

    def describe(self) -> str:
        return f"fixed(W={self.word_bits};F={self.frac_bits})"


@dataclass(frozen=True)
class BlockFloatFormat:
    word_bits: int
    exp_bits: int
    block_len: int = 64

    def __post_init__(self):
        if self.word_bits < 2 or self.exp_bits < 1 or self.block_len < 1:
            raise ValueError(f"invalid block floating point format {self}")

    @property
    def exp_lower(self) -> int:
        return -(1 << (self.exp_bits - 1))

    @property
    def exp_upper(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    def describe(self) -> str:
        return f"block(W={self.word_bits};E={self.exp_bits};B={self.block_len})"


@dataclass(frozen=True)
class FloatFormat:
    word_bits: int
    exp_bits: int

    def __post_init__(self):
        if self.word_bits < 1 or self.exp_bits < 1:
            raise ValueError(f"invalid floating point format {self}")

    @property
    def exp_lower(self) -> int:
        return -(1 << (self.exp_bits - 1))

    @property
    def exp_upper(self) -> int:
        return (1 << (self.exp_bits - 1)) - 1

    @property
    def max_value(self) -> float:
        return math.ldexp((1 << (self.word_bits + 1)) - 1, self.exp_upper - self.word_bits)

    def describe(self) -> str:
        return f"float(W={self.word_bits};E={self.exp_bits})"


NumberFormat = Union[FixedPointFormat, BlockFloatFormat, FloatFormat]


def repr_bounds(fmt: FixedPointFormat) -> tuple[float, float]:
    """Lower and upper representable values of a fixed-point format."""
    return fmt.lower, fmt.upper


def _floor_log2(values: np.ndarray) -> np.ndarray:
    # frexp is exact: m = f * 2**e with f in [0.5, 1)  =>  floor(log2 m) = e - 1
    _, e = np.frexp(values)
    return e.astype(np.int64) - 1


def block_gap(values, fmt: BlockFloatFormat | FloatFormat) -> np.ndarray:
    """Quantization gap per block (block float) or per element (float).

    The exponent is ``clip(floor(log2(max|x|)), exp_lower, exp_upper)``; an
    all-zero block (or a zero element) takes the lowest exponent.
    """
    flat = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    if flat.size == 0:
        raise ValueError("block_gap needs a non-empty input")
    if isinstance(fmt, BlockFloatFormat):
        starts = np.arange(0, flat.size, fmt.block_len)
        peak = np.maximum.reduceat(flat, starts)
        shift = 2 - fmt.word_bits
    elif isinstance(fmt, FloatFormat):
        peak = flat
        shift = -fmt.word_bits
    else:
        raise TypeError(f"block_gap does not apply to {type(fmt).__name__}")
    exp = np.where(peak > 0, _floor_log2(peak), fmt.exp_lower)
    exp = np.clip(exp, fmt.exp_lower, fmt.exp_upper)
    return np.ldexp(1.0, exp + shift)


def _kernel_params(flat: np.ndarray, fmt: NumberFormat):
    """``(params, stride)`` for the kernels: rows gap, lower, upper."""
    if isinstance(fmt, FixedPointFormat):
        return _fixed_params(fmt), 0
    gaps = block_gap(flat, fmt)
    if isinstance(fmt, BlockFloatFormat):
        gaps = np.repeat(gaps, fmt.block_len)[: flat.size]
        half = float(1 << (fmt.word_bits - 1))
        return np.stack((gaps, -half * gaps, (half - 1.0) * gaps)), 1
    top = np.full_like(gaps, fmt.max_value)
    return np.stack((gaps, -top, top)), 1


@functools.lru_cache(maxsize=None)
def _fixed_params(fmt: FixedPointFormat) -> np.ndarray:
    return np.array([[fmt.gap], [fmt.lower], [fmt.upper]])


def _as_flat(x, *, check: bool = False) -> tuple[np.ndarray, tuple[int, ...]]:
    """Contiguous float64 view (or copy) of ``x`` and its shape.

    The rounding kernels detect non-finite values themselves; ``check`` is for
    callers that inspect the values before any kernel runs.
    """
    if type(x) is np.ndarray and x.dtype == np.float64 and x.flags.c_contiguous:
        flat, shape = x.reshape(-1), x.shape
    else:
        arr = np.asarray(x, dtype=np.float64)
        flat, shape = np.ascontiguousarray(arr.ravel()), arr.shape
    if check and not np.isfinite(flat).all():
        _raise_nonfinite()
    return flat, shape


def _raise_nonfinite():
    raise QuantizationDomainError("cannot quantize non-finite values")


def quantize_det(x, fmt: NumberFormat) -> np.ndarray:
    """Round to the nearest grid point, halves away from zero, then clip."""
    flat, shape = _as_flat(x, check=not isinstance(fmt, FixedPointFormat))
    prm, ps = _kernel_params(flat, fmt)
    out = np.empty_like(flat)
    if _kernels.round_nearest(flat, prm, ps, out):
        _raise_nonfinite()
    return out.reshape(shape)


def quantize_stoch(x, fmt: NumberFormat, rng: np.random.Generator) -> np.ndarray:
    """Round down or up with probability given by the distance to each neighbour."""
    flat, shape = _as_flat(x, check=not isinstance(fmt, FixedPointFormat))
    prm, ps = _kernel_params(flat, fmt)
    out = np.empty_like(flat)
    if _kernels.round_stochastic(flat, prm, ps, rng.random(flat.size), out):
        _raise_nonfinite()
    return out.reshape(shape)


def _cat_probabilities(mu, v, gap):
    d2 = 2.0 * gap * gap
    p_plus = (v + mu * mu + mu * gap) / d2
    p_minus = (v + mu * mu - mu * gap) / d2
    return p_plus, p_minus, 1.0 - p_plus - p_minus


def cat_sample(mu, v, gap, rng: np.random.Generator) -> np.ndarray:
    """Draw from the three-point distribution on ``{gap, -gap, 0}`` with mean
    ``mu`` and variance ``v``.

    Requires ``v + mu**2 - mu*gap >= 0`` and ``(v + mu**2) / gap**2 <= 1``
    (always true for ``0 <= mu <= gap/2`` and ``v <= gap**2/4``).
    """
    arrays = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (mu, v, gap)))
    shape = arrays[0].shape
    mu_b, v_b, g_b = (np.ascontiguousarray(a.ravel()) for a in arrays)
    if not (np.isfinite(mu_b).all() and np.isfinite(v_b).all()):
        raise QuantizationDomainError("cat_sample needs finite mean and variance")
    if np.any(g_b <= 0):
        raise QuantizationDomainError("gap must be positive")
    probs = _cat_probabilities(mu_b, v_b, g_b)
    for name, p in zip(("P(+gap)", "P(-gap)", "P(0)"), probs):
        bad = (p < -_kernels.PROB_TOL) | (p > 1.0 + _kernels.PROB_TOL)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise QuantizationDomainError(
                f"{name} = {p[i]!r} outside [0, 1] for mu={mu_b[i]!r}, v={v_b[i]!r}, gap={g_b[i]!r}"
            )
    out = np.empty_like(mu_b)
    _kernels.categorical(mu_b, v_b, 1, g_b, 1, rng.random(mu_b.size), out)
    return out.reshape(shape)


@dataclass
class VcStats:
    """Running counters for the variance-corrected quantizer.

    A fallback is an element where stochastic rounding alone already carries at
    least the requested variance, so the output variance exceeds the target by
    ``excess``.
    """

    calls: int = 0
    elements: int = 0
    noise_elements: int = 0
    fallbacks: int = 0
    excess: float = 0.0

    @property
    def fallback_fraction(self) -> float:
        return self.fallbacks / self.elements if self.elements else 0.0


def _record(stats, n, n_noise, n_fallback, excess):
    if stats is not None:
        stats.calls += 1
        stats.elements += n
        stats.noise_elements += n_noise
        stats.fallbacks += int(n_fallback)
        stats.excess += float(excess)
    if n_fallback and logger.isEnabledFor(logging.DEBUG):
        logger.debug("vc fallback on %d/%d elements, variance excess %.3g", n_fallback, n, excess)


def _check_variance(v: float) -> float:
    v = float(v)
    if not v > 0.0 or not math.isfinite(v):
        raise QuantizationDomainError(f"target variance must be positive and finite, got {v!r}")
    return v


def vc_quantize(
    mu,
    v: float,
    fmt: FixedPointFormat,
    rng: np.random.Generator,
    *,
    noise_rng: np.random.Generator | None = None,
    stats: VcStats | None = None,
) -> np.ndarray:
    """Variance-corrected quantization onto a fixed-point grid.

    Returns grid values with elementwise mean ``mu`` and variance ``v``. When
    ``v`` exceeds ``gap**2/4`` the Gaussian part ``v - gap**2/4`` is added first
    (drawn from ``noise_rng``, default ``rng``) and a three-point correction
    supplies the rest. Otherwise ``mu`` is stochastically rounded and topped up
    to ``v``; if the rounding variance alone is already ``>= v`` the rounded
    value is returned unchanged and the event is counted in ``stats``.
    """
    v = _check_variance(v)
    flat, shape = _as_flat(mu)
    gap = fmt.gap
    v0 = 0.25 * gap * gap
    prm = _fixed_params(fmt)
    out = np.empty_like(flat)
    if v > v0:
        xi = (noise_rng or rng).standard_normal(flat.size)
        x = flat + math.sqrt(v - v0) * xi
        bad = _kernels.vc_noise_branch(x, prm, 0, rng.random(flat.size), out)
        n_fb, excess = 0, 0.0
    else:
        n_fb, excess, bad = _kernels.vc_discrete_branch(
            flat, v, prm, 0, rng.random(flat.size), rng.random(flat.size), out
        )
    if bad:
        _raise_nonfinite()
    _record(stats, flat.size, flat.size if v > v0 else 0, n_fb, excess)
    return out.reshape(shape)


def vc_quantize_bf(
    mu,
    v: float,
    fmt: BlockFloatFormat | FloatFormat,
    rng: np.random.Generator,
    *,
    noise_rng: np.random.Generator | None = None,
    stats: VcStats | None = None,
) -> np.ndarray:
    """Variance-corrected quantization for (block) floating point.

    The gap comes from ``mu`` (per block or per element) and selects the branch.
    On the Gaussian branch the gap is recomputed from the perturbed value before
    rounding and before sizing the three-point correction.
    """
    v = _check_variance(v)
    flat, shape = _as_flat(mu, check=True)
    n = flat.size
    prm_mu, ps = _kernel_params(flat, fmt)
    gap_mu = prm_mu[0]
    v0 = 0.25 * gap_mu * gap_mu
    noisy = v > v0
    n_noisy = int(noisy.sum())
    out = np.empty_like(flat)

    if n_noisy:
        xi = (noise_rng or rng).standard_normal(n)
        x = flat + np.sqrt(np.where(noisy, v - v0, 0.0)) * xi
        prm_x, psx = _kernel_params(x, fmt)
        _kernels.vc_noise_branch(x, prm_x, psx, rng.random(n), out)
    n_fb, excess = 0, 0.0
    if n_noisy < n:
        via_round = np.empty_like(flat)
        n_fb, excess, _ = _kernels.vc_discrete_branch(
            flat, v, prm_mu, ps, rng.random(n), rng.random(n), via_round
        )
        if n_noisy:
            out = np.where(noisy, out, via_round)
            # count only the elements that actually took the rounding branch
            vs = _rounding_variance(flat, gap_mu)
            fb_mask = ~noisy & (v <= vs)
            n_fb, excess = int(fb_mask.sum()), float((vs - v)[fb_mask].sum())
        else:
            out = via_round
    _record(stats, n, n_noisy, n_fb, excess)
    return out.reshape(shape)


def _rounding_variance(x, gap):
    p = x / gap - np.floor(x / gap)
    return gap * gap * p * (1.0 - p)


@dataclass(frozen=True)
class QuantizerSpec:
    """A number format together with a rounding mode.

    ``mode="none"`` is the identity and stands for full precision.
    """

    format: NumberFormat | None = None
    mode: Mode = "none"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown quantizer mode {self.mode!r}; expected one of {MODES}")
        if self.mode != "none" and self.format is None:
            raise ValueError(f"mode {self.mode!r} needs a number format")

    @property
    def active(self) -> bool:
        return self.mode != "none"

    def __call__(self, x, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.mode == "none":
            return x
        if self.mode == "deterministic":
            return quantize_det(x, self.format)
        if rng is None:
            raise ValueError("stochastic rounding needs a random generator")
        return quantize_stoch(x, self.format, rng)

    def describe(self) -> str:
        if self.mode == "none":
            return "float64"
        return f"{self.format.describe()}/{self.mode}"


NO_QUANT = QuantizerSpec()
