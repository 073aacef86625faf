import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpsgld.quant import (
    NO_QUANT,
    BlockFloatFormat,
    FixedPointFormat,
    FloatFormat,
    QuantizationDomainError,
    QuantizerSpec,
    VcStats,
    block_gap,
    cat_sample,
    quantize_det,
    quantize_stoch,
    repr_bounds,
    vc_quantize,
    vc_quantize_bf,
)

SMALL_FORMATS = [FixedPointFormat(w, f) for w in range(1, 7) for f in range(w)]


def exact_nearest(x: Fraction, fmt: FixedPointFormat) -> Fraction:
    """Integer-arithmetic reference for round-to-nearest (ties away from zero)."""
    scale = 1 << fmt.frac_bits
    scaled = abs(x) * scale
    k = math.floor(scaled)
    if scaled - k >= Fraction(1, 2):
        k += 1
    half = 1 << (fmt.word_bits - 1)
    k = k if x >= 0 else -k
    k = min(max(k, -half), half - 1)
    return Fraction(k, scale)


@pytest.mark.parametrize(
    "w, f, expected",
    [(8, 3, (-16.0, 15.875)), (2, 0, (-2.0, 1.0)), (8, 2, (-32.0, 31.75))],
)
def test_repr_bounds(w, f, expected):
    assert repr_bounds(FixedPointFormat(w, f)) == expected


@pytest.mark.parametrize("fmt", SMALL_FORMATS, ids=lambda f: f.describe())
def test_grid_has_2_pow_w_points(fmt):
    grid = fmt.grid()
    assert grid.size == 2**fmt.word_bits
    assert grid[0] == fmt.lower and grid[-1] == fmt.upper
    np.testing.assert_array_equal(np.diff(grid), fmt.gap)


def test_invalid_fixed_format():
    with pytest.raises(ValueError):
        FixedPointFormat(4, 4)
    with pytest.raises(ValueError):
        FixedPointFormat(0, 0)


def test_det_examples():
    fmt = FixedPointFormat(8, 2)
    assert quantize_det(0.3, fmt) == 0.25
    assert quantize_det(0.0, fmt) == 0.0
    assert quantize_det(100.0, fmt) == 31.75
    assert quantize_det(-100.0, fmt) == -32.0
    # exact halves go away from zero
    assert quantize_det(0.125, fmt) == 0.25
    assert quantize_det(-0.125, fmt) == -0.25


@pytest.mark.parametrize("fmt", SMALL_FORMATS, ids=lambda f: f.describe())
def test_det_matches_exact_oracle_exhaustively(fmt):
    # every grid point, every midpoint, quarter points and out-of-range values
    span = Fraction(1 << (fmt.word_bits - fmt.frac_bits))
    step = Fraction(1, 4 << fmt.frac_bits)
    points = []
    x = -span - 3 * step * 4
    while x <= span + 3 * step * 4:
        points.append(x)
        x += step
    got = quantize_det(np.array([float(p) for p in points]), fmt)
    want = np.array([float(exact_nearest(p, fmt)) for p in points])
    np.testing.assert_array_equal(got, want)
    grid = set(fmt.grid().tolist())
    assert set(got.tolist()) <= grid
    np.testing.assert_array_equal(quantize_det(got, fmt), got)


@pytest.mark.parametrize("fmt", SMALL_FORMATS, ids=lambda f: f.describe())
def test_stoch_grid_closure_exhaustive(fmt):
    rng = np.random.default_rng(7)
    x = rng.uniform(fmt.lower - 1, fmt.upper + 1, size=4000)
    out = quantize_stoch(x, fmt, rng)
    assert set(out.tolist()) <= set(fmt.grid().tolist())
    # never farther than one gap from the clipped input
    assert np.all(np.abs(out - np.clip(x, fmt.lower, fmt.upper)) < fmt.gap)


def test_stoch_probabilities_at_0_3():
    fmt = FixedPointFormat(8, 2)
    n = 10**6
    out = quantize_stoch(np.full(n, 0.3), fmt, np.random.default_rng(1))
    assert set(np.unique(out).tolist()) == {0.25, 0.5}
    frac_low = np.mean(out == 0.25)
    assert abs(frac_low - 0.8) < 4 * math.sqrt(0.8 * 0.2 / n)
    assert abs(out.mean() - 0.3) < 4e-4


def test_stoch_on_grid_is_identity():
    fmt = FixedPointFormat(8, 3)
    grid = fmt.grid()
    out = quantize_stoch(np.tile(grid, 50), fmt, np.random.default_rng(2))
    np.testing.assert_array_equal(out, np.tile(grid, 50))


@pytest.mark.parametrize("frac", [0.1, 0.25, 0.5, 0.9])
def test_stoch_variance_is_gap_sq_p_one_minus_p(frac):
    fmt = FixedPointFormat(8, 3)
    x = 1.0 + frac * fmt.gap
    n = 400_000
    out = quantize_stoch(np.full(n, x), fmt, np.random.default_rng(3))
    want = fmt.gap**2 * frac * (1 - frac)
    # variance of a two-point variable: relative s.e. ~ sqrt((1-4pq)/(n pq)) < 1%
    assert abs(out.var() / want - 1) < 0.02


@settings(max_examples=60, deadline=None)
@given(
    x=st.floats(min_value=-15.5, max_value=15.5, allow_nan=False),
    seed=st.integers(0, 2**32),
)
def test_stoch_unbiased_inside_range(x, seed):
    fmt = FixedPointFormat(8, 3)
    n = 20_000
    out = quantize_stoch(np.full(n, x), fmt, np.random.default_rng(seed))
    # the 0.99-probability bound 4*gap/(2 sqrt n) is loose for a bounded variable
    assert abs(out.mean() - x) <= 4 * fmt.gap / (2 * math.sqrt(n))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-40, 40, allow_nan=False), min_size=1, max_size=20))
def test_det_idempotent_property(values):
    fmt = FixedPointFormat(8, 2)
    once = quantize_det(values, fmt)
    np.testing.assert_array_equal(quantize_det(once, fmt), once)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(bad):
    fmt = FixedPointFormat(8, 3)
    with pytest.raises(QuantizationDomainError):
        quantize_det([0.0, bad], fmt)
    with pytest.raises(QuantizationDomainError):
        quantize_stoch([bad], fmt, np.random.default_rng(0))


def test_stochastic_is_pure_function_of_seed():
    fmt = FixedPointFormat(8, 3)
    x = np.linspace(-3, 3, 1001)
    a = quantize_stoch(x, fmt, np.random.default_rng(11))
    b = quantize_stoch(x, fmt, np.random.default_rng(11))
    np.testing.assert_array_equal(a, b)


def test_block_gap_examples():
    fmt = BlockFloatFormat(word_bits=8, exp_bits=8, block_len=4)
    assert block_gap([3.0, -1.0, 0.5], fmt)[0] == 2.0**-5
    assert block_gap([1.0, 0.25], fmt)[0] == 2.0**-6
    assert block_gap(np.zeros(3), fmt)[0] == 2.0 ** (-128 - 8 + 2)
    # ragged last block gets its own exponent
    np.testing.assert_array_equal(
        block_gap([3.0, 0, 0, 0, 0.7, 0.1], fmt), [2.0**-5, 2.0**-7]
    )


def test_float_gap_per_element():
    fmt = FloatFormat(word_bits=3, exp_bits=4)
    np.testing.assert_array_equal(
        block_gap([1.0, 3.0, 0.3, 0.0], fmt),
        [2.0**-3, 2.0**-2, 2.0**-5, 2.0 ** (-8 - 3)],
    )
    # exponent saturates at the top of its range
    assert block_gap([1e6], fmt)[0] == 2.0 ** (7 - 3)


def test_block_float_quantizers_stay_on_block_grid():
    fmt = BlockFloatFormat(word_bits=6, exp_bits=6, block_len=8)
    rng = np.random.default_rng(4)
    x = rng.normal(scale=[[0.01], [1.0], [40.0]], size=(3, 8))
    gaps = np.repeat(block_gap(x, fmt), 8).reshape(3, 8)
    for out in (quantize_det(x, fmt), quantize_stoch(x, fmt, rng)):
        codes = out / gaps
        np.testing.assert_array_equal(codes, np.round(codes))
        assert np.all(np.abs(codes) <= 2 ** (fmt.word_bits - 1))
    np.testing.assert_array_equal(quantize_det(quantize_det(x, fmt), fmt), quantize_det(x, fmt))


def test_float_quantizer_relative_error():
    fmt = FloatFormat(word_bits=5, exp_bits=8)
    x = np.random.default_rng(5).lognormal(0, 3, size=1000)
    out = quantize_det(x, fmt)
    assert np.all(np.abs(out - x) <= 2.0**-6 * x + 1e-300)


def test_quantizer_spec_none_is_identity():
    x = np.array([0.123456789, -7.3])
    assert QuantizerSpec(FixedPointFormat(8, 3), "none")(x) is x
    assert NO_QUANT(x) is x
    with pytest.raises(ValueError):
        QuantizerSpec(None, "stochastic")
    with pytest.raises(ValueError):
        QuantizerSpec(FixedPointFormat(8, 3), "nearest")


# ---------------------------------------------------------------- three-point

GAP = 0.125


@pytest.mark.parametrize(
    "mu, v, p_plus, p_minus",
    [
        (0.0, GAP**2 / 4, 1 / 8, 1 / 8),
        (GAP / 2, GAP**2 / 4, 1 / 2, 0.0),
        (0.0, 0.0, 0.0, 0.0),
    ],
)
def test_cat_sample_frequencies(mu, v, p_plus, p_minus):
    n = 400_000
    out = cat_sample(np.full(n, mu), v, GAP, np.random.default_rng(6))
    assert set(np.unique(out).tolist()) <= {GAP, -GAP, 0.0}
    for value, p in ((GAP, p_plus), (-GAP, p_minus)):
        tol = 4 * math.sqrt(max(p * (1 - p), 1e-12) / n)
        assert abs(np.mean(out == value) - p) <= tol


def test_cat_sample_precondition_errors():
    with pytest.raises(QuantizationDomainError, match="P\\(-gap\\)"):
        cat_sample([0.1], 0.0, GAP, np.random.default_rng(0))
    with pytest.raises(QuantizationDomainError, match="P\\(0\\)"):
        cat_sample([0.0], GAP**2 * 1.5, GAP, np.random.default_rng(0))


def test_cat_sample_roundoff_is_clamped():
    # mu = gap/2 and v = gap^2/4 make P(-gap) exactly zero up to roundoff
    mu = np.full(1000, GAP / 2 * (1 + 1e-15))
    out = cat_sample(mu, GAP**2 / 4, GAP, np.random.default_rng(0))
    assert not np.any(out == -GAP)


# ---------------------------------------------------------- variance-corrected

def _moments(draws):
    return draws.mean(axis=0), draws.var(axis=0)


def test_vc_noise_branch_moments():
    fmt = FixedPointFormat(8, 3)
    n = 10**6
    out = vc_quantize(np.full(n, 0.3), 0.01, fmt, np.random.default_rng(8))
    assert abs(out.mean() - 0.3) < 1e-3
    assert abs(out.var() / 0.01 - 1) < 0.02
    assert set(np.unique(out).tolist()) <= set(fmt.grid().tolist())


def test_vc_discrete_branch_moments_when_topped_up():
    fmt = FixedPointFormat(8, 3)
    # mu two percent of a gap above a grid point: rounding variance < v
    mu = 0.25 + 0.02 * fmt.gap
    stats = VcStats()
    out = vc_quantize(np.full(10**6, mu), 0.002, fmt, np.random.default_rng(9), stats=stats)
    assert stats.fallbacks == 0
    assert abs(out.mean() - mu) < 1e-3
    assert abs(out.var() / 0.002 - 1) < 0.02


def test_vc_discrete_branch_fallback_is_counted():
    fmt = FixedPointFormat(8, 3)
    stats = VcStats()
    out = vc_quantize(np.full(1000, 0.3), 0.002, fmt, np.random.default_rng(9), stats=stats)
    assert stats.fallbacks == 1000
    assert stats.excess == pytest.approx(1000 * (fmt.gap**2 * 0.4 * 0.6 - 0.002))
    assert set(np.unique(out).tolist()) <= {0.25, 0.375}


def test_vc_on_grid_mean_exact():
    fmt = FixedPointFormat(8, 3)
    mu = np.full(200_000, 1.5)
    out = vc_quantize(mu, 0.01, fmt, np.random.default_rng(10))
    assert set(np.unique(out).tolist()) <= set(fmt.grid().tolist())
    assert abs(out.mean() - 1.5) < 4 * math.sqrt(0.01 / mu.size)


def test_vc_rejects_non_positive_variance():
    fmt = FixedPointFormat(8, 3)
    for v in (0.0, -1.0, float("nan")):
        with pytest.raises(QuantizationDomainError):
            vc_quantize([0.1], v, fmt, np.random.default_rng(0))


def test_vc_clips_to_range():
    fmt = FixedPointFormat(4, 1)
    out = vc_quantize(np.full(10000, 3.4), 0.5, fmt, np.random.default_rng(0))
    assert out.max() <= fmt.upper and out.min() >= fmt.lower


def test_vc_bf_matches_fixed_gap_when_exponent_is_stable():
    # one block whose exponent cannot change under the perturbation
    fmt = BlockFloatFormat(word_bits=8, exp_bits=8, block_len=4)
    mu = np.array([3.0, 2.5, -1.0, 0.3])
    gap = block_gap(mu, fmt)[0]
    fixed_equiv = FixedPointFormat(word_bits=8, frac_bits=5)  # gap 2**-5, range [-4, 4)
    assert fixed_equiv.gap == gap
    for v in (1e-4, 0.01):
        a = vc_quantize_bf(np.tile(mu, 500), v, fmt, np.random.default_rng(3))
        b = vc_quantize(np.tile(mu, 500), v, fixed_equiv, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


def test_vc_bf_moments_block_max_three():
    fmt = BlockFloatFormat(word_bits=8, exp_bits=8, block_len=8)
    mu = np.array([3.0, -2.2, 1.3, 0.7, 0.05, -0.3, 2.9, 0.0])
    reps = 125_000
    draws = vc_quantize_bf(np.tile(mu, reps), 0.01, fmt, np.random.default_rng(12)).reshape(reps, 8)
    mean, var = _moments(draws)
    np.testing.assert_allclose(mean, mu, atol=1e-3)
    np.testing.assert_allclose(var, 0.01, rtol=0.03)


def test_vc_bf_all_zero_block():
    fmt = BlockFloatFormat(word_bits=8, exp_bits=8, block_len=16)
    out = vc_quantize_bf(np.zeros(16 * 20_000), 0.01, fmt, np.random.default_rng(13))
    assert abs(out.mean()) < 4 * math.sqrt(0.01 / out.size)
    assert abs(out.var() / 0.01 - 1) < 0.05


def test_vc_float_moments():
    fmt = FloatFormat(word_bits=4, exp_bits=6)
    mu = np.array([0.3, 1.7, -0.9])
    reps = 200_000
    draws = vc_quantize_bf(np.tile(mu, reps), 0.002, fmt, np.random.default_rng(14)).reshape(reps, 3)
    mean, var = _moments(draws)
    np.testing.assert_allclose(mean, mu, atol=1e-3)


def test_vc_deterministic_given_generators():
    fmt = FixedPointFormat(8, 3)
    mu = np.linspace(-2, 2, 333)
    for v in (0.01, 0.002):
        a = vc_quantize(mu, v, fmt, np.random.default_rng(5))
        b = vc_quantize(mu, v, fmt, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)
