import math

import numpy as np
import pytest

from lpsgld.models import GaussianTarget, LogisticRegressionModel
from lpsgld.quant import FixedPointFormat, QuantizerSpec, VcStats
from lpsgld.rng import RngStream
from lpsgld.samplers import (
    ChainConfig,
    ChainDivergence,
    ChainRngs,
    ChainState,
    run_chain,
    step_sgld_fp,
    step_vc_sgldlp_l,
    stepsize_at,
)

FMT = FixedPointFormat(8, 3)
QW = QuantizerSpec(FMT, "stochastic")


class FlatModel:
    """Zero energy everywhere: pure diffusion."""

    n_data = 0
    grad_scale = 1.0

    def __init__(self, dim):
        self.dim = dim

    def stoch_grad(self, theta, batch=None, rng=None):
        return np.zeros_like(theta)

    def initial_theta(self, rng=None):
        return np.zeros(self.dim)


class NanModel(FlatModel):
    def stoch_grad(self, theta, batch=None, rng=None):
        return np.full_like(theta, np.nan)


def logreg(n=30, d=4, classes=3, seed=1):
    rng = np.random.default_rng(seed)
    return LogisticRegressionModel(rng.normal(size=(n, d)), rng.integers(0, classes, n), classes)


def on_grid(x, fmt=FMT):
    scaled = np.asarray(x) / fmt.gap
    return np.array_equal(scaled, np.round(scaled)) and x.min() >= fmt.lower and x.max() <= fmt.upper


# ------------------------------------------------------------ schedules


def test_stepsize_examples():
    assert stepsize_at("constant", 17, 100, 0.3) == 0.3
    assert stepsize_at("cyclical", 0, 100, 0.2, cycles=2) == 0.2
    assert stepsize_at("cyclical", 25, 100, 0.2, cycles=2) == pytest.approx(0.1)
    assert stepsize_at("cyclical", 50, 100, 0.2, cycles=2) == 0.2
    with pytest.raises(ValueError):
        stepsize_at("linear", 0, 10, 0.1)


def test_cyclical_stepsize_stays_in_range():
    values = [stepsize_at("cyclical", k, 97, 1.0, cycles=4) for k in range(97)]
    assert max(values) == 1.0 and min(values) > 0


# --------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kwargs",
    [
        {"stepsize": 0.0},
        {"stepsize": 1.0, "max_stepsize": 0.5},
        {"burn_in": 10},
        {"thin": 0},
        {"accumulator": "low_vc", "langevin": False},
        {"accumulator": "low_naive", "record_accumulator": True},
        {"batch_size": 0},
    ],
)
def test_chain_config_rejects_invalid(kwargs):
    base = {"stepsize": 0.1, "steps": 10}
    base.update(kwargs)
    with pytest.raises(ValueError):
        ChainConfig(**base)


def test_one_sample_when_steps_is_burn_in_plus_one():
    run = run_chain(ChainConfig(stepsize=0.01, steps=6, burn_in=5), GaussianTarget.standard(3))
    assert run.samples.shape == (1, 3)
    assert list(run.steps) == [6]


def test_samples_are_taken_after_the_recorded_steps():
    config = ChainConfig(stepsize=0.01, steps=10, burn_in=2, thin=3, stream=RngStream(4))
    run = run_chain(config, GaussianTarget.standard(2))
    assert list(run.steps) == [5, 8]
    # replaying by hand reproduces the recorded states
    rngs = ChainRngs.from_stream(config.stream)
    state = ChainState(np.zeros(2), np.zeros(2))
    kept = []
    for k in range(10):
        state = step_sgld_fp(state, GaussianTarget.standard(2), None, rngs, 0.01)
        if k + 1 in (5, 8):
            kept.append(state.theta)
    np.testing.assert_array_equal(run.samples, np.array(kept))


# ---------------------------------------------------------- equivalences


@pytest.mark.parametrize("accumulator", ["low_naive", "low_vc"])
def test_unquantized_steppers_reproduce_full_precision_sgld(accumulator):
    model = logreg()
    base = ChainConfig(stepsize=1e-3, steps=200, burn_in=100, thin=10, batch_size=7, stream=RngStream(9, 2))
    reference = run_chain(base, model)
    other = run_chain(ChainConfig(**{**base.__dict__, "accumulator": accumulator}), model)
    np.testing.assert_array_equal(other.samples, reference.samples)


def test_unquantized_sgd_variants_agree():
    model = logreg()
    base = ChainConfig(stepsize=1e-3, steps=50, langevin=False, batch_size=5, stream=RngStream(3))
    full = run_chain(base, model)
    low = run_chain(ChainConfig(**{**base.__dict__, "accumulator": "low_naive"}), model)
    np.testing.assert_array_equal(full.final_state.theta, low.final_state.theta)


def test_runs_are_deterministic_and_seed_dependent():
    model = logreg()
    config = ChainConfig(stepsize=1e-3, steps=100, burn_in=50, thin=5, accumulator="low_vc",
                         weight_quant=QW, grad_quant=QW, batch_size=8, stream=RngStream(11))
    a, b = run_chain(config, model), run_chain(config, model)
    np.testing.assert_array_equal(a.samples, b.samples)
    c = run_chain(ChainConfig(**{**config.__dict__, "stream": RngStream(12)}), model)
    assert not np.array_equal(a.samples, c.samples)


def test_full_and_low_precision_chains_share_langevin_noise():
    # same seed: the accumulator of SGLDLP-F stays within a few gaps of full-precision SGLD
    model = GaussianTarget.standard(50)
    fp = run_chain(ChainConfig(stepsize=1e-2, steps=500, burn_in=499, stream=RngStream(5)), model)
    lp = run_chain(ChainConfig(stepsize=1e-2, steps=500, burn_in=499, weight_quant=QW, grad_quant=QW,
                               record_accumulator=True, stream=RngStream(5)), model)
    assert np.abs(lp.samples - fp.samples).max() < 2 * FMT.gap


# ------------------------------------------------------------ grid and moments


@pytest.mark.parametrize("accumulator", ["full", "low_naive", "low_vc"])
def test_low_precision_weights_stay_on_grid(accumulator):
    config = ChainConfig(stepsize=1e-2, steps=200, thin=10, accumulator=accumulator,
                         weight_quant=QW, grad_quant=QW, stream=RngStream(7))
    run = run_chain(config, GaussianTarget.standard(20))
    assert on_grid(run.samples)


def test_recorded_accumulator_is_off_grid():
    config = ChainConfig(stepsize=1e-2, steps=20, weight_quant=QW, record_accumulator=True)
    run = run_chain(config, GaussianTarget.standard(20))
    assert not on_grid(run.samples[-1])
    assert on_grid(run.final_state.theta)


def test_zero_gradient_chain_diffuses_with_variance_2_alpha_k():
    alpha, steps, dim = 0.01, 10, 200_000
    run = run_chain(ChainConfig(stepsize=alpha, steps=steps, burn_in=steps - 1), FlatModel(dim))
    var = run.samples[0].var()
    # variance of a sample variance of normals: 2 sigma^4 / n
    target = 2 * alpha * steps
    assert abs(var - target) < 5 * target * math.sqrt(2 / dim)


def test_vc_step_has_exact_conditional_moments():
    alpha, dim, theta0 = 0.01, 1_000_000, 0.3
    state = ChainState(np.full(dim, theta0))
    rngs = ChainRngs.from_stream(RngStream(21))
    stats = VcStats()
    out = step_vc_sgldlp_l(state, GaussianTarget.standard(dim), None, rngs, alpha,
                           weight_quant=QuantizerSpec(FMT, "stochastic"),
                           grad_quant=QuantizerSpec(), stats=stats)
    mean, var = out.theta.mean(), out.theta.var()
    assert abs(mean - theta0 * (1 - alpha)) < 5 * math.sqrt(2 * alpha / dim)
    assert abs(var / (2 * alpha) - 1) < 0.01
    assert stats.fallbacks == 0


def test_sgd_decreases_convex_energy_monotonically():
    model = logreg(n=40)
    config = ChainConfig(stepsize=1e-3, steps=100, thin=1, langevin=False, batch_size=40)
    run = run_chain(config, model)
    energies = [model.energy(t) for t in run.samples]
    assert all(b <= a + 1e-12 for a, b in zip(energies, energies[1:]))
    assert energies[-1] < model.energy(np.zeros(model.dim))


# ---------------------------------------------------------------- guards


def test_exploding_chain_aborts():
    with pytest.raises(ChainDivergence) as info:
        run_chain(ChainConfig(stepsize=3.0, steps=100, langevin=False), GaussianTarget(np.ones(2)))
    assert info.value.step < 100


def test_nan_gradients_abort():
    with pytest.raises(ChainDivergence):
        run_chain(ChainConfig(stepsize=0.1, steps=5), NanModel(3))
    with pytest.raises(ChainDivergence):
        run_chain(ChainConfig(stepsize=0.1, steps=5, weight_quant=QW, grad_quant=QW), NanModel(3))


def test_vc_chain_reports_statistics():
    config = ChainConfig(stepsize=1e-3, steps=20, accumulator="low_vc", weight_quant=QW)
    run = run_chain(config, GaussianTarget.standard(10))
    assert isinstance(run.diagnostics["vc"], VcStats)
